//! The robust pipeline: outcome model, energy score and engression,
//! worst-case generators, and Monte-Carlo robust prediction.

mod energy;
mod generator;
mod outcome;
mod pipeline;
mod predictor;
mod worstcase;

pub use energy::{
    conditional_moments, energy_score, energy_with_noise, fit_source_engression, source_energy, EngressionHp,
};
pub use generator::{Generator, GeneratorKind};
pub use outcome::{fit_outcome_model, OutcomeHp, OutcomeModel};
pub use pipeline::{fit_drum, fit_drum_with_outcome, DrumFit, DrumHp};
pub use predictor::{robust_value, RobustPredictor};
pub use worstcase::{
    fit_worstcase_constrained, fit_worstcase_unconstrained, train_generator, train_on_objective, ConstrainedFit,
    ConstrainedHp, Correction, DualStep, EnergyBudget, EnergyPenalty, Schedule, UnconstrainedFit, WorstCaseHp,
};
