use serde::{Deserialize, Serialize};

use super::energy::{fit_source_engression, EngressionHp};
use super::generator::GeneratorKind;
use super::outcome::{fit_outcome_model, OutcomeHp, OutcomeModel};
use super::predictor::RobustPredictor;
use super::worstcase::{
    fit_worstcase_constrained, fit_worstcase_unconstrained, ConstrainedHp, DualStep, EnergyBudget, WorstCaseHp,
};
use crate::data::{LabeledSet, Task, UnlabeledSet};
use crate::error::{Result, StageExt};
use crate::rng::derive_seed;

/// Hyperparameters of the whole plug-in pipeline.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DrumHp {
    pub outcome: OutcomeHp,
    pub worstcase: WorstCaseHp,
    pub engression: EngressionHp,
    pub constrained: ConstrainedHp,
    /// Monte-Carlo draws per prediction; defaults to the training `L`.
    pub prediction_mc: Option<usize>,
}

/// A fitted plug-in pipeline with its training diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrumFit {
    pub predictor: RobustPredictor,
    /// Present for the energy-constrained (conditional) variant.
    pub budget: Option<EnergyBudget>,
    pub final_gap: Option<f64>,
    pub lambda_capped: bool,
    pub generator_trajectory: Vec<f64>,
    pub dual_trajectory: Vec<DualStep>,
}

impl DrumFit {
    pub fn outcome(&self) -> &OutcomeModel {
        &self.predictor.outcome
    }
}

/// Fits the outcome model, then the worst-case generator of the requested
/// kind: `Unconstrained` trains `g(ε)` directly, `Conditional` runs
/// engression on the source and the energy-constrained primal–dual fit.
pub fn fit_drum(
    source: &LabeledSet,
    target: &UnlabeledSet,
    task: Task,
    kind: GeneratorKind,
    hp: &DrumHp,
    seed: u64,
) -> Result<DrumFit> {
    let outcome =
        fit_outcome_model(source, task, &hp.outcome, derive_seed(seed, "drum.outcome", 0)).stage("outcome model")?;
    fit_drum_with_outcome(outcome, source, target, kind, hp, seed)
}

/// [`fit_drum`] from an already fitted outcome model.
pub fn fit_drum_with_outcome(
    outcome: OutcomeModel,
    source: &LabeledSet,
    target: &UnlabeledSet,
    kind: GeneratorKind,
    hp: &DrumHp,
    seed: u64,
) -> Result<DrumFit> {
    let pred_seed = derive_seed(seed, "drum.predict", 0);
    match kind {
        GeneratorKind::Unconstrained => {
            let fit =
                fit_worstcase_unconstrained(&outcome, target, &hp.worstcase, derive_seed(seed, "drum.worstcase", 0))
                    .stage("worst-case generator")?;
            let l = hp.prediction_mc.unwrap_or(hp.worstcase.mc_samples);
            Ok(DrumFit {
                predictor: RobustPredictor::new(outcome, fit.generator, l, pred_seed)?,
                budget: None,
                final_gap: None,
                lambda_capped: false,
                generator_trajectory: fit.trajectory,
                dual_trajectory: Vec::new(),
            })
        }
        GeneratorKind::Conditional => {
            let (g_source, baseline) =
                fit_source_engression(source, &hp.engression, derive_seed(seed, "drum.engression", 0))
                    .stage("source engression")?;
            let budget = EnergyBudget::new(baseline, hp.constrained.delta)?;
            let fit = fit_worstcase_constrained(
                &outcome,
                source,
                target,
                &g_source,
                &budget,
                &hp.constrained,
                derive_seed(seed, "drum.constrained", 0),
            )
            .stage("constrained generator")?;
            let l = hp.prediction_mc.unwrap_or(hp.constrained.mc_samples);
            Ok(DrumFit {
                predictor: RobustPredictor::new(outcome, fit.generator, l, pred_seed)?,
                budget: Some(fit.budget),
                final_gap: Some(fit.final_gap),
                lambda_capped: fit.lambda_capped,
                generator_trajectory: fit.trajectory.iter().map(|s| s.objective).collect(),
                dual_trajectory: fit.trajectory,
            })
        }
    }
}
