//! Cross-fitted, Neyman-orthogonal bias correction of the robust predictor.
//!
//! With `K` source folds `I_k` and target folds `J_k` (indices mod `K`):
//!
//! 1. `f̂⁽ᵏ⁾` is trained on `I_k`; residuals `R̂ = Y − f̂⁽ᵏ⁾` are taken on `I_{k+1}`.
//! 2. A classifier `p̂⁽ᵏ⁾` separates `I_k` from `J_k` paired with draws of the
//!    preliminary generator; `ω̂ = (1 − p̂)/p̂` is clipped and normalized to
//!    unit mean over `I_{k+1}`.
//! 3. `ĝ⁽ᵏ⁾` is refit on `(I_k, J_k)` with `f̂⁽ᵏ⁻¹⁾` and the bias-corrected
//!    objective, and predicts `F̂_j` on `J_{k+1}`.
//! 4. Pseudo-outcomes `ω̂ R̂` (source) and `(n/N) F̂` (target) are regressed on `X`.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{concat_cols, LabeledSet, Task, UnlabeledSet};
use crate::drum::{
    fit_drum_with_outcome, fit_outcome_model, train_generator, Correction, DrumFit, DrumHp, EnergyPenalty, Generator,
    GeneratorKind, OutcomeHp, OutcomeModel, RobustPredictor, Schedule,
};
use crate::error::{Error, Result, StageExt};
use crate::nnet::{self, column, Activation, DenseNet, Objective, TrainConfig};
use crate::rng::{self, derive_seed};

/// Disjoint, exhaustive, balanced partitions of both populations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub source_folds: Vec<Vec<usize>>,
    pub target_folds: Vec<Vec<usize>>,
    pub seed: u64,
}

/// Uniformly random partition: position `p` of a seeded permutation goes
/// to fold `p mod K`, so fold sizes differ by at most one.
pub fn make_folds(n: usize, n_target: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k == 0 || k > n.min(n_target) {
        return Err(Error::Config(format!(
            "cannot split {n} source and {n_target} target rows into {k} folds"
        )));
    }
    let split = |len: usize, tag: &str| {
        let perm = rng::permutation(&mut rng::stream(seed, tag, 0), len);
        let mut folds = vec![Vec::with_capacity(len / k + 1); k];
        for (p, i) in perm.into_iter().enumerate() {
            folds[p % k].push(i);
        }
        for f in folds.iter_mut() {
            f.sort_unstable();
        }
        folds
    };
    Ok(FoldPlan {
        k,
        source_folds: split(n, "folds.source"),
        target_folds: split(n_target, "folds.target"),
        seed,
    })
}

impl FoldPlan {
    /// Fold index `k` taken mod `K` (accepts `k − 1` as `k + K − 1`).
    pub fn wrap(&self, k: usize) -> usize {
        k % self.k
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RatioHp {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    /// `M_ω`: upper bound of an emitted weight.
    pub clip_bound: f64,
}

impl Default for RatioHp {
    fn default() -> Self {
        RatioHp {
            hidden: vec![64, 64],
            train: TrainConfig::new(1e-5, 200),
            clip_bound: 20.0,
        }
    }
}

/// Probabilistic classifier of source (`S = 1`) against generator-paired
/// target (`S = 0`) rows of `[X | A]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityRatioModel {
    pub classifier: DenseNet,
    pub clip_bound: f64,
    pub fold: usize,
}

/// Classifier outputs within this distance of 0 or 1 count as saturated.
const SATURATION: f64 = 1e-12;

impl DensityRatioModel {
    /// `min((1 − p̂)/p̂, M_ω)` per row, before normalization.
    pub fn raw_weights(&self, xa: ArrayView2<f64>) -> Result<Array1<f64>> {
        let p = self.classifier.forward(xa)?;
        Ok(p.column(0)
            .mapv(|p| ((1.0 - p) / p.max(SATURATION)).min(self.clip_bound)))
    }

    /// Clipped weights normalized to unit mean over `xa`, the evaluation fold.
    pub fn weights(&self, xa: ArrayView2<f64>) -> Result<Array1<f64>> {
        normalize_clipped(self.raw_weights(xa)?.as_slice().expect("contiguous"), self.clip_bound)
    }
}

/// Rescales non-negative weights to unit mean while keeping every weight at
/// most `bound`: finds `c` with `mean(min(c·w, bound)) = 1`, so clipping and
/// normalization hold simultaneously.
pub fn normalize_clipped(w: &[f64], bound: f64) -> Result<Array1<f64>> {
    if w.is_empty() {
        return Err(Error::Input("no weights to normalize".into()));
    }
    if !(bound >= 1.0) {
        return Err(Error::Config(format!("weight bound {bound} cannot reach unit mean")));
    }
    if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Input("weights must be finite and non-negative".into()));
    }
    let n = w.len() as f64;
    let sum: f64 = w.iter().sum();
    if sum <= 0.0 {
        return Err(Error::DegenerateClassifier("all density-ratio weights are zero".into()));
    }
    let mean_at = |c: f64| w.iter().map(|v| (c * v).min(bound)).sum::<f64>() / n;
    let (mut lo, mut hi) = (0.0, n / sum);
    while mean_at(hi) < 1.0 {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid) < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut out: Vec<f64> = w.iter().map(|v| (hi * v).min(bound)).collect();
    // Put the bisection residue on the unclipped weights.
    let clipped = out.iter().filter(|v| **v >= bound).count() as f64;
    let free: f64 = out.iter().filter(|v| **v < bound).sum();
    if free > 0.0 {
        let s = (n - bound * clipped) / free;
        for v in out.iter_mut().filter(|v| **v < bound) {
            *v *= s;
        }
    }
    Ok(Array1::from(out))
}

/// Trains the domain classifier with bce on `S ∈ {1 source, 0 synthetic}`.
pub fn fit_density_ratio(
    source_xa: ArrayView2<f64>,
    synthetic_xa: ArrayView2<f64>,
    hp: &RatioHp,
    fold: usize,
    seed: u64,
) -> Result<DensityRatioModel> {
    if source_xa.nrows() == 0 || synthetic_xa.nrows() == 0 {
        return Err(Error::Input("density-ratio folds must be non-empty".into()));
    }
    if source_xa.ncols() != synthetic_xa.ncols() {
        return Err(Error::Input("source and synthetic rows differ in width".into()));
    }
    let x = ndarray::concatenate(Axis(0), &[source_xa.reborrow(), synthetic_xa.reborrow()]).expect("equal widths");
    let labels: Vec<f64> = (0..x.nrows())
        .map(|i| if i < source_xa.nrows() { 1.0 } else { 0.0 })
        .collect();
    let mut net = DenseNet::mlp(x.ncols(), &hp.hidden, 1, Activation::Sigmoid, seed)?;
    nnet::fit(
        &mut net,
        x.view(),
        column(&labels).view(),
        Objective::Bce,
        &hp.train,
        seed,
        "ratio.batches",
    )?;
    let p = net.forward(x.view())?;
    if p.iter().all(|&v| v <= SATURATION) || p.iter().all(|&v| v >= 1.0 - SATURATION) {
        return Err(Error::DegenerateClassifier(format!(
            "fold {fold}: every classifier output sits at a probability bound"
        )));
    }
    Ok(DensityRatioModel {
        classifier: net,
        clip_bound: hp.clip_bound,
        fold,
    })
}

/// Generator refit schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefitHp {
    pub lr: f64,
    pub clip: Option<f64>,
    pub schedule: Schedule,
}

impl RefitHp {
    fn train_config(&self) -> TrainConfig {
        let mut cfg = TrainConfig::new(self.lr, 0);
        cfg.clip = self.clip;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinalHp {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for FinalHp {
    fn default() -> Self {
        FinalHp {
            hidden: vec![128, 128],
            train: TrainConfig::new(1e-5, 300),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DebiasHp {
    pub folds: usize,
    pub outcome: OutcomeHp,
    pub ratio: RatioHp,
    /// Refit of `g(ε)`, started from the preliminary generator.
    pub unconstrained: RefitHp,
    /// Refit of `g(x, ε)` under the preliminary fit's final multiplier.
    pub conditional: RefitHp,
    pub mc_samples: usize,
    pub final_model: FinalHp,
}

impl Default for DebiasHp {
    fn default() -> Self {
        DebiasHp {
            folds: 3,
            outcome: OutcomeHp::default(),
            ratio: RatioHp::default(),
            unconstrained: RefitHp {
                lr: 1e-5,
                clip: None,
                schedule: Schedule::Epochs(300),
            },
            conditional: RefitHp {
                lr: 2e-4,
                clip: Some(2.0),
                schedule: Schedule::Steps(80),
            },
            mc_samples: 256,
            final_model: FinalHp::default(),
        }
    }
}

/// Refits a generator on the bias-corrected objective
/// `(1/|J|) Σ_j m̄_j² + (2/|I|) Σ_i ω̂_i μ̂(X_i) R̂_i`, optionally under a fixed
/// energy penalty. Starts from `init`.
#[allow(clippy::too_many_arguments)]
pub fn debiased_generator_fit(
    f: &OutcomeModel,
    init: &Generator,
    source_x: ArrayView2<f64>,
    residuals: &[f64],
    weights: &[f64],
    target_x: ArrayView2<f64>,
    penalty: Option<EnergyPenalty>,
    mc_samples: usize,
    hp: &RefitHp,
    seed: u64,
) -> Result<(Generator, Vec<f64>)> {
    if residuals.len() != source_x.nrows() || weights.len() != source_x.nrows() {
        return Err(Error::Integrity(
            "residuals, weights and source rows are misaligned".into(),
        ));
    }
    let coef: Vec<f64> = weights.iter().zip(residuals).map(|(w, r)| w * r).collect();
    let mut g = init.clone();
    let correction = Correction {
        x: source_x.reborrow(),
        coef: &coef,
    };
    let history = train_generator(
        f,
        &mut g,
        target_x,
        Some(correction),
        penalty,
        mc_samples,
        &hp.train_config(),
        hp.schedule,
        seed,
        "debias.generator",
    )?;
    Ok((g, history))
}

/// Plug-in and correction parts of the bias-corrected objective for a fixed
/// panel of generated `A` values shared by all rows (an unconstrained
/// generator), with an arbitrary outcome function `f(x, a)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveParts {
    /// `(1/N) Σ_j μ(X_j)²` over target rows.
    pub plug_in: f64,
    /// `(2/n) Σ_i ω_i μ(X_i) R_i` over source rows.
    pub correction: f64,
}

impl ObjectiveParts {
    pub fn total(&self) -> f64 {
        self.plug_in + self.correction
    }
}

pub fn objective_parts<F>(
    f: F,
    a_panel: ArrayView2<f64>,
    target_x: ArrayView2<f64>,
    source_x: ArrayView2<f64>,
    residuals: &[f64],
    weights: &[f64],
) -> Result<ObjectiveParts>
where
    F: Fn(ArrayView2<f64>, ArrayView2<f64>) -> Array1<f64>,
{
    if residuals.len() != source_x.nrows() || weights.len() != source_x.nrows() {
        return Err(Error::Integrity(
            "residuals, weights and source rows are misaligned".into(),
        ));
    }
    if a_panel.nrows() == 0 || target_x.nrows() == 0 {
        return Err(Error::Input("empty panel or target set".into()));
    }
    let mu = |x: ArrayView2<f64>| -> Vec<f64> {
        let l = a_panel.nrows();
        x.outer_iter()
            .map(|row| {
                let xr = row.broadcast((l, row.len())).expect("row broadcast");
                f(xr, a_panel).sum() / l as f64
            })
            .collect()
    };
    let mt = mu(target_x);
    let plug_in = mt.iter().map(|m| m * m).sum::<f64>() / mt.len() as f64;
    let correction = if source_x.nrows() == 0 {
        0.0
    } else {
        let ms = mu(source_x);
        2.0 * ms
            .iter()
            .zip(weights)
            .zip(residuals)
            .map(|((m, w), r)| m * w * r)
            .sum::<f64>()
            / ms.len() as f64
    };
    Ok(ObjectiveParts { plug_in, correction })
}

/// A nuisance model's training and evaluation rows, for the out-of-fold audit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NuisanceRecord {
    pub name: String,
    pub fold: usize,
    pub train_source: Vec<usize>,
    pub train_target: Vec<usize>,
    pub eval_source: Vec<usize>,
    pub eval_target: Vec<usize>,
}

impl NuisanceRecord {
    fn overlaps(&self) -> bool {
        let disjoint = |a: &[usize], b: &[usize]| {
            let set: BTreeSet<_> = a.iter().collect();
            b.iter().all(|i| !set.contains(i))
        };
        !(disjoint(&self.train_source, &self.eval_source) && disjoint(&self.train_target, &self.eval_target))
    }
}

/// Every cross-fitted nuisance plus the per-row quantities built from them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nuisances {
    pub plan: FoldPlan,
    /// `outcomes[k]` is trained on `I_k`.
    pub outcomes: Vec<OutcomeModel>,
    /// `ratios[k]` is trained on `I_k` against `J_k`.
    pub ratios: Vec<DensityRatioModel>,
    /// `generators[k]` is refit on `(I_k, J_k)` with `outcomes[k − 1]`.
    pub generators: Vec<Generator>,
    /// `R̂_i` for every source row, from the model of the preceding fold.
    pub residuals: Vec<f64>,
    /// Normalized `ω̂_i` for every source row.
    pub weights: Vec<f64>,
    pub records: Vec<NuisanceRecord>,
}

impl Nuisances {
    /// Fails if any nuisance was evaluated on rows it was trained on.
    pub fn audit(&self) -> Result<()> {
        match self.records.iter().find(|r| r.overlaps()) {
            Some(r) => Err(Error::Integrity(format!(
                "{} of fold {} is evaluated on its own training rows",
                r.name, r.fold
            ))),
            None => Ok(()),
        }
    }
}

/// What the debiasing stage takes from the plug-in pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct Preliminary<'a> {
    pub generator: &'a Generator,
    /// Final multiplier of the constrained fit; applied as a fixed penalty
    /// during conditional refits and never updated here.
    pub dual_lambda: Option<f64>,
}

impl<'a> Preliminary<'a> {
    pub fn from_fit(fit: &'a DrumFit) -> Self {
        Preliminary {
            generator: &fit.predictor.generator,
            dual_lambda: fit.budget.as_ref().map(|b| b.dual_lambda),
        }
    }
}

/// Stages 1–3: folds, outcome models, residuals, ratios and generator refits.
pub fn cross_fit(
    source: &LabeledSet,
    target: &UnlabeledSet,
    task: Task,
    prelim: &Preliminary,
    hp: &DebiasHp,
    seed: u64,
) -> Result<Nuisances> {
    let plan = make_folds(
        source.len(),
        target.len(),
        hp.folds,
        derive_seed(seed, "debias.folds", 0),
    )?;
    let kk = plan.k;
    let g0 = prelim.generator;
    let mut residuals = vec![f64::NAN; source.len()];
    let mut weights = vec![f64::NAN; source.len()];
    let mut outcomes = Vec::with_capacity(kk);
    let mut ratios = Vec::with_capacity(kk);
    let mut records = Vec::new();

    for k in 0..kk {
        let (ik, jk) = (&plan.source_folds[k], &plan.target_folds[k]);
        let next = &plan.source_folds[plan.wrap(k + 1)];
        let train = source.subset(ik);
        let f = fit_outcome_model(&train, task, &hp.outcome, derive_seed(seed, "debias.outcome", k as u64))
            .stage(&format!("fold {k} outcome model"))?;
        let eval = source.subset(next);
        for (&i, r) in next.iter().zip(f.residuals(&eval)?.iter()) {
            residuals[i] = *r;
        }
        records.push(NuisanceRecord {
            name: "outcome model".into(),
            fold: k,
            train_source: ik.clone(),
            train_target: Vec::new(),
            eval_source: next.clone(),
            eval_target: Vec::new(),
        });

        let tx = target.x.select(Axis(0), jk);
        let mut eps_rng = rng::stream(seed, "debias.synthetic", k as u64);
        let eps = rng::normal_matrix(&mut eps_rng, jk.len(), g0.latent_dim);
        let synth_a = g0.sample(Some(tx.view()), eps.view())?;
        let ratio = fit_density_ratio(
            train.xa().view(),
            concat_cols(tx.view(), synth_a.view()).view(),
            &hp.ratio,
            k,
            derive_seed(seed, "debias.ratio", k as u64),
        )
        .stage(&format!("fold {k} density ratio"))?;
        for (&i, w) in next.iter().zip(ratio.weights(eval.xa().view())?.iter()) {
            weights[i] = *w;
        }
        records.push(NuisanceRecord {
            name: "density ratio".into(),
            fold: k,
            train_source: ik.clone(),
            train_target: jk.clone(),
            eval_source: next.clone(),
            eval_target: Vec::new(),
        });
        outcomes.push(f);
        ratios.push(ratio);
    }
    if residuals.iter().chain(&weights).any(|v| v.is_nan()) {
        return Err(Error::Integrity(
            "fold rotation left source rows without nuisances".into(),
        ));
    }

    let mut generators = Vec::with_capacity(kk);
    for k in 0..kk {
        let (ik, jk) = (&plan.source_folds[k], &plan.target_folds[k]);
        let f_prev = &outcomes[plan.wrap(k + kk - 1)];
        let sx = source.x.select(Axis(0), ik);
        let r: Vec<f64> = ik.iter().map(|&i| residuals[i]).collect();
        let w: Vec<f64> = ik.iter().map(|&i| weights[i]).collect();
        let tx = target.x.select(Axis(0), jk);
        let (refit, penalty_src) = match g0.kind {
            GeneratorKind::Unconstrained => (&hp.unconstrained, None),
            GeneratorKind::Conditional => (&hp.conditional, Some(source.subset(ik))),
        };
        let penalty = match (&penalty_src, prelim.dual_lambda) {
            (Some(s), Some(lambda)) if lambda > 0.0 => Some(EnergyPenalty {
                x: s.x.view(),
                a: s.a.view(),
                lambda,
            }),
            _ => None,
        };
        let (g, _) = debiased_generator_fit(
            f_prev,
            g0,
            sx.view(),
            &r,
            &w,
            tx.view(),
            penalty,
            hp.mc_samples,
            refit,
            derive_seed(seed, "debias.generator", k as u64),
        )
        .stage(&format!("fold {k} debiased generator"))?;
        records.push(NuisanceRecord {
            name: "debiased generator".into(),
            fold: k,
            train_source: ik.clone(),
            train_target: jk.clone(),
            eval_source: Vec::new(),
            eval_target: plan.target_folds[plan.wrap(k + 1)].clone(),
        });
        generators.push(g);
    }
    let nuisances = Nuisances {
        plan,
        outcomes,
        ratios,
        generators,
        residuals,
        weights,
        records,
    };
    nuisances.audit()?;
    Ok(nuisances)
}

/// Pooled regression data of the final stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoOutcomeSet {
    /// Source rows first, then target rows.
    pub x: Array2<f64>,
    pub f: Array1<f64>,
    /// `n / N`.
    pub r: f64,
    /// `S_i`: true for source rows.
    pub is_source: Vec<bool>,
}

/// Stage 4 inputs: `F_i = ω̂_i R̂_i` on source rows and
/// `F_{n+j} = r · (1/L) Σ_l f̂⁽ᵏ⁻¹⁾(X_j, ĝ⁽ᵏ⁾(·, ε_l))` on `J_{k+1}`.
pub fn pseudo_outcomes(
    nuisances: &Nuisances,
    source: &LabeledSet,
    target: &UnlabeledSet,
    mc_samples: usize,
    seed: u64,
) -> Result<PseudoOutcomeSet> {
    let plan = &nuisances.plan;
    let kk = plan.k;
    if nuisances.residuals.len() != source.len()
        || nuisances.generators.len() != kk
        || nuisances.outcomes.len() != kk
        || plan.target_folds.iter().map(Vec::len).sum::<usize>() != target.len()
    {
        return Err(Error::Integrity(
            "nuisances do not match the data they are applied to".into(),
        ));
    }
    let (n, nt) = (source.len(), target.len());
    let r = n as f64 / nt as f64;
    let mut fvals = vec![f64::NAN; n + nt];
    for (slot, (w, r)) in fvals.iter_mut().zip(nuisances.weights.iter().zip(&nuisances.residuals)) {
        *slot = w * r;
    }
    for k in 0..kk {
        let jn = &plan.target_folds[plan.wrap(k + 1)];
        let predictor = RobustPredictor::new(
            nuisances.outcomes[plan.wrap(k + kk - 1)].clone(),
            nuisances.generators[k].clone(),
            mc_samples,
            derive_seed(seed, "debias.pseudo", k as u64),
        )?;
        let m = predictor.predict(target.x.select(Axis(0), jn).view())?;
        for (&j, v) in jn.iter().zip(m.iter()) {
            fvals[n + j] = r * v;
        }
    }
    if fvals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Integrity("pseudo-outcomes are incomplete or non-finite".into()));
    }
    let x = ndarray::concatenate(Axis(0), &[source.x.view(), target.x.view()]).expect("equal widths");
    Ok(PseudoOutcomeSet {
        x,
        f: Array1::from(fvals),
        r,
        is_source: (0..n + nt).map(|i| i < n).collect(),
    })
}

/// Audit trail of a debiased fit.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub fold_seed: u64,
    pub folds: usize,
    pub hyperparameters: Option<DebiasHp>,
    /// SHA-256 of every serialized nuisance, outcome models first.
    pub nuisance_hashes: Vec<String>,
}

/// The final `X`-only regression `m̂_deb`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DebiasedPredictor {
    pub net: DenseNet,
    pub task: Task,
    pub provenance: Provenance,
}

impl DebiasedPredictor {
    /// Regression outputs as fitted; binary outputs clamped to `[0, 1]`.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        let out = self.net.forward(x)?.column(0).to_owned();
        Ok(match self.task {
            Task::Regression => out,
            Task::Binary => out.mapv(|v| v.clamp(0.0, 1.0)),
        })
    }
}

/// Mse regression of the pseudo-outcomes on `X`. The network is unbounded
/// for both tasks so the orthogonality algebra is untouched; only binary
/// predictions are clamped.
pub fn fit_debiased_predictor(
    pseudo: &PseudoOutcomeSet,
    task: Task,
    hp: &FinalHp,
    seed: u64,
) -> Result<DebiasedPredictor> {
    if pseudo.x.nrows() != pseudo.f.len() || pseudo.f.is_empty() {
        return Err(Error::Integrity("pseudo-outcome set is malformed".into()));
    }
    let mut net = DenseNet::mlp(pseudo.x.ncols(), &hp.hidden, 1, Activation::Identity, seed)?;
    let y = column(pseudo.f.as_slice().expect("contiguous"));
    nnet::fit(
        &mut net,
        pseudo.x.view(),
        y.view(),
        Objective::Mse,
        &hp.train,
        seed,
        "final.batches",
    )?;
    Ok(DebiasedPredictor {
        net,
        task,
        provenance: Provenance::default(),
    })
}

fn sha256_json<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// A debiased fit with its intermediate products.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DebiasedFit {
    pub predictor: DebiasedPredictor,
    pub nuisances: Nuisances,
    pub pseudo: PseudoOutcomeSet,
}

/// Stages 1–4 from an existing preliminary generator.
pub fn debias_from_preliminary(
    source: &LabeledSet,
    target: &UnlabeledSet,
    task: Task,
    prelim: &Preliminary,
    hp: &DebiasHp,
    seed: u64,
) -> Result<DebiasedFit> {
    let nuisances = cross_fit(source, target, task, prelim, hp, seed)?;
    let pseudo = pseudo_outcomes(&nuisances, source, target, hp.mc_samples, seed).stage("pseudo-outcomes")?;
    let mut predictor = fit_debiased_predictor(&pseudo, task, &hp.final_model, derive_seed(seed, "debias.final", 0))
        .stage("final regression")?;
    let mut hashes = Vec::new();
    for f in &nuisances.outcomes {
        hashes.push(sha256_json(f)?);
    }
    for r in &nuisances.ratios {
        hashes.push(sha256_json(r)?);
    }
    for g in &nuisances.generators {
        hashes.push(sha256_json(g)?);
    }
    predictor.provenance = Provenance {
        seed,
        fold_seed: nuisances.plan.seed,
        folds: nuisances.plan.k,
        hyperparameters: Some(hp.clone()),
        nuisance_hashes: hashes,
    };
    Ok(DebiasedFit {
        predictor,
        nuisances,
        pseudo,
    })
}

/// End to end: the plug-in pipeline of the requested kind supplies the
/// preliminary generator, then the cross-fitted correction runs.
pub fn drum_debiased(
    source: &LabeledSet,
    target: &UnlabeledSet,
    task: Task,
    kind: GeneratorKind,
    drum_hp: &DrumHp,
    hp: &DebiasHp,
    seed: u64,
) -> Result<DebiasedFit> {
    let outcome = fit_outcome_model(source, task, &drum_hp.outcome, derive_seed(seed, "drum.outcome", 0))
        .stage("outcome model")?;
    let prelim_fit = fit_drum_with_outcome(outcome, source, target, kind, drum_hp, seed).stage("preliminary fit")?;
    debias_from_preliminary(source, target, task, &Preliminary::from_fit(&prelim_fit), hp, seed)
}
