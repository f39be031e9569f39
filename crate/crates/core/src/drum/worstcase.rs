//! Worst-case generator training.
//!
//! Both variants minimize the squared Monte-Carlo mean of `f̂` over target
//! covariates, `(1/B) Σ_j ((1/L) Σ_l f̂(X_j, g(·, ε_jl)))²`. The constrained
//! variant adds a Lagrangian energy-gap term and runs projected dual ascent
//! on its multiplier.

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::energy::{energy_and_grad, source_energy};
use super::generator::{Generator, GeneratorKind};
use super::outcome::OutcomeModel;
use crate::data::{concat_cols, LabeledSet, UnlabeledSet};
use crate::error::{Error, Result};
use crate::nnet::{apply_step, clip_grad_norm, AdamState, ParamBuf, TrainConfig};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorstCaseHp {
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub mc_samples: usize,
    pub train: TrainConfig,
}

impl Default for WorstCaseHp {
    fn default() -> Self {
        WorstCaseHp {
            hidden: vec![128, 128],
            latent_dim: 4,
            mc_samples: 256,
            train: TrainConfig::new(1e-5, 300),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstrainedHp {
    pub delta: f64,
    pub lr_primal: f64,
    pub lr_dual: f64,
    pub clip: Option<f64>,
    /// Total primal–dual iterations.
    pub iterations: usize,
    pub mc_samples: usize,
    pub batch_size: usize,
    pub lambda_cap: f64,
}

impl Default for ConstrainedHp {
    fn default() -> Self {
        ConstrainedHp {
            delta: 0.3,
            lr_primal: 2e-4,
            lr_dual: 1e-4,
            clip: Some(2.0),
            iterations: 80,
            mc_samples: 256,
            batch_size: 128,
            lambda_cap: 1e6,
        }
    }
}

/// Uncertainty budget of the constrained generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyBudget {
    pub baseline_energy: f64,
    pub delta: f64,
    pub dual_lambda: f64,
}

impl EnergyBudget {
    pub fn new(baseline_energy: f64, delta: f64) -> Result<Self> {
        if !(delta >= 0.0) {
            return Err(Error::Config(format!(
                "energy budget delta must be non-negative, got {delta}"
            )));
        }
        Ok(EnergyBudget {
            baseline_energy,
            delta,
            dual_lambda: 0.0,
        })
    }
}

/// One primal–dual iteration, logged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualStep {
    pub objective: f64,
    pub energy_gap: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstrainedFit {
    pub generator: Generator,
    pub budget: EnergyBudget,
    /// Full-sample `En(g) − En(gˢ)` after training.
    pub final_gap: f64,
    pub trajectory: Vec<DualStep>,
    /// Set when the multiplier hit `lambda_cap` and was held there.
    pub lambda_capped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnconstrainedFit {
    pub generator: Generator,
    /// Mean objective per epoch.
    pub trajectory: Vec<f64>,
}

/// Repeats every row of `x` `times` times (row `j·times + l` holds `x_j`).
pub(crate) fn repeat_rows(x: ArrayView2<f64>, times: usize) -> Array2<f64> {
    let mut out = Array2::zeros((x.nrows() * times, x.ncols()));
    for (j, row) in x.outer_iter().enumerate() {
        for l in 0..times {
            out.row_mut(j * times + l).assign(&row);
        }
    }
    out
}

/// Monte-Carlo means `m̄_j = (1/L) Σ_l f̂(x_j, A_jl)` and, through `outer`,
/// the gradient of a scalar function of them with respect to the generator
/// parameters; `outer` maps `m̄` to `(value, ∂value/∂m̄)` and the gradients
/// are added to `grads`.
///
/// Conditional generators take `x.nrows() · L` noise rows, block `j` first,
/// and `A_jl = g(x_j, ε_jl)`. Unconstrained generators take one panel of `L`
/// rows shared by the batch, `A_jl = g(ε_l)`: the generated law does not
/// depend on `x`, so each `m̄_j` keeps its distribution while the generator
/// runs on `L` rather than `B·L` rows.
pub(crate) fn mc_mean_backprop(
    f: &OutcomeModel,
    g: &Generator,
    x: ArrayView2<f64>,
    eps: ArrayView2<f64>,
    l: usize,
    outer: impl FnOnce(&[f64]) -> (f64, Vec<f64>),
    grads: &mut ParamBuf,
) -> Result<(f64, Vec<f64>)> {
    let b = x.nrows();
    let shared = g.kind == GeneratorKind::Unconstrained;
    debug_assert_eq!(eps.nrows(), if shared { l } else { b * l });
    let x_rep = repeat_rows(x, l);
    let g_tape = if shared {
        g.sample_tape(None, eps)?
    } else {
        g.sample_tape(Some(x_rep.view()), eps)?
    };
    let a = g_tape.output();
    let fin = if shared {
        let mut fin = Array2::zeros((b * l, f.d_x + f.d_a));
        for j in 0..b {
            let mut blk = fin.slice_mut(s![j * l..(j + 1) * l, ..]);
            blk.slice_mut(s![.., ..f.d_x])
                .assign(&x_rep.slice(s![j * l..(j + 1) * l, ..]));
            blk.slice_mut(s![.., f.d_x..]).assign(a);
        }
        fin
    } else {
        concat_cols(x_rep.view(), a.view())
    };
    let f_tape = f.net.forward_tape(fin.view())?;
    let out = f_tape.output();
    let mbar: Vec<f64> = (0..b)
        .map(|j| out.slice(s![j * l..(j + 1) * l, 0]).sum() / l as f64)
        .collect();
    let (value, dm) = outer(&mbar);
    let mut dout = Array2::zeros((b * l, 1));
    for (j, d) in dm.iter().enumerate() {
        dout.slice_mut(s![j * l..(j + 1) * l, 0]).fill(d / l as f64);
    }
    let din = f
        .net
        .backward(&f_tape, &dout, None, true)
        .expect("input gradient requested");
    let da_rows = din.slice(s![.., f.d_x..]);
    let da = if shared {
        let mut da = Array2::zeros((l, f.d_a));
        for j in 0..b {
            da += &da_rows.slice(s![j * l..(j + 1) * l, ..]);
        }
        da
    } else {
        da_rows.to_owned()
    };
    g.backprop(&g_tape, &da, grads);
    Ok((value, mbar))
}

/// Noise rows `mc_mean_backprop` expects for a batch of `b` covariate rows.
pub(crate) fn noise_rows(g: &Generator, b: usize, l: usize) -> usize {
    match g.kind {
        GeneratorKind::Unconstrained => l,
        GeneratorKind::Conditional => b * l,
    }
}

/// `(mean m̄², 2 m̄ / B)`: the squared robust objective.
pub(crate) fn squared_mean(mbar: &[f64]) -> (f64, Vec<f64>) {
    let b = mbar.len() as f64;
    let value = mbar.iter().map(|m| m * m).sum::<f64>() / b;
    (value, mbar.iter().map(|m| 2.0 * m / b).collect())
}

fn check_compatible(f: &OutcomeModel, g: &Generator, d_x: usize) -> Result<()> {
    if f.d_x != d_x || g.d_x != d_x || g.d_a != f.d_a {
        return Err(Error::Config(format!(
            "dimension mismatch: outcome ({}, {}), generator ({}, {}), target d_X {}",
            f.d_x, f.d_a, g.d_x, g.d_a, d_x
        )));
    }
    Ok(())
}

/// Source rows of the bias-corrected objective, which adds
/// `(2/B) Σ_i c_i μ̂(X_i)` over a source batch, `c_i = ω̂_i R̂_i`, with
/// `μ̂(X_i)` the Monte-Carlo mean of `f̂` through the generator being trained.
#[derive(Clone, Copy, Debug)]
pub struct Correction<'a> {
    pub x: ArrayView2<'a, f64>,
    pub coef: &'a [f64],
}

/// A fixed Lagrangian energy penalty `λ · En(g)` on labeled source rows.
#[derive(Clone, Copy, Debug)]
pub struct EnergyPenalty<'a> {
    pub x: ArrayView2<'a, f64>,
    pub a: ArrayView2<'a, f64>,
    pub lambda: f64,
}

/// How long a generator trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Full passes over the target rows.
    Epochs(usize),
    /// Optimizer steps.
    Steps(usize),
}

/// Trains `g` on the squared robust objective over `target_x`, optionally
/// bias-corrected and energy-penalized, starting from its current
/// parameters. Returns the mean objective of each pass over the target rows
/// (the last pass may be partial under [`Schedule::Steps`]).
#[allow(clippy::too_many_arguments)]
pub fn train_generator(
    f: &OutcomeModel,
    g: &mut Generator,
    target_x: ArrayView2<f64>,
    correction: Option<Correction>,
    penalty: Option<EnergyPenalty>,
    mc_samples: usize,
    train: &TrainConfig,
    schedule: Schedule,
    seed: u64,
    tag: &str,
) -> Result<Vec<f64>> {
    train.validate()?;
    check_compatible(f, g, target_x.ncols())?;
    if target_x.nrows() == 0 {
        return Err(Error::Input("target set is empty".into()));
    }
    if mc_samples == 0 {
        return Err(Error::Config("Monte-Carlo sample count must be at least 1".into()));
    }
    if let Some(c) = &correction {
        if c.x.nrows() != c.coef.len() || c.x.nrows() == 0 || c.x.ncols() != f.d_x {
            return Err(Error::Input("correction rows do not match their coefficients".into()));
        }
        if c.coef.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite correction coefficient".into()));
        }
    }
    if let Some(p) = &penalty {
        if g.kind != GeneratorKind::Conditional || p.x.nrows() != p.a.nrows() || p.x.nrows() == 0 || !(p.lambda >= 0.0)
        {
            return Err(Error::Config(
                "energy penalty needs a conditional generator, paired rows and λ ≥ 0".into(),
            ));
        }
    }
    let n = target_x.nrows();
    let per_pass = n.div_ceil(train.batch_size);
    let steps = match schedule {
        Schedule::Epochs(e) => e * per_pass,
        Schedule::Steps(s) => s,
    };
    let mut opt = AdamState::new(&g.net, train.lr, train.weight_decay);
    let mut targets = BatchCycler::new(n, train.batch_size, seed, &format!("{tag}.batches"));
    let mut sources = correction
        .as_ref()
        .map(|c| BatchCycler::new(c.x.nrows(), train.batch_size, seed, &format!("{tag}.source")));
    let mut energy_rows = penalty
        .as_ref()
        .map(|p| BatchCycler::new(p.x.nrows(), train.batch_size, seed, &format!("{tag}.energy")));
    let mut history = Vec::with_capacity(steps.div_ceil(per_pass));
    let (mut total, mut rows) = (0.0, 0usize);
    for step in 0..steps as u64 {
        let tb = targets.next_batch();
        let bt = tb.len();
        let mut xb = target_x.select(Axis(0), &tb);
        let mut coef = Vec::new();
        if let (Some(c), Some(cyc)) = (&correction, sources.as_mut()) {
            let sb = cyc.next_batch();
            xb.append(Axis(0), c.x.select(Axis(0), &sb).view())
                .expect("equal widths");
            coef = sb.iter().map(|&i| c.coef[i]).collect();
        }
        let mut eps_rng = rng::stream(seed, &format!("{tag}.eps"), step);
        let eps = rng::normal_matrix(&mut eps_rng, noise_rows(g, xb.nrows(), mc_samples), g.latent_dim);
        let mut grads = ParamBuf::zeros_like(&g.net);
        let outer = |m: &[f64]| {
            let (plug, mut dm) = squared_mean(&m[..bt]);
            let bs = coef.len().max(1) as f64;
            let mut corr = 0.0;
            for (i, c) in coef.iter().enumerate() {
                corr += 2.0 * c * m[bt + i] / bs;
                dm.push(2.0 * c / bs);
            }
            (plug + corr, dm)
        };
        let (mut value, _) = mc_mean_backprop(f, g, xb.view(), eps.view(), mc_samples, outer, &mut grads)?;
        total += value * bt as f64;
        rows += bt;
        if let (Some(p), Some(cyc)) = (&penalty, energy_rows.as_mut()) {
            let eb = cyc.next_batch();
            let e1 = rng::normal_matrix(&mut eps_rng, eb.len(), g.latent_dim);
            let e2 = rng::normal_matrix(&mut eps_rng, eb.len(), g.latent_dim);
            let mut egrads = ParamBuf::zeros_like(&g.net);
            let xs = p.x.select(Axis(0), &eb);
            let as_ = p.a.select(Axis(0), &eb);
            let energy = energy_and_grad(g, xs.view(), as_.view(), e1.view(), e2.view(), &mut egrads)?;
            egrads.scale(p.lambda);
            grads.add_assign(&egrads);
            value += p.lambda * energy;
        }
        apply_step(&mut g.net, &mut opt, grads, train.clip, value)?;
        if (step as usize + 1).is_multiple_of(per_pass) || step as usize + 1 == steps {
            history.push(total / rows as f64);
            total = 0.0;
            rows = 0;
        }
    }
    Ok(history)
}

/// [`train_generator`] on the plain squared robust objective for
/// `train.epochs` passes.
pub fn train_on_objective(
    f: &OutcomeModel,
    g: &mut Generator,
    target: &UnlabeledSet,
    mc_samples: usize,
    train: &TrainConfig,
    seed: u64,
    tag: &str,
) -> Result<Vec<f64>> {
    let schedule = Schedule::Epochs(train.epochs);
    train_generator(
        f,
        g,
        target.x.view(),
        None,
        None,
        mc_samples,
        train,
        schedule,
        seed,
        tag,
    )
}

/// Worst-case marginal law of `A`: a generator of `ε` alone, so `A ⟂ X`.
pub fn fit_worstcase_unconstrained(
    f: &OutcomeModel,
    target: &UnlabeledSet,
    hp: &WorstCaseHp,
    seed: u64,
) -> Result<UnconstrainedFit> {
    let mut g = Generator::new(
        GeneratorKind::Unconstrained,
        f.d_x,
        f.d_a,
        hp.latent_dim,
        &hp.hidden,
        seed,
    )?;
    let trajectory = train_on_objective(f, &mut g, target, hp.mc_samples, &hp.train, seed, "worstcase")?;
    Ok(UnconstrainedFit {
        generator: g,
        trajectory,
    })
}

/// Cycles through a dataset in shuffled batches, reshuffling from the
/// `(seed, tag, pass)` stream whenever a pass is exhausted.
pub(crate) struct BatchCycler {
    n: usize,
    batch: usize,
    seed: u64,
    tag: String,
    pass: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchCycler {
    pub(crate) fn new(n: usize, batch: usize, seed: u64, tag: &str) -> Self {
        let order = rng::permutation(&mut rng::stream(seed, tag, 0), n);
        BatchCycler {
            n,
            batch: batch.min(n).max(1),
            seed,
            tag: tag.into(),
            pass: 0,
            order,
            pos: 0,
        }
    }

    pub(crate) fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.n {
            self.pass += 1;
            self.order = rng::permutation(&mut rng::stream(self.seed, &self.tag, self.pass), self.n);
            self.pos = 0;
        }
        let end = (self.pos + self.batch).min(self.n);
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

/// Energy-constrained worst-case generator by primal–dual iterations.
///
/// Starts from `g_source`. Each iteration takes a target batch for the
/// objective and an independent source batch for the energy gap, steps the
/// generator on `objective + λ (ΔEn − δ)` and then sets
/// `λ ← max(0, λ + η_λ (ΔEn − δ))`.
pub fn fit_worstcase_constrained(
    f: &OutcomeModel,
    source: &LabeledSet,
    target: &UnlabeledSet,
    g_source: &Generator,
    budget: &EnergyBudget,
    hp: &ConstrainedHp,
    seed: u64,
) -> Result<ConstrainedFit> {
    if g_source.kind != GeneratorKind::Conditional {
        return Err(Error::Config(
            "the constrained fit starts from a conditional source generator".into(),
        ));
    }
    check_compatible(f, g_source, target.d_x())?;
    if source.d_x() != target.d_x() || source.d_a() != f.d_a {
        return Err(Error::Config(
            "source dimensions disagree with the outcome model".into(),
        ));
    }
    if target.is_empty() || source.is_empty() {
        return Err(Error::Input("constrained fit needs non-empty source and target".into()));
    }
    if !(budget.delta >= 0.0) || !(hp.lr_primal > 0.0) || !(hp.lr_dual >= 0.0) || hp.mc_samples == 0 {
        return Err(Error::Config("invalid constrained-fit hyperparameters".into()));
    }
    let mut g = g_source.clone();
    let mut opt = AdamState::new(&g.net, hp.lr_primal, 0.0);
    let mut lambda = budget.dual_lambda.max(0.0);
    let mut capped = false;
    let mut trajectory = Vec::with_capacity(hp.iterations);
    let mut tgt_batches = BatchCycler::new(target.len(), hp.batch_size, seed, "constrained.target");
    let mut src_batches = BatchCycler::new(source.len(), hp.batch_size, seed, "constrained.source");
    for it in 0..hp.iterations as u64 {
        let tb = tgt_batches.next_batch();
        let sb = src_batches.next_batch();
        let xt = target.x.select(Axis(0), &tb);
        let mut eps_rng = rng::stream(seed, "constrained.eps", it);
        let eps = rng::normal_matrix(&mut eps_rng, noise_rows(&g, tb.len(), hp.mc_samples), g.latent_dim);
        let mut grads = ParamBuf::zeros_like(&g.net);
        let (objective, _) = mc_mean_backprop(f, &g, xt.view(), eps.view(), hp.mc_samples, squared_mean, &mut grads)?;

        let xs = source.x.select(Axis(0), &sb);
        let as_ = source.a.select(Axis(0), &sb);
        let e1 = rng::normal_matrix(&mut eps_rng, sb.len(), g.latent_dim);
        let e2 = rng::normal_matrix(&mut eps_rng, sb.len(), g.latent_dim);
        let mut egrads = ParamBuf::zeros_like(&g.net);
        let energy = energy_and_grad(&g, xs.view(), as_.view(), e1.view(), e2.view(), &mut egrads)?;
        let gap = energy - budget.baseline_energy;

        if lambda > 0.0 {
            egrads.scale(lambda);
            grads.add_assign(&egrads);
        }
        let lagrangian = objective + lambda * (gap - budget.delta);
        if let Some(c) = hp.clip {
            clip_grad_norm(&mut grads, c);
        }
        apply_step(&mut g.net, &mut opt, grads, None, lagrangian)?;

        lambda = (lambda + hp.lr_dual * (gap - budget.delta)).max(0.0);
        if lambda > hp.lambda_cap {
            lambda = hp.lambda_cap;
            capped = true;
        }
        trajectory.push(DualStep {
            objective,
            energy_gap: gap,
            lambda,
        });
    }
    let final_gap = source_energy(&g, source, seed)? - budget.baseline_energy;
    Ok(ConstrainedFit {
        generator: g,
        budget: EnergyBudget {
            baseline_energy: budget.baseline_energy,
            delta: budget.delta,
            dual_lambda: lambda,
        },
        final_gap,
        trajectory,
        lambda_capped: capped,
    })
}
