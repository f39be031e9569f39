//! Energy score of a conditional generator and source engression.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::generator::{Generator, GeneratorKind};
use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::nnet::{apply_step, AdamState, ParamBuf, TrainConfig};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngressionHp {
    pub hidden: Vec<usize>,
    pub noise_dim: usize,
    pub train: TrainConfig,
}

impl Default for EngressionHp {
    fn default() -> Self {
        EngressionHp {
            hidden: vec![16, 16],
            noise_dim: 32,
            train: TrainConfig::new(5e-4, 500),
        }
    }
}

fn row_norm(v: ndarray::ArrayView1<f64>) -> f64 {
    v.iter().map(|d| d * d).sum::<f64>().sqrt()
}

/// Batch energy score
/// `(1/B) Σ ‖A_i − Â_i‖ − (1/2B) Σ ‖Â_i − Â′_i‖` with `Â_i = g(X_i, ε_i)`
/// and `Â′_i = g(X_i, ε′_i)`.
pub fn energy_with_noise(
    gen: &Generator,
    x: ArrayView2<f64>,
    a: ArrayView2<f64>,
    eps: ArrayView2<f64>,
    eps2: ArrayView2<f64>,
) -> Result<f64> {
    let a1 = gen.sample(Some(x), eps)?;
    let a2 = gen.sample(Some(x), eps2)?;
    Ok(score_from_samples(a, a1.view(), a2.view()))
}

fn score_from_samples(a: ArrayView2<f64>, a1: ArrayView2<f64>, a2: ArrayView2<f64>) -> f64 {
    let b = a.nrows() as f64;
    let fit: f64 = a
        .outer_iter()
        .zip(a1.outer_iter())
        .map(|(t, g)| row_norm((&t - &g).view()))
        .sum();
    let spread: f64 = a1
        .outer_iter()
        .zip(a2.outer_iter())
        .map(|(g, h)| row_norm((&g - &h).view()))
        .sum();
    fit / b - spread / (2.0 * b)
}

/// Energy score on `(x, a)` with one fresh `(ε, ε′)` pair per row drawn from
/// the `eps_seed` stream.
pub fn energy_score(gen: &Generator, x: ArrayView2<f64>, a: ArrayView2<f64>, eps_seed: u64) -> Result<f64> {
    if x.nrows() == 0 {
        return Err(Error::Input("energy score of an empty batch".into()));
    }
    if a.nrows() != x.nrows() || a.ncols() != gen.d_a {
        return Err(Error::Input("energy score: x/a shapes disagree".into()));
    }
    let mut stream = rng::stream(eps_seed, "energy.eps", 0);
    let eps = rng::normal_matrix(&mut stream, x.nrows(), gen.latent_dim);
    let eps2 = rng::normal_matrix(&mut stream, x.nrows(), gen.latent_dim);
    energy_with_noise(gen, x, a, eps.view(), eps2.view())
}

/// Full-sample energy score on a labeled source set.
pub fn source_energy(gen: &Generator, source: &LabeledSet, eps_seed: u64) -> Result<f64> {
    energy_score(gen, source.x.view(), source.a.view(), eps_seed)
}

/// Energy score and its parameter gradient on one batch.
pub(crate) fn energy_and_grad(
    gen: &Generator,
    x: ArrayView2<f64>,
    a: ArrayView2<f64>,
    eps: ArrayView2<f64>,
    eps2: ArrayView2<f64>,
    grads: &mut ParamBuf,
) -> Result<f64> {
    let t1 = gen.sample_tape(Some(x), eps)?;
    let t2 = gen.sample_tape(Some(x), eps2)?;
    let (a1, a2) = (t1.output(), t2.output());
    let b = a.nrows() as f64;
    let value = score_from_samples(a, a1.view(), a2.view());
    let mut d1 = Array2::zeros(a1.raw_dim());
    let mut d2 = Array2::zeros(a2.raw_dim());
    for i in 0..a.nrows() {
        let r = &a1.row(i) - &a.row(i);
        let nr = row_norm(r.view());
        if nr > 0.0 {
            d1.row_mut(i).scaled_add(1.0 / (b * nr), &r);
        }
        let q = &a1.row(i) - &a2.row(i);
        let nq = row_norm(q.view());
        if nq > 0.0 {
            d1.row_mut(i).scaled_add(-0.5 / (b * nq), &q);
            d2.row_mut(i).scaled_add(0.5 / (b * nq), &q);
        }
    }
    gen.backprop(&t1, &d1, grads);
    gen.backprop(&t2, &d2, grads);
    Ok(value)
}

/// Engression: fits a conditional generator to the source `A | X` law by
/// minimizing the batch energy score. Returns the generator and its
/// full-sample energy, the baseline for the uncertainty budget.
pub fn fit_source_engression(source: &LabeledSet, hp: &EngressionHp, seed: u64) -> Result<(Generator, f64)> {
    source.validate()?;
    hp.train.validate()?;
    let mut gen = Generator::new(
        GeneratorKind::Conditional,
        source.d_x(),
        source.d_a(),
        hp.noise_dim,
        &hp.hidden,
        seed,
    )?;
    let mut opt = AdamState::new(&gen.net, hp.train.lr, hp.train.weight_decay);
    let n = source.len();
    let mut step = 0u64;
    for epoch in 0..hp.train.epochs {
        let order = rng::permutation(&mut rng::stream(seed, "engression.batches", epoch as u64), n);
        for chunk in order.chunks(hp.train.batch_size) {
            let xb = source.x.select(Axis(0), chunk);
            let ab = source.a.select(Axis(0), chunk);
            let mut eps_rng = rng::stream(seed, "engression.eps", step);
            let eps = rng::normal_matrix(&mut eps_rng, chunk.len(), hp.noise_dim);
            let eps2 = rng::normal_matrix(&mut eps_rng, chunk.len(), hp.noise_dim);
            let mut grads = ParamBuf::zeros_like(&gen.net);
            let value = energy_and_grad(&gen, xb.view(), ab.view(), eps.view(), eps2.view(), &mut grads)?;
            apply_step(&mut gen.net, &mut opt, grads, hp.train.clip, value)?;
            step += 1;
        }
    }
    let baseline = source_energy(&gen, source, seed)?;
    Ok((gen, baseline))
}

/// Mean and standard deviation of generated `A` per row, from `draws` samples.
pub fn conditional_moments(
    gen: &Generator,
    x: ArrayView2<f64>,
    draws: usize,
    seed: u64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let (n, d) = (x.nrows(), gen.d_a);
    let mut sum = Array2::<f64>::zeros((n, d));
    let mut sq = Array2::<f64>::zeros((n, d));
    let mut stream = rng::stream(seed, "moments.eps", 0);
    for _ in 0..draws {
        let eps = rng::normal_matrix(&mut stream, n, gen.latent_dim);
        let a = gen.sample(Some(x), eps.view())?;
        sum += &a;
        sq += &(&a * &a);
    }
    let k = draws as f64;
    let mean = sum / k;
    let var = (sq / k - &mean * &mean).mapv(|v| v.max(0.0) * k / (k - 1.0).max(1.0));

    Ok((mean, var.mapv(f64::sqrt)))
}
