use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::loss::LossKind;
use super::net::{DenseNet, ParamBuf};
use super::optim::{clip_grad_norm, AdamState};
use crate::error::{Error, Result};
use crate::rng;

/// Mini-batch training schedule shared by every learned component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub clip: Option<f64>,
}

fn default_batch() -> usize {
    128
}

impl TrainConfig {
    pub fn new(lr: f64, epochs: usize) -> Self {
        TrainConfig {
            lr,
            epochs,
            batch_size: 128,
            weight_decay: 0.0,
            clip: None,
        }
    }

    pub fn with_clip(mut self, clip: f64) -> Self {
        self.clip = Some(clip);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if matches!(self.clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("gradient clip must be positive".into()));
        }
        Ok(())
    }
}

/// Loss and parameter gradient of `loss` at the current parameters.
pub fn loss_and_grad(
    net: &DenseNet,
    batch: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    loss: LossKind<'_>,
) -> Result<(f64, ParamBuf)> {
    if batch.nrows() != targets.nrows() {
        return Err(Error::Input(format!(
            "{} rows in batch, {} in targets",
            batch.nrows(),
            targets.nrows()
        )));
    }
    let tape = net.forward_tape(batch)?;
    let (value, dout) = loss.evaluate(tape.output().view(), targets)?;
    let mut grads = ParamBuf::zeros_like(net);
    net.backward(&tape, &dout, Some(&mut grads), false);
    Ok((value, grads))
}

/// Applies `grads` with optional global-norm clipping; fails on non-finite
/// values instead of corrupting the parameters.
pub fn apply_step(
    net: &mut DenseNet,
    opt: &mut AdamState,
    mut grads: ParamBuf,
    clip: Option<f64>,
    loss_value: f64,
) -> Result<()> {
    if !loss_value.is_finite() || !grads.is_finite() {
        return Err(Error::Diverged {
            step: opt.step_count(),
            context: format!("loss {loss_value}"),
        });
    }
    if let Some(c) = clip {
        clip_grad_norm(&mut grads, c);
    }
    opt.update(net, &grads);
    Ok(())
}

/// One optimizer step on the mean batch loss; returns the pre-step loss.
pub fn train_step(
    net: &mut DenseNet,
    batch: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    loss: LossKind<'_>,
    opt: &mut AdamState,
    clip: Option<f64>,
) -> Result<f64> {
    if !opt.matches(net) {
        return Err(Error::Config("optimizer state does not match network shape".into()));
    }
    let (value, grads) = loss_and_grad(net, batch, targets, loss)?;
    apply_step(net, opt, grads, clip, value)?;
    Ok(value)
}

/// Largest relative discrepancy between the analytic gradient and central
/// finite differences (`h = 1e-5`), `|g_ad − g_fd| / (|g_fd| + 1e-8)`.
pub fn grad_check(net: &DenseNet, batch: ArrayView2<f64>, targets: ArrayView2<f64>, loss: LossKind<'_>) -> Result<f64> {
    const H: f64 = 1e-5;
    let (_, grads) = loss_and_grad(net, batch, targets, loss)?;
    let analytic = grads.flat();
    let value_at = |probe: &DenseNet| -> Result<f64> {
        let out = probe.forward(batch)?;
        Ok(loss.evaluate(out.view(), targets)?.0)
    };
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for (i, &g_ad) in analytic.iter().enumerate() {
        let orig = *probe.param_mut(i);
        *probe.param_mut(i) = orig + H;
        let up = value_at(&probe)?;
        *probe.param_mut(i) = orig - H;
        let down = value_at(&probe)?;
        *probe.param_mut(i) = orig;
        let g_fd = (up - down) / (2.0 * H);
        worst = worst.max((g_ad - g_fd).abs() / (g_fd.abs() + 1e-8));
    }
    Ok(worst)
}

/// Supervised mini-batch training. Each epoch draws a fresh permutation from
/// the `(seed, tag, epoch)` stream; the final short batch is kept. Returns
/// the mean training loss of every epoch.
pub fn fit(
    net: &mut DenseNet,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    loss: Objective<'_>,
    cfg: &TrainConfig,
    seed: u64,
    tag: &str,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = x.nrows();
    if n == 0 {
        return Err(Error::Input("cannot train on an empty dataset".into()));
    }
    if y.nrows() != n {
        return Err(Error::Input(format!("{n} input rows but {} targets", y.nrows())));
    }
    let mut opt = AdamState::new(net, cfg.lr, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut wbuf = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut stream = rng::stream(seed, tag, epoch as u64);
        let order = rng::permutation(&mut stream, n);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), chunk);
            let yb = y.select(Axis(0), chunk);
            let kind = match loss {
                Objective::Mse => LossKind::Mse,
                Objective::Bce => LossKind::Bce,
                Objective::WeightedMse(w) => {
                    wbuf.clear();
                    wbuf.extend(chunk.iter().map(|&i| w[i]));
                    LossKind::WeightedMse(&wbuf)
                }
            };
            let (value, grads) = loss_and_grad(net, xb.view(), yb.view(), kind)?;
            apply_step(net, &mut opt, grads, cfg.clip, value).map_err(|e| match e {
                Error::Diverged { step, context } => Error::Diverged {
                    step,
                    context: format!("{tag}, epoch {epoch}: {context}"),
                },
                other => other,
            })?;
            total += value * chunk.len() as f64;
        }
        history.push(total / n as f64);
    }
    Ok(history)
}

/// Dataset-level objective for [`fit`]; weights are indexed by dataset row.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    Mse,
    Bce,
    WeightedMse(&'a [f64]),
}

/// Column vector view helper.
pub fn column(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((v.len(), 1), v.to_vec()).expect("length matches")
}
