use ndarray::{Array2, ArrayView2, Zip};

use crate::error::{Error, Result};

/// `(outputs, targets) -> (loss, ∂loss/∂outputs)`.
pub type CustomLoss = dyn Fn(ArrayView2<f64>, ArrayView2<f64>) -> (f64, Array2<f64>) + Sync;

/// Objective applied to a network's batch output.
///
/// All built-in losses average over rows; multi-output rows contribute the
/// sum of their per-column terms.
#[derive(Clone, Copy)]
pub enum LossKind<'a> {
    Mse,
    /// Binary cross-entropy on probabilities (sigmoid head).
    Bce,
    /// `mean_i w_i · ‖y_i − ŷ_i‖²`; one non-negative weight per row.
    WeightedMse(&'a [f64]),
    Custom(&'a CustomLoss),
}

const PROB_FLOOR: f64 = 1e-12;

impl LossKind<'_> {
    /// Loss value and gradient with respect to `out`.
    pub fn evaluate(&self, out: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
        if out.dim() != targets.dim() && !matches!(self, LossKind::Custom(_)) {
            return Err(Error::Input(format!(
                "output shape {:?} does not match target shape {:?}",
                out.dim(),
                targets.dim()
            )));
        }
        let b = out.nrows().max(1) as f64;
        match *self {
            LossKind::Mse => {
                let diff = &out - &targets;
                let loss = diff.iter().map(|d| d * d).sum::<f64>() / b;
                Ok((loss, diff * (2.0 / b)))
            }
            LossKind::WeightedMse(w) => {
                if w.len() != out.nrows() {
                    return Err(Error::Input(format!("{} weights for {} rows", w.len(), out.nrows())));
                }
                if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                    return Err(Error::Input("weighted mse requires finite non-negative weights".into()));
                }
                let mut diff = &out - &targets;
                let mut loss = 0.0;
                for (mut row, &wi) in diff.rows_mut().into_iter().zip(w) {
                    loss += wi * row.iter().map(|d| d * d).sum::<f64>();
                    row *= 2.0 * wi / b;
                }
                Ok((loss / b, diff))
            }
            LossKind::Bce => {
                let mut loss = 0.0;
                let mut grad = Array2::zeros(out.raw_dim());
                Zip::from(&mut grad).and(&out).and(&targets).for_each(|g, &p, &y| {
                    let pc = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                    loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
                    *g = (p - y) / (p * (1.0 - p)).max(1e-300) / b;
                });
                Ok((loss / b, grad))
            }
            LossKind::Custom(f) => Ok(f(out, targets)),
        }
    }
}
