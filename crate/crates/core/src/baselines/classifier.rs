//! Importance weights from a logistic source-vs-target classifier.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::WeightVector;
use crate::error::{Error, Result};
use crate::nnet::sigmoid;

const RIDGE: f64 = 1e-8;
const MAX_ITER: usize = 100;
const WEIGHT_CLIP: f64 = 100.0;

/// Logistic regression fitted by Newton–IRLS.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub intercept: f64,
    pub slope: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Every training point lies on the correct side of the boundary.
    pub separated: bool,
}

impl LogisticFit {
    pub fn log_odds(&self, x: ArrayView2<f64>) -> Array1<f64> {
        x.dot(&ArrayView1::from(&self.slope)) + self.intercept
    }

    pub fn fit(x: ArrayView2<f64>, labels: &[bool]) -> Result<Self> {
        let (n, d) = x.dim();
        if n != labels.len() || n == 0 {
            return Err(Error::Input("classifier needs one label per non-empty row".into()));
        }
        let mut design = Array2::ones((n, d + 1));
        design.slice_mut(ndarray::s![.., 1..]).assign(&x);
        let y: Array1<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
        let mut beta = Array1::<f64>::zeros(d + 1);
        let mut converged = false;
        let mut iterations = 0;
        for it in 1..=MAX_ITER {
            iterations = it;
            let p = design.dot(&beta).mapv(sigmoid);
            let w = p.mapv(|v| (v * (1.0 - v)).max(1e-12));
            let grad = design.t().dot(&(&y - &p)) - &(&beta * RIDGE);
            let weighted = &design * &w.view().insert_axis(Axis(1));
            let mut hess = design.t().dot(&weighted);
            for j in 0..=d {
                hess[[j, j]] += RIDGE;
            }
            let h = DMatrix::from_row_slice(d + 1, d + 1, hess.as_slice().expect("standard layout"));
            let g = DVector::from_column_slice(grad.as_slice().expect("contiguous"));
            let step = h
                .cholesky()
                .ok_or_else(|| Error::DegenerateClassifier("logistic Hessian is not positive definite".into()))?
                .solve(&g);
            let step = Array1::from(step.as_slice().to_vec());
            beta += &step;
            if !beta.iter().all(|b| b.is_finite()) {
                return Err(Error::DegenerateClassifier("logistic coefficients diverged".into()));
            }
            let size = step.iter().map(|s| s.abs()).fold(0.0, f64::max);
            if size <= 1e-10 * (1.0 + beta.iter().map(|b| b.abs()).fold(0.0, f64::max)) {
                converged = true;
                break;
            }
        }
        let eta = design.dot(&beta);
        let separated = eta.iter().zip(labels).all(|(e, &l)| (*e > 0.0) == l);
        Ok(LogisticFit {
            intercept: beta[0],
            slope: beta.iter().skip(1).cloned().collect(),
            iterations,
            converged,
            separated,
        })
    }
}

/// Odds `p̂(target | x) / p̂(source | x)` on the source rows, clipped at 100
/// and rescaled to mean one.
pub fn classifier_weights(source_x: ArrayView2<f64>, target_x: ArrayView2<f64>) -> Result<(WeightVector, LogisticFit)> {
    if source_x.nrows() == 0 || target_x.nrows() == 0 {
        return Err(Error::Input(
            "classifier weights need non-empty source and target".into(),
        ));
    }
    let pooled = ndarray::concatenate(Axis(0), &[source_x.reborrow(), target_x.reborrow()])
        .map_err(|_| Error::Input("source and target covariates differ in width".into()))?;
    let labels: Vec<bool> = (0..pooled.nrows()).map(|i| i >= source_x.nrows()).collect();
    let fit = LogisticFit::fit(pooled.view(), &labels)?;
    let raw: Vec<f64> = fit
        .log_odds(source_x)
        .iter()
        .map(|e| e.exp().min(WEIGHT_CLIP))
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    let mut wv = WeightVector::new(raw.iter().map(|w| w / mean).collect(), "classifier")?;
    if fit.separated {
        wv.warning = Some("source and target are perfectly separated; weights clipped at 100".into());
    } else if !fit.converged {
        wv.warning = Some(format!(
            "logistic fit did not converge in {} iterations",
            fit.iterations
        ));
    }
    Ok((wv, fit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn recovers_gaussian_log_ratio_slope() {
        // N(1,1) vs N(0,1): log ratio x − ½, so slope 1.
        let mut r = rng::stream(11, "test", 0);
        let s = rng::normal_matrix(&mut r, 4000, 1);
        let t = rng::normal_matrix(&mut r, 4000, 1) + 1.0;
        let (_, fit) = classifier_weights(s.view(), t.view()).unwrap();
        assert!(fit.converged);
        assert!((fit.slope[0] - 1.0).abs() < 0.2, "slope {}", fit.slope[0]);
    }

    #[test]
    fn identical_distributions_give_flat_weights() {
        let mut r = rng::stream(12, "test", 0);
        let s = rng::normal_matrix(&mut r, 2000, 3);
        let t = rng::normal_matrix(&mut r, 1000, 3);
        let (wv, _) = classifier_weights(s.view(), t.view()).unwrap();
        assert!(wv.ess / 2000.0 > 0.9);
        let mean = wv.w.iter().sum::<f64>() / 2000.0;
        assert!((mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn separation_is_flagged() {
        let s = ndarray::array![[-2.0], [-1.5], [-1.0]];
        let t = ndarray::array![[1.0], [1.5], [2.0]];
        let (wv, fit) = classifier_weights(s.view(), t.view()).unwrap();
        assert!(fit.separated);
        assert!(wv.warning.is_some());
        assert!(wv.w.iter().all(|w| w.is_finite()));
    }
}
