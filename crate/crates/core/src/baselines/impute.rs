//! Pseudo-label imputers that treat the target outcome as a missing column.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::forest::{ForestHp, RegressionForest};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Imputer {
    Mean,
    /// Chained equations with a Bayesian ridge learner, 20 rounds.
    Mice,
    /// Chained equations with a regression forest, 25 rounds.
    Forest,
}

impl Imputer {
    pub fn rounds(self) -> usize {
        match self {
            Imputer::Mean => 1,
            Imputer::Mice => 20,
            Imputer::Forest => 25,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImputeReport {
    pub values: Array1<f64>,
    /// Rounds actually run; the loop stops once imputations stop changing.
    pub rounds: usize,
}

/// Linear regression with Gamma hyperpriors on the noise and weight
/// precisions, fitted by evidence maximization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BayesianRidge {
    pub coef: Vec<f64>,
    pub intercept: f64,
    /// Noise precision.
    pub alpha: f64,
    /// Weight precision.
    pub lambda: f64,
}

impl BayesianRidge {
    const HYPER: f64 = 1e-6;

    pub fn fit(x: ArrayView2<f64>, y: ArrayView1<f64>) -> Result<Self> {
        let (n, d) = x.dim();
        if n == 0 || n != y.len() {
            return Err(Error::Input("ridge needs matching, non-empty rows".into()));
        }
        let xm = x.mean_axis(Axis(0)).expect("non-empty");
        let ym = y.sum() / n as f64;
        let xc = &x - &xm;
        let yc = &y - ym;
        let gram = xc.t().dot(&xc);
        let xty = xc.t().dot(&yc);
        let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| gram[[i, j]]));
        let vty = eig.eigenvectors.transpose() * DVector::from_iterator(d, xty.iter().cloned());
        let evals: Vec<f64> = eig.eigenvalues.iter().map(|e| e.max(0.0)).collect();
        let var = yc.dot(&yc) / n as f64;
        let mut alpha = 1.0 / (var + f64::EPSILON);
        let mut lambda = 1.0;
        let solve = |alpha: f64, lambda: f64| {
            let z = DVector::from_iterator(d, (0..d).map(|k| vty[k] / (evals[k] + lambda / alpha)));
            let coef = &eig.eigenvectors * z;
            Array1::from(coef.as_slice().to_vec())
        };
        let mut coef = solve(alpha, lambda);
        for _ in 0..300 {
            let resid = &yc - &xc.dot(&coef);
            let sse = resid.dot(&resid);
            let gamma: f64 = evals.iter().map(|e| alpha * e / (lambda + alpha * e)).sum();
            lambda = (gamma + 2.0 * Self::HYPER) / (coef.dot(&coef) + 2.0 * Self::HYPER);
            alpha = (n as f64 - gamma + 2.0 * Self::HYPER) / (sse + 2.0 * Self::HYPER);
            let next = solve(alpha, lambda);
            let change: f64 = (&next - &coef).iter().map(|v| v.abs()).sum();
            coef = next;
            if change < 1e-8 {
                break;
            }
        }
        Ok(BayesianRidge {
            intercept: ym - xm.dot(&coef),
            coef: coef.to_vec(),
            alpha,
            lambda,
        })
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Array1<f64> {
        x.dot(&ArrayView1::from(&self.coef)) + self.intercept
    }
}

/// Imputed target outcomes. Only source outcomes are ever read: the target
/// contributes covariates alone.
pub fn impute_pseudo_labels(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    target_x: ArrayView2<f64>,
    imputer: Imputer,
    seed: u64,
) -> Result<ImputeReport> {
    if x.nrows() == 0 || x.nrows() != y.len() {
        return Err(Error::Input("imputation needs a labeled, non-empty source".into()));
    }
    if x.ncols() != target_x.ncols() {
        return Err(Error::Input("source and target covariates differ in width".into()));
    }
    let mean = y.sum() / y.len() as f64;
    let mut values = Array1::from_elem(target_x.nrows(), mean);
    if imputer == Imputer::Mean || target_x.nrows() == 0 {
        return Ok(ImputeReport { values, rounds: 0 });
    }
    // The outcome is the only incomplete column, so each round regresses it
    // on the fully observed covariates of the labeled rows.
    let mut rounds = 0;
    for round in 0..imputer.rounds() {
        rounds = round + 1;
        let next = match imputer {
            Imputer::Mice => BayesianRidge::fit(x, y)?.predict(target_x),
            Imputer::Forest => {
                let forest = RegressionForest::fit(
                    x,
                    y,
                    &ForestHp::default(),
                    rng::derive_seed(seed, "impute.forest", round as u64),
                )?;
                Array1::from(forest.predict(target_x))
            }
            Imputer::Mean => unreachable!(),
        };
        let unchanged = next == values;
        values = next;
        if unchanged {
            break;
        }
    }
    Ok(ImputeReport { values, rounds })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r2(pred: &Array1<f64>, truth: &Array1<f64>) -> f64 {
        let m = truth.mean().unwrap();
        let ss: f64 = truth.iter().map(|t| (t - m).powi(2)).sum();
        1.0 - (pred - truth).mapv(|v| v * v).sum() / ss
    }

    #[test]
    fn mean_imputation_is_constant() {
        let x = ndarray::array![[0.0], [1.0], [2.0]];
        let y = ndarray::array![1.0, 2.0, 6.0];
        let r = impute_pseudo_labels(x.view(), y.view(), x.view(), Imputer::Mean, 0).unwrap();
        assert!(r.values.iter().all(|v| *v == 3.0));
    }

    #[test]
    fn mice_recovers_linear_outcome() {
        let mut g = rng::stream(1, "test", 0);
        let x = rng::normal_matrix(&mut g, 500, 4);
        let t = rng::normal_matrix(&mut g, 200, 4) + 0.5;
        let beta = ndarray::array![1.0, -2.0, 0.5, 3.0];
        let y = x.dot(&beta);
        let r = impute_pseudo_labels(x.view(), y.view(), t.view(), Imputer::Mice, 0).unwrap();
        assert!(r2(&r.values, &t.dot(&beta)) > 0.99);
        // Observed columns never change, so the chain settles immediately.
        assert_eq!(r.rounds, 2);
    }

    #[test]
    fn ridge_noise_precision_tracks_noise() {
        let mut g = rng::stream(2, "test", 0);
        let x = rng::normal_matrix(&mut g, 4000, 2);
        let e = rng::normal_matrix(&mut g, 4000, 1).column(0).to_owned() * 0.5;
        let y = x.column(0).to_owned() * 2.0 + e + 1.0;
        let br = BayesianRidge::fit(x.view(), y.view()).unwrap();
        assert!((br.alpha - 4.0).abs() < 0.4, "alpha {}", br.alpha);
        assert!((br.intercept - 1.0).abs() < 0.05);
    }

    #[test]
    fn forest_imputes_step() {
        let n = 400;
        let x = ndarray::Array2::from_shape_fn((n, 1), |(i, _)| i as f64 / n as f64);
        let y = x.column(0).mapv(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let t = ndarray::array![[0.1], [0.45], [0.55], [0.9]];
        let r = impute_pseudo_labels(x.view(), y.view(), t.view(), Imputer::Forest, 3).unwrap();
        assert!(r.values[0] < 0.05 && r.values[1] < 0.2);
        assert!(r.values[2] > 0.8 && r.values[3] > 0.95);
    }
}
