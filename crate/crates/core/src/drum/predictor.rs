use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::generator::{Generator, GeneratorKind};
use super::outcome::OutcomeModel;
use super::worstcase::repeat_rows;
use crate::data::{concat_cols, UnlabeledSet};
use crate::error::{Error, Result};
use crate::rng;

/// Rows per parallel prediction block; bounds the `rows × L` scratch matrix.
const BLOCK_ROWS: usize = 64;

/// `m̂(x) = (1/L) Σ_l f̂(x, g(x, ε_l))` over one shared panel `ε_1..ε_L`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustPredictor {
    pub outcome: OutcomeModel,
    pub generator: Generator,
    pub mc_samples: usize,
    pub prediction_seed: u64,
}

impl RobustPredictor {
    pub fn new(outcome: OutcomeModel, generator: Generator, mc_samples: usize, prediction_seed: u64) -> Result<Self> {
        if mc_samples == 0 {
            return Err(Error::Config("Monte-Carlo sample count must be at least 1".into()));
        }
        if outcome.d_x != generator.d_x || outcome.d_a != generator.d_a {
            return Err(Error::Config(
                "outcome model and generator disagree on dimensions".into(),
            ));
        }
        Ok(RobustPredictor {
            outcome,
            generator,
            mc_samples,
            prediction_seed,
        })
    }

    /// The shared noise panel, `L × q`.
    pub fn panel(&self) -> Array2<f64> {
        let mut r = rng::stream(self.prediction_seed, "predict.panel", 0);
        rng::normal_matrix(&mut r, self.mc_samples, self.generator.latent_dim)
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        if x.ncols() != self.outcome.d_x {
            return Err(Error::Input(format!(
                "expected {} covariate columns, got {}",
                self.outcome.d_x,
                x.ncols()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite covariate value".into()));
        }
        let panel = self.panel();
        let l = self.mc_samples;
        match self.generator.kind {
            GeneratorKind::Unconstrained => {
                // One panel of A draws serves every row.
                let a = self.generator.sample(None, panel.view())?;
                let blocks: Vec<Array1<f64>> = x
                    .axis_chunks_iter(Axis(0), BLOCK_ROWS)
                    .collect::<Vec<_>>()
                    .into_par_iter()
                    .map(|xb| {
                        let a_rep = tile(a.view(), xb.nrows());
                        self.mc_means(xb, a_rep.view(), l)
                    })
                    .collect::<Result<_>>()?;
                Ok(concat(blocks))
            }
            GeneratorKind::Conditional => {
                let blocks: Vec<Array1<f64>> = x
                    .axis_chunks_iter(Axis(0), BLOCK_ROWS)
                    .collect::<Vec<_>>()
                    .into_par_iter()
                    .map(|xb| {
                        let x_rep = repeat_rows(xb, l);
                        let eps = tile(panel.view(), xb.nrows());
                        let a = self.generator.sample(Some(x_rep.view()), eps.view())?;
                        self.mc_means(xb, a.view(), l)
                    })
                    .collect::<Result<_>>()?;
                Ok(concat(blocks))
            }
        }
    }

    fn mc_means(&self, xb: ArrayView2<f64>, a: ArrayView2<f64>, l: usize) -> Result<Array1<f64>> {
        let x_rep = repeat_rows(xb, l);
        let f = self.outcome.predict_xa(concat_cols(x_rep.view(), a).view())?;
        Ok(f.exact_chunks(l).into_iter().map(|c| c.sum() / l as f64).collect())
    }
}

/// Stacks `times` copies of `m` vertically.
fn tile(m: ArrayView2<f64>, times: usize) -> Array2<f64> {
    let views: Vec<_> = (0..times).map(|_| m).collect();
    ndarray::concatenate(Axis(0), &views).expect("equal widths")
}

fn concat(blocks: Vec<Array1<f64>>) -> Array1<f64> {
    blocks.into_iter().flatten().collect()
}

/// Empirical robust objective `(1/N) Σ_j m̂(X_j)²` on the full target set.
pub fn robust_value(predictor: &RobustPredictor, target: &UnlabeledSet) -> Result<f64> {
    if target.is_empty() {
        return Err(Error::Input("target set is empty".into()));
    }
    let m = predictor.predict(target.x.view())?;
    Ok(m.iter().map(|v| v * v).sum::<f64>() / m.len() as f64)
}
