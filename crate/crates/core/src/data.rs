//! Source and target datasets.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Regression,
    Binary,
}

/// Labeled rows `(X, A, Y)`, optionally carrying the noiseless conditional
/// mean for evaluation sets.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub x: Array2<f64>,
    pub a: Array2<f64>,
    pub y: Array1<f64>,
    pub fbar: Option<Array1<f64>>,
}

/// Target rows: only the stable covariates are observed.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSet {
    pub x: Array2<f64>,
}

fn check_finite(name: &str, it: impl IntoIterator<Item = f64>) -> Result<()> {
    if it.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::Input(format!("non-finite value in {name}")))
    }
}

impl LabeledSet {
    pub fn new(x: Array2<f64>, a: Array2<f64>, y: Array1<f64>) -> Result<Self> {
        let s = LabeledSet { x, a, y, fbar: None };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x.nrows();
        if self.a.nrows() != n || self.y.len() != n {
            return Err(Error::Input(format!(
                "row counts disagree: x {n}, a {}, y {}",
                self.a.nrows(),
                self.y.len()
            )));
        }
        if let Some(f) = &self.fbar {
            if f.len() != n {
                return Err(Error::Input("fbar length disagrees with row count".into()));
            }
            check_finite("fbar", f.iter().copied())?;
        }
        check_finite("x", self.x.iter().copied())?;
        check_finite("a", self.a.iter().copied())?;
        check_finite("y", self.y.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_x(&self) -> usize {
        self.x.ncols()
    }

    pub fn d_a(&self) -> usize {
        self.a.ncols()
    }

    /// `[X | A]`, the outcome model's input.
    pub fn xa(&self) -> Array2<f64> {
        concat_cols(self.x.view(), self.a.view())
    }

    pub fn y_column(&self) -> Array2<f64> {
        self.y.clone().insert_axis(Axis(1))
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet {
            x: self.x.select(Axis(0), idx),
            a: self.a.select(Axis(0), idx),
            y: self.y.select(Axis(0), idx),
            fbar: self.fbar.as_ref().map(|f| f.select(Axis(0), idx)),
        }
    }

    /// Sample variance (denominator `n − 1`) of the outcome.
    pub fn outcome_variance(&self) -> f64 {
        sample_variance(self.y.as_slice().expect("contiguous"))
    }
}

impl UnlabeledSet {
    pub fn new(x: Array2<f64>) -> Result<Self> {
        check_finite("x", x.iter().copied())?;
        Ok(UnlabeledSet { x })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_x(&self) -> usize {
        self.x.ncols()
    }

    pub fn subset(&self, idx: &[usize]) -> UnlabeledSet {
        UnlabeledSet {
            x: self.x.select(Axis(0), idx),
        }
    }
}

pub fn concat_cols(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    assert_eq!(a.nrows(), b.nrows(), "row counts agree");
    let mut out = Array2::zeros((a.nrows(), a.ncols() + b.ncols()));
    out.slice_mut(s![.., ..a.ncols()]).assign(&a);
    out.slice_mut(s![.., a.ncols()..]).assign(&b);
    out
}

pub fn sample_variance(v: &[f64]) -> f64 {
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}
