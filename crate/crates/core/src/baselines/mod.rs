//! Comparison methods that regress `Y` on `X` alone: plain and χ²-robust
//! training, two importance-weighting schemes, and pseudo-label pooling.

mod classifier;
mod dro;
mod forest;
mod impute;
mod kmm;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{Error, Result};
use crate::nnet::{apply_step, Activation, AdamState, DenseNet, ParamBuf, TrainConfig};
use crate::rng;

pub use classifier::{classifier_weights, LogisticFit};
pub use dro::{chisq_robust_loss, ChiSqValue};
pub use forest::{ForestHp, RegressionForest, RegressionTree};
pub use impute::{impute_pseudo_labels, BayesianRidge, ImputeReport, Imputer};
pub use kmm::{kmm_solve, kmm_weights, median_bandwidth, project_box_slab, KmmOptions, KmmSolution};

/// Network and schedule of an `X`-only model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetHp {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for NetHp {
    fn default() -> Self {
        NetHp {
            hidden: vec![128, 128],
            train: TrainConfig::new(1e-3, 20),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Trainer {
    Erm,
    ChisqDro { rho: f64 },
}

/// Per-example importance weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub w: Vec<f64>,
    pub ess: f64,
    pub method: String,
    /// Set when the estimator hit a degenerate case it recovered from.
    #[serde(default)]
    pub warning: Option<String>,
}

impl WeightVector {
    pub fn new(w: Vec<f64>, method: &str) -> Result<Self> {
        let ess = ess(&w)?;
        Ok(WeightVector {
            w,
            ess,
            method: method.into(),
            warning: None,
        })
    }
}

/// Effective sample size `(Σw)² / Σw²`.
pub fn ess(w: &[f64]) -> Result<f64> {
    if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Input("weights must be finite and non-negative".into()));
    }
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|v| v * v).sum();
    if s2 == 0.0 {
        return Err(Error::Input("effective sample size of all-zero weights".into()));
    }
    Ok(s * s / s2)
}

/// Mean training objective per epoch, next to the plain mean loss on the
/// same batches.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub objective: f64,
    pub mean_loss: f64,
}

/// A fitted `X`-only network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub net: DenseNet,
    pub task: Task,
    pub trainer: Trainer,
    pub weighting: Option<WeightVector>,
    pub imputer: Option<Imputer>,
    pub history: Vec<EpochLoss>,
}

impl BaselineModel {
    pub fn d_x(&self) -> usize {
        self.net.input_dim()
    }

    /// Predictions on `X` rows; rows of any other width (such as `[X | A]`)
    /// are a schema error.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        if x.ncols() != self.d_x() {
            return Err(Error::Input(format!(
                "baseline expects {} covariate columns, got {}",
                self.d_x(),
                x.ncols()
            )));
        }
        Ok(self.net.forward(x)?.column(0).to_owned())
    }
}

/// Per-example loss and its derivative in the network output.
fn example_loss(task: Task, out: f64, y: f64) -> (f64, f64) {
    match task {
        Task::Regression => {
            let d = out - y;
            (d * d, 2.0 * d)
        }
        Task::Binary => {
            let p = out.clamp(1e-12, 1.0 - 1e-12);
            let loss = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            (loss, (out - y) / (out * (1.0 - out)).max(1e-300))
        }
    }
}

fn check_xy(x: ArrayView2<f64>, y: ArrayView1<f64>, task: Task) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::Input(format!(
            "{} covariate rows but {} outcomes",
            x.nrows(),
            y.len()
        )));
    }
    if x.nrows() == 0 {
        return Err(Error::Input("cannot train on an empty dataset".into()));
    }
    if task == Task::Binary && y.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Input("binary outcomes must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Shared trainer of every baseline. Each epoch draws its permutation from
/// the `(seed, "baseline.batches", epoch)` stream.
pub fn train_x_model(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    task: Task,
    weights: Option<&[f64]>,
    trainer: Trainer,
    hp: &NetHp,
    seed: u64,
) -> Result<(DenseNet, Vec<EpochLoss>)> {
    check_xy(x, y, task)?;
    hp.train.validate()?;
    if let Some(w) = weights {
        if w.len() != x.nrows() {
            return Err(Error::Input(format!("{} weights for {} rows", w.len(), x.nrows())));
        }
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Input("weights must be finite and non-negative".into()));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(Error::Config("all training weights are zero".into()));
        }
    }
    if let Trainer::ChisqDro { rho } = trainer {
        if !(rho >= 0.0) {
            return Err(Error::Config(format!("χ² radius must be non-negative, got {rho}")));
        }
    }
    let head = match task {
        Task::Regression => Activation::Identity,
        Task::Binary => Activation::Sigmoid,
    };
    let mut net = DenseNet::mlp(x.ncols(), &hp.hidden, 1, head, seed)?;
    let mut opt = AdamState::new(&net, hp.train.lr, hp.train.weight_decay);
    let n = x.nrows();
    let mut history = Vec::with_capacity(hp.train.epochs);
    for epoch in 0..hp.train.epochs {
        let order = rng::permutation(&mut rng::stream(seed, "baseline.batches", epoch as u64), n);
        let (mut obj_sum, mut loss_sum) = (0.0, 0.0);
        for chunk in order.chunks(hp.train.batch_size) {
            let xb = x.select(Axis(0), chunk);
            let tape = net.forward_tape(xb.view())?;
            let b = chunk.len() as f64;
            let (losses, dl): (Vec<f64>, Vec<f64>) = tape
                .output()
                .column(0)
                .iter()
                .zip(chunk)
                .map(|(&o, &i)| example_loss(task, o, y[i]))
                .unzip();
            let mean_loss = losses.iter().sum::<f64>() / b;
            let (value, coef) = match trainer {
                Trainer::Erm => {
                    let coef: Vec<f64> = chunk.iter().map(|&i| weights.map_or(1.0, |w| w[i]) / b).collect();
                    (losses.iter().zip(&coef).map(|(l, c)| l * c).sum(), coef)
                }
                Trainer::ChisqDro { rho } => {
                    let r = chisq_robust_loss(&losses, rho);
                    (r.value, r.weights)
                }
            };
            let dout = Array2::from_shape_fn((chunk.len(), 1), |(i, _)| coef[i] * dl[i]);
            let mut grads = ParamBuf::zeros_like(&net);
            net.backward(&tape, &dout, Some(&mut grads), false);
            apply_step(&mut net, &mut opt, grads, hp.train.clip, value)?;
            obj_sum += value * b;
            loss_sum += mean_loss * b;
        }
        history.push(EpochLoss {
            objective: obj_sum / n as f64,
            mean_loss: loss_sum / n as f64,
        });
    }
    Ok((net, history))
}

#[allow(clippy::too_many_arguments)]
fn model(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    task: Task,
    weighting: Option<WeightVector>,
    imputer: Option<Imputer>,
    trainer: Trainer,
    hp: &NetHp,
    seed: u64,
) -> Result<BaselineModel> {
    let (net, history) = train_x_model(
        x,
        y,
        task,
        weighting.as_ref().map(|w| w.w.as_slice()),
        trainer,
        hp,
        seed,
    )?;
    Ok(BaselineModel {
        net,
        task,
        trainer,
        weighting,
        imputer,
        history,
    })
}

/// Empirical risk minimization of `Y` on `X`.
pub fn fit_erm(x: ArrayView2<f64>, y: ArrayView1<f64>, task: Task, hp: &NetHp, seed: u64) -> Result<BaselineModel> {
    model(x, y, task, None, None, Trainer::Erm, hp, seed)
}

/// Training on the χ²-ball robust loss of each mini-batch.
pub fn fit_chisq_dro(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    task: Task,
    rho: f64,
    hp: &NetHp,
    seed: u64,
) -> Result<BaselineModel> {
    model(x, y, task, None, None, Trainer::ChisqDro { rho }, hp, seed)
}

/// Importance-weighted risk minimization.
pub fn fit_weighted_erm(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    task: Task,
    w: WeightVector,
    hp: &NetHp,
    seed: u64,
) -> Result<BaselineModel> {
    model(x, y, task, Some(w), None, Trainer::Erm, hp, seed)
}

/// Pools the source with imputed target outcomes and trains on the union.
#[allow(clippy::too_many_arguments)]
pub fn fit_pseudolabel(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    target_x: ArrayView2<f64>,
    task: Task,
    imputer: Imputer,
    trainer: Trainer,
    hp: &NetHp,
    seed: u64,
) -> Result<BaselineModel> {
    check_xy(x, y, task)?;
    if target_x.ncols() != x.ncols() {
        return Err(Error::Input("source and target covariates differ in width".into()));
    }
    let report = impute_pseudo_labels(x, y, target_x, imputer, rng::derive_seed(seed, "baseline.impute", 0))?;
    let mut imputed = report.values;
    if task == Task::Binary {
        imputed.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
    let px = ndarray::concatenate(Axis(0), &[x.reborrow(), target_x.reborrow()]).expect("equal widths");
    let py = ndarray::concatenate(Axis(0), &[y.reborrow(), imputed.view()]).expect("vectors");
    model(px.view(), py.view(), task, None, Some(imputer), trainer, hp, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    fn linear_data(n: usize, seed: u64) -> (Array2<f64>, Array1<f64>) {
        let mut r = rng::stream(seed, "test", 0);
        let x = rng::normal_matrix(&mut r, n, 2);
        let y = x.column(0).to_owned() * 3.0;
        (x, y)
    }

    fn mse(m: &BaselineModel, x: &Array2<f64>, y: &Array1<f64>) -> f64 {
        let p = m.predict(x.view()).unwrap();
        (&p - y).mapv(|v| v * v).mean().unwrap()
    }

    fn hp(epochs: usize) -> NetHp {
        NetHp {
            hidden: vec![32, 32],
            train: TrainConfig::new(3e-3, epochs),
        }
    }

    #[test]
    fn ess_examples() {
        assert_eq!(ess(&[1.0; 50]).unwrap(), 50.0);
        assert_eq!(ess(&[0.0, 3.0, 0.0]).unwrap(), 1.0);
        assert!((ess(&[1.0, 1.0, 2.0]).unwrap() - 16.0 / 6.0).abs() < 1e-12);
        assert!(ess(&[0.0, 0.0]).is_err());
        assert!(ess(&[1.0, -1.0]).is_err());
    }

    #[test]
    fn erm_learns_linear_outcome() {
        let (x, y) = linear_data(2000, 1);
        let (xt, yt) = linear_data(500, 2);
        let m = fit_erm(x.view(), y.view(), Task::Regression, &hp(60), 7).unwrap();
        assert!(mse(&m, &xt, &yt) < 0.01, "mse {}", mse(&m, &xt, &yt));
    }

    #[test]
    fn constant_outcome_gives_constant_prediction() {
        let (x, _) = linear_data(2000, 3);
        let y = Array1::from_elem(2000, 2.0);
        let h = hp(100);
        let m = fit_erm(x.view(), y.view(), Task::Regression, &h, 7).unwrap();
        let p = m.predict(x.view()).unwrap();
        let rms = (p.mapv(|v| (v - 2.0).powi(2)).mean().unwrap()).sqrt();
        assert!(rms < 0.05, "rms deviation {rms}");
    }

    #[test]
    fn unit_weights_reproduce_erm() {
        let (x, y) = linear_data(300, 4);
        let erm = fit_erm(x.view(), y.view(), Task::Regression, &hp(3), 9).unwrap();
        let w = WeightVector::new(vec![1.0; 300], "unit").unwrap();
        let iw = fit_weighted_erm(x.view(), y.view(), Task::Regression, w, &hp(3), 9).unwrap();
        assert_eq!(erm.net, iw.net);
        assert_eq!(erm.history, iw.history);
    }

    #[test]
    fn invalid_weights_are_rejected() {
        let (x, y) = linear_data(10, 5);
        let mut w = vec![1.0; 10];
        w[3] = -0.5;
        assert!(train_x_model(x.view(), y.view(), Task::Regression, Some(&w), Trainer::Erm, &hp(1), 0).is_err());
        let zero = vec![0.0; 10];
        assert!(matches!(
            train_x_model(
                x.view(),
                y.view(),
                Task::Regression,
                Some(&zero),
                Trainer::Erm,
                &hp(1),
                0
            ),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn robust_objective_dominates_mean_loss() {
        let (x, y) = linear_data(500, 6);
        let m = fit_chisq_dro(x.view(), y.view(), Task::Regression, 0.5, &hp(5), 1).unwrap();
        for e in &m.history {
            assert!(e.objective >= e.mean_loss - 1e-12);
        }
    }

    #[test]
    fn small_radius_tracks_erm() {
        let (x, y) = linear_data(1500, 7);
        let (xt, yt) = linear_data(500, 8);
        let erm = fit_erm(x.view(), y.view(), Task::Regression, &hp(30), 2).unwrap();
        let dro = fit_chisq_dro(x.view(), y.view(), Task::Regression, 1e-6, &hp(30), 2).unwrap();
        let (a, b) = (mse(&erm, &xt, &yt), mse(&dro, &xt, &yt));
        assert!((a - b).abs() <= 0.1 * a.max(b) + 1e-3, "erm {a} dro {b}");
    }

    #[test]
    fn predict_rejects_wider_rows() {
        let (x, y) = linear_data(50, 9);
        let m = fit_erm(x.view(), y.view(), Task::Regression, &hp(1), 0).unwrap();
        let xa = array![[0.0, 1.0, 2.0]];
        assert!(matches!(m.predict(xa.view()), Err(Error::Input(_))));
    }

    #[test]
    fn empty_target_pseudolabel_is_plain_erm() {
        let (x, y) = linear_data(200, 10);
        let none = Array2::<f64>::zeros((0, 2));
        let erm = fit_erm(x.view(), y.view(), Task::Regression, &hp(2), 4).unwrap();
        let pl = fit_pseudolabel(
            x.view(),
            y.view(),
            none.view(),
            Task::Regression,
            Imputer::Mice,
            Trainer::Erm,
            &hp(2),
            4,
        )
        .unwrap();
        assert_eq!(erm.net, pl.net);
    }

    #[test]
    fn binary_training_stays_in_unit_interval() {
        let (x, y) = linear_data(400, 11);
        let yb = y.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let m = fit_chisq_dro(x.view(), yb.view(), Task::Binary, 0.25, &hp(10), 3).unwrap();
        let p = m.predict(x.view()).unwrap();
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        let acc = p.iter().zip(&yb).filter(|(p, y)| (**p > 0.5) == (**y > 0.5)).count();
        assert!(acc as f64 > 0.9 * 400.0);
    }
}
