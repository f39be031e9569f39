use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{concat_cols, LabeledSet, Task};
use crate::error::{Error, Result};
use crate::nnet::{self, Activation, DenseNet, Objective, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutcomeHp {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for OutcomeHp {
    fn default() -> Self {
        OutcomeHp {
            hidden: vec![128, 128],
            train: TrainConfig::new(1e-5, 100),
        }
    }
}

/// Fitted conditional mean `f̂(x, a)`; a probability for binary outcomes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub net: DenseNet,
    pub d_x: usize,
    pub d_a: usize,
    pub task: Task,
    #[serde(default)]
    pub history: Vec<f64>,
}

impl OutcomeModel {
    pub fn from_net(net: DenseNet, d_x: usize, d_a: usize, task: Task) -> Result<Self> {
        if net.input_dim() != d_x + d_a || net.output_dim() != 1 {
            return Err(Error::Config(format!(
                "outcome network must map {} inputs to 1 output, has widths {:?}",
                d_x + d_a,
                net.widths()
            )));
        }
        Ok(OutcomeModel {
            net,
            d_x,
            d_a,
            task,
            history: Vec::new(),
        })
    }

    /// `f̂` on `[X | A]` rows.
    pub fn predict_xa(&self, xa: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.net.forward(xa)?.column(0).to_owned())
    }

    pub fn predict(&self, x: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<Array1<f64>> {
        if x.ncols() != self.d_x || a.ncols() != self.d_a {
            return Err(Error::Input(format!(
                "outcome model expects {} + {} columns, got {} + {}",
                self.d_x,
                self.d_a,
                x.ncols(),
                a.ncols()
            )));
        }
        self.predict_xa(concat_cols(x, a).view())
    }

    /// `Y − f̂(X, A)` on a labeled set.
    pub fn residuals(&self, set: &LabeledSet) -> Result<Array1<f64>> {
        Ok(&set.y - &self.predict(set.x.view(), set.a.view())?)
    }
}

/// Fits `f̂` by mini-batch Adam: mse for regression, bce for binary outcomes.
pub fn fit_outcome_model(source: &LabeledSet, task: Task, hp: &OutcomeHp, seed: u64) -> Result<OutcomeModel> {
    source.validate()?;
    if source.d_a() == 0 {
        return Err(Error::Input("source data carry no missing-covariate columns".into()));
    }
    let head = match task {
        Task::Regression => Activation::Identity,
        Task::Binary => Activation::Sigmoid,
    };
    let (d_x, d_a) = (source.d_x(), source.d_a());
    let mut net = DenseNet::mlp(d_x + d_a, &hp.hidden, 1, head, seed)?;
    let objective = match task {
        Task::Regression => Objective::Mse,
        Task::Binary => Objective::Bce,
    };
    let xa = source.xa();
    let y: Array2<f64> = source.y_column();
    let history = nnet::fit(
        &mut net,
        xa.view(),
        y.view(),
        objective,
        &hp.train,
        seed,
        "outcome.batches",
    )?;
    Ok(OutcomeModel {
        net,
        d_x,
        d_a,
        task,
        history,
    })
}
