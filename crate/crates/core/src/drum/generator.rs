use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::concat_cols;
use crate::error::{Error, Result};
use crate::nnet::{Activation, DenseNet, ParamBuf, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    /// `g(ε)`: the generated `A` cannot depend on `X`.
    Unconstrained,
    /// `g(x, ε)`.
    Conditional,
}

/// Noise-to-`A` map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub kind: GeneratorKind,
    pub net: DenseNet,
    pub latent_dim: usize,
    pub d_x: usize,
    pub d_a: usize,
}

impl Generator {
    pub fn new(
        kind: GeneratorKind,
        d_x: usize,
        d_a: usize,
        latent_dim: usize,
        hidden: &[usize],
        seed: u64,
    ) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::Config("latent dimension must be at least 1".into()));
        }
        let input = match kind {
            GeneratorKind::Unconstrained => latent_dim,
            GeneratorKind::Conditional => d_x + latent_dim,
        };
        let net = DenseNet::mlp(input, hidden, d_a, Activation::Identity, seed)?;
        Ok(Generator {
            kind,
            net,
            latent_dim,
            d_x,
            d_a,
        })
    }

    /// Network input for rows `(x_r, ε_r)`; `x` is ignored by unconstrained
    /// generators and may be `None` for them.
    pub fn input(&self, x: Option<ArrayView2<f64>>, eps: ArrayView2<f64>) -> Result<Array2<f64>> {
        if eps.ncols() != self.latent_dim {
            return Err(Error::Input(format!(
                "expected {} latent columns, got {}",
                self.latent_dim,
                eps.ncols()
            )));
        }
        match self.kind {
            GeneratorKind::Unconstrained => Ok(eps.to_owned()),
            GeneratorKind::Conditional => {
                let x = x.ok_or_else(|| Error::Input("conditional generator needs x".into()))?;
                if x.nrows() != eps.nrows() || x.ncols() != self.d_x {
                    return Err(Error::Input(format!(
                        "x has shape {:?}, expected ({}, {})",
                        x.dim(),
                        eps.nrows(),
                        self.d_x
                    )));
                }
                Ok(concat_cols(x, eps))
            }
        }
    }

    pub fn sample(&self, x: Option<ArrayView2<f64>>, eps: ArrayView2<f64>) -> Result<Array2<f64>> {
        let input = self.input(x, eps)?;
        self.net.forward(input.view())
    }

    pub(crate) fn sample_tape(&self, x: Option<ArrayView2<f64>>, eps: ArrayView2<f64>) -> Result<Tape> {
        let input = self.input(x, eps)?;
        self.net.forward_tape(input.view())
    }

    /// Accumulates parameter gradients given `∂loss/∂A` for a taped batch.
    pub(crate) fn backprop(&self, tape: &Tape, d_a: &Array2<f64>, grads: &mut ParamBuf) {
        self.net.backward(tape, d_a, Some(grads), false);
    }
}
