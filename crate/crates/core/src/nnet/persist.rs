//! On-disk network format.
//!
//! ```json
//! {
//!   "format": "drum-densenet",
//!   "version": 1,
//!   "widths": [19, 128, 128, 1],
//!   "activations": ["relu", "relu", "sigmoid"],
//!   "seed": 0,
//!   "weights": [[...], ...],   // per layer, row-major out × in
//!   "biases": [[...], ...]
//! }
//! ```
//!
//! Readers accept any version ≤ the current one.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::net::{Activation, DenseNet, Layer};
use crate::error::Error;

pub const NET_FORMAT: &str = "drum-densenet";
pub const NET_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetFile {
    pub format: String,
    pub version: u32,
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
    pub seed: u64,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl From<&DenseNet> for NetFile {
    fn from(net: &DenseNet) -> Self {
        NetFile {
            format: NET_FORMAT.into(),
            version: NET_VERSION,
            widths: net.widths().to_vec(),
            activations: net.activations(),
            seed: net.seed(),
            weights: net
                .layers()
                .iter()
                .map(|l| l.weight.iter().copied().collect())
                .collect(),
            biases: net.layers().iter().map(|l| l.bias.to_vec()).collect(),
        }
    }
}

impl TryFrom<NetFile> for DenseNet {
    type Error = Error;

    fn try_from(f: NetFile) -> Result<Self, Error> {
        if f.format != NET_FORMAT || f.version > NET_VERSION {
            return Err(Error::Config(format!(
                "unsupported network format {} v{}",
                f.format, f.version
            )));
        }
        let n = f.widths.len().saturating_sub(1);
        if n == 0 || f.activations.len() != n || f.weights.len() != n || f.biases.len() != n {
            return Err(Error::Config("network file layer count mismatch".into()));
        }
        let layers = (0..n)
            .map(|k| {
                let (i, o) = (f.widths[k], f.widths[k + 1]);
                let weight = Array2::from_shape_vec((o, i), f.weights[k].clone())
                    .map_err(|_| Error::Config(format!("layer {k} weight size mismatch")))?;
                if f.biases[k].len() != o {
                    return Err(Error::Config(format!("layer {k} bias size mismatch")));
                }
                Ok(Layer {
                    weight,
                    bias: Array1::from(f.biases[k].clone()),
                    activation: f.activations[k],
                })
            })
            .collect::<Result<Vec<_>, Error>>()?;
        DenseNet::from_layers(layers, f.seed)
    }
}

impl Serialize for DenseNet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        NetFile::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for DenseNet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let f = NetFile::deserialize(d)?;
        DenseNet::try_from(f).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_is_exact() {
        let net = DenseNet::mlp(5, &[7, 3], 2, Activation::Sigmoid, 42).unwrap();
        let s = serde_json::to_string(&net).unwrap();
        let back: DenseNet = serde_json::from_str(&s).unwrap();
        assert_eq!(net, back);
    }

    #[test]
    fn rejects_future_versions() {
        let net = DenseNet::mlp(2, &[], 1, Activation::Identity, 0).unwrap();
        let mut f = NetFile::from(&net);
        f.version = NET_VERSION + 1;
        assert!(DenseNet::try_from(f).is_err());
    }
}
