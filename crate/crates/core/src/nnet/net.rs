use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
    Sigmoid,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Identity => {}
            Activation::Sigmoid => z.mapv_inplace(sigmoid),
        }
    }

    /// Multiplies `grad` by the activation derivative, expressed through the
    /// activation's own output.
    fn backprop(self, out: &Array2<f64>, grad: &mut Array2<f64>) {
        match self {
            Activation::Relu => Zip::from(grad).and(out).for_each(|g, &y| {
                if y <= 0.0 {
                    *g = 0.0;
                }
            }),
            Activation::Identity => {}
            Activation::Sigmoid => Zip::from(grad).and(out).for_each(|g, &y| *g *= y * (1.0 - y)),
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out × in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

/// Dense feed-forward network.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    widths: Vec<usize>,
    layers: Vec<Layer>,
    seed: u64,
}

/// Cached activations from a forward pass, consumed by [`DenseNet::backward`].
pub struct Tape {
    /// `acts[0]` is the input; `acts[k + 1]` is the output of layer `k`.
    acts: Vec<Array2<f64>>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("tape holds at least the input")
    }
}

/// Gradient (or moment) buffers shaped like a network's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBuf {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl ParamBuf {
    pub fn zeros_like(net: &DenseNet) -> Self {
        ParamBuf {
            weights: net.layers.iter().map(|l| Array2::zeros(l.weight.raw_dim())).collect(),
            biases: net.layers.iter().map(|l| Array1::zeros(l.bias.raw_dim())).collect(),
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.weights.iter_mut().for_each(|w| w.fill(v));
        self.biases.iter_mut().for_each(|b| b.fill(v));
    }

    pub fn norm(&self) -> f64 {
        let w: f64 = self.weights.iter().map(|w| w.iter().map(|v| v * v).sum::<f64>()).sum();
        let b: f64 = self.biases.iter().map(|b| b.iter().map(|v| v * v).sum::<f64>()).sum();
        (w + b).sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.weights.iter_mut().for_each(|w| *w *= s);
        self.biases.iter_mut().for_each(|b| *b *= s);
    }

    pub fn add_assign(&mut self, other: &ParamBuf) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Flattened view in layer order, weights (row-major) before biases.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }
}

impl DenseNet {
    /// Builds a network with `widths.len() - 1` layers.
    ///
    /// Relu layers use He-uniform initialization, all others Glorot-uniform;
    /// biases start at zero. Parameters are a pure function of `seed`.
    pub fn new(widths: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!(
                "a network needs at least an input and an output width, got {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(Error::Config(format!("layer widths must be positive, got {widths:?}")));
        }
        if activations.len() != widths.len() - 1 {
            return Err(Error::Config(format!(
                "{} layers need {} activations, got {}",
                widths.len() - 1,
                widths.len() - 1,
                activations.len()
            )));
        }
        let mut rng = rng::stream(seed, "nnet.init", 0);
        let layers = widths
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = match activation {
                    Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                    _ => (6.0 / (fan_in + fan_out) as f64).sqrt(),
                };
                let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || rng.gen_range(-bound..bound));
                Layer {
                    weight,
                    bias: Array1::zeros(fan_out),
                    activation,
                }
            })
            .collect();
        Ok(DenseNet {
            widths: widths.to_vec(),
            layers,
            seed,
        })
    }

    /// Hidden layers with relu and the given output activation.
    pub fn mlp(input: usize, hidden: &[usize], output: usize, head: Activation, seed: u64) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(output);
        let mut acts = vec![Activation::Relu; hidden.len()];
        acts.push(head);
        Self::new(&widths, &acts, seed)
    }

    /// Assembles a network from explicit layers.
    pub fn from_layers(layers: Vec<Layer>, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        let mut widths = vec![layers[0].weight.ncols()];
        for (k, l) in layers.iter().enumerate() {
            if l.weight.ncols() != *widths.last().unwrap() || l.bias.len() != l.weight.nrows() {
                return Err(Error::Config(format!("layer {k} shape does not conform")));
            }
            widths.push(l.weight.nrows());
        }
        Ok(DenseNet { widths, layers, seed })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Input(format!(
                "expected {} input columns, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Input("non-finite value in network input".into()));
        }
        Ok(())
    }

    /// Batch forward pass, `b × d_in → b × d_out`.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = self.layer_forward(0, x);
        for k in 1..self.layers.len() {
            h = self.layer_forward(k, h.view());
        }
        h
    }

    fn layer_forward(&self, k: usize, h: ArrayView2<f64>) -> Array2<f64> {
        let l = &self.layers[k];
        let mut z = h.dot(&l.weight.t());
        z += &l.bias;
        l.activation.apply(&mut z);
        z
    }

    /// Forward pass that keeps what the backward pass needs.
    pub fn forward_tape(&self, x: ArrayView2<f64>) -> Result<Tape> {
        self.check_input(&x)?;
        Ok(self.forward_tape_unchecked(x))
    }

    pub(crate) fn forward_tape_unchecked(&self, x: ArrayView2<f64>) -> Tape {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_owned());
        for k in 0..self.layers.len() {
            let z = self.layer_forward(k, acts[k].view());
            acts.push(z);
        }
        Tape { acts }
    }

    /// Reverse-mode pass.
    ///
    /// `dout` is the gradient of a scalar with respect to the network output.
    /// Parameter gradients are accumulated into `grads` when given; the
    /// gradient with respect to the input is returned when `want_input` is set.
    pub fn backward(
        &self,
        tape: &Tape,
        dout: &Array2<f64>,
        mut grads: Option<&mut ParamBuf>,
        want_input: bool,
    ) -> Option<Array2<f64>> {
        let mut delta = dout.clone();
        for k in (0..self.layers.len()).rev() {
            let l = &self.layers[k];
            l.activation.backprop(&tape.acts[k + 1], &mut delta);
            if let Some(g) = grads.as_deref_mut() {
                g.weights[k] += &delta.t().dot(&tape.acts[k]);
                g.biases[k] += &delta.sum_axis(Axis(0));
            }
            if k > 0 || want_input {
                delta = delta.dot(&l.weight);
            }
        }
        want_input.then_some(delta)
    }

    /// Mutable access to the `idx`-th parameter in [`ParamBuf::flat`] order.
    pub(crate) fn param_mut(&mut self, mut idx: usize) -> &mut f64 {
        for l in self.layers.iter_mut() {
            if idx < l.weight.len() {
                return l.weight.as_slice_mut().expect("standard layout").get_mut(idx).unwrap();
            }
            idx -= l.weight.len();
            if idx < l.bias.len() {
                return &mut l.bias[idx];
            }
            idx -= l.bias.len();
        }
        panic!("parameter index out of range");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn shapes_conform() {
        let net = DenseNet::mlp(19, &[128, 128], 1, Activation::Sigmoid, 3).unwrap();
        assert_eq!(net.widths(), &[19, 128, 128, 1]);
        for (k, l) in net.layers().iter().enumerate() {
            assert_eq!(l.weight.dim(), (net.widths()[k + 1], net.widths()[k]));
        }
        let x = Array2::from_shape_fn((7, 19), |(i, j)| (i as f64 - j as f64) * 0.3);
        let y = net.forward(x.view()).unwrap();
        assert_eq!(y.dim(), (7, 1));
        assert!(y.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(DenseNet::new(&[3], &[], 0).is_err());
        assert!(DenseNet::new(&[3, 0, 1], &[Activation::Relu, Activation::Identity], 0).is_err());
        assert!(DenseNet::new(&[3, 2, 1], &[Activation::Relu], 0).is_err());
    }

    #[test]
    fn affine_net_and_determinism() {
        let a = DenseNet::new(&[2, 1], &[Activation::Identity], 0).unwrap();
        let b = DenseNet::new(&[2, 1], &[Activation::Identity], 0).unwrap();
        assert_eq!(a, b);
        let x = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let y = a.forward(x.view()).unwrap();
        // affine: f(e1) + f(e2) = f(e1 + e2) when the bias is zero
        assert!((y[[0, 0]] + y[[1, 0]] - y[[2, 0]]).abs() < 1e-15);
    }

    #[test]
    fn identity_and_relu_kink() {
        let ident = Layer {
            weight: Array2::eye(3),
            bias: Array1::zeros(3),
            activation: Activation::Identity,
        };
        let net = DenseNet::from_layers(vec![ident], 0).unwrap();
        let x = array![[0.5, -2.0, 3.0]];
        assert_eq!(net.forward(x.view()).unwrap(), x);

        let relu = Layer {
            weight: array![[1.0]],
            bias: array![-1.0],
            activation: Activation::Relu,
        };
        let net = DenseNet::from_layers(vec![relu], 0).unwrap();
        assert_eq!(net.forward(array![[0.5]].view()).unwrap()[[0, 0]], 0.0);
    }

    #[test]
    fn non_finite_input_rejected() {
        let net = DenseNet::new(&[2, 1], &[Activation::Identity], 0).unwrap();
        assert!(matches!(
            net.forward(array![[f64::NAN, 0.0]].view()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn forward_is_pure() {
        let net = DenseNet::mlp(4, &[8], 2, Activation::Identity, 11).unwrap();
        let x = Array2::from_shape_fn((5, 4), |(i, j)| (i * j) as f64 * 0.1 - 0.4);
        let y1 = net.forward(x.view()).unwrap();
        let y2 = net.forward(x.view()).unwrap();
        assert_eq!(y1, y2);
    }
}
