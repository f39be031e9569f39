use ndarray::Zip;

use super::net::{DenseNet, ParamBuf};

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: ParamBuf,
    v: ParamBuf,
}

impl AdamState {
    pub fn new(net: &DenseNet, lr: f64, weight_decay: f64) -> Self {
        AdamState {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: ParamBuf::zeros_like(net),
            v: ParamBuf::zeros_like(net),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn matches(&self, net: &DenseNet) -> bool {
        self.m.weights.len() == net.layers().len()
            && self
                .m
                .weights
                .iter()
                .zip(net.layers())
                .all(|(m, l)| m.dim() == l.weight.dim())
    }

    /// One update of `net` along `grads`.
    pub fn update(&mut self, net: &mut DenseNet, grads: &ParamBuf) {
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (lr, wd) = (self.lr, self.weight_decay);
        let apply = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let s = (*m / c1) / ((*v / c2).sqrt() + eps);
            *p -= lr * (s + wd * *p);
        };
        for (k, layer) in net.layers_mut().iter_mut().enumerate() {
            Zip::from(&mut layer.weight)
                .and(&mut self.m.weights[k])
                .and(&mut self.v.weights[k])
                .and(&grads.weights[k])
                .for_each(|p, m, v, &g| apply(p, m, v, g));
            Zip::from(&mut layer.bias)
                .and(&mut self.m.biases[k])
                .and(&mut self.v.biases[k])
                .and(&grads.biases[k])
                .for_each(|p, m, v, &g| apply(p, m, v, g));
        }
    }
}

/// Rescales `grads` so its global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamBuf, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}
