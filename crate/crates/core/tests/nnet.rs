use drum_core::nnet::{clip_grad_norm, grad_check, train_step, Activation, AdamState, DenseNet, LossKind, ParamBuf};
use drum_core::rng;
use ndarray::{Array1, Array2, ArrayView2};
use proptest::prelude::*;
use rand::Rng;

fn random_inputs(seed: u64, rows: usize, cols: usize) -> Array2<f64> {
    rng::normal_matrix(&mut rng::stream(seed, "test.inputs", 0), rows, cols)
}

fn random_net(seed: u64, head: Activation) -> DenseNet {
    let mut r = rng::stream(seed, "test.shape", 0);
    let input = r.gen_range(1..5);
    let hidden: Vec<usize> = (0..r.gen_range(1..3)).map(|_| r.gen_range(2..7)).collect();
    let mut net = DenseNet::mlp(input, &hidden, 1, head, seed).unwrap();
    // Non-zero biases so the check is not confined to the initialization manifold.
    for layer in net.layers_mut() {
        layer.bias.mapv_inplace(|_| r.gen_range(-0.3..0.3));
    }
    net
}

fn sin_loss(out: ArrayView2<f64>, t: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let b = out.nrows() as f64;
    let value = out.iter().zip(t).map(|(o, y)| o.sin() * y).sum::<f64>() / b;
    let mut grad = out.mapv(f64::cos);
    grad.zip_mut_with(&t, |g, y| *g *= y / b);
    (value, grad)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn mse_gradient_matches_finite_differences(seed in any::<u64>()) {
        let net = random_net(seed, Activation::Identity);
        let x = random_inputs(seed, 16, net.input_dim());
        let y = random_inputs(seed ^ 1, 16, 1);
        prop_assert!(grad_check(&net, x.view(), y.view(), LossKind::Mse).unwrap() < 1e-4);
    }

    #[test]
    fn bce_gradient_matches_finite_differences(seed in any::<u64>()) {
        let net = random_net(seed, Activation::Sigmoid);
        let x = random_inputs(seed, 16, net.input_dim());
        let y = random_inputs(seed ^ 1, 16, 1).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        prop_assert!(grad_check(&net, x.view(), y.view(), LossKind::Bce).unwrap() < 1e-4);
    }

    #[test]
    fn weighted_mse_gradient_matches_finite_differences(seed in any::<u64>()) {
        let net = random_net(seed, Activation::Identity);
        let x = random_inputs(seed, 16, net.input_dim());
        let y = random_inputs(seed ^ 1, 16, 1);
        let w: Vec<f64> = random_inputs(seed ^ 2, 16, 1).iter().map(|v| v.abs()).collect();
        let err = grad_check(&net, x.view(), y.view(), LossKind::WeightedMse(&w)).unwrap();
        prop_assert!(err < 1e-4);
    }

    #[test]
    fn custom_gradient_matches_finite_differences(seed in any::<u64>()) {
        let net = random_net(seed, Activation::Identity);
        let x = random_inputs(seed, 16, net.input_dim());
        let y = random_inputs(seed ^ 1, 16, 1);
        let err = grad_check(&net, x.view(), y.view(), LossKind::Custom(&sin_loss)).unwrap();
        prop_assert!(err < 1e-4);
    }
}

#[test]
fn small_relu_net_gradient() {
    let net = DenseNet::new(&[3, 4, 1], &[Activation::Relu, Activation::Identity], 5).unwrap();
    let x = random_inputs(5, 10, 3);
    let y = random_inputs(6, 10, 1);
    assert!(grad_check(&net, x.view(), y.view(), LossKind::Mse).unwrap() < 1e-4);
}

#[test]
fn linear_net_gradient_is_exact() {
    let net = DenseNet::new(&[4, 1], &[Activation::Identity], 3).unwrap();
    let x = random_inputs(3, 12, 4);
    let y = random_inputs(4, 12, 1);
    assert!(grad_check(&net, x.view(), y.view(), LossKind::Mse).unwrap() < 1e-7);
}

#[test]
fn convex_descent_on_single_parameter() {
    let mut net = DenseNet::new(&[1, 1], &[Activation::Identity], 0).unwrap();
    net.layers_mut()[0].weight[[0, 0]] = 1.5;
    let x = Array2::from_elem((1, 1), 1.0);
    let y = Array2::zeros((1, 1));
    let mut opt = AdamState::new(&net, 1e-3, 0.0);
    let mut prev = f64::INFINITY;
    for _ in 0..100 {
        let loss = train_step(&mut net, x.view(), y.view(), LossKind::Mse, &mut opt, None).unwrap();
        assert!(loss < prev, "loss {loss} did not decrease from {prev}");
        prev = loss;
    }
    assert_eq!(opt.step_count(), 100);
}

#[test]
fn clipping_caps_the_global_norm() {
    let net = DenseNet::new(&[3, 4, 1], &[Activation::Relu, Activation::Identity], 1).unwrap();
    let mut g = ParamBuf::zeros_like(&net);
    g.fill(1.0);
    g.scale(10.0 / g.norm());
    let before = clip_grad_norm(&mut g, 2.0);
    assert!((before - 10.0).abs() < 1e-12);
    assert!((g.norm() - 2.0).abs() < 1e-12);

    // Below the cap the gradient is untouched.
    let mut small = ParamBuf::zeros_like(&net);
    small.fill(0.01);
    let copy = small.flat();
    clip_grad_norm(&mut small, 2.0);
    assert_eq!(small.flat(), copy);
}

#[test]
fn zero_weights_leave_parameters_unchanged() {
    let mut net = DenseNet::mlp(2, &[5], 1, Activation::Identity, 9).unwrap();
    let before = net.clone();
    let x = random_inputs(1, 8, 2);
    let y = random_inputs(2, 8, 1);
    let w = vec![0.0; 8];
    let mut opt = AdamState::new(&net, 1e-2, 0.0);
    for _ in 0..5 {
        train_step(
            &mut net,
            x.view(),
            y.view(),
            LossKind::WeightedMse(&w),
            &mut opt,
            Some(2.0),
        )
        .unwrap();
    }
    assert_eq!(net, before);
}

#[test]
fn weight_decay_shrinks_monotonically() {
    let mut net = DenseNet::mlp(3, &[4], 1, Activation::Identity, 2).unwrap();
    for layer in net.layers_mut() {
        layer.bias = Array1::from_elem(layer.bias.len(), 0.5);
    }
    let x = random_inputs(1, 4, 3);
    let y = random_inputs(2, 4, 1);
    let w = vec![0.0; 4];
    let mut opt = AdamState::new(&net, 1e-2, 0.5);
    let mut prev: Vec<f64> = params(&net);
    for _ in 0..50 {
        train_step(&mut net, x.view(), y.view(), LossKind::WeightedMse(&w), &mut opt, None).unwrap();
        let now = params(&net);
        for (a, b) in now.iter().zip(&prev) {
            assert!(a.abs() < b.abs() || *b == 0.0);
            assert_eq!(a.signum(), b.signum());
        }
        prev = now;
    }
}

fn params(net: &DenseNet) -> Vec<f64> {
    net.layers()
        .iter()
        .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied().collect::<Vec<_>>())
        .collect()
}

#[test]
fn nan_loss_reports_divergence() {
    let mut net = DenseNet::new(&[1, 1], &[Activation::Identity], 0).unwrap();
    let x = Array2::from_elem((1, 1), 1.0);
    let y = Array2::from_elem((1, 1), f64::NAN);
    let mut opt = AdamState::new(&net, 1e-3, 0.0);
    let err = train_step(&mut net, x.view(), y.view(), LossKind::Mse, &mut opt, None).unwrap_err();
    assert!(matches!(err, drum_core::Error::Diverged { step: 0, .. }), "{err}");
}

#[test]
fn mismatched_optimizer_is_rejected() {
    let mut net = DenseNet::new(&[2, 1], &[Activation::Identity], 0).unwrap();
    let other = DenseNet::new(&[3, 1], &[Activation::Identity], 0).unwrap();
    let mut opt = AdamState::new(&other, 1e-3, 0.0);
    let x = Array2::zeros((1, 2));
    let y = Array2::zeros((1, 1));
    assert!(train_step(&mut net, x.view(), y.view(), LossKind::Mse, &mut opt, None).is_err());
}
