//! Worst-case average loss over a χ²-divergence ball around the empirical
//! distribution.

/// Robust value of a loss vector together with the maximizing distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct ChiSqValue {
    pub value: f64,
    /// Optimal dual threshold `η*`.
    pub eta: f64,
    /// Worst-case probabilities; also the gradient of `value` in the losses.
    pub weights: Vec<f64>,
}

/// `sup { Σ p_i ℓ_i : p ∈ Δ_n, ½ (1/n) Σ (n p_i − 1)² ≤ ρ }`, computed through
/// its dual `inf_η √(1+2ρ) √(mean (ℓ−η)₊²) + η`.
///
/// The dual is convex and piecewise smooth between sorted losses, so the
/// minimum is found exactly by checking each piece's stationary point and
/// the breakpoints.
pub fn chisq_robust_loss(losses: &[f64], rho: f64) -> ChiSqValue {
    let n = losses.len();
    assert!(n > 0, "robust loss of an empty batch");
    let nf = n as f64;
    let mean = losses.iter().sum::<f64>() / nf;
    let uniform = || vec![1.0 / nf; n];
    if rho <= 0.0 {
        return ChiSqValue {
            value: mean,
            eta: f64::NEG_INFINITY,
            weights: uniform(),
        };
    }
    let scale = (1.0 + 2.0 * rho).sqrt();
    let mut sorted = losses.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    // With the top k losses active, the dual equals
    // scale · √((S2 − 2ηS1 + kη²)/n) + η.
    let dual = |k: usize, s1: f64, s2: f64, eta: f64| {
        let q = (s2 - 2.0 * eta * s1 + k as f64 * eta * eta).max(0.0);
        scale * (q / nf).sqrt() + eta
    };
    let mut best = (sorted[0], sorted[0]); // (value, η) at η = max ℓ
    let (mut s1, mut s2) = (0.0, 0.0);
    for k in 1..=n {
        let l = sorted[k - 1];
        s1 += l;
        s2 += l * l;
        let kf = k as f64;
        let hi = l;
        let lo = if k < n { sorted[k] } else { f64::NEG_INFINITY };
        let mut consider = |eta: f64| {
            let v = dual(k, s1, s2, eta);
            if v < best.0 {
                best = (v, eta);
            }
        };
        if lo.is_finite() {
            consider(lo);
        }
        let denom = kf * (kf * (1.0 + 2.0 * rho) - nf);
        if denom > 0.0 {
            let var = (s2 - s1 * s1 / kf).max(0.0);
            let eta = s1 / kf - (nf * var / denom).sqrt();
            if eta <= hi && eta >= lo {
                consider(eta);
            }
        }
    }
    let (value, eta) = best;
    let excess: Vec<f64> = losses.iter().map(|l| (l - eta).max(0.0)).collect();
    let rms = (excess.iter().map(|e| e * e).sum::<f64>() / nf).sqrt();
    let weights = if rms > 0.0 {
        excess.iter().map(|e| scale * e / (nf * rms)).collect()
    } else {
        // The ball reaches the vertex: all mass on the largest losses.
        let top = sorted[0];
        let count = losses.iter().filter(|l| **l == top).count() as f64;
        losses
            .iter()
            .map(|l| if *l == top { 1.0 / count } else { 0.0 })
            .collect()
    };
    ChiSqValue { value, eta, weights }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn divergence(p: &[f64]) -> f64 {
        let n = p.len() as f64;
        0.5 * p.iter().map(|pi| (n * pi - 1.0).powi(2)).sum::<f64>() / n
    }

    #[test]
    fn full_support_closed_form() {
        // Losses close together keep every worst-case weight positive.
        let l = [1.0, 1.1, 0.9, 1.05, 0.95];
        let rho = 0.05;
        let n = l.len() as f64;
        let mean = l.iter().sum::<f64>() / n;
        let sd = (l.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let r = chisq_robust_loss(&l, rho);
        assert!((r.value - (mean + sd * (2.0 * rho).sqrt())).abs() < 1e-12);
        assert!(r.weights.iter().all(|w| *w > 0.0));
    }

    #[test]
    fn zero_radius_is_mean() {
        let r = chisq_robust_loss(&[1.0, 2.0, 6.0], 0.0);
        assert_eq!(r.value, 3.0);
    }

    #[test]
    fn large_radius_approaches_max() {
        let r = chisq_robust_loss(&[1.0, 2.0, 6.0], 1e6);
        assert!((r.value - 6.0).abs() < 1e-9);
    }

    #[test]
    fn two_point_matches_simplex_grid() {
        let l = [0.0, 2.0];
        let rho = 0.5;
        let mut best = f64::MIN;
        for i in 0..=1000 {
            let p = [i as f64 / 1000.0, 1.0 - i as f64 / 1000.0];
            if divergence(&p) <= rho {
                best = best.max(p[0] * l[0] + p[1] * l[1]);
            }
        }
        let r = chisq_robust_loss(&l, rho);
        assert!((r.value - best).abs() < 1e-3, "{} vs {}", r.value, best);
    }

    #[test]
    fn constant_losses_are_returned() {
        for rho in [0.0, 0.1, 3.0, 1e4] {
            assert_eq!(chisq_robust_loss(&[1.5; 7], rho).value, 1.5);
        }
    }

    proptest! {
        #[test]
        fn monotone_in_radius(l in prop::collection::vec(0.0f64..10.0, 1..30), r1 in 0.0f64..3.0, r2 in 0.0f64..3.0) {
            let (a, b) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            prop_assert!(chisq_robust_loss(&l, a).value <= chisq_robust_loss(&l, b).value + 1e-9);
        }


        #[test]
        fn primal_dual_agree(l in prop::collection::vec(0.0f64..10.0, 1..40), rho in 0.001f64..5.0) {
            let r = chisq_robust_loss(&l, rho);
            let p = &r.weights;
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-8, "sum {}", total);
            prop_assert!(p.iter().all(|w| *w >= 0.0));
            prop_assert!(divergence(p) <= rho + 1e-8);
            let primal: f64 = p.iter().zip(&l).map(|(a, b)| a * b).sum();
            prop_assert!((primal - r.value).abs() < 1e-8 * (1.0 + r.value.abs()));
            let mean = l.iter().sum::<f64>() / l.len() as f64;
            let max = l.iter().cloned().fold(f64::MIN, f64::max);
            prop_assert!(r.value >= mean - 1e-9 && r.value <= max + 1e-9);
        }

        #[test]
        fn dominates_random_feasible_points(l in prop::collection::vec(0.0f64..5.0, 2..12), rho in 0.01f64..1.0, seed in any::<u64>()) {
            use rand::Rng;
            let r = chisq_robust_loss(&l, rho);
            let mut g = crate::rng::stream(seed, "test", 0);
            let n = l.len();
            for _ in 0..200 {
                let mut p: Vec<f64> = (0..n).map(|_| g.gen::<f64>()).collect();
                let s: f64 = p.iter().sum();
                p.iter_mut().for_each(|v| *v /= s);
                // Shrink toward uniform until feasible.
                let d = divergence(&p);
                if d > rho {
                    let t = (rho / d).sqrt();
                    p.iter_mut().for_each(|v| *v = 1.0 / n as f64 + t * (*v - 1.0 / n as f64));
                }
                let v: f64 = p.iter().zip(&l).map(|(a, b)| a * b).sum();
                prop_assert!(v <= r.value + 1e-9);
            }
        }
    }
}
