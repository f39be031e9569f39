//! Kernel mean matching: source weights whose weighted kernel mean matches
//! the target's.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::WeightVector;
use crate::error::{Error, Result};
use crate::rng;

/// Largest number of pooled points used by the median-distance heuristic.
const MEDIAN_SUBSAMPLE: usize = 3000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KmmOptions {
    /// Gaussian kernel width; the median pooled distance when absent.
    pub bandwidth: Option<f64>,
    pub b_cap: f64,
    /// Sum tolerance; `(√m − 1)/√m` when absent.
    pub epsilon: Option<f64>,
    /// Relative gradient-mapping residual at which the solver stops.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for KmmOptions {
    fn default() -> Self {
        KmmOptions {
            bandwidth: None,
            b_cap: 1000.0,
            epsilon: None,
            tol: 1e-4,
            max_iter: 20_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KmmSolution {
    pub w: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub residual: f64,
}

fn sq_norms(x: ArrayView2<f64>) -> Array1<f64> {
    x.map_axis(Axis(1), |r| r.dot(&r))
}

/// `exp(−‖a_i − b_j‖² / (2σ²))` for all pairs.
fn gaussian_kernel(a: ArrayView2<f64>, b: ArrayView2<f64>, sigma: f64) -> Array2<f64> {
    let (na, nb) = (sq_norms(a), sq_norms(b));
    let mut k = a.dot(&b.t());
    let scale = -0.5 / (sigma * sigma);
    for ((i, j), v) in k.indexed_iter_mut() {
        *v = ((na[i] + nb[j] - 2.0 * *v).max(0.0) * scale).exp();
    }
    k
}

/// Median pairwise Euclidean distance over (a seeded subsample of) the
/// pooled rows.
pub fn median_bandwidth(a: ArrayView2<f64>, b: ArrayView2<f64>, seed: u64) -> Result<f64> {
    let pooled = ndarray::concatenate(Axis(0), &[a.reborrow(), b.reborrow()])
        .map_err(|_| Error::Input("source and target covariates differ in width".into()))?;
    let n = pooled.nrows();
    let pts = if n > MEDIAN_SUBSAMPLE {
        let mut r = rng::stream(seed, "kmm.median", 0);
        let mut idx = sample(&mut r, n, MEDIAN_SUBSAMPLE).into_vec();
        idx.sort_unstable();
        pooled.select(Axis(0), &idx)
    } else {
        pooled
    };
    let norms = sq_norms(pts.view());
    let gram = pts.dot(&pts.t());
    let m = pts.nrows();
    let mut d: Vec<f64> = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            d.push((norms[i] + norms[j] - 2.0 * gram[[i, j]]).max(0.0).sqrt());
        }
    }
    if d.is_empty() {
        return Err(Error::Input("median heuristic needs at least two points".into()));
    }
    let mid = d.len() / 2;
    let (_, med, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    if !(*med > 0.0) {
        return Err(Error::Input("median pairwise distance is zero".into()));
    }
    Ok(*med)
}

/// Euclidean projection onto `{0 ≤ w ≤ cap, lo ≤ Σw ≤ hi}`: a box clip after
/// a common shift, the shift found by bisection when the sum is violated.
pub fn project_box_slab(v: &[f64], cap: f64, lo: f64, hi: f64) -> Vec<f64> {
    let clipped = |tau: f64| v.iter().map(move |x| (x - tau).clamp(0.0, cap));
    let sum_at = |tau: f64| clipped(tau).sum::<f64>();
    let s0 = sum_at(0.0);
    let target = if s0 > hi {
        hi
    } else if s0 < lo {
        lo
    } else {
        return clipped(0.0).collect();
    };
    let vmin = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let vmax = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // Σ clip(v − τ) decreases from n·cap (τ ≤ vmin − cap) to 0 (τ ≥ vmax).
    let (mut a, mut b) = (vmin - cap, vmax);
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if sum_at(mid) > target {
            a = mid;
        } else {
            b = mid;
        }
        if b - a <= f64::EPSILON * (1.0 + a.abs().max(b.abs())) {
            break;
        }
    }
    clipped(0.5 * (a + b)).collect()
}

fn objective(k: &Array2<f64>, kappa: &Array1<f64>, w: &Array1<f64>) -> f64 {
    0.5 * w.dot(&k.dot(w)) - kappa.dot(w)
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
fn spectral_bound(k: &Array2<f64>) -> f64 {
    let n = k.nrows();
    let mut v = Array1::from_elem(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..100 {
        let kv = k.dot(&v);
        let norm = kv.dot(&kv).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&kv);
        v = kv / norm;
        if (next - lambda).abs() <= 1e-6 * next {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda
}

/// Minimizes `½ wᵀKw − κᵀw` over `{0 ≤ w ≤ cap, lo ≤ Σw ≤ hi}` by
/// accelerated projected gradient with adaptive restart.
pub fn kmm_solve(
    k: &Array2<f64>,
    kappa: &Array1<f64>,
    cap: f64,
    lo: f64,
    hi: f64,
    tol: f64,
    max_iter: usize,
) -> Result<KmmSolution> {
    let n = kappa.len();
    if k.dim() != (n, n) {
        return Err(Error::Input("kernel matrix and κ disagree in size".into()));
    }
    if !(cap > 0.0) || lo > hi || lo > n as f64 * cap || hi < 0.0 {
        return Err(Error::Config("infeasible KMM constraint set".into()));
    }
    // 10% headroom on the power-iteration estimate keeps the step safe.
    let lip = (1.1 * spectral_bound(k)).max(1e-12);
    let project = |v: &Array1<f64>| Array1::from(project_box_slab(v.as_slice().expect("contiguous"), cap, lo, hi));
    let scale = kappa.dot(kappa).sqrt().max(1.0);
    let mut w = project(&Array1::ones(n));
    let mut y = w.clone();
    let mut t = 1.0f64;
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        let grad = k.dot(&y) - kappa;
        let next = project(&(&y - &(&grad / lip)));
        // Gradient-mapping residual at the current iterate.
        let gw = k.dot(&w) - kappa;
        let pw = project(&(&w - &(&gw / lip)));
        residual = lip * (&w - &pw).dot(&(&w - &pw)).sqrt() / scale;
        if residual <= tol {
            return Ok(KmmSolution {
                objective: objective(k, kappa, &w),
                w: w.to_vec(),
                iterations: it - 1,
                residual,
            });
        }
        let restart = (&y - &next).dot(&(&next - &w)) > 0.0;
        let t_next = if restart {
            1.0
        } else {
            0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt())
        };
        y = if restart {
            next.clone()
        } else {
            &next + &((&next - &w) * ((t - 1.0) / t_next))
        };
        t = t_next;
        w = next;
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual,
    })
}

/// KMM importance weights for the source rows.
pub fn kmm_weights(
    source_x: ArrayView2<f64>,
    target_x: ArrayView2<f64>,
    opts: &KmmOptions,
    seed: u64,
) -> Result<WeightVector> {
    let (m, nt) = (source_x.nrows(), target_x.nrows());
    if m == 0 || nt == 0 {
        return Err(Error::Input(
            "kernel mean matching needs non-empty source and target".into(),
        ));
    }
    if source_x.ncols() != target_x.ncols() {
        return Err(Error::Input("source and target covariates differ in width".into()));
    }
    let sigma = match opts.bandwidth {
        Some(s) if s > 0.0 => s,
        Some(s) => return Err(Error::Config(format!("kernel bandwidth must be positive, got {s}"))),
        None => median_bandwidth(source_x, target_x, seed)?,
    };
    let mf = m as f64;
    let eps = opts.epsilon.unwrap_or((mf.sqrt() - 1.0) / mf.sqrt());
    let k = gaussian_kernel(source_x, source_x, sigma);
    let kappa = gaussian_kernel(source_x, target_x, sigma).sum_axis(Axis(1)) * (mf / nt as f64);
    let sol = kmm_solve(
        &k,
        &kappa,
        opts.b_cap,
        mf * (1.0 - eps),
        mf * (1.0 + eps),
        opts.tol,
        opts.max_iter,
    )?;
    WeightVector::new(sol.w, "kmm")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn five_point_matches_grid_search() {
        let x = array![[0.0], [0.4], [1.1], [1.7], [2.5]];
        let t = array![[1.5], [1.9], [2.2], [0.3]];
        let k = gaussian_kernel(x.view(), x.view(), 0.8);
        let kappa = gaussian_kernel(x.view(), t.view(), 0.8).sum_axis(Axis(1)) * (5.0 / 4.0);
        let (cap, lo, hi) = (1.0, 3.0, 3.5);
        let sol = kmm_solve(&k, &kappa, cap, lo, hi, 1e-9, 100_000).unwrap();
        // Grid over the first four coordinates; the fifth minimizes its 1-D
        // quadratic on the feasible interval.
        let steps = 100;
        let h = cap / steps as f64;
        let mut best = f64::INFINITY;
        let mut w = [0.0; 5];
        for a in 0..=steps {
            w[0] = a as f64 * h;
            for b in 0..=steps {
                w[1] = b as f64 * h;
                for c in 0..=steps {
                    w[2] = c as f64 * h;
                    for d in 0..=steps {
                        w[3] = d as f64 * h;
                        let s: f64 = w[..4].iter().sum();
                        let (l5, u5) = ((lo - s).max(0.0), (hi - s).min(cap));
                        if l5 > u5 {
                            continue;
                        }
                        let cross: f64 = (0..4).map(|j| k[[4, j]] * w[j]).sum();
                        w[4] = ((kappa[4] - cross) / k[[4, 4]]).clamp(l5, u5);
                        let mut f = 0.0;
                        for i in 0..5 {
                            f -= kappa[i] * w[i];
                            for j in 0..5 {
                                f += 0.5 * k[[i, j]] * w[i] * w[j];
                            }
                        }
                        best = best.min(f);
                    }
                }
            }
        }
        assert!(sol.objective <= best + 1e-9, "solver {} grid {}", sol.objective, best);
        assert!(best - sol.objective < 1e-3, "solver {} grid {}", sol.objective, best);
    }

    #[test]
    fn identical_samples_give_unit_weights() {
        let mut r = rng::stream(3, "test", 0);
        let x = rng::normal_matrix(&mut r, 300, 2);
        let wv = kmm_weights(x.view(), x.view(), &KmmOptions::default(), 1).unwrap();
        let near = wv.w.iter().filter(|w| (0.8..=1.25).contains(*w)).count();
        assert!(near as f64 >= 0.95 * 300.0, "{near} of 300 near 1");
        assert!(wv.ess / 300.0 > 0.9);
    }

    #[test]
    fn shifted_target_upweights_overlap() {
        let mut r = rng::stream(4, "test", 0);
        let x = rng::normal_matrix(&mut r, 400, 1);
        let t = rng::normal_matrix(&mut r, 200, 1) + 1.0;
        let wv = kmm_weights(x.view(), t.view(), &KmmOptions::default(), 1).unwrap();
        let (mut hi, mut lo) = (0.0, 0.0);
        for (w, v) in wv.w.iter().zip(x.column(0)) {
            if *v > 1.0 {
                hi += w;
            } else if *v < -1.0 {
                lo += w;
            }
        }
        assert!(hi > 3.0 * lo);
    }

    proptest! {
        #[test]
        fn projection_is_feasible(v in prop::collection::vec(-5.0f64..5.0, 1..30), cap in 0.5f64..3.0, frac in 0.0f64..1.0, width in 0.0f64..2.0) {
            let n = v.len() as f64;
            let lo = frac * n * cap * 0.9;
            let hi = (lo + width).min(n * cap);
            let p = project_box_slab(&v, cap, lo, hi);
            prop_assert!(p.iter().all(|x| *x >= 0.0 && *x <= cap));
            let s: f64 = p.iter().sum();
            prop_assert!(s >= lo - 1e-6 && s <= hi + 1e-6, "sum {} not in [{}, {}]", s, lo, hi);
        }

        #[test]
        fn projection_is_nearest(v in prop::collection::vec(-2.0f64..2.0, 2..8), seed in any::<u64>()) {
            use rand::Rng;
            let (cap, lo, hi) = (1.0, 1.0, 1.5);
            let p = project_box_slab(&v, cap, lo, hi);
            let dist = |q: &[f64]| q.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let mut g = rng::stream(seed, "test", 0);
            for _ in 0..100 {
                let q: Vec<f64> = (0..v.len()).map(|_| g.gen::<f64>()).collect();
                let s: f64 = q.iter().sum();
                if s >= lo && s <= hi {
                    prop_assert!(dist(&p) <= dist(&q) + 1e-9);
                }
            }
        }
    }
}
