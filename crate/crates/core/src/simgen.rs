//! Simulation data-generating processes.
//!
//! Three settings share `d_X = 15` Gaussian stable covariates and a target
//! population with a mild mean/scale shift. They differ in how the missing
//! covariates `A` depend on `X` and in the outcome surface:
//!
//! * Setting I: `A = BᵀX + ε`, `σ = 0.8`, `d_A = 5`.
//! * Setting II: `A` adds pairwise `X_iX_{i+1}` and `sign(X_i)X_i²` terms,
//!   the outcome gains `0.5 Σ tanh(x_i) a_i`, `σ = 0.3`, `d_A = 2`.
//! * Setting III: Setting II with `d_A ∈ {3, 5, 7, 9}`.
//!
//! Evaluation sets perturb the coefficient matrix elementwise,
//! `B̃ = B ⊙ U` with `U_kl ~ Uniform(−s, s)`.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledSet, UnlabeledSet};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum Setting {
    I,
    II,
    III,
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Setting::I => "I",
            Setting::II => "II",
            Setting::III => "III",
        })
    }
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(Setting::I),
            "II" | "2" => Ok(Setting::II),
            "III" | "3" => Ok(Setting::III),
            other => Err(Error::Config(format!("unknown setting {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingSpec {
    pub setting: Setting,
    pub d_x: usize,
    pub d_a: usize,
    /// Source sample size.
    pub n: usize,
    /// Target (and evaluation set) sample size.
    pub n_target: usize,
    pub sigma_noise: f64,
    pub outcome_noise_sd: f64,
    pub seed: u64,
}

impl SettingSpec {
    pub fn new(setting: Setting, d_a: Option<usize>, seed: u64) -> Result<Self> {
        let (d_a, sigma) = match setting {
            Setting::I => (d_a.unwrap_or(5), 0.8),
            Setting::II => (d_a.unwrap_or(2), 0.3),
            Setting::III => (d_a.unwrap_or(5), 0.3),
        };
        let spec = SettingSpec {
            setting,
            d_x: 15,
            d_a,
            n: 5000,
            n_target: 1000,
            sigma_noise: sigma,
            outcome_noise_sd: 0.05,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_x != 15 {
            return Err(Error::Config(format!(
                "simulation settings use d_X = 15, got {}",
                self.d_x
            )));
        }
        coeff_matrix(self.setting, self.d_a)?;
        if !(self.sigma_noise >= 0.0) || !(self.outcome_noise_sd >= 0.0) {
            return Err(Error::Config("noise scales must be non-negative".into()));
        }
        if self.n == 0 || self.n_target == 0 {
            return Err(Error::Config("sample sizes must be positive".into()));
        }
        Ok(())
    }
}

const B_I: [[f64; 5]; 10] = [
    [1.0, 0.5, 0.3, 0.2, 0.1],
    [0.8, 1.0, 0.4, 0.1, 0.2],
    [0.5, 0.3, 1.0, 0.5, 0.3],
    [0.3, 0.2, 0.6, 1.0, 0.4],
    [0.2, 0.4, 0.2, 0.3, 1.0],
    [0.1, 0.1, 0.3, 0.2, 0.5],
    [0.0, 0.2, 0.1, 0.4, 0.3],
    [0.1, 0.0, 0.2, 0.1, 0.2],
    [0.0, 0.2, 0.0, 0.2, 0.1],
    [0.0, 0.3, 0.0, 0.0, 0.1],
];

// The printed matrix has a 16th all-zero row; d_X = 15 uses the first 15.
const B_II: [[f64; 5]; 15] = [
    [1.0, 0.5, 0.3, 0.2, 0.1],
    [0.8, 1.0, 0.4, 0.1, 0.2],
    [0.5, 0.3, 1.0, 0.5, 0.3],
    [0.3, 0.2, 0.6, 1.0, 0.4],
    [0.2, 0.4, 0.2, 0.3, 1.0],
    [0.1, 0.1, 0.3, 0.2, 0.5],
    [0.0, 0.2, 0.1, 0.4, 0.3],
    [0.1, 0.0, 0.2, 0.1, 0.2],
    [0.0, 0.2, 0.0, 0.2, 0.1],
    [0.0, 0.3, 0.0, 0.0, 0.1],
    [0.3, 0.2, 0.2, 0.0, 0.4],
    [0.1, 0.4, 0.0, 0.3, 0.1],
    [0.0, 0.2, 0.3, 0.1, 0.2],
    [0.2, 0.0, 0.1, 0.4, 0.0],
    [0.1, 0.3, 0.2, 0.0, 0.3],
];

const B_III: [[f64; 10]; 15] = [
    [1.0, 0.5, 0.3, 0.2, 0.1, 0.4, 0.2, 0.1, 0.3, 0.2],
    [0.4, 1.0, 0.4, 0.1, 0.2, 0.3, 0.5, 0.2, 0.1, 0.1],
    [0.5, 0.3, 1.0, 0.5, 0.3, 0.2, 0.1, 0.4, 0.2, 0.3],
    [0.3, 0.2, 0.6, 1.0, 0.4, 0.1, 0.3, 0.5, 0.1, 0.2],
    [0.2, 0.4, 0.2, 0.3, 1.0, 0.3, 0.2, 0.1, 0.5, 0.4],
    [0.1, 0.1, 0.3, 0.2, 0.5, 1.0, 0.4, 0.3, 0.2, 0.1],
    [0.0, 0.2, 0.1, 0.4, 0.3, 0.3, 1.0, 0.2, 0.4, 0.2],
    [0.1, 0.0, 0.2, 0.1, 0.2, 0.2, 0.3, 1.0, 0.1, 0.3],
    [0.0, 0.2, 0.0, 0.2, 0.1, 0.1, 0.2, 0.3, 1.0, 0.2],
    [0.0, 0.3, 0.0, 0.0, 0.1, 0.2, 0.1, 0.2, 0.3, 1.0],
    [0.3, 0.2, 0.2, 0.0, 0.4, 0.1, 0.0, 0.1, 0.2, 0.3],
    [0.1, 0.4, 0.0, 0.3, 0.1, 0.2, 0.1, 0.0, 0.1, 0.2],
    [0.0, 0.2, 0.3, 0.1, 0.2, 0.0, 0.2, 0.1, 0.0, 0.1],
    [0.2, 0.0, 0.1, 0.4, 0.0, 0.1, 0.0, 0.2, 0.1, 0.0],
    [0.1, 0.3, 0.2, 0.0, 0.3, 0.0, 0.1, 0.0, 0.2, 0.1],
];

/// The `d_X × d_A` coefficient matrix of a setting.
pub fn coeff_matrix(setting: Setting, d_a: usize) -> Result<Array2<f64>> {
    let unsupported = || Error::Config(format!("setting {setting} does not support d_A = {d_a}"));
    match setting {
        Setting::I => {
            if d_a != 5 {
                return Err(unsupported());
            }
            Ok(Array2::from_shape_fn(
                (15, 5),
                |(i, j)| if i < 10 { B_I[i][j] } else { 0.0 },
            ))
        }
        Setting::II => {
            if d_a != 2 {
                return Err(unsupported());
            }
            Ok(Array2::from_shape_fn((15, d_a), |(i, j)| B_II[i][j]))
        }
        Setting::III => {
            if ![3, 5, 7, 9].contains(&d_a) {
                return Err(unsupported());
            }
            Ok(Array2::from_shape_fn((15, d_a), |(i, j)| B_III[i][j]))
        }
    }
}

/// Sign with `sign(0) = 0`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Noiseless conditional mean `E[Y | X = x, A = a]`.
pub fn fbar_eval(setting: Setting, x: ArrayView1<f64>, a: ArrayView1<f64>) -> f64 {
    let d_a = a.len();
    let mut v = 0.0;
    for j in 0..d_a {
        let aj = a[j];
        v += 0.1 * aj + 0.1 * aj * aj + 0.1 * x[j] * aj + 0.2 * sign(aj) * x[j] * x[j];
    }
    if d_a >= 2 {
        v += 0.3 * (x[0] * a[1] + x[1] * a[0]);
    }
    if setting != Setting::I {
        for j in 0..d_a {
            v += 0.5 * x[j].tanh() * a[j];
        }
    }
    v
}

/// Conditional mean of `A` given `X` under coefficient matrix `b` (before noise).
pub fn a_mean(setting: Setting, x: ArrayView1<f64>, b: &Array2<f64>) -> Array1<f64> {
    let d_x = x.len();
    let mut out = b.t().dot(&x);
    if setting != Setting::I {
        for j in 0..b.ncols() {
            let mut extra = 0.0;
            for i in 0..5.min(d_x - 1) {
                extra += 0.1 * b[[i, j]] * x[i] * x[i + 1];
            }
            for i in 0..5.min(d_x) {
                extra += 0.1 * b[[i, j]] * sign(x[i]) * x[i] * x[i];
            }
            out[j] += extra;
        }
    }
    out
}

fn draw_a(setting: Setting, x: &Array2<f64>, b: &Array2<f64>, sigma: f64, rng: &mut impl Rng) -> Array2<f64> {
    let mut a = Array2::zeros((x.nrows(), b.ncols()));
    for (i, row) in x.rows().into_iter().enumerate() {
        let mean = a_mean(setting, row, b);
        for j in 0..b.ncols() {
            let e: f64 = rng.sample(StandardNormal);
            a[[i, j]] = mean[j] + sigma * e;
        }
    }
    a
}

fn fbar_rows(setting: Setting, x: &Array2<f64>, a: &Array2<f64>) -> Array1<f64> {
    x.outer_iter()
        .zip(a.outer_iter())
        .map(|(xi, ai)| fbar_eval(setting, xi, ai))
        .collect()
}

fn labeled(
    spec: &SettingSpec,
    x: Array2<f64>,
    b: &Array2<f64>,
    a_rng: &mut impl Rng,
    y_rng: &mut impl Rng,
) -> LabeledSet {
    let a = draw_a(spec.setting, &x, b, spec.sigma_noise, a_rng);
    let fbar = fbar_rows(spec.setting, &x, &a);
    let y = fbar.mapv(|f| {
        let e: f64 = y_rng.sample(StandardNormal);
        f + spec.outcome_noise_sd * e
    });
    LabeledSet {
        x,
        a,
        y,
        fbar: Some(fbar),
    }
}

/// Labeled source sample, `X ~ N(0, I)`.
pub fn gen_source(spec: &SettingSpec) -> Result<LabeledSet> {
    spec.validate()?;
    let b = coeff_matrix(spec.setting, spec.d_a)?;
    let x = rng::normal_matrix(&mut rng::stream(spec.seed, "sim.source.x", 0), spec.n, spec.d_x);
    let mut a_rng = rng::stream(spec.seed, "sim.source.a", 0);
    let mut y_rng = rng::stream(spec.seed, "sim.source.y", 0);
    Ok(labeled(spec, x, &b, &mut a_rng, &mut y_rng))
}

fn target_x(spec: &SettingSpec, tag: &str, index: u64) -> Array2<f64> {
    let mut x = rng::normal_matrix(&mut rng::stream(spec.seed, tag, index), spec.n_target, spec.d_x);
    x.mapv_inplace(|z| 0.1 + 1.1 * z);
    x
}

/// Unlabeled target sample, `X ~ N(0.1·1, 1.1² I)`.
pub fn gen_target(spec: &SettingSpec) -> Result<UnlabeledSet> {
    spec.validate()?;
    UnlabeledSet::new(target_x(spec, "sim.target.x", 0))
}

fn scale_tag(s: f64) -> String {
    format!("{:016x}", s.to_bits())
}

/// The perturbed coefficients `B ⊙ U` of Monte-Carlo set `mc_index` at scale `s`.
pub fn perturbed_coefficients(spec: &SettingSpec, s: f64, mc_index: u64) -> Result<Array2<f64>> {
    if !(s >= 0.0) || !s.is_finite() {
        return Err(Error::Config(format!(
            "perturbation scale must be non-negative, got {s}"
        )));
    }
    let b = coeff_matrix(spec.setting, spec.d_a)?;
    let mut rng = rng::stream(spec.seed, &format!("sim.test.u.{}", scale_tag(s)), mc_index);
    Ok(b.mapv(|v| {
        let u = if s > 0.0 { rng.gen_range(-s..s) } else { 0.0 };
        v * u
    }))
}

/// Monte-Carlo evaluation set with a perturbed `A | X` law. `fbar` holds the
/// noiseless truth.
pub fn gen_perturbed_test(spec: &SettingSpec, s: f64, mc_index: u64) -> Result<LabeledSet> {
    spec.validate()?;
    let b_tilde = perturbed_coefficients(spec, s, mc_index)?;
    let tag = scale_tag(s);
    let x = target_x(spec, &format!("sim.test.x.{tag}"), mc_index);
    let mut a_rng = rng::stream(spec.seed, &format!("sim.test.a.{tag}"), mc_index);
    let mut y_rng = rng::stream(spec.seed, &format!("sim.test.y.{tag}"), mc_index);
    Ok(labeled(spec, x, &b_tilde, &mut a_rng, &mut y_rng))
}

/// Per-column sample means; used by moment checks.
pub fn column_means(x: &Array2<f64>) -> Array1<f64> {
    x.mean_axis(Axis(0)).expect("non-empty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    #[test]
    fn setting_i_matrix_rows() {
        let b = coeff_matrix(Setting::I, 5).unwrap();
        assert_eq!(b.row(0).to_vec(), vec![1.0, 0.5, 0.3, 0.2, 0.1]);
        assert!(b.row(11).iter().all(|&v| v == 0.0));
        for i in 10..15 {
            assert!(b.row(i).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn setting_iii_truncates_columns() {
        let b = coeff_matrix(Setting::III, 3).unwrap();
        assert_eq!(b.dim(), (15, 3));
        assert_eq!(b.row(1).to_vec(), vec![0.4, 1.0, 0.4]);
        assert_eq!(b.row(14).to_vec(), vec![0.1, 0.3, 0.2]);
        let b9 = coeff_matrix(Setting::III, 9).unwrap();
        assert_eq!(b9[[9, 8]], 0.3);
    }

    #[test]
    fn unsupported_combinations() {
        assert!(coeff_matrix(Setting::I, 3).is_err());
        assert!(coeff_matrix(Setting::II, 5).is_err());
        assert!(coeff_matrix(Setting::III, 4).is_err());
    }

    #[test]
    fn fbar_plug_in_values() {
        let x0 = Array1::<f64>::zeros(15);
        assert_eq!(fbar_eval(Setting::I, x0.view(), Array1::zeros(5).view()), 0.0);
        let mut e1 = Array1::zeros(5);
        e1[0] = 1.0;
        assert!((fbar_eval(Setting::I, x0.view(), e1.view()) - 0.2).abs() < 1e-15);
        let e1 = array![1.0, 0.0];
        assert!((fbar_eval(Setting::II, x0.view(), e1.view()) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn fbar_sign_term_and_tanh_term() {
        // x1 = 2, a1 = -1: 0.1·(-1) + 0.1·1 + 0.1·2·(-1) + 0.2·(-1)·4 = -1.0
        let mut x = Array1::zeros(15);
        x[0] = 2.0;
        let a = array![-1.0, 0.0, 0.0, 0.0, 0.0];
        assert!((fbar_eval(Setting::I, x.view(), a.view()) + 1.0).abs() < 1e-12);
        let a2 = array![-1.0, 0.0];
        let expect = -1.0 + -(0.5 * 2f64.tanh());
        assert!((fbar_eval(Setting::II, x.view(), a2.view()) - expect).abs() < 1e-12);
    }

    #[test]
    fn sign_of_zero_is_zero() {
        assert_eq!(sign(0.0), 0.0);
        assert_eq!(sign(-0.0), 0.0);
        assert_eq!(sign(3.0), 1.0);
    }

    #[test]
    fn noiseless_limit_recovers_linear_law() {
        let mut spec = SettingSpec::new(Setting::I, None, 3).unwrap();
        spec.sigma_noise = 0.0;
        spec.n = 200;
        let src = gen_source(&spec).unwrap();
        let b = coeff_matrix(Setting::I, 5).unwrap();
        let resid = &src.a - &src.x.dot(&b);
        assert!(resid.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_outcome_noise_gives_truth() {
        let mut spec = SettingSpec::new(Setting::II, None, 5).unwrap();
        spec.outcome_noise_sd = 0.0;
        spec.n = 100;
        let src = gen_source(&spec).unwrap();
        assert_eq!(src.y, *src.fbar.as_ref().unwrap());
        let test = gen_perturbed_test(&spec, 1.0, 4).unwrap();
        assert_eq!(test.y, test.fbar.unwrap());
    }

    #[test]
    fn zero_scale_kills_coefficients() {
        let spec = SettingSpec::new(Setting::I, None, 1).unwrap();
        let bt = perturbed_coefficients(&spec, 0.0, 0).unwrap();
        assert!(bt.iter().all(|&v| v == 0.0));
        // with B̃ = 0 the draw is pure noise: the sample mean of A is near 0
        let t = gen_perturbed_test(&spec, 0.0, 0).unwrap();
        let m = column_means(&t.a);
        assert!(m.iter().all(|v| v.abs() < 4.0 * 0.8 / (1000f64).sqrt()));
    }

    #[test]
    fn perturbation_bounded_by_scale() {
        let spec = SettingSpec::new(Setting::III, Some(7), 1).unwrap();
        let b = coeff_matrix(Setting::III, 7).unwrap();
        for mc in 0..10 {
            let bt = perturbed_coefficients(&spec, 1.4, mc).unwrap();
            for (t, o) in bt.iter().zip(b.iter()) {
                assert!(t.abs() <= 1.4 * o.abs());
            }
        }
    }

    #[test]
    fn generators_are_reproducible() {
        let spec = SettingSpec::new(Setting::I, None, 9).unwrap();
        assert_eq!(gen_target(&spec).unwrap(), gen_target(&spec).unwrap());
        assert_eq!(
            gen_perturbed_test(&spec, 0.6, 3).unwrap(),
            gen_perturbed_test(&spec, 0.6, 3).unwrap()
        );
        assert_ne!(
            gen_perturbed_test(&spec, 0.6, 3).unwrap().x,
            gen_perturbed_test(&spec, 0.6, 4).unwrap().x
        );
    }
}
