//! Evaluation statistics: normalized MSE over perturbation sets, calibration
//! and discrimination scores, fixed-cutoff rates and bootstrap intervals.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Cutoffs reported by [`ClassificationReport`].
pub const CUTOFFS: [f64; 4] = [0.03, 0.05, 0.10, 0.15];

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Input(format!("length mismatch: {a} predictions, {b} labels")));
    }
    if a == 0 {
        return Err(Error::Input("metric of an empty sample".into()));
    }
    Ok(())
}

/// Mean squared error against the noiseless truth, divided by the source
/// outcome variance.
pub fn normalized_mse(pred: &[f64], truth: &[f64], var_source: f64) -> Result<f64> {
    same_len(pred.len(), truth.len())?;
    if !(var_source > 0.0) {
        return Err(Error::Input(format!("normalizer must be positive, got {var_source}")));
    }
    let mse = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64;
    Ok(mse / var_source)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEvaluation {
    pub per_set: Vec<f64>,
    pub worst: f64,
    pub mean: f64,
    pub normalizer: f64,
}

pub fn mc_summarize(mses: &[f64], normalizer: f64) -> Result<McEvaluation> {
    if mses.is_empty() {
        return Err(Error::Input("no Monte-Carlo sets to summarize".into()));
    }
    Ok(McEvaluation {
        per_set: mses.to_vec(),
        worst: mses.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        mean: mses.iter().sum::<f64>() / mses.len() as f64,
        normalizer,
    })
}

fn check_probs(p: &[f64], y: &[f64]) -> Result<()> {
    same_len(p.len(), y.len())?;
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Input("predicted probabilities must lie in [0, 1]".into()));
    }
    if y.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::Input("labels must be 0 or 1".into()));
    }
    Ok(())
}

pub fn brier(p: &[f64], y: &[f64]) -> Result<f64> {
    check_probs(p, y)?;
    Ok(p.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64)
}

/// One quantile bin: mean predicted probability against observed rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub mean_predicted: f64,
    pub observed: f64,
    pub count: usize,
}

/// Expected calibration error over equal-count bins of the sorted
/// predictions; ties keep their input order.
pub fn ece_quantile(p: &[f64], y: &[f64], bins: usize) -> Result<(f64, Vec<CalibrationPoint>)> {
    check_probs(p, y)?;
    let n = p.len();
    if bins == 0 || n < bins {
        return Err(Error::Input(format!("{n} samples cannot fill {bins} bins")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut ece = 0.0;
    let mut points = Vec::with_capacity(bins);
    for b in 0..bins {
        let (lo, hi) = (b * n / bins, (b + 1) * n / bins);
        let idx = &order[lo..hi];
        let k = idx.len() as f64;
        let mp = idx.iter().map(|&i| p[i]).sum::<f64>() / k;
        let my = idx.iter().map(|&i| y[i]).sum::<f64>() / k;
        ece += k / n as f64 * (mp - my).abs();
        points.push(CalibrationPoint {
            mean_predicted: mp,
            observed: my,
            count: idx.len(),
        });
    }
    Ok((ece, points))
}

fn both_classes(y: &[f64]) -> Result<usize> {
    let pos = y.iter().filter(|v| **v == 1.0).count();
    if pos == 0 || pos == y.len() {
        return Err(Error::Input("ranking metrics need both classes present".into()));
    }
    Ok(pos)
}

/// Area under the ROC curve from the rank-sum statistic with midranks.
pub fn auroc(score: &[f64], y: &[f64]) -> Result<f64> {
    same_len(score.len(), y.len())?;
    let pos = both_classes(y)?;
    let n = score.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| score[a].total_cmp(&score[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end + 1 < n && score[order[end + 1]] == score[order[start]] {
            end += 1;
        }
        let midrank = (start + end) as f64 / 2.0 + 1.0;
        rank_sum += order[start..=end].iter().filter(|&&i| y[i] == 1.0).count() as f64 * midrank;
        start = end + 1;
    }
    let (p, q) = (pos as f64, (n - pos) as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Area under the precision–recall curve by step integration over
/// distinct score thresholds (average precision).
pub fn auprc(score: &[f64], y: &[f64]) -> Result<f64> {
    same_len(score.len(), y.len())?;
    let pos = both_classes(y)? as f64;
    let n = score.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]));
    let (mut tp, mut fp, mut prev_recall, mut area) = (0.0, 0.0, 0.0, 0.0);
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end + 1 < n && score[order[end + 1]] == score[order[start]] {
            end += 1;
        }
        for &i in &order[start..=end] {
            if y[i] == 1.0 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
        let recall = tp / pos;
        area += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
        start = end + 1;
    }
    Ok(area)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoffRates {
    pub cutoff: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
}

/// Confusion-matrix rates for `ŷ = 1{p ≥ t}`. An empty denominator gives 0
/// for precision, recall and f1, and 1 for specificity.
pub fn fixed_cutoff(p: &[f64], y: &[f64], t: f64) -> CutoffRates {
    let (mut tp, mut fp, mut tn, mut fn_) = (0.0, 0.0, 0.0, 0.0);
    for (pi, yi) in p.iter().zip(y) {
        match (*pi >= t, *yi == 1.0) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, false) => tn += 1.0,
            (false, true) => fn_ += 1.0,
        }
    }
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let specificity = if tn + fp > 0.0 { tn / (tn + fp) } else { 1.0 };
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    CutoffRates {
        cutoff: t,
        f1,
        precision,
        recall,
        specificity,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub brier: f64,
    pub ece: f64,
    pub auroc: f64,
    pub auprc: f64,
    pub cutoffs: Vec<CutoffRates>,
    pub calibration: Vec<CalibrationPoint>,
}

impl ClassificationReport {
    pub fn compute(p: &[f64], y: &[f64]) -> Result<Self> {
        let (ece, calibration) = ece_quantile(p, y, 10)?;
        Ok(ClassificationReport {
            brier: brier(p, y)?,
            ece,
            auroc: auroc(p, y)?,
            auprc: auprc(p, y)?,
            cutoffs: CUTOFFS.iter().map(|&t| fixed_cutoff(p, y, t)).collect(),
            calibration,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCI {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub resamples: usize,
    /// Two-sided paired p-value against the reference statistic.
    pub paired_p: Option<f64>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    // Linear interpolation between order statistics.
    let pos = q * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}

/// Percentile bootstrap of `stat` over `n` rows. Replicate `b` draws its
/// indices from the `(seed, "bootstrap", b)` stream; in paired mode the
/// reference is evaluated on the same indices and `p` is the two-sided
/// fraction of replicates on either side of zero difference (1 when the
/// difference vanishes identically).
pub fn bootstrap<F, G>(n: usize, stat: F, resamples: usize, seed: u64, reference: Option<G>) -> Result<BootstrapCI>
where
    F: Fn(&[usize]) -> f64 + Sync,
    G: Fn(&[usize]) -> f64 + Sync,
{
    if resamples == 0 {
        return Err(Error::Config("bootstrap needs at least one resample".into()));
    }
    if n == 0 {
        return Err(Error::Input("bootstrap of an empty sample".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    let point = stat(&all);
    let reps: Vec<(f64, Option<f64>)> = (0..resamples)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::stream(seed, "bootstrap", b as u64);
            let idx: Vec<usize> = (0..n).map(|_| r.gen_range(0..n)).collect();
            let s = stat(&idx);
            (s, reference.as_ref().map(|g| s - g(&idx)))
        })
        .collect();
    let mut values: Vec<f64> = reps.iter().map(|r| r.0).collect();
    values.sort_by(f64::total_cmp);
    let paired_p = reference.as_ref().map(|_| {
        let diffs: Vec<f64> = reps.iter().filter_map(|r| r.1).collect();
        if diffs.iter().all(|d| *d == 0.0) {
            return 1.0;
        }
        let le = diffs.iter().filter(|d| **d <= 0.0).count() as f64;
        let ge = diffs.iter().filter(|d| **d >= 0.0).count() as f64;
        (2.0 * le.min(ge) / diffs.len() as f64).min(1.0)
    });
    Ok(BootstrapCI {
        point,
        lo: percentile(&values, 0.025).min(point),
        hi: percentile(&values, 0.975).max(point),
        resamples,
        paired_p,
    })
}

/// Metrics of one method on one evaluation set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mc: Option<McEvaluation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classification: Option<ClassificationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub brier_ci: Option<BootstrapCI>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ess: Option<f64>,
}

/// Results for one setting or site, serialized as JSON or printed as an
/// aligned table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub methods: Vec<MethodMetrics>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_text(&self) -> String {
        let width = self
            .methods
            .iter()
            .map(|m| m.method.chars().count())
            .max()
            .unwrap_or(6)
            .max(6);
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.label);
        let regression = self.methods.iter().any(|m| m.mc.is_some());
        if regression {
            let _ = writeln!(out, "{:<width$}  {:>10}  {:>10}", "method", "worst", "mean");
            for m in &self.methods {
                if let Some(mc) = &m.mc {
                    let _ = writeln!(out, "{:<width$}  {:>10.3}  {:>10.3}", m.method, mc.worst, mc.mean);
                }
            }
        }
        let classification = self.methods.iter().any(|m| m.classification.is_some());
        if classification {
            let _ = writeln!(
                out,
                "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}  {:>21}",
                "method", "brier", "ece", "auroc", "auprc", "brier 95% CI"
            );
            for m in &self.methods {
                if let Some(c) = &m.classification {
                    let ci = m
                        .brier_ci
                        .as_ref()
                        .map(|ci| format!("[{:.4}, {:.4}]", ci.lo, ci.hi))
                        .unwrap_or_default();
                    let _ = writeln!(
                        out,
                        "{:<width$}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}  {:>21}",
                        m.method, c.brier, c.ece, c.auroc, c.auprc, ci
                    );
                }
            }
        }
        out
    }
}
