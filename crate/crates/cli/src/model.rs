//! CSV pathway: fit one method on files, predict, evaluate.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use drum_core::data::{LabeledSet, Task, UnlabeledSet};
use drum_core::methods::{FitContext, ModelBundle, Registry, SharedFits};
use drum_core::metrics::{self, BootstrapCI, ClassificationReport, MethodMetrics};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::artifact::{self, Artifact};
use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::manifest::StageTime;
use crate::table::{self, ColumnSchema, Standardizer};

pub const MODEL_FORMAT: u32 = 1;

/// A fitted method plus everything needed to map raw CSV columns onto its
/// inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub format: u32,
    pub schema: ColumnSchema,
    pub x_columns: Vec<String>,
    pub a_columns: Vec<String>,
    pub y_column: String,
    pub standardizer: Standardizer,
    pub source_outcome_variance: f64,
    pub seed: u64,
    pub bundle: ModelBundle,
}

impl FittedModel {
    pub fn load(path: &Path) -> Result<FittedModel> {
        let m: FittedModel = artifact::read_json(path)?;
        if m.format != MODEL_FORMAT {
            return Err(HarnessError::Config(format!(
                "{}: model format {} is not supported (expected {MODEL_FORMAT})",
                path.display(),
                m.format
            )));
        }
        Ok(m)
    }

    /// Predictions for raw (unstandardized) covariate rows.
    pub fn predict_raw(&self, mut x: Array2<f64>) -> Result<Array1<f64>> {
        self.standardizer.apply_x(&mut x);
        Ok(self.bundle.predict(x.view())?)
    }
}

/// Source and target loaded through the schema and standardized.
pub struct PreparedData {
    pub source: LabeledSet,
    pub target: UnlabeledSet,
    pub x_columns: Vec<String>,
    pub a_columns: Vec<String>,
    pub y_column: String,
    pub standardizer: Standardizer,
}

pub fn prepare(schema: &ColumnSchema, source: &Path, target: &Path, standardize: bool) -> Result<PreparedData> {
    let frame = table::load_source(source, schema)?;
    let standardizer = Standardizer::fit(&frame, standardize);
    let mut tx = table::load_target(target, schema, &frame.x_columns)?;
    let (mut x, mut a) = (frame.x.clone(), frame.a.clone());
    standardizer.apply_x(&mut x);
    standardizer.apply_a(&mut a);
    standardizer.apply_x(&mut tx);
    Ok(PreparedData {
        source: LabeledSet::new(x, a, frame.y.clone())?,
        target: UnlabeledSet::new(tx)?,
        x_columns: frame.x_columns,
        a_columns: frame.a_columns,
        y_column: frame.y_column,
        standardizer,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitManifest {
    pub config_hash: String,
    pub method: String,
    pub seed: u64,
    pub source: PathBuf,
    pub target: PathBuf,
    pub model: Artifact,
    pub target_predictions: Artifact,
    pub wall_clock: Vec<StageTime>,
}

/// Fits `method` on CSV files and writes `model.json`,
/// `target_predictions.csv` and `manifest.json` under `out`.
pub fn cmd_fit(
    config: &ExperimentConfig,
    method: &str,
    source: Option<&Path>,
    target: Option<&Path>,
    seed: u64,
    out: &Path,
) -> Result<FitManifest> {
    let data = config
        .data
        .as_ref()
        .ok_or_else(|| HarnessError::Config("fit needs a [data] section with the column schema".into()))?;
    data.schema.validate()?;
    let source = source.unwrap_or(&data.source);
    let target = target.unwrap_or(&data.target);
    let t0 = Instant::now();
    let prepared = prepare(&data.schema, source, target, data.standardize)?;
    let load_secs = t0.elapsed().as_secs_f64();
    let profile = config.profile_for(None, prepared.source.d_a())?;
    let shared = SharedFits::default();
    let ctx = FitContext {
        source: &prepared.source,
        target: &prepared.target,
        task: data.schema.task,
        profile: &profile,
        seed,
        shared: &shared,
    };
    let t1 = Instant::now();
    let bundle = Registry::standard().get(method)?.fit(&ctx)?;
    let fit_secs = t1.elapsed().as_secs_f64();
    let preds = bundle.predict(prepared.target.x.view())?;
    let model = FittedModel {
        format: MODEL_FORMAT,
        schema: data.schema.clone(),
        x_columns: prepared.x_columns,
        a_columns: prepared.a_columns,
        y_column: prepared.y_column,
        standardizer: prepared.standardizer,
        source_outcome_variance: prepared.source.outcome_variance(),
        seed,
        bundle,
    };
    let model_art = artifact::write(out, "model.json", &artifact::to_json(&model)?)?;
    let pred_art = artifact::write(
        out,
        "target_predictions.csv",
        &table::numeric_csv(&["prediction".into()], &[preds.view()])?,
    )?;
    let manifest = FitManifest {
        config_hash: config.hash()?,
        method: method.to_string(),
        seed,
        source: source.to_path_buf(),
        target: target.to_path_buf(),
        model: model_art,
        target_predictions: pred_art,
        wall_clock: vec![StageTime::new("load", load_secs), StageTime::new("fit", fit_secs)],
    };
    artifact::write(out, "manifest.json", &artifact::to_json(&manifest)?)?;
    Ok(manifest)
}

/// Writes a one-column `prediction` CSV for the rows of `input`.
pub fn cmd_predict(model: &Path, input: &Path, out: &Path) -> Result<Array1<f64>> {
    let m = FittedModel::load(model)?;
    let x = table::load_features(input, &m.x_columns)?;
    let preds = m.predict_raw(x)?;
    let bytes = table::numeric_csv(&["prediction".into()], &[preds.view()])?;
    let dir = out.parent().unwrap_or(Path::new("."));
    let name = out.file_name().and_then(|n| n.to_str()).unwrap_or("predictions.csv");
    artifact::write(dir, name, &bytes)?;
    Ok(preds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEvaluation {
    pub model: String,
    pub model_sha256: String,
    pub metrics: MethodMetrics,
    /// Percentile bootstrap intervals keyed by metric name; `paired_p`
    /// compares against the `--compare` model when one is given.
    pub intervals: BTreeMap<String, BootstrapCI>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub data: String,
    pub task: Task,
    pub rows: usize,
    pub models: Vec<ModelEvaluation>,
}

type Stat = Box<dyn Fn(&[f64], &[f64]) -> f64 + Sync>;

fn nan_on_err(r: drum_core::Result<f64>) -> f64 {
    r.unwrap_or(f64::NAN)
}

fn statistics(task: Task, normalizer: f64) -> Vec<(&'static str, Stat)> {
    match task {
        Task::Regression => vec![(
            "normalized_mse",
            Box::new(move |p: &[f64], y: &[f64]| nan_on_err(metrics::normalized_mse(p, y, normalizer))) as Stat,
        )],
        Task::Binary => vec![
            (
                "brier",
                Box::new(|p: &[f64], y: &[f64]| nan_on_err(metrics::brier(p, y))) as Stat,
            ),
            (
                "ece",
                Box::new(|p: &[f64], y: &[f64]| nan_on_err(metrics::ece_quantile(p, y, 10).map(|r| r.0))),
            ),
            (
                "auroc",
                Box::new(|p: &[f64], y: &[f64]| nan_on_err(metrics::auroc(p, y))),
            ),
            (
                "auprc",
                Box::new(|p: &[f64], y: &[f64]| nan_on_err(metrics::auprc(p, y))),
            ),
        ],
    }
}

fn pick(v: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| v[i]).collect()
}

/// Metrics of `preds` against `y`, with bootstrap intervals (paired against
/// `reference` predictions when given).
#[allow(clippy::too_many_arguments)]
pub fn evaluate_predictions(
    method: &str,
    task: Task,
    preds: &[f64],
    y: &[f64],
    normalizer: f64,
    reference: Option<&[f64]>,
    resamples: usize,
    seed: u64,
) -> Result<(MethodMetrics, BTreeMap<String, BootstrapCI>)> {
    let mut mm = MethodMetrics {
        method: method.to_string(),
        ..Default::default()
    };
    match task {
        Task::Regression => {
            let v = metrics::normalized_mse(preds, y, normalizer)?;
            mm.mc = Some(metrics::mc_summarize(&[v], normalizer)?);
        }
        Task::Binary => mm.classification = Some(ClassificationReport::compute(preds, y)?),
    }
    let mut intervals = BTreeMap::new();
    for (name, stat) in statistics(task, normalizer) {
        let stat = &stat;
        let own = |idx: &[usize]| stat(&pick(preds, idx), &pick(y, idx));
        let other = reference.map(|r| move |idx: &[usize]| stat(&pick(r, idx), &pick(y, idx)));
        let ci = metrics::bootstrap(y.len(), own, resamples, seed, other)?;
        intervals.insert(name.to_string(), ci);
    }
    mm.brier_ci = intervals.get("brier").cloned();
    Ok((mm, intervals))
}

/// Evaluates a model file (and optionally a second one, paired) on a
/// labelled CSV.
pub fn cmd_evaluate(
    model: &Path,
    compare: Option<&Path>,
    data: &Path,
    resamples: usize,
    seed: u64,
) -> Result<EvaluationReport> {
    let m = FittedModel::load(model)?;
    let task = m.bundle.task;
    let (x, y) = table::load_labeled(data, task, &m.x_columns, &m.y_column)?;
    let preds = m.predict_raw(x.clone())?;
    let other = match compare {
        Some(path) => {
            let c = FittedModel::load(path)?;
            if c.bundle.task != task || c.x_columns != m.x_columns {
                return Err(HarnessError::Config(
                    "compared models use different tasks or covariates".into(),
                ));
            }
            let p = c.predict_raw(x)?;
            Some((path, c, p))
        }
        None => None,
    };
    let y = y.to_vec();
    let normalizer = m.source_outcome_variance;
    let (mm, iv) = evaluate_predictions(
        &m.bundle.method,
        task,
        preds.as_slice().expect("contiguous"),
        &y,
        normalizer,
        other.as_ref().map(|o| o.2.as_slice().expect("contiguous")),
        resamples,
        seed,
    )?;
    let mut models = vec![ModelEvaluation {
        model: model.display().to_string(),
        model_sha256: artifact::sha256_hex(artifact::read_string(model)?.as_bytes()),
        metrics: mm,
        intervals: iv,
    }];
    if let Some((path, c, p)) = &other {
        let (mm, iv) = evaluate_predictions(
            &c.bundle.method,
            task,
            p.as_slice().expect("contiguous"),
            &y,
            c.source_outcome_variance,
            None,
            resamples,
            seed,
        )?;
        models.push(ModelEvaluation {
            model: path.display().to_string(),
            model_sha256: artifact::sha256_hex(artifact::read_string(path)?.as_bytes()),
            metrics: mm,
            intervals: iv,
        });
    }
    Ok(EvaluationReport {
        data: data.display().to_string(),
        task,
        rows: y.len(),
        models,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_binary_predictor() {
        let y = [0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let (mm, iv) = evaluate_predictions("p", Task::Binary, &y, &y, 1.0, None, 50, 3).unwrap();
        let c = mm.classification.unwrap();
        assert_eq!(c.brier, 0.0);
        assert_eq!(c.ece, 0.0);
        assert_eq!(c.auroc, 1.0);
        assert_eq!(
            iv.keys().cloned().collect::<Vec<_>>(),
            ["auprc", "auroc", "brier", "ece"]
        );
        assert_eq!(mm.brier_ci.unwrap().point, 0.0);
    }

    #[test]
    fn constant_prevalence_brier() {
        let y: Vec<f64> = (0..40).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        let q = 0.25;
        let p = vec![q; y.len()];
        let (mm, _) = evaluate_predictions("c", Task::Binary, &p, &y, 1.0, None, 20, 3).unwrap();
        assert!((mm.classification.unwrap().brier - q * (1.0 - q)).abs() < 1e-12);
    }

    #[test]
    fn paired_p_is_reported_per_metric() {
        let y: Vec<f64> = (0..60).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let good: Vec<f64> = y
            .iter()
            .enumerate()
            .map(|(i, v)| 0.2 + 0.6 * v + 0.001 * i as f64)
            .collect();
        let bad = vec![0.3; y.len()];
        let (_, iv) = evaluate_predictions("g", Task::Binary, &good, &y, 1.0, Some(&bad), 200, 9).unwrap();
        for (name, ci) in &iv {
            let p = ci.paired_p.unwrap_or_else(|| panic!("{name} lacks paired_p"));
            assert!((0.0..=1.0).contains(&p));
        }
        assert!(iv["brier"].paired_p.unwrap() < 0.05);
    }

    #[test]
    fn regression_report_is_normalized() {
        let y = [1.0, 2.0, 3.0, 4.0];
        let p = [1.5, 2.5, 3.5, 4.5];
        let (mm, iv) = evaluate_predictions("r", Task::Regression, &p, &y, 0.5, None, 10, 1).unwrap();
        let mc = mm.mc.unwrap();
        assert!((mc.mean - 0.5).abs() < 1e-12);
        assert_eq!(mc.worst, mc.mean);
        assert!((iv["normalized_mse"].point - 0.5).abs() < 1e-12);
    }
}
