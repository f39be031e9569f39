//! `run`: fit every configured method once per (setting, d_A, seed) and
//! evaluate it on the Monte-Carlo perturbation sets or a labelled file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use drum_core::data::{LabeledSet, Task};
use drum_core::methods::{Diagnostics, FitContext, ModelBundle, Registry, SharedFits};
use drum_core::metrics::{self, BootstrapCI, McEvaluation, MethodMetrics, MetricReport};
use drum_core::simgen::{gen_perturbed_test, gen_source, gen_target, Setting, SettingSpec};
use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{self, Artifact};
use crate::config::{DataConfig, ExperimentConfig, SimulationConfig};
use crate::error::{HarnessError, Result};
use crate::manifest::{RunManifest, StageError, StageSeed, StageTime, MANIFEST_FILE, METRICS_FILE};
use crate::model::{self, FittedModel, MODEL_FORMAT};
use crate::table;

/// How every normalized MSE in a run is scaled.
pub const NORMALIZATION: &str = "source_outcome_variance";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleEvaluation {
    pub s: f64,
    #[serde(flatten)]
    pub evaluation: McEvaluation,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scales: Vec<ScaleEvaluation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<MethodMetrics>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub intervals: BTreeMap<String, BootstrapCI>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<Diagnostics>,
}

impl MethodResult {
    pub fn at_scale(&self, s: f64) -> Option<&McEvaluation> {
        self.scales.iter().find(|e| e.s == s).map(|e| &e.evaluation)
    }
}

/// Results for one (setting, d_A, seed) or one CSV dataset and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub setting: Option<Setting>,
    pub d_a: usize,
    pub seed: u64,
    pub normalizer: f64,
    pub results: Vec<MethodResult>,
}

/// Contents of `metrics.json`; contains no timings so identical configs
/// and seeds give identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub name: String,
    pub config_hash: String,
    pub normalization: String,
    pub groups: Vec<GroupMetrics>,
}

/// Mutable state owned by the orchestrator while a run progresses.
struct Ledger<'a> {
    out: &'a Path,
    models: Vec<Artifact>,
    reports: Vec<Artifact>,
    seeds: Vec<StageSeed>,
    errors: Vec<StageError>,
    times: Vec<StageTime>,
}

impl Ledger<'_> {
    fn time(&mut self, stage: String, since: Instant) {
        self.times.push(StageTime::new(stage, since.elapsed().as_secs_f64()));
    }

    fn fail(&mut self, stage: String, e: &dyn std::fmt::Display) -> String {
        let message = e.to_string();
        self.errors.push(StageError {
            stage,
            message: message.clone(),
        });
        message
    }
}

fn fit_all(names: &[String], ctx: &FitContext, parallel: bool) -> Vec<(drum_core::Result<ModelBundle>, f64)> {
    let reg = Registry::standard();
    let one = |name: &String| {
        let t = Instant::now();
        let r = reg.get(name).and_then(|m| m.fit(ctx));
        (r, t.elapsed().as_secs_f64())
    };
    if parallel {
        names.par_iter().map(one).collect()
    } else {
        names.iter().map(one).collect()
    }
}

/// Normalized MSE against the noiseless truth on every perturbation set,
/// fanned out by MC index.
pub fn evaluate_mc(
    bundle: &ModelBundle,
    scales: &[f64],
    tests: &[Vec<LabeledSet>],
    normalizer: f64,
) -> Result<Vec<ScaleEvaluation>> {
    scales
        .iter()
        .zip(tests)
        .map(|(&s, sets)| {
            let mses = sets
                .par_iter()
                .map(|ts| {
                    let pred = bundle.predict(ts.x.view())?;
                    let truth = ts
                        .fbar
                        .as_ref()
                        .ok_or_else(|| drum_core::Error::Input("test set without fbar".into()))?;
                    metrics::normalized_mse(
                        pred.as_slice().expect("contiguous"),
                        truth.as_slice().expect("contiguous"),
                        normalizer,
                    )
                })
                .collect::<drum_core::Result<Vec<f64>>>()?;
            Ok(ScaleEvaluation {
                s,
                evaluation: metrics::mc_summarize(&mses, normalizer)?,
            })
        })
        .collect()
}

fn simulated_group(
    config: &ExperimentConfig,
    sim: &SimulationConfig,
    d_a: Option<usize>,
    seed: u64,
    ledger: &mut Ledger,
) -> Result<GroupMetrics> {
    let mut spec = SettingSpec::new(sim.setting, d_a, seed)?;
    if let Some(n) = sim.n {
        spec.n = n;
    }
    if let Some(n) = sim.n_target {
        spec.n_target = n;
    }
    spec.validate()?;
    let label = format!("setting-{}_da{}_seed{}", spec.setting, spec.d_a, seed);

    let t = Instant::now();
    let source = gen_source(&spec)?;
    let target = gen_target(&spec)?;
    let tests = config
        .scales
        .iter()
        .map(|&s| {
            (0..config.mc_sets as u64)
                .into_par_iter()
                .map(|m| gen_perturbed_test(&spec, s, m))
                .collect::<drum_core::Result<Vec<_>>>()
        })
        .collect::<drum_core::Result<Vec<_>>>()?;
    ledger.time(format!("{label}/data"), t);
    ledger.seeds.push(StageSeed {
        stage: format!("{label}/data"),
        seed: spec.seed,
    });
    ledger.seeds.push(StageSeed {
        stage: format!("{label}/training"),
        seed,
    });

    let normalizer = source.outcome_variance();
    let profile = config.profile_for(Some(spec.setting), spec.d_a)?;
    let shared = SharedFits::default();
    let ctx = FitContext {
        source: &source,
        target: &target,
        task: Task::Regression,
        profile: &profile,
        seed,
        shared: &shared,
    };
    let names = config.method_names();
    let mut results = Vec::new();
    for (name, (fit, secs)) in names.iter().zip(fit_all(&names, &ctx, config.parallel_methods)) {
        let stage = format!("{label}/{name}");
        ledger.times.push(StageTime::new(format!("{stage}/fit"), secs));
        let bundle = match fit {
            Ok(b) => b,
            Err(e) => {
                let error = Some(ledger.fail(format!("{stage}/fit"), &e));
                results.push(MethodResult {
                    method: name.clone(),
                    error,
                    ..Default::default()
                });
                continue;
            }
        };
        let art = artifact::write(
            ledger.out,
            &format!("models/{label}/{}.json", artifact::slug(name)),
            &artifact::to_json(&bundle)?,
        )?;
        let mut r = MethodResult {
            method: name.clone(),
            model_sha256: Some(art.sha256.clone()),
            diagnostics: Some(bundle.diagnostics.clone()),
            ..Default::default()
        };
        ledger.models.push(art);
        let t = Instant::now();
        match evaluate_mc(&bundle, &config.scales, &tests, normalizer) {
            Ok(s) => r.scales = s,
            Err(e) => r.error = Some(ledger.fail(format!("{stage}/evaluate"), &e)),
        }
        ledger.time(format!("{stage}/evaluate"), t);
        results.push(r);
    }
    Ok(GroupMetrics {
        label,
        setting: Some(spec.setting),
        d_a: spec.d_a,
        seed,
        normalizer,
        results,
    })
}

fn data_group(config: &ExperimentConfig, data: &DataConfig, seed: u64, ledger: &mut Ledger) -> Result<GroupMetrics> {
    let label = format!("data_seed{seed}");
    let t = Instant::now();
    let prepared = model::prepare(&data.schema, &data.source, &data.target, data.standardize)?;
    let evaluation = match &data.evaluation {
        Some(p) => {
            let (mut x, y) = table::load_labeled(p, data.schema.task, &prepared.x_columns, &prepared.y_column)?;
            prepared.standardizer.apply_x(&mut x);
            Some((x, y))
        }
        None => None,
    };
    ledger.time(format!("{label}/data"), t);
    ledger.seeds.push(StageSeed {
        stage: format!("{label}/training"),
        seed,
    });
    let normalizer = prepared.source.outcome_variance();
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
    let names = config.method_names();
    let mut results = Vec::new();
    for (name, (fit, secs)) in names.iter().zip(fit_all(&names, &ctx, config.parallel_methods)) {
        let stage = format!("{label}/{name}");
        ledger.times.push(StageTime::new(format!("{stage}/fit"), secs));
        let bundle = match fit {
            Ok(b) => b,
            Err(e) => {
                let error = Some(ledger.fail(format!("{stage}/fit"), &e));
                results.push(MethodResult {
                    method: name.clone(),
                    error,
                    ..Default::default()
                });
                continue;
            }
        };
        let fitted = FittedModel {
            format: MODEL_FORMAT,
            schema: data.schema.clone(),
            x_columns: prepared.x_columns.clone(),
            a_columns: prepared.a_columns.clone(),
            y_column: prepared.y_column.clone(),
            standardizer: prepared.standardizer.clone(),
            source_outcome_variance: normalizer,
            seed,
            bundle,
        };
        let art = artifact::write(
            ledger.out,
            &format!("models/{label}/{}.json", artifact::slug(name)),
            &artifact::to_json(&fitted)?,
        )?;
        let mut r = MethodResult {
            method: name.clone(),
            model_sha256: Some(art.sha256.clone()),
            diagnostics: Some(fitted.bundle.diagnostics.clone()),
            ..Default::default()
        };
        ledger.models.push(art);
        if let Some((x, y)) = &evaluation {
            let t = Instant::now();
            let outcome = fitted
                .bundle
                .predict(x.view())
                .map_err(HarnessError::from)
                .and_then(|p: Array1<f64>| {
                    model::evaluate_predictions(
                        name,
                        data.schema.task,
                        p.as_slice().expect("contiguous"),
                        y.as_slice().expect("contiguous"),
                        normalizer,
                        None,
                        config.bootstrap_resamples,
                        seed,
                    )
                });
            match outcome {
                Ok((mm, iv)) => {
                    r.evaluation = Some(mm);
                    r.intervals = iv;
                }
                Err(e) => r.error = Some(ledger.fail(format!("{stage}/evaluate"), &e)),
            }
            ledger.time(format!("{stage}/evaluate"), t);
        }
        results.push(r);
    }
    Ok(GroupMetrics {
        label,
        setting: None,
        d_a: prepared.source.d_a(),
        seed,
        normalizer,
        results,
    })
}

/// Rows are methods; columns are worst-case then mean normalized MSE per
/// scale.
pub fn group_table_csv(g: &GroupMetrics, scales: &[f64]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let sink = std::path::PathBuf::from("<memory>");
    let mut header = vec!["method".to_string()];
    header.extend(scales.iter().map(|s| format!("worst_s{s}")));
    header.extend(scales.iter().map(|s| format!("mean_s{s}")));
    header.push("error".into());
    w.write_record(&header).map_err(HarnessError::csv(&sink))?;
    for r in &g.results {
        let cell = |f: fn(&McEvaluation) -> f64, s: f64| r.at_scale(s).map(|e| f(e).to_string()).unwrap_or_default();
        let mut row = vec![r.method.clone()];
        row.extend(scales.iter().map(|&s| cell(|e| e.worst, s)));
        row.extend(scales.iter().map(|&s| cell(|e| e.mean, s)));
        row.push(r.error.clone().unwrap_or_default());
        w.write_record(&row).map_err(HarnessError::csv(&sink))?;
    }
    w.into_inner().map_err(|e| HarnessError::Io {
        path: sink,
        source: e.into_error(),
    })
}

fn group_text(g: &GroupMetrics, scales: &[f64]) -> String {
    let mut out = String::new();
    if g.setting.is_none() {
        let report = MetricReport {
            label: g.label.clone(),
            methods: g.results.iter().filter_map(|r| r.evaluation.clone()).collect(),
        };
        out.push_str(&report.to_text());
    } else {
        let width = g.results.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
        let _ = writeln!(out, "{}  (normalized MSE; worst | mean)", g.label);
        let _ = write!(out, "{:<width$}", "method");
        for s in scales {
            let _ = write!(out, "  {:>7}", format!("s={s}"));
        }
        out.push_str("  |");
        for s in scales {
            let _ = write!(out, "  {:>7}", format!("s={s}"));
        }
        out.push('\n');
        for r in &g.results {
            let _ = write!(out, "{:<width$}", r.method);
            let picks: [fn(&McEvaluation) -> f64; 2] = [|e| e.worst, |e| e.mean];
            for (k, pick) in picks.iter().enumerate() {
                if k == 1 {
                    out.push_str("  |");
                }
                for &s in scales {
                    match r.at_scale(s) {
                        Some(e) => {
                            let _ = write!(out, "  {:>7.3}", pick(e));
                        }
                        None => {
                            let _ = write!(out, "  {:>7}", "-");
                        }
                    }
                }
            }
            if let Some(e) = &r.error {
                let _ = write!(out, "  error: {e}");
            }
            out.push('\n');
        }
    }
    out
}

/// Trains, evaluates and writes `metrics.json`, per-group tables, model
/// files and `manifest.json` under `out`.
pub fn cmd_run(config: &ExperimentConfig, out: &Path) -> Result<(RunManifest, RunMetrics)> {
    config.validate()?;
    let mut ledger = Ledger {
        out,
        models: Vec::new(),
        reports: Vec::new(),
        seeds: Vec::new(),
        errors: Vec::new(),
        times: Vec::new(),
    };
    let total = Instant::now();
    let mut groups = Vec::new();
    for &seed in &config.seeds {
        if let Some(sim) = &config.simulation {
            let d_as: Vec<Option<usize>> = if sim.d_a.is_empty() {
                vec![None]
            } else {
                sim.d_a.iter().map(|d| Some(*d)).collect()
            };
            for d_a in d_as {
                groups.push(simulated_group(config, sim, d_a, seed, &mut ledger)?);
            }
        } else if let Some(data) = &config.data {
            groups.push(data_group(config, data, seed, &mut ledger)?);
        }
    }
    let metrics = RunMetrics {
        name: config.name.clone(),
        config_hash: config.hash()?,
        normalization: NORMALIZATION.into(),
        groups,
    };
    let art = artifact::write(out, METRICS_FILE, &artifact::to_json(&metrics)?)?;
    ledger.reports.push(art);
    for g in &metrics.groups {
        if g.setting.is_some() {
            let art = artifact::write(
                out,
                &format!("table_{}.csv", g.label),
                &group_table_csv(g, &config.scales)?,
            )?;
            ledger.reports.push(art);
        }
        let art = artifact::write(
            out,
            &format!("table_{}.txt", g.label),
            group_text(g, &config.scales).as_bytes(),
        )?;
        ledger.reports.push(art);
    }
    ledger.time("total".into(), total);
    let mut all = ledger.models.clone();
    all.extend(ledger.reports.iter().cloned());
    let manifest = RunManifest {
        name: config.name.clone(),
        code_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: metrics.config_hash.clone(),
        config: config.clone(),
        seeds: ledger.seeds,
        models: ledger.models,
        reports: ledger.reports,
        artifacts_sha256: artifact::combined_digest(&all),
        errors: ledger.errors,
        wall_clock: ledger.times,
    };
    artifact::write(out, MANIFEST_FILE, &artifact::to_json(&manifest)?)?;
    Ok((manifest, metrics))
}
