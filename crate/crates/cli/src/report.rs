//! `report`: merge run manifests into across-seed tables and plot data.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use drum_core::methods::baseline_names;
use drum_core::simgen::Setting;
use serde::{Deserialize, Serialize};

use crate::artifact::{self, Artifact};
use crate::error::{HarnessError, Result};
use crate::manifest::{RunManifest, METRICS_FILE};
use crate::run::{GroupMetrics, RunMetrics};

/// Name of the per-scale minimum over the baseline methods.
pub const ORACLE: &str = "Oracle best baseline";

/// Scale at which Setting-III results are compared across d_A.
pub const SETTING_III_SCALE: f64 = 1.8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    fn of(v: &[f64]) -> Spread {
        Spread {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v.iter().cloned().fold(f64::INFINITY, f64::min),
            max: v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// One (setting, d_A, method, s) cell aggregated over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub setting: Setting,
    pub d_a: usize,
    pub method: String,
    pub s: f64,
    pub seeds: usize,
    pub worst: Spread,
    pub mean: Spread,
    /// For the oracle rows: the baseline attaining the minimum of each column.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_methods: Option<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub normalization: String,
    pub manifests: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub files: Vec<Artifact>,
}

fn load(path: &Path) -> Result<RunMetrics> {
    let m: RunManifest = artifact::read_json(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let rel = m
        .reports
        .iter()
        .find(|a| a.path == METRICS_FILE)
        .ok_or_else(|| HarnessError::Incompatible(format!("{} lists no {METRICS_FILE}", path.display())))?;
    let bytes = artifact::read_string(&dir.join(&rel.path))?;
    if artifact::sha256_hex(bytes.as_bytes()) != rel.sha256 {
        return Err(HarnessError::Incompatible(format!(
            "{} no longer matches the digest recorded in {}",
            rel.path,
            path.display()
        )));
    }
    Ok(serde_json::from_str(&bytes)?)
}

type Key = (Setting, usize);

/// Groups keyed by (setting, d_A) with one entry per seed. Repeated seeds
/// must agree on the normalizer and are kept once.
fn collect(runs: &[(PathBuf, RunMetrics)]) -> Result<(String, BTreeMap<Key, Vec<GroupMetrics>>)> {
    let normalization = runs[0].1.normalization.clone();
    let mut out: BTreeMap<Key, Vec<GroupMetrics>> = BTreeMap::new();
    for (path, run) in runs {
        if run.normalization != normalization {
            return Err(HarnessError::Incompatible(format!(
                "{} normalizes by {} but earlier manifests by {normalization}",
                path.display(),
                run.normalization
            )));
        }
        for g in &run.groups {
            let Some(setting) = g.setting else { continue };
            let slot = out.entry((setting, g.d_a)).or_default();
            match slot.iter().find(|e| e.seed == g.seed) {
                Some(e) if e.normalizer != g.normalizer => {
                    return Err(HarnessError::Incompatible(format!(
                        "{}: setting {setting}, d_A {}, seed {} has normalizer {} elsewhere {}",
                        path.display(),
                        g.d_a,
                        g.seed,
                        g.normalizer,
                        e.normalizer
                    )))
                }
                Some(_) => {}
                None => slot.push(g.clone()),
            }
        }
    }
    Ok((normalization, out))
}

fn aggregate(key: Key, groups: &[GroupMetrics]) -> Vec<ReportRow> {
    // method → s → (worst per seed, mean per seed), first-seen order.
    let mut order: Vec<String> = Vec::new();
    type Cell = (f64, Vec<f64>, Vec<f64>);
    let mut cells: BTreeMap<(String, u64), Cell> = BTreeMap::new();
    for g in groups {
        for r in &g.results {
            if !order.contains(&r.method) {
                order.push(r.method.clone());
            }
            for e in &r.scales {
                let c = cells
                    .entry((r.method.clone(), e.s.to_bits()))
                    .or_insert((e.s, Vec::new(), Vec::new()));
                c.1.push(e.evaluation.worst);
                c.2.push(e.evaluation.mean);
            }
        }
    }
    let mut scales: Vec<f64> = cells.values().map(|c| c.0).collect();
    scales.sort_by(f64::total_cmp);
    scales.dedup();
    let mut rows = Vec::new();
    for method in &order {
        for &s in &scales {
            if let Some((_, w, m)) = cells.get(&(method.clone(), s.to_bits())) {
                rows.push(ReportRow {
                    setting: key.0,
                    d_a: key.1,
                    method: method.clone(),
                    s,
                    seeds: w.len(),
                    worst: Spread::of(w),
                    mean: Spread::of(m),
                    source_methods: None,
                });
            }
        }
    }
    for &s in &scales {
        let base: Vec<&ReportRow> = rows
            .iter()
            .filter(|r| r.s == s && baseline_names().contains(&r.method.as_str()))
            .collect();
        let best = |f: fn(&ReportRow) -> f64| base.iter().copied().min_by(|a, b| f(a).total_cmp(&f(b)));
        if let (Some(bw), Some(bm)) = (best(|r| r.worst.mean), best(|r| r.mean.mean)) {
            let oracle = ReportRow {
                setting: key.0,
                d_a: key.1,
                method: ORACLE.into(),
                s,
                seeds: bw.seeds.min(bm.seeds),
                worst: bw.worst,
                mean: bm.mean,
                source_methods: Some((bw.method.clone(), bm.method.clone())),
            };
            rows.push(oracle);
        }
    }
    rows
}

fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let sink = PathBuf::from("<memory>");
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(HarnessError::csv(&sink))?;
    for r in rows {
        w.write_record(&r).map_err(HarnessError::csv(&sink))?;
    }
    w.into_inner().map_err(|e| HarnessError::Io {
        path: sink,
        source: e.into_error(),
    })
}

const SERIES_HEADER: [&str; 9] = [
    "x",
    "method",
    "seeds",
    "worst",
    "worst_min",
    "worst_max",
    "mean",
    "mean_min",
    "mean_max",
];

fn series(x: String, r: &ReportRow) -> Vec<String> {
    vec![
        x,
        r.method.clone(),
        r.seeds.to_string(),
        r.worst.mean.to_string(),
        r.worst.min.to_string(),
        r.worst.max.to_string(),
        r.mean.mean.to_string(),
        r.mean.min.to_string(),
        r.mean.max.to_string(),
    ]
}

/// Merges run manifests and writes `report.json`, `table.csv` and one
/// plot-data CSV per figure: per (setting, d_A) against scale for Settings
/// I/II, and against d_A at s = 1.8 for Setting III.
pub fn cmd_report(manifests: &[PathBuf], out: &Path) -> Result<Report> {
    if manifests.is_empty() {
        return Err(HarnessError::Config("report needs at least one manifest".into()));
    }
    let runs = manifests
        .iter()
        .map(|p| Ok((p.clone(), load(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let (normalization, groups) = collect(&runs)?;
    if groups.is_empty() {
        return Err(HarnessError::Config("manifests contain no simulation results".into()));
    }
    let rows: Vec<ReportRow> = groups.iter().flat_map(|(k, g)| aggregate(*k, g)).collect();

    let mut files = Vec::new();
    let table = csv_bytes(
        &[
            "setting",
            "d_a",
            "method",
            "s",
            "seeds",
            "worst",
            "worst_min",
            "worst_max",
            "mean",
            "mean_min",
            "mean_max",
        ],
        rows.iter().map(|r| {
            // series() starts with (x, method); the table wants (method, s).
            let mut v = vec![
                r.setting.to_string(),
                r.d_a.to_string(),
                r.method.clone(),
                r.s.to_string(),
            ];
            v.extend(series(String::new(), r).into_iter().skip(2));
            v
        }),
    )?;
    files.push(artifact::write(out, "table.csv", &table)?);

    let mut figures: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
    for r in &rows {
        match r.setting {
            Setting::III => {
                if r.s == SETTING_III_SCALE {
                    figures
                        .entry("figure_setting-III.csv".into())
                        .or_default()
                        .push(series(r.d_a.to_string(), r));
                }
            }
            s => figures
                .entry(format!("figure_setting-{s}_da{}.csv", r.d_a))
                .or_default()
                .push(series(r.s.to_string(), r)),
        }
    }
    for (name, rows) in figures {
        files.push(artifact::write(
            out,
            &name,
            &csv_bytes(&SERIES_HEADER, rows.into_iter())?,
        )?);
    }
    let mut report = Report {
        normalization,
        manifests: manifests.iter().map(|p| p.display().to_string()).collect(),
        rows,
        files,
    };
    let json = artifact::to_json(&report)?;
    report.files.push(artifact::write(out, "report.json", &json)?);
    Ok(report)
}
