//! `grid`: hold out part of the source, score each hyperparameter cell by
//! validation loss (mse, or Brier for binary outcomes) and keep the minimizer.

use std::collections::BTreeMap;
use std::path::Path;

use drum_core::data::{LabeledSet, Task, UnlabeledSet};
use drum_core::methods::{FitContext, Profile, Registry, SharedFits};
use drum_core::metrics;
use drum_core::rng;
use drum_core::simgen::{gen_source, gen_target, Setting, SettingSpec};
use serde::{Deserialize, Serialize};

use crate::artifact::{self, Artifact};
use crate::config::{apply_profile_layers, insert_dotted, ExperimentConfig};
use crate::error::{HarnessError, Result};
use crate::model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub params: BTreeMap<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodGrid {
    pub method: String,
    pub cells: Vec<GridCell>,
    /// Index into `cells` of the lowest validation loss (first on ties).
    pub best: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridManifest {
    pub config_hash: String,
    pub seed: u64,
    pub validation_fraction: f64,
    pub validation_rows: usize,
    pub criterion: String,
    pub methods: Vec<MethodGrid>,
    pub files: Vec<Artifact>,
}

/// Cartesian product of the candidate lists, last key varying fastest.
fn cells(grid: &BTreeMap<String, Vec<toml::Value>>) -> Vec<BTreeMap<String, toml::Value>> {
    let mut out = vec![BTreeMap::new()];
    for (key, values) in grid {
        out = out
            .into_iter()
            .flat_map(|cell| {
                values.iter().map(move |v| {
                    let mut c = cell.clone();
                    c.insert(key.clone(), v.clone());
                    c
                })
            })
            .collect();
    }
    out
}

struct Split {
    train: LabeledSet,
    valid: LabeledSet,
    target: UnlabeledSet,
    task: Task,
    setting: Option<Setting>,
}

fn split(config: &ExperimentConfig, seed: u64) -> Result<(Split, f64)> {
    let fraction = config.validation_fraction;
    let (source, target, task, setting) = if let Some(sim) = &config.simulation {
        let mut spec = SettingSpec::new(sim.setting, sim.d_a.first().copied(), seed)?;
        if let Some(n) = sim.n {
            spec.n = n;
        }
        if let Some(n) = sim.n_target {
            spec.n_target = n;
        }
        (
            gen_source(&spec)?,
            gen_target(&spec)?,
            Task::Regression,
            Some(sim.setting),
        )
    } else if let Some(d) = &config.data {
        let p = model::prepare(&d.schema, &d.source, &d.target, d.standardize)?;
        (p.source, p.target, d.schema.task, None)
    } else {
        return Err(HarnessError::Config("grid needs [simulation] or [data]".into()));
    };
    let n = source.len();
    let n_valid = ((n as f64) * fraction).round() as usize;
    if n_valid == 0 || n_valid >= n {
        return Err(HarnessError::Config(format!(
            "validation split of {n} rows at {fraction} is degenerate"
        )));
    }
    let perm = rng::permutation(&mut rng::stream(seed, "grid.split", 0), n);
    let mut valid: Vec<usize> = perm[..n_valid].to_vec();
    let mut train: Vec<usize> = perm[n_valid..].to_vec();
    valid.sort_unstable();
    train.sort_unstable();
    Ok((
        Split {
            train: source.subset(&train),
            valid: source.subset(&valid),
            target,
            task,
            setting,
        },
        fraction,
    ))
}

fn score(name: &str, profile: &Profile, s: &Split, seed: u64) -> std::result::Result<f64, String> {
    let shared = SharedFits::default();
    let ctx = FitContext {
        source: &s.train,
        target: &s.target,
        task: s.task,
        profile,
        seed,
        shared: &shared,
    };
    let run = || -> drum_core::Result<f64> {
        let bundle = Registry::standard().get(name)?.fit(&ctx)?;
        let p = bundle.predict(s.valid.x.view())?;
        let (p, y) = (
            p.as_slice().expect("contiguous"),
            s.valid.y.as_slice().expect("contiguous"),
        );
        match s.task {
            Task::Regression => metrics::normalized_mse(p, y, 1.0),
            Task::Binary => metrics::brier(p, y),
        }
    };
    run().map_err(|e| e.to_string())
}

/// Scores every cell of every configured grid; writes `grid.json` and
/// `best_profile.toml` (the winning overrides, usable as `[profile]`).
pub fn cmd_grid(config: &ExperimentConfig, seed: u64, out: &Path) -> Result<GridManifest> {
    if config.grid.is_empty() {
        return Err(HarnessError::Config("no [grid] tables defined".into()));
    }
    for (method, grid) in &config.grid {
        Registry::standard().get(method)?;
        if grid.is_empty() || grid.values().any(Vec::is_empty) {
            return Err(HarnessError::Config(format!("grid for {method} is empty")));
        }
    }
    let (data, fraction) = split(config, seed)?;
    let base = config.profile_for(data.setting, data.train.d_a())?;
    let mut best_profile = toml::Table::new();
    let mut methods = Vec::new();
    for (method, grid) in &config.grid {
        let mut scored = Vec::new();
        for cell in cells(grid) {
            let mut layer = toml::Table::new();
            for (k, v) in &cell {
                insert_dotted(&mut layer, k, v.clone())?;
            }
            let profile = apply_profile_layers(base.clone(), &[layer])?;
            let (loss, error) = match score(method, &profile, &data, seed) {
                Ok(l) if l.is_finite() => (Some(l), None),
                Ok(l) => (None, Some(format!("non-finite validation loss {l}"))),
                Err(e) => (None, Some(e)),
            };
            let params = cell
                .iter()
                .map(|(k, v)| Ok((k.clone(), serde_json::to_value(v)?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            scored.push((cell, GridCell { params, loss, error }));
        }
        let best = scored
            .iter()
            .enumerate()
            .filter_map(|(i, (_, c))| c.loss.map(|l| (i, l)))
            .fold(None, |acc: Option<(usize, f64)>, (i, l)| match acc {
                Some((_, bl)) if bl <= l => acc,
                _ => Some((i, l)),
            })
            .map(|(i, _)| i);
        if let Some(i) = best {
            for (k, v) in &scored[i].0 {
                insert_dotted(&mut best_profile, k, v.clone())?;
            }
        }
        methods.push(MethodGrid {
            method: method.clone(),
            cells: scored.into_iter().map(|(_, c)| c).collect(),
            best,
        });
    }
    let mut manifest = GridManifest {
        config_hash: config.hash()?,
        seed,
        validation_fraction: fraction,
        validation_rows: data.valid.len(),
        criterion: match data.task {
            Task::Regression => "mse",
            Task::Binary => "brier",
        }
        .into(),
        methods,
        files: Vec::new(),
    };
    let toml_text = toml::to_string(&best_profile).map_err(|e| HarnessError::Config(format!("best profile: {e}")))?;
    manifest
        .files
        .push(artifact::write(out, "best_profile.toml", toml_text.as_bytes())?);
    let json = artifact::to_json(&manifest)?;
    artifact::write(out, "grid.json", &json)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cartesian_order_is_last_key_fastest() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), vec![toml::Value::Integer(1), toml::Value::Integer(2)]);
        g.insert(
            "b".to_string(),
            vec![
                toml::Value::Integer(10),
                toml::Value::Integer(20),
                toml::Value::Integer(30),
            ],
        );
        let c = cells(&g);
        assert_eq!(c.len(), 6);
        assert_eq!(c[1]["a"], toml::Value::Integer(1));
        assert_eq!(c[1]["b"], toml::Value::Integer(20));
        assert_eq!(c[3]["a"], toml::Value::Integer(2));
    }
}
