//! `simulate`: write a setting's source, target and perturbation sets as CSV.

use std::path::Path;

use drum_core::data::LabeledSet;
use drum_core::simgen::{gen_perturbed_test, gen_source, gen_target, Setting, SettingSpec};
use ndarray::ArrayView1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{self, Artifact};
use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::table::numeric_csv;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationManifest {
    pub spec: SettingSpec,
    pub scales: Vec<f64>,
    pub mc_sets: usize,
    pub files: Vec<Artifact>,
}

/// Setting spec from explicit flags, falling back to the config's
/// `[simulation]` section (first d_A, size overrides).
pub fn spec_for(
    config: &ExperimentConfig,
    setting: Option<Setting>,
    d_a: Option<usize>,
    seed: u64,
) -> Result<SettingSpec> {
    let sim = config.simulation.as_ref();
    let setting = setting
        .or(sim.map(|s| s.setting))
        .ok_or_else(|| HarnessError::Config("no setting given (flag or [simulation])".into()))?;
    let d_a = d_a.or_else(|| sim.and_then(|s| s.d_a.first().copied()));
    let mut spec = SettingSpec::new(setting, d_a, seed)?;
    if let Some(s) = sim.filter(|s| s.setting == setting) {
        if let Some(n) = s.n {
            spec.n = n;
        }
        if let Some(n) = s.n_target {
            spec.n_target = n;
        }
    }
    spec.validate()?;
    Ok(spec)
}

fn headers(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |i| format!("{prefix}{i}"))
}

fn labeled_csv(set: &LabeledSet, with_truth: bool) -> Result<Vec<u8>> {
    let mut names: Vec<String> = headers("x", set.d_x()).chain(headers("a", set.d_a())).collect();
    names.push("y".into());
    let mut cols: Vec<ArrayView1<f64>> = set.x.columns().into_iter().chain(set.a.columns()).collect();
    cols.push(set.y.view());
    if let Some(f) = set.fbar.as_ref().filter(|_| with_truth) {
        names.push("fbar".into());
        cols.push(f.view());
    }
    numeric_csv(&names, &cols)
}

/// Writes `source.csv`, `target.csv`, `tests/s<scale>/mc<index>.csv` and
/// `simulation.json` under `out`.
pub fn cmd_simulate(spec: &SettingSpec, scales: &[f64], mc_sets: usize, out: &Path) -> Result<SimulationManifest> {
    spec.validate()?;
    let source = gen_source(spec)?;
    let target = gen_target(spec)?;
    let mut files = vec![artifact::write(out, "source.csv", &labeled_csv(&source, false)?)?];
    let tx: Vec<String> = headers("x", target.d_x()).collect();
    let cols: Vec<ArrayView1<f64>> = target.x.columns().into_iter().collect();
    files.push(artifact::write(out, "target.csv", &numeric_csv(&tx, &cols)?)?);
    for &s in scales {
        let written = (0..mc_sets as u64)
            .into_par_iter()
            .map(|m| {
                let set = gen_perturbed_test(spec, s, m)?;
                artifact::write(out, &format!("tests/s{s}/mc{m:03}.csv"), &labeled_csv(&set, true)?)
            })
            .collect::<Result<Vec<_>>>()?;
        files.extend(written);
    }
    let manifest = SimulationManifest {
        spec: spec.clone(),
        scales: scales.to_vec(),
        mc_sets,
        files,
    };
    artifact::write(out, "simulation.json", &artifact::to_json(&manifest)?)?;
    Ok(manifest)
}
