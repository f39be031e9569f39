//! Experiment configuration (TOML).
//!
//! ```toml
//! name = "setting1"
//! methods = ["Baseline-ERM", "DRUM"]   # omitted: all fourteen
//! scales = [0.6, 1.0, 1.4, 1.8]
//! mc_sets = 100
//! seeds = [1]
//!
//! [simulation]
//! setting = "I"
//! d_a = [5]
//!
//! [profile]                 # overrides for every setting
//! erm.train.lr = 1e-3
//! [profiles.III]            # overrides for one setting ("data" for CSV runs)
//! drum.worstcase.epochs = 100
//!
//! [grid."Baseline-ERM"]     # dotted profile paths → candidate values
//! "erm.train.lr" = [1e-4, 1e-3]
//! ```
//!
//! CSV experiments replace `[simulation]` with `[data]` (paths, schema).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use drum_core::methods::{Profile, Registry};
use drum_core::simgen::Setting;
use serde::{Deserialize, Serialize};

use crate::artifact::{read_string, sha256_hex};
use crate::error::{HarnessError, Result};
use crate::table::ColumnSchema;

fn default_name() -> String {
    "experiment".into()
}

fn default_scales() -> Vec<f64> {
    vec![0.6, 1.0, 1.4, 1.8]
}

fn default_mc() -> usize {
    100
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

fn default_resamples() -> usize {
    1000
}

fn default_validation() -> f64 {
    0.2
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub setting: Setting,
    /// Missing-covariate dimensions; empty means the setting's default.
    #[serde(default)]
    pub d_a: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_target: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: PathBuf,
    pub target: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<PathBuf>,
    pub schema: ColumnSchema,
    #[serde(default = "yes")]
    pub standardize: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// `None` runs every registered method.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<String>>,
    #[serde(default = "default_scales")]
    pub scales: Vec<f64>,
    #[serde(default = "default_mc")]
    pub mc_sets: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub parallel_methods: bool,
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
    /// Held-out share of the source used by `grid`.
    #[serde(default = "default_validation")]
    pub validation_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub profile: toml::Table,
    #[serde(default)]
    pub profiles: BTreeMap<String, toml::Table>,
    #[serde(default)]
    pub grid: BTreeMap<String, BTreeMap<String, Vec<toml::Value>>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config deserializes")
    }
}

/// Parses `a.b.c=value`; the value is read as a TOML literal, falling back
/// to a bare string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override {s:?} is not key=value")))?;
    let path: Vec<String> = key
        .trim()
        .split('.')
        .map(|p| p.trim().trim_matches('"').to_string())
        .collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(HarnessError::Config(format!("override {s:?} has an empty key segment")));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    Ok((path, value))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| HarnessError::Config(format!("override path crosses non-table key {p:?}")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses a config document, applying `key=value` overrides first.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|source| HarnessError::Toml {
            path: "<config>".into(),
            source,
        })?;
        for o in overrides {
            let (path, value) = parse_override(o)?;
            set_path(&mut table, &path, value)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|source| HarnessError::Toml {
                path: "<config>".into(),
                source,
            })?;
        Ok(cfg)
    }

    /// Reads a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = read_string(path)?;
        let mut cfg = Self::parse(&text, overrides).map_err(|e| match e {
            HarnessError::Toml { source, .. } => HarnessError::Toml {
                path: path.to_path_buf(),
                source,
            },
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(d) = cfg.data.as_mut() {
            for p in [&mut d.source, &mut d.target] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
            if let Some(e) = d.evaluation.as_mut() {
                if e.is_relative() {
                    *e = base.join(&*e);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mc_sets == 0 {
            return Err(HarnessError::Config("mc_sets must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("at least one seed is required".into()));
        }
        if let Some(m) = &self.methods {
            if m.is_empty() {
                return Err(HarnessError::Config("method list is empty".into()));
            }
            let reg = Registry::standard();
            for name in m {
                reg.get(name)?;
            }
        }
        match (&self.simulation, &self.data) {
            (Some(_), Some(_)) => {
                return Err(HarnessError::Config(
                    "set either [simulation] or [data], not both".into(),
                ))
            }
            (None, None) => return Err(HarnessError::Config("one of [simulation] or [data] is required".into())),
            (Some(_), None) => {
                if self.scales.is_empty() || self.scales.iter().any(|s| !(*s >= 0.0)) {
                    return Err(HarnessError::Config(
                        "scales must be a non-empty list of non-negative values".into(),
                    ));
                }
            }
            (None, Some(d)) => d.schema.validate()?,
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(HarnessError::Config("validation_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn method_names(&self) -> Vec<String> {
        match &self.methods {
            Some(m) => m.clone(),
            None => Registry::standard().names().into_iter().map(String::from).collect(),
        }
    }

    /// Hash of the canonical JSON form of the parsed config.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }

    /// Published defaults for the setting, then `[profile]`, then the
    /// setting's own `[profiles.<key>]`.
    pub fn profile_for(&self, setting: Option<Setting>, d_a: usize) -> Result<Profile> {
        let base = match setting {
            Some(s) => Profile::for_setting(s, d_a),
            None => Profile::default(),
        };
        let key = setting.map_or("data".to_string(), |s| s.to_string());
        let mut layers = vec![self.profile.clone()];
        if let Some(t) = self.profiles.get(&key) {
            layers.push(t.clone());
        }
        apply_profile_layers(base, &layers)
    }
}

/// Overlays TOML tables on a profile. Every overridden key must already
/// exist; externally tagged enum values (one-key tables) are replaced whole.
pub fn apply_profile_layers(base: Profile, layers: &[toml::Table]) -> Result<Profile> {
    let mut v = serde_json::to_value(&base)?;
    for layer in layers {
        let over = serde_json::to_value(layer)?;
        merge(&mut v, &over, "profile")?;
    }
    serde_json::from_value(v).map_err(|e| HarnessError::Config(format!("profile override: {e}")))
}

fn merge(base: &mut serde_json::Value, over: &serde_json::Value, path: &str) -> Result<()> {
    use serde_json::Value;
    match (base, over) {
        (Value::Object(b), Value::Object(o)) if b.len() != 1 || o.keys().all(|k| b.contains_key(k)) => {
            for (k, ov) in o {
                let here = format!("{path}.{k}");
                match b.get_mut(k) {
                    Some(bv) => merge(bv, ov, &here)?,
                    None => return Err(HarnessError::Config(format!("unknown hyperparameter {here}"))),
                }
            }
            Ok(())
        }
        (b, o) => {
            // Integers written for float fields stay integers in TOML; serde
            // accepts them for f64 targets, so a plain replace suffices.
            *b = o.clone();
            Ok(())
        }
    }
}

/// Writes `value` at a dotted `path` into a nested TOML table.
pub fn insert_dotted(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<String> = path.split('.').map(String::from).collect();
    set_path(table, &parts, value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_a_minimal_config() {
        let c = ExperimentConfig::parse("[simulation]\nsetting = \"I\"\n", &[]).unwrap();
        c.validate().unwrap();
        assert_eq!(c.mc_sets, 100);
        assert_eq!(c.scales, vec![0.6, 1.0, 1.4, 1.8]);
        assert_eq!(c.method_names().len(), 14);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let bad = [
            "methods = []\n[simulation]\nsetting = \"I\"",
            "methods = [\"Nope\"]\n[simulation]\nsetting = \"I\"",
            "mc_sets = 0\n[simulation]\nsetting = \"I\"",
            "",
        ];
        for text in bad {
            assert!(
                ExperimentConfig::parse(text, &[]).unwrap().validate().is_err(),
                "{text}"
            );
        }
        assert!(ExperimentConfig::parse("typo = 1", &[]).is_err());
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let c = ExperimentConfig::parse(
            "[simulation]\nsetting = \"II\"",
            &[
                "mc_sets=3".into(),
                "profile.erm.train.lr=0.05".into(),
                "name=quick".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.mc_sets, 3);
        assert_eq!(c.name, "quick");
        let p = c.profile_for(Some(Setting::II), 2).unwrap();
        assert_eq!(p.erm.train.lr, 0.05);
        let mut expected = Profile::for_setting(Setting::II, 2);
        expected.erm.train.lr = 0.05;
        assert_eq!(p, expected);
    }

    #[test]
    fn setting_layer_applies_after_common_layer() {
        let c = ExperimentConfig::parse(
            "[simulation]\nsetting = \"III\"\n[profile]\nerm.hidden = [8]\n[profiles.III]\nerm.hidden = [4, 4]\n",
            &[],
        )
        .unwrap();
        assert_eq!(c.profile_for(Some(Setting::III), 5).unwrap().erm.hidden, vec![4, 4]);
        assert_eq!(c.profile_for(Some(Setting::I), 5).unwrap().erm.hidden, vec![8]);
    }

    #[test]
    fn unknown_profile_keys_are_rejected() {
        let c = ExperimentConfig::parse("[simulation]\nsetting = \"I\"\n[profile]\nerm.lr = 1.0\n", &[]).unwrap();
        let e = c.profile_for(Some(Setting::I), 5).err().unwrap().to_string();
        assert!(e.contains("profile.erm.lr"), "{e}");
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::parse("[simulation]\nsetting = \"I\"", &[]).unwrap();
        let b = ExperimentConfig::parse("mc_sets = 5\n[simulation]\nsetting = \"I\"", &[]).unwrap();
        assert_eq!(a.hash().unwrap(), a.clone().hash().unwrap());
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }
}
