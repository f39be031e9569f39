use serde::{Deserialize, Serialize};

use crate::artifact::Artifact;
use crate::config::ExperimentConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

impl StageTime {
    pub fn new(stage: impl Into<String>, seconds: f64) -> Self {
        StageTime {
            stage: stage.into(),
            seconds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeed {
    pub stage: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageError {
    pub stage: String,
    pub message: String,
}

/// Record of one `run`. Everything except `wall_clock` is a pure function
/// of the config, the seeds and the code version; `artifacts_sha256`
/// digests the emitted models and reports (never this file).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub code_version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<StageSeed>,
    pub models: Vec<Artifact>,
    pub reports: Vec<Artifact>,
    pub artifacts_sha256: String,
    pub errors: Vec<StageError>,
    pub wall_clock: Vec<StageTime>,
}

pub const METRICS_FILE: &str = "metrics.json";
pub const MANIFEST_FILE: &str = "manifest.json";
