//! Experiment configuration files.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "distribution": { "kind": "dirichlet-value-share", "n": 2, "m": 2, "alpha": 0.5, "seed": 7 },
//!   "train": { "total_iters": 16000, "batch_size": 512, "seed": 1 },
//!   "modes": ["caama", "ama-only", "vcg"],
//!   "output_dir": "runs/dirichlet",
//!   "report_formats": ["csv", "json"]
//! }
//! ```
//!
//! Omitted `train` fields take their defaults.

use std::path::{Path, PathBuf};

use caama::trainer::{Mode, TrainConfig};
use caama::DistributionSpec;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;
pub const OUTPUT_ROOT_ENV: &str = "CAAMA_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeSel {
    #[serde(rename = "caama")]
    Caama,
    AmaOnly,
    Vcg,
}

impl ModeSel {
    pub fn name(self) -> &'static str {
        match self {
            ModeSel::Caama => "caama",
            ModeSel::AmaOnly => "ama-only",
            ModeSel::Vcg => "vcg",
        }
    }

    pub fn trained(self) -> Option<Mode> {
        match self {
            ModeSel::Caama => Some(Mode::Caama),
            ModeSel::AmaOnly => Some(Mode::AmaOnly),
            ModeSel::Vcg => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub distribution: DistributionSpec,
    #[serde(default)]
    pub train: TrainConfig,
    pub modes: Vec<ModeSel>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_formats")]
    pub report_formats: Vec<ReportFormat>,
}

fn default_formats() -> Vec<ReportFormat> {
    vec![ReportFormat::Csv, ReportFormat::Json]
}

impl ExperimentConfig {
    pub fn new(distribution: DistributionSpec, train: TrainConfig, modes: Vec<ModeSel>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            distribution,
            train,
            modes,
            output_dir: None,
            report_formats: default_formats(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(caama::Error::from)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(caama::Error::invalid(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, got {}", self.schema_version),
            )
            .into());
        }
        if self.modes.is_empty() {
            return Err(caama::Error::invalid("modes", "need at least one mode").into());
        }
        if self.report_formats.is_empty() {
            return Err(caama::Error::invalid("report_formats", "need csv and/or json").into());
        }
        self.distribution.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn wants(&self, f: ReportFormat) -> bool {
        self.report_formats.contains(&f)
    }

    /// `output_dir`, else `$CAAMA_OUTPUT_ROOT`, else `runs`.
    pub fn resolve_output(&self, fallback_name: &str) -> PathBuf {
        match &self.output_dir {
            Some(p) => p.clone(),
            None => output_root().join(fallback_name),
        }
    }
}

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doc_example_parses() {
        let text = r#"{
          "schema_version": 1,
          "distribution": { "kind": "dirichlet-value-share", "n": 2, "m": 2, "alpha": 0.5, "seed": 7 },
          "train": { "total_iters": 16000, "batch_size": 512, "seed": 1 },
          "modes": ["caama", "ama-only", "vcg"],
          "output_dir": "runs/dirichlet",
          "report_formats": ["csv", "json"]
        }"#;
        let cfg: ExperimentConfig = serde_json::from_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.train.total_iters, 16000);
        assert_eq!(cfg.train.menu_size, TrainConfig::default().menu_size);
        assert_eq!(cfg.modes, vec![ModeSel::Caama, ModeSel::AmaOnly, ModeSel::Vcg]);
    }

    #[test]
    fn unknown_train_field_is_rejected() {
        let text = r#"{"schema_version":1,"distribution":{"kind":"uniform-iid","n":2,"m":1,"seed":0},
            "train":{"iters":5},"modes":["vcg"]}"#;
        assert!(serde_json::from_str::<ExperimentConfig>(text).is_err());
    }

    #[test]
    fn wrong_schema_version() {
        let mut cfg = ExperimentConfig::new(
            DistributionSpec::uniform(2, 1, 0),
            TrainConfig::default(),
            vec![ModeSel::Vcg],
        );
        cfg.schema_version = 2;
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
    }
}
