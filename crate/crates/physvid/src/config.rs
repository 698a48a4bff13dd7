//! One versioned configuration object for a whole run.
//!
//! Every stage — dataset generation, annotation, training, sampling,
//! evaluation — reads its settings from a single [`RunConfig`], loadable
//! from JSON. Command-line flags override individual fields after loading;
//! secrets never appear here (clients name an environment variable
//! instead). The canonical hash ties artifacts to the configuration that
//! produced them: it is computed over a key-sorted JSON rendering, so it
//! does not depend on field order in the file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotate::{AnnotateOptions, DatasetOptions};
use crate::error::{Error, Result};
use crate::eval::TrackConfig;
use crate::model::ModelConfig;
use crate::sampling::GuidanceConfig;
use crate::training::TrainConfig;
use crate::vlm::ClientConfig;

/// Bumped whenever an old config file would silently mean something else.
pub const RUN_CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub dataset: DatasetOptions,
    pub annotate: AnnotateOptions,
    pub client: ClientConfig,
    pub training: TrainConfig,
    pub guidance: GuidanceConfig,
    pub tracker: TrackConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: RUN_CONFIG_SCHEMA_VERSION,
            model: ModelConfig::default(),
            dataset: DatasetOptions::default(),
            annotate: AnnotateOptions::default(),
            client: ClientConfig::default(),
            training: TrainConfig::default(),
            guidance: GuidanceConfig::default(),
            tracker: TrackConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse a config from JSON text. Fields left out keep their defaults;
    /// unknown fields are rejected so typos cannot pass silently.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("run config {}: {e}", path.display()),
            ))
        })?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != RUN_CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "run config schema version {} (this build reads {RUN_CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.training.validate()?;
        self.guidance.validate()?;
        Ok(())
    }

    /// Canonical content hash. The config is rendered to JSON with sorted
    /// object keys before hashing, so two files describing the same
    /// configuration hash identically regardless of key order, whitespace,
    /// or which defaulted fields they spell out.
    pub fn hash(&self) -> Result<String> {
        // serde_json's Value keeps object keys in a sorted map, so encoding
        // through Value canonicalizes ordering.
        let value = serde_json::to_value(self)?;
        Ok(crate::tensor::sha256_hex(serde_json::to_string(&value)?.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_roundtrips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        cfg.save(&path).unwrap();
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(cfg, loaded);
        assert_eq!(cfg.hash().unwrap(), loaded.hash().unwrap());
    }

    #[test]
    fn hash_ignores_key_order_and_spelled_out_defaults() {
        let a = RunConfig::from_json(r#"{"dataset": {"seed": 5, "clips": 3}}"#).unwrap();
        let b = RunConfig::from_json(r#"{"dataset": {"clips": 3, "seed": 5}}"#).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());

        // Spelling out a default explicitly parses to the same config.
        let c = RunConfig::from_json(
            r#"{"dataset": {"clips": 3, "seed": 5, "frames": 21}, "schema_version": 1}"#,
        )
        .unwrap();
        assert_eq!(a.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn hash_tracks_every_field() {
        let base = RunConfig::default();
        let mut guided = RunConfig::default();
        guided.guidance.guidance = 3.0;
        assert_ne!(base.hash().unwrap(), guided.hash().unwrap());
        let mut seeded = RunConfig::default();
        seeded.dataset.seed = 99;
        assert_ne!(base.hash().unwrap(), seeded.hash().unwrap());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = RunConfig::from_json(r#"{"bogus": 1}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err:?}");
        let err =
            RunConfig::from_json(r#"{"guidance": {"guidance": 2.0, "typo_field": 1}}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err:?}");
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let err = RunConfig::from_json(r#"{"schema_version": 2}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err:?}");
    }

    #[test]
    fn partial_files_keep_defaults_elsewhere() {
        let cfg = RunConfig::from_json(r#"{"guidance": {"guidance": 3.5}}"#).unwrap();
        assert_eq!(cfg.guidance.guidance, 3.5);
        assert_eq!(cfg.guidance.steps, GuidanceConfig::default().steps);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn invalid_nested_settings_fail_validation() {
        let err = RunConfig::from_json(r#"{"training": {"batch_size": 0}}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err:?}");
        let err = RunConfig::from_json(r#"{"guidance": {"steps": 0}}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err:?}");
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = RunConfig::load(Path::new("/nonexistent/run.json")).unwrap_err();
        assert!(matches!(err, Error::Io(_)), "{err:?}");
        assert_eq!(err.exit_code(), 3);
    }
}
