use std::path::Path;

use sha2::{Digest, Sha256};

use super::ExperimentError;
use crate::train::ExperimentConfig;

/// Parses a TOML experiment config. Missing keys take their defaults and
/// unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ExperimentError> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| ExperimentError::Config(e.message().to_string()))?;
    cfg.validate()
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ExperimentError> {
    let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::Io {
        path: path.to_owned(),
        source: e,
    })?;
    parse_config(&text).map_err(|e| match e {
        ExperimentError::Config(m) => ExperimentError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Fully resolved config as TOML, every default spelled out.
pub fn to_toml(cfg: &ExperimentConfig) -> String {
    toml::to_string(cfg).expect("experiment configs always serialize")
}

/// First 16 hex digits of the SHA-256 of the config's JSON form with the
/// seed zeroed, so repeats of one setting share a hash.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let canonical = ExperimentConfig {
        seed: 0,
        ..cfg.clone()
    };
    let json = serde_json::to_string(&canonical).expect("experiment configs always serialize");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}
