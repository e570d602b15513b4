use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use depthfed::federation::ExperimentConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Provenance record written next to a run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// SHA-256 of the effective config with object keys sorted.
    pub config_hash: String,
    pub seed: u64,
    pub artifact_version: String,
    pub started_at_unix: u64,
    pub finished_at_unix: Option<u64>,
    pub outputs: Outputs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outputs {
    pub config: PathBuf,
    pub reports: PathBuf,
    pub timings: PathBuf,
    pub checkpoints: PathBuf,
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig, out_dir: &Path) -> Self {
        Self {
            config_hash: config_hash(config),
            seed: config.seed,
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at_unix: unix_now(),
            finished_at_unix: None,
            outputs: Outputs {
                config: out_dir.join("config.json"),
                reports: out_dir.join("reports.jsonl"),
                timings: out_dir.join("timings.jsonl"),
                checkpoints: out_dir.join("checkpoints"),
            },
        }
    }

    pub fn finish(&mut self) {
        self.finished_at_unix = Some(unix_now());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Hash of the config's canonical JSON. `serde_json::Value` keeps object
/// keys sorted, so field order in the source file does not matter.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let value = serde_json::to_value(config).expect("config serializes");
    hash_value(&value)
}

pub fn hash_value(value: &serde_json::Value) -> String {
    let digest = Sha256::digest(value.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_key_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"b": 1, "a": {"y": [1, 2], "x": null}}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"a": {"x": null, "y": [1, 2]}, "b": 1}"#).unwrap();
        assert_eq!(hash_value(&a), hash_value(&b));
        let c: serde_json::Value = serde_json::from_str(r#"{"a": {"x": null, "y": [2, 1]}, "b": 1}"#).unwrap();
        assert_ne!(hash_value(&a), hash_value(&c));
    }

    #[test]
    fn known_digest() {
        // sha256 of the two bytes `{}`
        assert_eq!(
            hash_value(&serde_json::json!({})),
            "44136fa355b3678a1146ad16f7e8649e94fb4fc21fe77e8310c060f61caaff8a"
        );
    }

    #[test]
    fn config_hash_tracks_content() {
        let mut c = ExperimentConfig::from_json(
            r#"{"schema_version": 1, "seed": 0, "n_clients": 10, "tier_counts": [3, 3, 4], "rounds": 1,
                "participation_fraction": 1.0,
                "dataset": {"kind": "shapes", "train_per_class": 10, "test_per_class": 2}}"#,
        )
        .unwrap();
        let h = config_hash(&c);
        assert_eq!(h.len(), 64);
        c.seed += 1;
        assert_ne!(config_hash(&c), h);
    }
}
