//! Run manifests: what produced an artifact.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use mrkp_core::config::TrainConfig;

use crate::error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Content hash of a set of files, independent of their location.
pub fn fingerprint(files: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    for f in files {
        let bytes = std::fs::read(f).map_err(Error::io(f))?;
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex(&h.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Behavior switches that are fixed by this implementation or chosen by
/// configuration, recorded so that results can be compared across runs.
pub fn design_flags(config: &TrainConfig) -> Vec<(&'static str, String)> {
    vec![
        ("normalization", "per-object unit box".into()),
        ("fps", "seeded first pick, lowest-index ties".into()),
        ("encoder.sampling", "farthest-from-centroid start, lexicographic ties".into()),
        ("pairing", "two seeded groups, no repetition within a pass".into()),
        ("batch", "1 pair".into()),
        ("mutual.direction", config.direction.as_str().into()),
        ("mutual.global_feature", "reconstruction target".into()),
        ("loss.mutual_target", config.mutual_target.as_str().into()),
        ("loss.coverage", "activation prefix, last weight truncated".into()),
        ("optimizer", "adam beta1=0.9 beta2=0.999 eps=1e-8".into()),
        ("optim.clip_norm", config.clip_norm.to_string()),
        ("encoder.score_norm", config.encoder.score_norm.as_str().into()),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub dataset_fingerprint: String,
    pub dataset_files: usize,
    pub version: String,
}

impl RunManifest {
    pub fn new(config: TrainConfig, dataset_fingerprint: String, dataset_files: usize) -> Self {
        Self { config, dataset_fingerprint, dataset_files, version: VERSION.into() }
    }

    /// Short stable identifier: hash of version, config and dataset.
    pub fn run_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.version.as_bytes());
        h.update([0]);
        h.update(self.config.render().as_bytes());
        h.update([0]);
        h.update(self.dataset_fingerprint.as_bytes());
        hex(&h.finalize()[..8])
    }

    /// JSON form without a timestamp, as embedded in checkpoints.
    pub fn to_json(&self) -> Value {
        let config: Map<String, Value> =
            self.config.entries().into_iter().map(|(k, v)| (k.to_string(), Value::String(v))).collect();
        let flags: Map<String, Value> =
            design_flags(&self.config).into_iter().map(|(k, v)| (k.to_string(), Value::String(v))).collect();
        json!({
            "run_id": self.run_id(),
            "version": self.version,
            "config": config,
            "dataset": { "fingerprint": self.dataset_fingerprint, "files": self.dataset_files },
            "design_flags": flags,
        })
    }

    /// Writes the manifest with a creation timestamp.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut v = self.to_json();
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        v["created_unix"] = json!(now);
        let mut text = serde_json::to_string_pretty(&v).expect("manifest serializes");
        text.push('\n');
        crate::io::write_atomic(path, text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_appear_verbatim() {
        let m = RunManifest::new(TrainConfig::default(), "00".into(), 0);
        let v = m.to_json();
        assert_eq!(v["config"]["keypoints"], "10");
        assert_eq!(v["config"]["points_per_cloud"], "2048");
        assert_eq!(v["config"]["epochs"], "80");
        assert_eq!(v["config"]["loss.lambda_self"], "0.5");
        assert_eq!(v["config"]["loss.lambda_mutual"], "0.5");
    }

    #[test]
    fn run_id_tracks_config() {
        let a = RunManifest::new(TrainConfig::default(), "00".into(), 0);
        let mut cfg = TrainConfig::default();
        cfg.seed = 1;
        let b = RunManifest::new(cfg, "00".into(), 0);
        assert_eq!(a.run_id(), a.clone().run_id());
        assert_ne!(a.run_id(), b.run_id());
        assert_eq!(a.run_id().len(), 16);
    }
}
