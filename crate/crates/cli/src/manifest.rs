//! Run manifests: the hashes, seeds, and versions that pin a pipeline run.
//!
//! A manifest deliberately carries no timestamps or host details, so two
//! runs of the same configuration produce byte-identical manifests and any
//! mismatch between reruns points at a real reproducibility break.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use driftwood_core::{CoreError, Result};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Seed for a named pipeline stage, expanded from the master seed so stages
/// never share randomness and inserting a stage cannot shift its neighbors.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    driftwood_core::rng::stream(master, stage).next_u64()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_sha256: String,
    pub master_seed: u64,
    pub stage_seeds: BTreeMap<String, u64>,
    pub checkpoint_sha256: Option<String>,
    pub versions: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(config_sha256: String, master_seed: u64, stages: &[&str]) -> Self {
        let stage_seeds = stages
            .iter()
            .map(|s| (s.to_string(), stage_seed(master_seed, s)))
            .collect();
        RunManifest {
            config_sha256,
            master_seed,
            stage_seeds,
            checkpoint_sha256: None,
            versions: tool_versions(),
        }
    }

    pub fn seed(&self, stage: &str) -> Result<u64> {
        self.stage_seeds
            .get(stage)
            .copied()
            .ok_or_else(|| CoreError::validation(format!("manifest has no stage {stage:?}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = serde_json::to_string_pretty(self)?;
        body.push('\n');
        fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

pub fn tool_versions() -> BTreeMap<String, String> {
    let mut versions = BTreeMap::new();
    versions.insert("cli".to_string(), env!("CARGO_PKG_VERSION").to_string());
    versions.insert(
        "checkpoint-format".to_string(),
        driftwood_core::trainer::CHECKPOINT_VERSION.to_string(),
    );
    versions
}

fn civil_from_days(mut days: i64) -> (i64, u32, u32) {
    days += 719_468;
    let era = days.div_euclid(146_097);
    let doe = days.rem_euclid(146_097);
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let year = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let day = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let month = (if mp < 10 { mp + 3 } else { mp - 9 }) as u32;
    (if month <= 2 { year + 1 } else { year }, month, day)
}

/// Compact UTC stamp (`YYYYMMDDTHHMMSSZ`) used to name run directories.
pub fn timestamp_name(unix_secs: u64) -> String {
    let days = (unix_secs / 86_400) as i64;
    let rem = unix_secs % 86_400;
    let (year, month, day) = civil_from_days(days);
    format!(
        "{year:04}{month:02}{day:02}T{:02}{:02}{:02}Z",
        rem / 3600,
        (rem % 3600) / 60,
        rem % 60
    )
}

pub fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
