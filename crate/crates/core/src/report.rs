//! Run artifacts: the per-round metrics table and the run manifest.
//!
//! Metrics are written as CSV with floats in shortest round-trip form, so
//! two runs of the same configuration produce byte-identical files up to
//! the `wall_ms` column (wall-clock time is the one permitted source of
//! nondeterminism; [`strip_wall_ms`] projects it out for comparisons). The
//! manifest captures the config echo plus two digests of the final weights:
//! an exact one over the raw f64 bit patterns and a rounded one that is
//! stable across platforms that differ in the last few mantissa bits.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::MlpParams;
use crate::net::PROTO_VERSION;
use crate::server::RoundRecord;

/// Render round records as a CSV table with one gradient-norm column per
/// layer.
pub fn metrics_csv_string(records: &[RoundRecord]) -> String {
    let depth = records.first().map_or(0, |r| r.grad_norms.len());
    let mut out = String::from("round,mode,train_loss");
    for l in 1..=depth {
        out.push_str(&format!(",grad_norm_l{l}"));
    }
    out.push_str(",wall_ms\n");
    for r in records {
        out.push_str(&format!("{},{},{}", r.round, r.mode.as_str(), r.train_loss));
        for norm in &r.grad_norms {
            out.push_str(&format!(",{norm}"));
        }
        out.push_str(&format!(",{:.3}\n", r.wall_ms));
    }
    out
}

pub fn write_metrics_csv(path: &Path, records: &[RoundRecord]) -> Result<()> {
    std::fs::write(path, metrics_csv_string(records))?;
    Ok(())
}

/// Remove the `wall_ms` column from a metrics table, for determinism
/// comparisons.
pub fn strip_wall_ms(csv: &str) -> String {
    let mut lines = csv.lines();
    let Some(header) = lines.next() else {
        return String::new();
    };
    let columns: Vec<&str> = header.split(',').collect();
    let Some(drop) = columns.iter().position(|c| *c == "wall_ms") else {
        return csv.to_string();
    };
    let project = |line: &str| -> String {
        line.split(',')
            .enumerate()
            .filter(|(i, _)| *i != drop)
            .map(|(_, f)| f)
            .collect::<Vec<_>>()
            .join(",")
    };
    let mut out = project(header);
    out.push('\n');
    for line in lines {
        out.push_str(&project(line));
        out.push('\n');
    }
    out
}

/// SHA-256 over the exact bit patterns of every weight (dims first, then
/// layers in order, entries row-major, little-endian); equal hashes mean
/// bit-identical models.
pub fn param_hash_exact(params: &MlpParams) -> String {
    let mut hasher = Sha256::new();
    for &w in params.dims().as_slice() {
        hasher.update((w as u64).to_le_bytes());
    }
    for layer in params.weights() {
        for &v in layer.data() {
            hasher.update(v.to_bits().to_le_bytes());
        }
    }
    hex(&hasher.finalize())
}

/// SHA-256 over weights rounded to seven significant decimal digits;
/// tolerant of last-bits drift while still pinning the model to about 1e-6
/// relative precision.
pub fn param_hash_rounded(params: &MlpParams) -> String {
    let mut hasher = Sha256::new();
    for &w in params.dims().as_slice() {
        hasher.update((w as u64).to_le_bytes());
    }
    for layer in params.weights() {
        for &v in layer.data() {
            hasher.update(format!("{v:.6e},").as_bytes());
        }
    }
    hex(&hasher.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything needed to audit or replay a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub proto_version: u32,
    /// Echo of the configuration the run actually used.
    pub config: RunConfig,
    pub rounds_completed: u64,
    pub final_train_loss: Option<f64>,
    pub param_hash_exact: String,
    pub param_hash_rounded: String,
    pub total_wall_ms: f64,
}

impl RunManifest {
    pub fn new(config: &RunConfig, records: &[RoundRecord], params: &MlpParams) -> RunManifest {
        RunManifest {
            proto_version: PROTO_VERSION,
            config: config.clone(),
            rounds_completed: records.len() as u64,
            final_train_loss: records.last().map(|r| r.train_loss),
            param_hash_exact: param_hash_exact(params),
            param_hash_rounded: param_hash_rounded(params),
            total_wall_ms: records.iter().map(|r| r.wall_ms).sum(),
        }
    }
}

/// Pretty-printed manifest JSON with a trailing newline.
pub fn manifest_json(manifest: &RunManifest) -> Result<String> {
    serde_json::to_string_pretty(manifest)
        .map(|text| text + "\n")
        .map_err(|e| Error::Usage(format!("manifest serialization: {e}")))
}

pub fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<()> {
    std::fs::write(path, manifest_json(manifest)?)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<RunManifest> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Ingestion(format!("manifest {}: {e}", path.display())))
}
