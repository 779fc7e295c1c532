//! Append-only run manifest: one JSON line per invocation in
//! `manifest.jsonl`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use tower_core::data::Dataset;
use tower_core::TowerError;

use crate::settings::Settings;
use crate::CliResult;

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub timestamp_unix: u64,
    pub overrides: Vec<(String, String)>,
    pub config: serde_json::Value,
    pub dataset_hash: Option<String>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, settings: Option<&Settings>) -> Self {
        let config = settings.map_or(
            serde_json::Value::Null,
            |s| serde_json::json!({ "train": s.train, "finetune": s.ft }),
        );
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: settings.map_or(0, |s| s.train.seed),
            timestamp_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            overrides: settings.map_or_else(Vec::new, |s| s.entries.clone()),
            config,
            dataset_hash: None,
            outputs: Vec::new(),
        }
    }

    pub fn append(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join("manifest.jsonl");
        let line = serde_json::to_string(self).map_err(|e| TowerError::Format(e.to_string()))?;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| TowerError::File {
                path: path.clone(),
                source: e,
            })?;
        writeln!(f, "{line}").map_err(TowerError::from)?;
        Ok(())
    }
}

/// FNV-1a over pixel bits, labels, masks and splits.
pub fn dataset_hash(ds: &Dataset<f32>) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for img in &ds.images {
        let (a, b, c) = img.shape();
        eat(&[a as u64, b as u64, c as u64]
            .map(u64::to_le_bytes)
            .concat());
        for v in img.data() {
            eat(&v.to_bits().to_le_bytes());
        }
    }
    if let Some(labels) = &ds.labels {
        for &l in labels {
            eat(&(l as u64).to_le_bytes());
        }
    }
    if let Some(masks) = &ds.masks {
        for m in masks {
            for v in m.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
    }
    for s in &ds.splits {
        eat(format!("{s:?}").as_bytes());
    }
    format!("{h:016x}")
}
