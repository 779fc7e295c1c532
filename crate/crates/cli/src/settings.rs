//! Config file, `--set` pairs and dedicated flags merged into the run
//! configuration.

use tower_core::config::{apply_entries, read_kv_file, Configurable, Entry};
use tower_core::eval::FinetuneConfig;
use tower_core::trainer::TrainConfig;

use crate::{CliError, CliResult, Common};

pub struct Settings {
    pub train: TrainConfig,
    pub ft: FinetuneConfig,
    /// Every applied key in order, for the manifest.
    pub entries: Vec<(String, String)>,
}

/// Resolves the configuration; every failure here is a validation error.
pub fn load(common: &Common, flags: &[(&str, Option<String>)]) -> CliResult<Settings> {
    let mut entries: Vec<Entry> = match &common.config {
        Some(path) => read_kv_file(path).map_err(|e| CliError::Validation(e.to_string()))?,
        None => Vec::new(),
    };
    for pair in &common.set {
        let (k, v) = pair.split_once('=').ok_or_else(|| {
            CliError::Validation(format!("--set expects KEY=VALUE, got `{pair}`"))
        })?;
        entries.push(Entry {
            key: k.trim().into(),
            value: v.trim().into(),
            line: 0,
        });
    }
    if let Some(seed) = common.seed {
        entries.push(Entry {
            key: "seed".into(),
            value: seed.to_string(),
            line: 0,
        });
    }
    for (k, v) in flags {
        if let Some(v) = v {
            entries.push(Entry {
                key: (*k).into(),
                value: v.clone(),
                line: 0,
            });
        }
    }
    let mut train = TrainConfig::default();
    let mut ft = FinetuneConfig::default();
    let invalid = |e: tower_core::TowerError| CliError::Validation(e.to_string());
    apply_entries(&entries, &mut [&mut train, &mut ft]).map_err(invalid)?;
    train.validate().map_err(invalid)?;
    ft.validate().map_err(invalid)?;
    Ok(Settings {
        train,
        ft,
        entries: entries.into_iter().map(|e| (e.key, e.value)).collect(),
    })
}
