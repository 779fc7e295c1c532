//! Flat `key = value` configuration files and the dataset section shared
//! by every run.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{
    gen_synthetic_retina_with, load_idx, load_png_dir, Dataset, Modality, SyntheticConfig,
};
use crate::error::{Result, TowerError};
use crate::scalar::Scalar;

/// One `key = value` line; `line` 0 marks a command-line override.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Parses config text. Blank lines and `#` comments are skipped; a key may
/// appear only once.
pub fn parse_kv(text: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            TowerError::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                i + 1
            ))
        })?;
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(TowerError::Config(format!("line {}: empty key", i + 1)));
        }
        if out.iter().any(|e| e.key == key) {
            return Err(TowerError::ConfigKey {
                key,
                reason: format!("repeated on line {}", i + 1),
            });
        }
        out.push(Entry {
            key,
            value: v.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

pub fn read_kv_file(path: &Path) -> Result<Vec<Entry>> {
    let text = std::fs::read_to_string(path).map_err(|e| TowerError::file(path, e))?;
    parse_kv(&text).map_err(|e| match e {
        TowerError::Config(m) => TowerError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Parses `value` for `key`, reporting the key on failure.
pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse::<T>().map_err(|e| TowerError::ConfigKey {
        key: key.into(),
        reason: format!("`{value}`: {e}"),
    })
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(TowerError::ConfigKey {
            key: key.into(),
            reason: format!("`{value}` is not a boolean"),
        }),
    }
}

/// Types that accept configuration keys one at a time.
pub trait Configurable {
    /// Applies one key; `Ok(false)` means the key is not ours.
    fn set(&mut self, key: &str, value: &str) -> Result<bool>;

    /// Sanity checks run after every key is applied.
    fn validate(&self) -> Result<()>;
}

/// Applies `entries` across `targets`; a key no target claims is an error.
pub fn apply_entries(entries: &[Entry], targets: &mut [&mut dyn Configurable]) -> Result<()> {
    'next: for e in entries {
        for t in targets.iter_mut() {
            if t.set(&e.key, &e.value)? {
                continue 'next;
            }
        }
        let reason = if e.line == 0 {
            "unknown key".to_string()
        } else {
            format!("unknown key (line {})", e.line)
        };
        return Err(TowerError::ConfigKey {
            key: e.key.clone(),
            reason,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Png,
    Idx,
}

impl FromStr for DataSource {
    type Err = TowerError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(DataSource::Synthetic),
            "png" => Ok(DataSource::Png),
            "idx" => Ok(DataSource::Idx),
            other => Err(TowerError::Config(format!(
                "unknown data source `{other}` (synthetic, png, idx)"
            ))),
        }
    }
}

impl Display for DataSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DataSource::Synthetic => "synthetic",
            DataSource::Png => "png",
            DataSource::Idx => "idx",
        })
    }
}

/// Where the images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub data: DataSource,
    /// PNG directory, or the IDX image archive.
    pub data_path: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub labels_path: Option<PathBuf>,
    pub num_classes: usize,
    pub modality: Modality,
    pub synthetic_n: usize,
    pub synthetic_height: usize,
    pub synthetic_width: usize,
    pub data_seed: u64,
    /// Fractions used when the source ships no splits.
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic,
            data_path: None,
            manifest: None,
            labels_path: None,
            num_classes: 2,
            modality: Modality::Synthetic,
            synthetic_n: 400,
            synthetic_height: 32,
            synthetic_width: 32,
            data_seed: 0,
            val_frac: 0.1,
            test_frac: 0.2,
        }
    }
}

impl Configurable for DataConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "data" => self.data = parse_value(key, value)?,
            "data_path" => self.data_path = Some(PathBuf::from(value)),
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            "labels_path" => self.labels_path = Some(PathBuf::from(value)),
            "num_classes" => self.num_classes = parse_value(key, value)?,
            "modality" => self.modality = parse_value(key, value)?,
            "synthetic_n" => self.synthetic_n = parse_value(key, value)?,
            "synthetic_height" => self.synthetic_height = parse_value(key, value)?,
            "synthetic_width" => self.synthetic_width = parse_value(key, value)?,
            "data_seed" => self.data_seed = parse_value(key, value)?,
            "data_val_frac" => self.val_frac = parse_value(key, value)?,
            "data_test_frac" => self.test_frac = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn validate(&self) -> Result<()> {
        let need = |key: &str, v: &Option<PathBuf>| {
            if v.is_none() {
                Err(TowerError::ConfigKey {
                    key: key.into(),
                    reason: format!("required when data = {}", self.data),
                })
            } else {
                Ok(())
            }
        };
        match self.data {
            DataSource::Synthetic => {
                if self.synthetic_n == 0 {
                    return Err(TowerError::ConfigKey {
                        key: "synthetic_n".into(),
                        reason: "must be >= 1".into(),
                    });
                }
            }
            DataSource::Png => {
                need("data_path", &self.data_path)?;
                need("manifest", &self.manifest)?;
            }
            DataSource::Idx => {
                need("data_path", &self.data_path)?;
                need("labels_path", &self.labels_path)?;
            }
        }
        if self.num_classes == 0 {
            return Err(TowerError::ConfigKey {
                key: "num_classes".into(),
                reason: "must be >= 1".into(),
            });
        }
        Ok(())
    }
}

impl DataConfig {
    /// Loads and validates the dataset. Sources without splits get random
    /// ones drawn from `data_seed`.
    pub fn load<S: Scalar>(&self) -> Result<Dataset<S>> {
        self.validate()?;
        let mut ds = match self.data {
            DataSource::Synthetic => {
                let cfg = SyntheticConfig {
                    val_frac: self.val_frac,
                    test_frac: self.test_frac,
                    ..SyntheticConfig::default()
                };
                gen_synthetic_retina_with(
                    self.synthetic_n,
                    self.synthetic_height,
                    self.synthetic_width,
                    self.data_seed,
                    &cfg,
                )?
            }
            DataSource::Png => {
                let mut ds = load_png_dir(
                    self.data_path.as_deref().unwrap(),
                    self.manifest.as_deref().unwrap(),
                )?;
                ds.modality = self.modality;
                if ds.labels.is_some() {
                    ds.num_classes = ds.num_classes.max(self.num_classes);
                }
                ds
            }
            DataSource::Idx => {
                let mut ds = load_idx(
                    self.data_path.as_deref().unwrap(),
                    self.labels_path.as_deref().unwrap(),
                    self.num_classes,
                )?;
                ds.modality = self.modality;
                ds.assign_random_splits(self.data_seed, self.val_frac, self.test_frac)?;
                ds
            }
        };
        if self.data != DataSource::Synthetic {
            ds.images = ds.images.iter().map(|i| i.min_max_normalized()).collect();
        }
        ds.validate()?;
        Ok(ds)
    }
}
