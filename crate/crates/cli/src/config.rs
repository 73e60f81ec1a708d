//! `key = value` run files: training keys go to [`TrainConfig`], the rest
//! describe where the data lives.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use qgbdt::booster::CONFIG_KEYS;
use qgbdt::dataset::{load_csv_with, load_libsvm, CsvOptions, HeaderMode, RawDataset};
use qgbdt::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Auto,
    Csv,
    Libsvm,
}

#[derive(Debug, Clone)]
pub struct DataOptions {
    pub data: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub format: DataFormat,
    pub csv: CsvOptions,
}

impl Default for DataOptions {
    fn default() -> Self {
        Self {
            data: None,
            valid: None,
            format: DataFormat::Auto,
            csv: CsvOptions::default(),
        }
    }
}

pub const DATA_KEYS: &[&str] = &["data", "valid", "format", "label_column", "header"];

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataOptions,
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "data" => self.data.data = Some(PathBuf::from(value)),
            "valid" => self.data.valid = Some(PathBuf::from(value)),
            "format" => {
                self.data.format = match value.to_ascii_lowercase().as_str() {
                    "auto" => DataFormat::Auto,
                    "csv" => DataFormat::Csv,
                    "libsvm" | "svm" => DataFormat::Libsvm,
                    _ => bail!("format must be auto, csv or libsvm, got {value:?}"),
                }
            }
            "label_column" => {
                self.data.csv.label_column = value
                    .parse()
                    .with_context(|| format!("label_column: cannot parse {value:?}"))?
            }
            "header" => {
                self.data.csv.header = match value.to_ascii_lowercase().as_str() {
                    "auto" => HeaderMode::Auto,
                    "true" | "yes" | "1" => HeaderMode::Present,
                    "false" | "no" | "0" => HeaderMode::Absent,
                    _ => bail!("header must be auto, true or false, got {value:?}"),
                }
            }
            _ if !CONFIG_KEYS.contains(&key) => {
                let known: Vec<&str> = DATA_KEYS.iter().chain(CONFIG_KEYS).copied().collect();
                bail!("unknown config key {key:?}; known keys: {}", known.join(", "))
            }
            _ => self.train.set(key, value)?,
        }
        Ok(())
    }

    /// Applies every line of a config file. Later lines win.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("{}:{}: expected `key = value`, got {raw:?}", origin.display(), i + 1);
            };
            self.set(key.trim(), value)
                .with_context(|| format!("{}:{}", origin.display(), i + 1))?;
        }
        Ok(())
    }

    /// Default values, then the file, then `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = path {
            let text =
                std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
            cfg.apply_text(&text, path)?;
        }
        for o in overrides {
            let Some((key, value)) = o.split_once('=') else {
                bail!("--set expects key=value, got {o:?}");
            };
            cfg.set(key.trim(), value).with_context(|| format!("--set {o}"))?;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load_dataset(&self, path: &Path) -> Result<RawDataset> {
        let libsvm = match self.data.format {
            DataFormat::Libsvm => true,
            DataFormat::Csv => false,
            DataFormat::Auto => matches!(path.extension().and_then(|e| e.to_str()), Some("svm" | "libsvm")),
        };
        let data = if libsvm {
            load_libsvm(path)?
        } else {
            load_csv_with(path, &self.data.csv)?
        };
        Ok(data)
    }
}
