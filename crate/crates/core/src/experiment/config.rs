use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbones::{registry, Pooling};
use crate::datasets::{load_dataset_with, Binarize, DatasetId, DatasetSpec, LoadedDataset, Sample};
use crate::diagnostics::ProbeConfig;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::lora::{AdapterConfig, LoraTarget};
use crate::trainer::{AdaptMode, ModelConfig, Regime, Sampling, TrainConfig};

/// Flat-key experiment description, read from TOML.
///
/// Dataset entries are `<layout>:<path>` with layout one of `lucchi`, `vnc`,
/// `vnc-stack2` (unlabelled stack only, diagnostics) or `split` (any
/// `train|test/img|mask` tree; the directory name becomes the dataset id).
/// Relative paths resolve against the config file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub backbone: String,
    pub adapt: AdaptMode,
    pub regime: Regime,
    pub sampling: Sampling,
    pub datasets: Vec<String>,
    /// Two domains for the mismatch diagnostics; defaults to `datasets`.
    pub diagnose_datasets: Vec<String>,
    pub num_runs: usize,
    pub seed: u64,
    pub output_root: PathBuf,
    pub resize_longest_edge: Option<usize>,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub binarize_threshold: u16,
    pub head_hidden: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f32,
    pub lora_targets: Vec<LoraTarget>,
    pub pooling: Pooling,
    pub probe_l2: f64,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let lora = AdapterConfig::default();
        Self {
            backbone: "dinov2-l14".into(),
            adapt: train.adapt,
            regime: train.regime,
            sampling: train.sampling,
            datasets: Vec::new(),
            diagnose_datasets: Vec::new(),
            num_runs: 5,
            seed: 0,
            output_root: PathBuf::from("runs"),
            resize_longest_edge: None,
            max_epochs: train.max_epochs,
            patience: train.patience,
            learning_rate: train.learning_rate,
            weight_decay: train.weight_decay,
            batch_size: train.batch_size,
            validation_fraction: 0.10,
            binarize_threshold: 128,
            head_hidden: 256,
            lora_rank: lora.rank,
            lora_alpha: lora.alpha,
            lora_dropout: lora.dropout,
            lora_targets: lora.targets.into_iter().collect(),
            pooling: Pooling::Mean,
            probe_l2: 1.0,
            base_dir: PathBuf::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("config schema: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: config schema: {}", path.display(), e.message())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        registry(&self.backbone)?;
        if self.datasets.is_empty() {
            return Err(Error::Config("`datasets` must list at least one dataset".into()));
        }
        for d in self.datasets.iter().chain(&self.diagnose_datasets) {
            DatasetRef::parse(d)?;
        }
        if self.num_runs == 0 {
            return Err(Error::Config("`num_runs` must be at least 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config("`validation_fraction` must lie in (0, 1)".into()));
        }
        if !(self.probe_l2 >= 0.0) {
            return Err(Error::Config("`probe_l2` must be non-negative".into()));
        }
        self.train_config(self.seed).validate(self.datasets.len())?;
        if self.adapt == AdaptMode::Lora {
            self.model_config().lora.validate()?;
        }
        Ok(())
    }

    /// Stable hash of everything that determines results; output location and
    /// repetition count are excluded.
    pub fn fingerprint(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serialises");
        if let Some(map) = value.as_object_mut() {
            map.remove("output_root");
            map.remove("num_runs");
        }
        let canonical = serde_json::to_string(&value).expect("value serialises");
        hex::encode(Sha256::digest(canonical.as_bytes()))[..16].to_string()
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            max_epochs: self.max_epochs,
            patience: self.patience,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            seed,
            regime: self.regime,
            sampling: self.sampling,
            adapt: self.adapt,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            head_hidden: self.head_hidden,
            lora: AdapterConfig {
                rank: self.lora_rank,
                alpha: self.lora_alpha,
                targets: self.lora_targets.iter().copied().collect(),
                dropout: self.lora_dropout,
                ..AdapterConfig::default()
            },
        }
    }

    pub fn probe_config(&self, seed: u64) -> ProbeConfig {
        ProbeConfig {
            validation_fraction: self.validation_fraction,
            seed,
            l2: self.probe_l2,
            ..ProbeConfig::default()
        }
    }

    pub fn binarize(&self) -> Binarize {
        Binarize::Threshold(self.binarize_threshold)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn experiment_dir(&self) -> PathBuf {
        self.resolve(&self.output_root).join(self.fingerprint())
    }

    pub fn dataset_refs(&self) -> Result<Vec<DatasetRef>> {
        self.datasets.iter().map(|d| DatasetRef::parse(d)).collect()
    }

    pub fn diagnose_refs(&self) -> Result<Vec<DatasetRef>> {
        let list = if self.diagnose_datasets.is_empty() { &self.datasets } else { &self.diagnose_datasets };
        list.iter().map(|d| DatasetRef::parse(d)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefLayout {
    Lucchi,
    Vnc,
    VncStack2,
    Split,
}

/// One `<layout>:<path>` dataset entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetRef {
    pub layout: RefLayout,
    pub path: PathBuf,
}

impl DatasetRef {
    pub fn parse(text: &str) -> Result<Self> {
        let (layout, path) = text
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("dataset `{text}` must look like `<layout>:<path>`")))?;
        let layout = match layout {
            "lucchi" => RefLayout::Lucchi,
            "vnc" => RefLayout::Vnc,
            "vnc-stack2" => RefLayout::VncStack2,
            "split" => RefLayout::Split,
            other => {
                return Err(Error::Config(format!(
                    "unknown dataset layout `{other}` (expected lucchi, vnc, vnc-stack2 or split)"
                )))
            }
        };
        if path.is_empty() {
            return Err(Error::Config(format!("dataset `{text}` has an empty path")));
        }
        Ok(Self { layout, path: PathBuf::from(path) })
    }

    pub fn spec(&self, cfg: &ExperimentConfig) -> DatasetSpec {
        let root = cfg.resolve(&self.path);
        match self.layout {
            RefLayout::Lucchi => DatasetSpec::lucchi(root),
            RefLayout::Vnc | RefLayout::VncStack2 => DatasetSpec::vnc(root),
            RefLayout::Split => {
                let name = root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                let id = name.parse().unwrap_or(DatasetId::Other(name));
                DatasetSpec::split_dirs(root, id)
            }
        }
    }

    pub fn load(&self, cfg: &ExperimentConfig, exec: Exec) -> Result<LoadedDataset> {
        load_dataset_with(&self.spec(cfg), cfg.binarize(), exec)
    }

    /// Domain name and images for the diagnostics: every labelled slice, or
    /// the unlabelled stack for `vnc-stack2`.
    pub fn diagnostic_images(&self, cfg: &ExperimentConfig, exec: Exec) -> Result<(String, Vec<Sample>)> {
        let loaded = self.load(cfg, exec)?;
        match self.layout {
            RefLayout::VncStack2 => {
                if loaded.unlabelled.is_empty() {
                    return Err(Error::Layout(format!("{}: no stack2/img slices", self.path.display())));
                }
                Ok(("vnc-stack2".into(), loaded.unlabelled))
            }
            _ => Ok((loaded.dataset_id.to_string(), [loaded.train, loaded.test].concat())),
        }
    }
}
