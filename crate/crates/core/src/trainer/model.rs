use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{derive_seed, AdaptMode, Regime};
use crate::backbones::{pool, registry, Backbone, ForwardMode, Pooling, SafetensorsCache, SeededInit, WeightProvider};
use crate::datasets::{normalize, pad_to_patch_multiple, resize_to_patch_grid, DatasetId, ResizePolicy, Sample};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::lora::{inject, AdapterConfig, AdapterReport};
use crate::metrics::MetricAccumulator;
use crate::seghead::{predict, HeadConfig, SegHead};

/// Fixed seed standing in for "pretrained" toy weights, shared by every run.
pub const TOY_WEIGHTS_SEED: u64 = 0x70;

const META_KEY: &str = "mitobench";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: String,
    pub head_hidden: usize,
    pub lora: AdapterConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: "dinov2-l14".into(),
            head_hidden: 256,
            lora: AdapterConfig::default(),
        }
    }
}

/// Toy keys get seeded weights; everything else reads the local weight cache.
pub fn default_provider(key: &str) -> Result<Box<dyn WeightProvider>> {
    if key.starts_with("toy-") {
        Ok(Box::new(SeededInit { seed: TOY_WEIGHTS_SEED }))
    } else {
        Ok(Box::new(SafetensorsCache::from_env()?))
    }
}

/// A sample converted to network input.
#[derive(Clone, Debug)]
pub struct Prepared {
    /// `(1, 3, H, W)` with both sides multiples of the patch size.
    pub image: Tensor,
    /// Region of the logits that corresponds to real pixels.
    pub crop: (usize, usize),
    /// `(h, w)` 0/1 target over the crop region.
    pub target: Option<Tensor>,
    /// Mask at the original resolution, for evaluation.
    pub native_mask: Option<Array2<u8>>,
    pub dataset_id: DatasetId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub fingerprint: String,
    pub backbone: String,
    pub adapt: AdaptMode,
    pub regime: Regime,
    pub head_hidden: usize,
    pub lora: Option<AdapterConfig>,
    pub best_epoch: usize,
}

pub struct Model {
    pub backbone: Backbone,
    pub head: SegHead,
    pub adapt: AdaptMode,
    pub regime: Regime,
    pub report: AdapterReport,
    /// Paired-regime longest edge; `None` keeps each sample's native longest
    /// edge snapped down to a patch multiple.
    pub resize_target: Option<usize>,
    cfg: ModelConfig,
}

impl Model {
    pub fn build(cfg: &ModelConfig, adapt: AdaptMode, regime: Regime, seed: u64) -> Result<Self> {
        let provider = default_provider(&cfg.backbone)?;
        let backbone = Backbone::build(registry(&cfg.backbone)?, provider.as_ref())?;
        Self::from_backbone(backbone, cfg, adapt, regime, seed)
    }

    pub fn from_backbone(mut backbone: Backbone, cfg: &ModelConfig, adapt: AdaptMode, regime: Regime, seed: u64) -> Result<Self> {
        backbone.freeze();
        let spec = backbone.spec().clone();
        let head = SegHead::new(
            HeadConfig {
                in_channels: spec.embed_dim,
                hidden_channels: cfg.head_hidden,
                patch_size: spec.patch_size,
            },
            derive_seed(seed, 1),
        )?;
        let report = match adapt {
            AdaptMode::HeadOnly => AdapterReport::head_only(head.parameter_count()),
            AdaptMode::Lora => inject(&mut backbone, &cfg.lora, derive_seed(seed, 2))?.with_head(head.parameter_count()),
        };
        let mut cfg = cfg.clone();
        cfg.backbone = spec.key.clone();
        Ok(Self {
            backbone,
            head,
            adapt,
            regime,
            report,
            resize_target: None,
            cfg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn patch_size(&self) -> usize {
        self.backbone.spec().patch_size
    }

    /// Trainable tensors with their checkpoint names.
    pub fn named_trainable(&self) -> Vec<(String, Var)> {
        let mut out = self.head.named_vars();
        for lin in self.backbone.attention_linears() {
            if let Some(pair) = lin.adapter() {
                out.push((format!("lora.{}.a", lin.id()), pair.a.clone()));
                out.push((format!("lora.{}.b", lin.id()), pair.b.clone()));
            }
        }
        out
    }

    /// Single regime: normalize, zero-pad to a patch multiple, crop logits
    /// back. Paired regime: resize to the snapped patch grid, then normalize.
    pub fn prepare(&self, sample: &Sample) -> Result<Prepared> {
        if sample.image.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integrity(format!("{}: non-finite pixel values", sample.name)));
        }
        let p = self.patch_size();
        let (ready, crop) = match self.regime {
            Regime::Single => (pad_to_patch_multiple(&normalize(sample), p)?, (sample.height(), sample.width())),
            Regime::Paired => {
                let policy = match self.resize_target {
                    Some(t) => ResizePolicy::new(t, p),
                    None => ResizePolicy::native_default(sample.height(), sample.width(), p),
                };
                let resized = normalize(&resize_to_patch_grid(sample, &policy)?);
                let dims = (resized.height(), resized.width());
                (resized, dims)
            }
        };
        let (h, w) = (ready.height(), ready.width());
        let image = Tensor::from_vec(ready.image.iter().copied().collect::<Vec<f32>>(), (1, 3, h, w), &Device::Cpu)?;
        let target = match &ready.mask {
            Some(m) => {
                let v: Vec<f32> = m
                    .slice(ndarray::s![..crop.0, ..crop.1])
                    .iter()
                    .map(|&x| f32::from(u8::from(x > 0)))
                    .collect();
                Some(Tensor::from_vec(v, crop, &Device::Cpu)?)
            }
            None => None,
        };
        Ok(Prepared {
            image,
            crop,
            target,
            native_mask: sample.mask.clone(),
            dataset_id: sample.dataset_id.clone(),
        })
    }

    pub fn prepare_all(&self, samples: &[Sample], exec: Exec) -> Result<Vec<Prepared>> {
        exec.try_map(samples, |s| self.prepare(s))
    }

    /// Backbone tokens for frozen-feature caching.
    pub fn features(&self, prepared: &Prepared) -> Result<Tensor> {
        Ok(self.backbone.forward_features(&prepared.image, ForwardMode::Eval)?.tokens.detach())
    }

    pub fn logits(&self, images: &Tensor, mode: ForwardMode) -> Result<Tensor> {
        let fm = self.backbone.forward_features(images, mode)?;
        self.head.decode(&fm)
    }

    /// Label raster over the crop region of one prepared sample.
    pub fn predict_prepared(&self, prepared: &Prepared) -> Result<Array2<u8>> {
        let (h, w) = prepared.crop;
        let logits = self.logits(&prepared.image, ForwardMode::Eval)?.narrow(2, 0, h)?.narrow(3, 0, w)?;
        Ok(predict(&logits)?.remove(0))
    }

    /// Dataset-level accumulators at native mask resolution, one per dataset
    /// in order of first appearance.
    pub fn evaluate(&self, samples: &[Sample], exec: Exec) -> Result<Vec<MetricAccumulator>> {
        let preds = exec.try_map(samples, |s| -> Result<(DatasetId, Array2<u8>, Array2<u8>)> {
            let mask = s
                .mask
                .clone()
                .ok_or_else(|| Error::Integrity(format!("{}: evaluation needs a mask", s.name)))?;
            let pred = self.predict_prepared(&self.prepare(s)?)?;
            Ok((s.dataset_id.clone(), pred, mask))
        })?;
        let mut accs: Vec<MetricAccumulator> = Vec::new();
        for (id, pred, mask) in &preds {
            let pos = match accs.iter().position(|a| &a.dataset_id == id) {
                Some(p) => p,
                None => {
                    accs.push(MetricAccumulator::new(id.clone()));
                    accs.len() - 1
                }
            };
            accs[pos].update_native(pred.view(), mask.view())?;
        }
        Ok(accs)
    }

    /// One pooled embedding per sample from the (possibly adapted) backbone.
    pub fn embed(&self, samples: &[Sample], pooling: Pooling, exec: Exec) -> Result<Vec<Vec<f32>>> {
        let rows = exec.try_map(samples, |s| -> Result<Vec<f32>> {
            let prepared = self.prepare(s)?;
            let fm = self.backbone.forward_features(&prepared.image, ForwardMode::Eval)?;
            Ok(pool(&fm, pooling)?.remove(0))
        })?;
        Ok(rows)
    }

    pub fn checkpoint_meta(&self, fingerprint: &str, best_epoch: usize) -> CheckpointMeta {
        CheckpointMeta {
            fingerprint: fingerprint.to_string(),
            backbone: self.cfg.backbone.clone(),
            adapt: self.adapt,
            regime: self.regime,
            head_hidden: self.cfg.head_hidden,
            lora: (self.adapt == AdaptMode::Lora).then(|| self.cfg.lora.clone()),
            best_epoch,
        }
    }

    pub fn save_checkpoint(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        let tensors: Vec<(String, Tensor)> = self
            .named_trainable()
            .into_iter()
            .map(|(n, v)| (n, v.as_tensor().clone()))
            .collect();
        let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(meta)?)]);
        safetensors::serialize_to_file(tensors, Some(info), path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// Load trainable tensors saved by `save_checkpoint`.
    pub fn load_checkpoint(&self, path: &Path) -> Result<CheckpointMeta> {
        let meta = read_checkpoint_meta(path)?;
        if meta.backbone != self.cfg.backbone || meta.adapt != self.adapt {
            return Err(Error::Checkpoint(format!(
                "{} was trained for {} / {:?}, model is {} / {:?}",
                path.display(),
                meta.backbone,
                meta.adapt,
                self.cfg.backbone,
                self.adapt
            )));
        }
        let mut stored = candle_core::safetensors::load(path, &Device::Cpu)?;
        for (name, var) in self.named_trainable() {
            let t = stored
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing tensor `{name}`", path.display())))?
                .to_dtype(DType::F32)?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "{}: `{name}` has shape {:?}, expected {:?}",
                    path.display(),
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t)?;
        }
        if let Some(extra) = stored.keys().next() {
            return Err(Error::Checkpoint(format!("{}: unexpected tensor `{extra}`", path.display())));
        }
        Ok(meta)
    }
}

pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let raw = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("{}: no run metadata", path.display())))?;
    Ok(serde_json::from_str(raw)?)
}
