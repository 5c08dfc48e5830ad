//! Low-rank adapters on the attention projections of a frozen encoder.
//!
//! Each targeted linear map `W` becomes `W + (alpha / r) * B * A` with
//! `A: (r, d_in)` drawn from `N(0, init_std^2)` and `B: (d_out, r)` zeroed, so
//! an adapted encoder starts out computing exactly what the frozen one does.

use std::collections::BTreeSet;
use std::hash::{Hash, Hasher};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbones::{Backbone, BackboneSpec, ForwardMode};
use crate::error::{Error, Result};

pub const REPORT_FILE: &str = "lora_targets.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    /// Fused query/key/value projection, `D -> 3D`.
    AttnQkv,
    /// Attention output projection, `D -> D`.
    AttnProj,
}

impl LoraTarget {
    fn suffix(self) -> &'static str {
        match self {
            LoraTarget::AttnQkv => "attn.qkv",
            LoraTarget::AttnProj => "attn.proj",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: BTreeSet<LoraTarget>,
    pub dropout: f32,
    pub init_std: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: 32.0,
            targets: [LoraTarget::AttnQkv, LoraTarget::AttnProj].into(),
            dropout: 0.0,
            init_std: 0.02,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("LoRA alpha must be positive, got {}", self.alpha)));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("LoRA target list is empty".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("LoRA dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Trainable low-rank update attached to one host layer.
#[derive(Clone, Debug)]
pub struct LoraPair {
    pub layer_id: String,
    /// Down projection `(r, d_in)`.
    pub a: Var,
    /// Up projection `(d_out, r)`.
    pub b: Var,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f32,
}

impl LoraPair {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn parameter_count(&self) -> usize {
        self.a.elem_count() + self.b.elem_count()
    }

    /// `(alpha / r) * dropout(x) A^T B^T`.
    pub fn delta(&self, x: &Tensor, mode: ForwardMode) -> Result<Tensor> {
        let x = match mode {
            ForwardMode::Train { seed } if self.dropout > 0.0 => {
                let mut h = std::collections::hash_map::DefaultHasher::new();
                self.layer_id.hash(&mut h);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ h.finish());
                let keep = 1.0 - self.dropout;
                let mask: Vec<f32> = (0..x.elem_count())
                    .map(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                (x * Tensor::from_vec(mask, x.shape(), x.device())?)?
            }
            _ => x.clone(),
        };
        let low = x.broadcast_matmul(&self.a.as_tensor().t()?)?;
        Ok((low.broadcast_matmul(&self.b.as_tensor().t()?)? * self.scale())?)
    }
}

/// A layer an adapter will attach to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetLayer {
    pub id: String,
    pub d_in: usize,
    pub d_out: usize,
}

/// Layers `cfg` resolves to on an encoder of this architecture, without
/// instantiating it.
pub fn plan_targets(spec: &BackboneSpec, cfg: &AdapterConfig) -> Result<Vec<TargetLayer>> {
    cfg.validate()?;
    let d = spec.embed_dim;
    let mut out = Vec::new();
    for i in 0..spec.num_blocks {
        for t in &cfg.targets {
            let d_out = match t {
                LoraTarget::AttnQkv => 3 * d,
                LoraTarget::AttnProj => d,
            };
            out.push(TargetLayer {
                id: format!("blocks.{i}.{}", t.suffix()),
                d_in: d,
                d_out,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::Injection(format!("no LoRA targets resolved on {}", spec.key)));
    }
    Ok(out)
}

/// `sum r * (d_in + d_out)` over the planned layers.
pub fn planned_parameter_count(spec: &BackboneSpec, cfg: &AdapterConfig) -> Result<usize> {
    Ok(plan_targets(spec, cfg)?
        .iter()
        .map(|t| cfg.rank * (t.d_in + t.d_out))
        .sum())
}

/// Trainable-parameter accounting for one run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterReport {
    pub resolved_targets: Vec<String>,
    pub trainable_total: usize,
    pub trainable_lora: usize,
    pub trainable_head: usize,
}

impl AdapterReport {
    pub fn head_only(trainable_head: usize) -> Self {
        Self {
            resolved_targets: Vec::new(),
            trainable_total: trainable_head,
            trainable_lora: 0,
            trainable_head,
        }
    }

    pub fn with_head(mut self, trainable_head: usize) -> Self {
        self.trainable_head = trainable_head;
        self.trainable_total = self.trainable_lora + trainable_head;
        self
    }
}

/// Attach adapters to every targeted projection of a frozen encoder.
///
/// The returned report counts LoRA parameters only; add the head with
/// [`AdapterReport::with_head`].
pub fn inject(backbone: &mut Backbone, cfg: &AdapterConfig, seed: u64) -> Result<AdapterReport> {
    cfg.validate()?;
    if !backbone.is_frozen() {
        return Err(Error::Injection("backbone must be frozen before injecting adapters".into()));
    }
    let suffixes: Vec<&str> = cfg.targets.iter().map(|t| t.suffix()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, cfg.init_std as f32)
        .map_err(|e| Error::Config(format!("LoRA init_std: {e}")))?;
    let mut resolved = Vec::new();
    let mut count = 0;
    for layer in backbone.attention_linears_mut() {
        if !suffixes.iter().any(|s| layer.id().ends_with(s)) {
            continue;
        }
        if layer.adapter().is_some() {
            return Err(Error::Injection(format!("{} already carries an adapter", layer.id())));
        }
        let (d_in, d_out) = (layer.d_in(), layer.d_out());
        let a: Vec<f32> = (0..cfg.rank * d_in).map(|_| normal.sample(&mut rng)).collect();
        let a = Var::from_tensor(&Tensor::from_vec(a, (cfg.rank, d_in), &Device::Cpu)?)?;
        let b = Var::zeros((d_out, cfg.rank), DType::F32, &Device::Cpu)?;
        let pair = LoraPair {
            layer_id: layer.id().to_string(),
            a,
            b,
            rank: cfg.rank,
            alpha: cfg.alpha,
            dropout: cfg.dropout,
        };
        count += pair.parameter_count();
        resolved.push(pair.layer_id.clone());
        layer.attach(pair);
    }
    if resolved.is_empty() {
        return Err(Error::Injection(format!(
            "targets {suffixes:?} matched no layers of {}",
            backbone.spec().key
        )));
    }
    Ok(AdapterReport {
        resolved_targets: resolved,
        trainable_total: count,
        trainable_lora: count,
        trainable_head: 0,
    })
}

pub fn write_report(report: &AdapterReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<AdapterReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
