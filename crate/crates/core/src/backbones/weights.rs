use std::collections::HashMap;
use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::BackboneSpec;
use crate::error::{Error, Result};

/// Environment variable naming the local pretrained-weight cache.
pub const WEIGHTS_ENV: &str = "MITOBENCH_WEIGHTS";

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ParamKind {
    /// Linear or conv kernel with the given fan-in.
    Weight { fan_in: usize },
    Bias,
    NormWeight,
    NormBias,
    /// CLS or register token.
    Token,
    LayerScale,
    PosEmbed,
}

/// One named tensor the encoder expects, with its shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

/// Supplies every tensor listed in an encoder's parameter manifest.
pub trait WeightProvider {
    fn provide(&self, spec: &BackboneSpec, slots: &[ParamSlot]) -> Result<HashMap<String, Tensor>>;
}

/// Seeded random weights: kernels `N(0, 1/fan_in)`, norms at identity, tokens `N(0, 0.02)`.
#[derive(Clone, Copy, Debug)]
pub struct SeededInit {
    pub seed: u64,
}

impl WeightProvider for SeededInit {
    fn provide(&self, _spec: &BackboneSpec, slots: &[ParamSlot]) -> Result<HashMap<String, Tensor>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = HashMap::new();
        for slot in slots {
            let n: usize = slot.shape.iter().product();
            let data: Vec<f32> = match slot.kind {
                ParamKind::Weight { fan_in } => {
                    let normal = Normal::new(0.0, 1.0 / (fan_in as f32).sqrt()).expect("finite std");
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                }
                ParamKind::Token | ParamKind::PosEmbed => {
                    let normal = Normal::new(0.0, 0.02f32).expect("finite std");
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                }
                ParamKind::NormWeight | ParamKind::LayerScale => vec![1.0; n],
                ParamKind::Bias | ParamKind::NormBias => vec![0.0; n],
            };
            out.insert(slot.name.clone(), Tensor::from_vec(data, slot.shape.as_slice(), &Device::Cpu)?);
        }
        Ok(out)
    }
}

/// All-zero weights.
#[derive(Clone, Copy, Debug)]
pub struct ZeroInit;

impl WeightProvider for ZeroInit {
    fn provide(&self, _spec: &BackboneSpec, slots: &[ParamSlot]) -> Result<HashMap<String, Tensor>> {
        slots
            .iter()
            .map(|s| Ok((s.name.clone(), Tensor::zeros(s.shape.as_slice(), DType::F32, &Device::Cpu)?)))
            .collect()
    }
}

/// `<root>/<registry-key>.safetensors`, using timm-style ViT tensor names.
///
/// Learned position tables may come at any square grid size; every other
/// tensor must match the manifest shape exactly.
#[derive(Clone, Debug)]
pub struct SafetensorsCache {
    pub root: PathBuf,
}

impl SafetensorsCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn from_env() -> Result<Self> {
        std::env::var_os(WEIGHTS_ENV)
            .map(|v| Self::new(PathBuf::from(v)))
            .ok_or_else(|| Error::Config(format!("set {WEIGHTS_ENV} to the pretrained weight cache directory")))
    }

    pub fn path_for(&self, spec: &BackboneSpec) -> PathBuf {
        self.root.join(format!("{}.safetensors", spec.key))
    }
}

impl WeightProvider for SafetensorsCache {
    fn provide(&self, spec: &BackboneSpec, slots: &[ParamSlot]) -> Result<HashMap<String, Tensor>> {
        let path = self.path_for(spec);
        if !path.is_file() {
            return Err(Error::Config(format!(
                "no weights for {} at {}",
                spec.key,
                path.display()
            )));
        }
        let mut loaded = candle_core::safetensors::load(&path, &Device::Cpu)?;
        let mut out = HashMap::new();
        for slot in slots {
            let t = loaded
                .remove(&slot.name)
                .ok_or_else(|| Error::Config(format!("{}: missing tensor `{}`", path.display(), slot.name)))?
                .to_dtype(DType::F32)?;
            let shape_ok = if slot.kind == ParamKind::PosEmbed {
                let dims = t.dims();
                dims.len() == 3 && dims[0] == 1 && dims[2] == slot.shape[2]
            } else {
                t.dims() == slot.shape.as_slice()
            };
            if !shape_ok {
                return Err(Error::Config(format!(
                    "{}: tensor `{}` has shape {:?}, expected {:?}",
                    path.display(),
                    slot.name,
                    t.dims(),
                    slot.shape
                )));
            }
            out.insert(slot.name.clone(), t);
        }
        Ok(out)
    }
}
