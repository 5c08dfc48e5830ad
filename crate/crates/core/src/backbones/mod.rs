//! Vision-transformer feature extractors exposing the patch-token grid.
//!
//! Real encoders (DINOv2, DINOv3, OpenCLIP) share one ViT implementation and
//! are looked up by registry key; their weights come from a
//! [`WeightProvider`]. The `toy-*` entries are small seeded ViTs used by every
//! test that does not need pretrained weights.

mod vit;
mod weights;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use vit::{AdaptableLinear, Backbone, ForwardMode};
pub use weights::{ParamKind, ParamSlot, SafetensorsCache, SeededInit, WeightProvider, ZeroInit, WEIGHTS_ENV};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Dinov2,
    Dinov3,
    Openclip,
    Toy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    S,
    B,
    L,
    H,
    G,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpKind {
    Gelu { hidden: usize },
    SwiGlu { hidden: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionEncoding {
    None,
    /// Learned absolute table for a square `grid x grid` layout, resampled bicubically.
    Learned { grid: usize },
    /// Axial rotary embedding on patch tokens with coordinates in `[-1, 1]`.
    Rope { base: f64 },
}

/// Architecture of one registered encoder. `embed_dim` is the token width
/// the segmentation head consumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub key: String,
    pub family: Family,
    pub variant: Variant,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp: MlpKind,
    pub layer_scale: bool,
    pub cls_token: bool,
    pub num_register_tokens: usize,
    pub position: PositionEncoding,
    pub pre_norm: bool,
    pub qkv_bias: bool,
    pub norm_eps: f64,
    /// Width of the image-text projection, which the grid is read before.
    pub projection_dim: Option<usize>,
}

impl BackboneSpec {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Number of leading non-patch tokens (CLS plus registers).
    pub fn prefix_tokens(&self) -> usize {
        usize::from(self.cls_token) + self.num_register_tokens
    }
}

#[allow(clippy::too_many_arguments)]
fn vit(
    key: &str,
    family: Family,
    variant: Variant,
    patch_size: usize,
    embed_dim: usize,
    num_blocks: usize,
    num_heads: usize,
    mlp: MlpKind,
) -> BackboneSpec {
    let (layer_scale, registers, position, pre_norm, eps, projection) = match family {
        Family::Dinov2 => (true, 0, PositionEncoding::Learned { grid: 37 }, false, 1e-6, None),
        Family::Dinov3 => (true, 4, PositionEncoding::Rope { base: 100.0 }, false, 1e-5, None),
        Family::Openclip => {
            let proj = if variant == Variant::H { 1024 } else { 768 };
            (false, 0, PositionEncoding::Learned { grid: 16 }, true, 1e-5, Some(proj))
        }
        Family::Toy => (false, 1, PositionEncoding::None, false, 1e-6, None),
    };
    BackboneSpec {
        key: key.to_string(),
        family,
        variant,
        patch_size,
        embed_dim,
        num_blocks,
        num_heads,
        mlp,
        layer_scale,
        cls_token: true,
        num_register_tokens: registers,
        position,
        pre_norm,
        qkv_bias: true,
        norm_eps: eps,
        projection_dim: projection,
    }
}

/// Every registry key, in a stable order.
pub const REGISTRY_KEYS: &[&str] = &[
    "dinov2-s14",
    "dinov2-b14",
    "dinov2-l14",
    "dinov2-g14",
    "dinov3-s16",
    "dinov3-b16",
    "dinov3-l16",
    "openclip-l14",
    "openclip-h14",
    "toy-s14",
    "toy-s16",
];

/// Look up an encoder architecture by registry key.
pub fn registry(key: &str) -> Result<BackboneSpec> {
    use Family::*;
    use Variant::*;
    let gelu = |hidden| MlpKind::Gelu { hidden };
    let spec = match key {
        "dinov2-s14" => vit(key, Dinov2, S, 14, 384, 12, 6, gelu(1536)),
        "dinov2-b14" => vit(key, Dinov2, B, 14, 768, 12, 12, gelu(3072)),
        "dinov2-l14" => vit(key, Dinov2, L, 14, 1024, 24, 16, gelu(4096)),
        "dinov2-g14" => vit(key, Dinov2, G, 14, 1536, 40, 24, MlpKind::SwiGlu { hidden: 4096 }),
        "dinov3-s16" => vit(key, Dinov3, S, 16, 384, 12, 6, gelu(1536)),
        "dinov3-b16" => vit(key, Dinov3, B, 16, 768, 12, 12, gelu(3072)),
        "dinov3-l16" => vit(key, Dinov3, L, 16, 1024, 24, 16, gelu(4096)),
        "openclip-l14" => vit(key, Openclip, L, 14, 1024, 24, 16, gelu(4096)),
        "openclip-h14" => vit(key, Openclip, H, 14, 1280, 32, 16, gelu(5120)),
        "toy-s14" => vit(key, Toy, S, 14, 32, 2, 4, gelu(64)),
        "toy-s16" => vit(key, Toy, S, 16, 32, 2, 4, gelu(64)),
        _ => return Err(Error::Registry(key.to_string())),
    };
    Ok(spec)
}

/// Patch tokens of a batch arranged as `(B, D, H/P, W/P)`.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub tokens: Tensor,
    /// Final-layer CLS token `(B, D)` when the encoder has one.
    pub cls: Option<Tensor>,
    pub patch_size: usize,
    pub source: BackboneSpec,
}

impl FeatureMap {
    pub fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        Ok(self.tokens.dims4()?)
    }
}

/// How an image-level embedding is read off the encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Cls,
}

/// Per-image mean of the patch grid, one `D`-vector per batch element.
pub fn pooled_embedding(fm: &FeatureMap) -> Result<Vec<Vec<f32>>> {
    let (b, _, h, w) = fm.dims()?;
    if b == 0 || h == 0 || w == 0 {
        return Err(Error::Shape("empty feature map".into()));
    }
    Ok(fm.tokens.flatten_from(2)?.mean(D::Minus1)?.to_vec2::<f32>()?)
}

pub fn pool(fm: &FeatureMap, pooling: Pooling) -> Result<Vec<Vec<f32>>> {
    match pooling {
        Pooling::Mean => pooled_embedding(fm),
        Pooling::Cls => match &fm.cls {
            Some(cls) => Ok(cls.to_vec2::<f32>()?),
            None => Err(Error::Config(format!("{} has no CLS token", fm.source.key))),
        },
    }
}
