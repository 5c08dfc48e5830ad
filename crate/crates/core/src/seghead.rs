//! Convolutional decoder from the patch grid to two-class pixel logits.
//!
//! Layout: 1x1 projection `D -> hidden`; two 3x3 conv + GroupNorm + ReLU
//! blocks at grid resolution; bilinear upsampling by the patch size; a 3x3
//! refinement conv + ReLU at pixel resolution; 1x1 classifier to 2 classes.
//! Only the input width depends on the backbone.

use std::collections::HashMap;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var, D};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbones::FeatureMap;
use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub patch_size: usize,
}

impl HeadConfig {
    pub fn new(in_channels: usize, patch_size: usize) -> Self {
        Self {
            in_channels,
            hidden_channels: 256,
            patch_size,
        }
    }

    pub fn refine_channels(&self) -> usize {
        (self.hidden_channels / 4).max(8)
    }

    /// Largest group count `<= 32` dividing the hidden width.
    pub fn norm_groups(&self) -> usize {
        (1..=32.min(self.hidden_channels))
            .rev()
            .find(|g| self.hidden_channels % g == 0)
            .unwrap_or(1)
    }

    /// Closed-form parameter count of the decoder.
    pub fn parameter_count(&self) -> usize {
        let (d, h, r) = (self.in_channels, self.hidden_channels, self.refine_channels());
        (d * h + h) + 2 * (h * h * 9 + h + 2 * h) + (h * r * 9 + r) + (r * NUM_CLASSES + NUM_CLASSES)
    }
}

struct Conv {
    weight: Var,
    bias: Var,
    padding: usize,
}

impl Conv {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out = self.weight.dims()[0];
        let y = x.conv2d(self.weight.as_tensor(), self.padding, 1, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, out, 1, 1))?)?)
    }
}

struct GroupNorm {
    gamma: Var,
    beta: Var,
    groups: usize,
}

impl GroupNorm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?.reshape((b, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.gamma.as_tensor().reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.as_tensor().reshape((1, c, 1, 1))?)?)
    }
}

/// `(n_out, n_in)` half-pixel bilinear interpolation matrix.
fn interp_matrix(n_in: usize, n_out: usize) -> Vec<f32> {
    let mut m = vec![0f32; n_out * n_in];
    for i in 0..n_out {
        let src = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let t = (src - i0 as f64) as f32;
        m[i * n_in + i0] += 1.0 - t;
        m[i * n_in + i1] += t;
    }
    m
}

pub struct SegHead {
    cfg: HeadConfig,
    proj: Conv,
    conv1: Conv,
    norm1: GroupNorm,
    conv2: Conv,
    norm2: GroupNorm,
    refine: Conv,
    classifier: Conv,
    interp_cache: Mutex<HashMap<(usize, usize), Tensor>>,
}

impl SegHead {
    /// Seeded He-normal kernels, zero biases, identity norms.
    pub fn new(cfg: HeadConfig, seed: u64) -> Result<Self> {
        if cfg.in_channels == 0 || cfg.hidden_channels == 0 || cfg.patch_size == 0 {
            return Err(Error::Config(format!("invalid head configuration {cfg:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv = |out: usize, inp: usize, k: usize| -> Result<Conv> {
            let fan_in = inp * k * k;
            let normal = Normal::new(0.0, (2.0 / fan_in as f32).sqrt()).expect("finite std");
            let w: Vec<f32> = (0..out * fan_in).map(|_| normal.sample(&mut rng)).collect();
            Ok(Conv {
                weight: Var::from_tensor(&Tensor::from_vec(w, (out, inp, k, k), &Device::Cpu)?)?,
                bias: Var::zeros(out, DType::F32, &Device::Cpu)?,
                padding: k / 2,
            })
        };
        let (d, h, r) = (cfg.in_channels, cfg.hidden_channels, cfg.refine_channels());
        let proj = conv(h, d, 1)?;
        let conv1 = conv(h, h, 3)?;
        let conv2 = conv(h, h, 3)?;
        let refine = conv(r, h, 3)?;
        let classifier = conv(NUM_CLASSES, r, 1)?;
        let norm = || -> Result<GroupNorm> {
            Ok(GroupNorm {
                gamma: Var::ones(h, DType::F32, &Device::Cpu)?,
                beta: Var::zeros(h, DType::F32, &Device::Cpu)?,
                groups: cfg.norm_groups(),
            })
        };
        Ok(Self {
            cfg,
            proj,
            conv1,
            norm1: norm()?,
            conv2,
            norm2: norm()?,
            refine,
            classifier,
            interp_cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.cfg
    }

    /// Trainable tensors with stable checkpoint names.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for (name, conv) in [
            ("proj", &self.proj),
            ("conv1", &self.conv1),
            ("conv2", &self.conv2),
            ("refine", &self.refine),
            ("classifier", &self.classifier),
        ] {
            out.push((format!("head.{name}.weight"), conv.weight.clone()));
            out.push((format!("head.{name}.bias"), conv.bias.clone()));
        }
        for (name, norm) in [("norm1", &self.norm1), ("norm2", &self.norm2)] {
            out.push((format!("head.{name}.weight"), norm.gamma.clone()));
            out.push((format!("head.{name}.bias"), norm.beta.clone()));
        }
        out
    }

    pub fn vars(&self) -> Vec<Var> {
        self.named_vars().into_iter().map(|(_, v)| v).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.named_vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Zero the classifier so every logit starts at zero.
    pub fn zero_classifier(&self) -> Result<()> {
        let w = &self.classifier.weight;
        w.set(&w.zeros_like()?)?;
        let b = &self.classifier.bias;
        b.set(&b.zeros_like()?)?;
        Ok(())
    }

    fn interp(&self, n_in: usize, n_out: usize) -> Result<Tensor> {
        let mut cache = self.interp_cache.lock().expect("interpolation cache poisoned");
        if let Some(t) = cache.get(&(n_in, n_out)) {
            return Ok(t.clone());
        }
        let t = Tensor::from_vec(interp_matrix(n_in, n_out), (n_out, n_in), &Device::Cpu)?;
        cache.insert((n_in, n_out), t.clone());
        Ok(t)
    }

    /// Bilinear upsampling by the patch factor as two fixed matrix products.
    fn upsample(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let p = self.cfg.patch_size;
        let along_w = x.broadcast_matmul(&self.interp(w, w * p)?.t()?)?;
        Ok(self.interp(h, h * p)?.broadcast_matmul(&along_w)?)
    }

    /// Feature map `(B, D, H', W')` to logits `(B, 2, H'P, W'P)`.
    pub fn decode(&self, fm: &FeatureMap) -> Result<Tensor> {
        let (_, d, _, _) = fm.dims()?;
        if d != self.cfg.in_channels {
            return Err(Error::Config(format!(
                "feature map has {d} channels but the head expects {}",
                self.cfg.in_channels
            )));
        }
        self.decode_tokens(&fm.tokens)
    }

    pub fn decode_tokens(&self, tokens: &Tensor) -> Result<Tensor> {
        let x = self.proj.forward(tokens)?;
        let x = self.norm1.forward(&self.conv1.forward(&x)?)?.relu()?;
        let x = self.norm2.forward(&self.conv2.forward(&x)?)?.relu()?;
        let x = self.upsample(&x)?;
        let x = self.refine.forward(&x)?.relu()?;
        self.classifier.forward(&x)
    }
}

/// Per-pixel argmax over the two class channels; ties go to background.
pub fn predict(logits: &Tensor) -> Result<Vec<Array2<u8>>> {
    let (b, c, h, w) = logits.dims4()?;
    if c != NUM_CLASSES {
        return Err(Error::Shape(format!("expected {NUM_CLASSES} class channels, got {c}")));
    }
    let flat = logits.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let plane = h * w;
    Ok((0..b)
        .map(|i| {
            let bg = &flat[(i * 2) * plane..(i * 2 + 1) * plane];
            let fg = &flat[(i * 2 + 1) * plane..(i * 2 + 2) * plane];
            let labels: Vec<u8> = bg.iter().zip(fg).map(|(b, f)| u8::from(f > b)).collect();
            Array2::from_shape_vec((h, w), labels).expect("plane size")
        })
        .collect())
}
