//! Optimization protocol: Dice loss, AdamW, patience-based early stopping
//! and best-checkpoint selection, over single or paired datasets.

mod batching;
mod loss;
mod model;
mod stopping;

use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::ForwardMode;
use crate::datasets::{DatasetId, Sample};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::lora::{write_report, AdapterReport, REPORT_FILE};

pub use batching::{make_batches, BatchItem};
pub use loss::{dice_loss, DICE_SMOOTH};
pub use model::{default_provider, read_checkpoint_meta, CheckpointMeta, Model, ModelConfig, Prepared, TOY_WEIGHTS_SEED};
pub use stopping::{simulate, steps_per_epoch, EarlyStopping, StopDecision};

pub const EPOCH_LOG_FILE: &str = "epochs.jsonl";
pub const CHECKPOINT_FILE: &str = "best.safetensors";

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $text),+ })
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok(Self::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($name), " `{}` (expected one of: {})"),
                        other,
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

string_enum!(Regime { Single => "single", Paired => "paired" });
string_enum!(Sampling { Unbalanced => "unbalanced", Balanced => "balanced" });
string_enum!(AdaptMode { HeadOnly => "head", Lora => "lora" });

/// SplitMix64 over `seed + stream`; independent streams from one run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub regime: Regime,
    pub sampling: Sampling,
    pub adapt: AdaptMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 1000,
            patience: 20,
            learning_rate: 5e-5,
            weight_decay: 1e-4,
            batch_size: 2,
            seed: 0,
            regime: Regime::Single,
            sampling: Sampling::Unbalanced,
            adapt: AdaptMode::HeadOnly,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_datasets: usize) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config("max_epochs, patience and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning_rate must be positive and weight_decay non-negative".into()));
        }
        match (self.regime, n_datasets) {
            (Regime::Single, 1) => {}
            (Regime::Single, n) => return Err(Error::Config(format!("single regime takes one dataset, got {n}"))),
            (Regime::Paired, n) if n < 2 => {
                return Err(Error::Config(format!("paired regime needs two datasets, got {n}")))
            }
            _ => {}
        }
        if self.sampling == Sampling::Balanced && (self.regime != Regime::Paired || self.batch_size != n_datasets) {
            return Err(Error::Config(
                "balanced 1+1 sampling needs the paired regime and batch_size equal to the dataset count".into(),
            ));
        }
        Ok(())
    }
}

/// Training and validation samples of one dataset.
#[derive(Clone, Debug)]
pub struct DatasetSplits {
    pub dataset_id: DatasetId,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_epoch: usize,
    pub steps_per_epoch: usize,
    pub checkpoint: Option<PathBuf>,
    pub adapter_report: AdapterReport,
    pub fingerprint: String,
    pub seed: u64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub exec: Exec,
    /// Where to write the epoch log, best checkpoint and adapter report.
    pub run_dir: Option<PathBuf>,
    pub fingerprint: String,
}

struct Item<'a> {
    prepared: &'a Prepared,
    features: Option<&'a Tensor>,
}

/// Mean Dice over `items`, stacking them when their shapes agree.
fn batch_loss(model: &Model, items: &[Item], mode: ForwardMode) -> Result<Tensor> {
    let first = items[0].prepared;
    let uniform = items
        .iter()
        .all(|i| i.prepared.image.dims() == first.image.dims() && i.prepared.crop == first.crop);
    if !uniform {
        let losses = items
            .iter()
            .map(|i| batch_loss(model, std::slice::from_ref(i), mode))
            .collect::<Result<Vec<_>>>()?;
        return Ok((Tensor::stack(&losses, 0)?.sum_all()? / items.len() as f64)?);
    }
    let logits = match items.iter().map(|i| i.features).collect::<Option<Vec<_>>>() {
        Some(feats) => model.head.decode_tokens(&Tensor::cat(&feats, 0)?)?,
        None => {
            let images: Vec<&Tensor> = items.iter().map(|i| &i.prepared.image).collect();
            model.logits(&Tensor::cat(&images, 0)?, mode)?
        }
    };
    let (h, w) = first.crop;
    let logits = logits.narrow(2, 0, h)?.narrow(3, 0, w)?;
    let targets = items
        .iter()
        .map(|i| {
            i.prepared
                .target
                .as_ref()
                .ok_or_else(|| Error::Integrity("training sample without a mask".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    dice_loss(&logits, &Tensor::stack(&targets, 0)?)
}

fn finite_scalar(loss: &Tensor, what: &str, epoch: usize) -> Result<f64> {
    let v = f64::from(loss.to_dtype(candle_core::DType::F32)?.to_scalar::<f32>()?);
    if !v.is_finite() {
        return Err(Error::Numerical(format!("{what} loss became {v} in epoch {epoch}")));
    }
    Ok(v)
}

fn snapshot(model: &Model) -> Result<Vec<(candle_core::Var, Tensor)>> {
    model
        .named_trainable()
        .into_iter()
        .map(|(_, v)| {
            let t = v.as_tensor().copy()?;
            Ok((v, t))
        })
        .collect()
}

fn append_line(path: &Path, log: &EpochLog) -> Result<()> {
    let mut f = File::options()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(log)?).map_err(|e| Error::io(path, e))
}

/// Train the model's head (and adapters, if any) and leave the best
/// validation-loss weights in place.
pub fn train(model: &mut Model, data: &[DatasetSplits], cfg: &TrainConfig, opts: &TrainOptions) -> Result<RunRecord> {
    cfg.validate(data.len())?;
    if model.adapt != cfg.adapt || model.regime != cfg.regime {
        return Err(Error::Config("model was built for a different adapt mode or regime".into()));
    }
    for d in data {
        if d.train.is_empty() {
            return Err(Error::Split(format!("{}: empty training set", d.dataset_id)));
        }
        if d.val.is_empty() {
            return Err(Error::Split(format!("{}: empty validation set", d.dataset_id)));
        }
    }
    if let Some(dir) = &opts.run_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log = dir.join(EPOCH_LOG_FILE);
        if log.exists() {
            std::fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
        }
        write_report(&model.report, &dir.join(REPORT_FILE))?;
    }

    let exec = opts.exec;
    let train_sets = data
        .iter()
        .map(|d| model.prepare_all(&d.train, exec))
        .collect::<Result<Vec<_>>>()?;
    let val_set: Vec<Prepared> = data
        .iter()
        .map(|d| model.prepare_all(&d.val, exec))
        .collect::<Result<Vec<_>>>()?
        .concat();
    let cache = model.adapt == AdaptMode::HeadOnly;
    let train_feats = if cache {
        Some(train_sets.iter().map(|s| exec.try_map(s, |p| model.features(p))).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let val_feats = if cache { Some(exec.try_map(&val_set, |p| model.features(p))?) } else { None };

    let vars: Vec<candle_core::Var> = model.named_trainable().into_iter().map(|(_, v)| v).collect();
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..ParamsAdamW::default()
        },
    )?;

    let sizes: Vec<usize> = train_sets.iter().map(Vec::len).collect();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut epochs = Vec::new();
    let mut best = snapshot(model)?;
    let mut steps_seen = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1000 + epoch as u64));
        let batches = make_batches(&sizes, cfg.sampling, cfg.batch_size, &mut rng)?;
        steps_seen = batches.len();
        let mut total = 0.0;
        for (step, batch) in batches.iter().enumerate() {
            let items: Vec<Item> = batch
                .iter()
                .map(|b| Item {
                    prepared: &train_sets[b.dataset][b.index],
                    features: train_feats.as_ref().map(|f| &f[b.dataset][b.index]),
                })
                .collect();
            let mode = ForwardMode::Train {
                seed: derive_seed(cfg.seed, ((epoch as u64) << 32) | step as u64),
            };
            let loss = batch_loss(model, &items, mode)?;
            total += finite_scalar(&loss, "training", epoch)?;
            opt.backward_step(&loss)?;
        }
        let train_loss = total / batches.len() as f64;

        let mut val_total = 0.0;
        for (k, p) in val_set.iter().enumerate() {
            let item = Item {
                prepared: p,
                features: val_feats.as_ref().map(|f| &f[k]),
            };
            let loss = batch_loss(model, &[item], ForwardMode::Eval)?.detach();
            val_total += finite_scalar(&loss, "validation", epoch)?;
        }
        let val_loss = val_total / val_set.len() as f64;

        let log = EpochLog {
            epoch,
            train_loss,
            val_loss,
            steps: batches.len(),
        };
        log::info!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        if let Some(dir) = &opts.run_dir {
            append_line(&dir.join(EPOCH_LOG_FILE), &log)?;
        }
        epochs.push(log);
        match stopper.observe(val_loss) {
            StopDecision::Improved => best = snapshot(model)?,
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    for (var, t) in &best {
        var.set(t)?;
    }

    let checkpoint = match &opts.run_dir {
        Some(dir) => {
            let path = dir.join(CHECKPOINT_FILE);
            model.save_checkpoint(&path, &model.checkpoint_meta(&opts.fingerprint, stopper.best_epoch()))?;
            Some(path)
        }
        None => None,
    };
    Ok(RunRecord {
        stopped_epoch: stopper.epochs_seen(),
        best_epoch: stopper.best_epoch(),
        best_val_loss: stopper.best_loss().unwrap_or(f64::NAN),
        steps_per_epoch: steps_seen,
        checkpoint,
        adapter_report: model.report.clone(),
        fingerprint: opts.fingerprint.clone(),
        seed: cfg.seed,
        epochs,
    })
}
