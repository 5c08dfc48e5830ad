//! Experiment orchestration: repeated seeded runs, run directories,
//! evaluation, embedding extraction, diagnostics and comparison reports.

mod config;
mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{make_split, LoadedDataset, Sample, SplitConfig};
use crate::diagnostics::{self, Embeddings, MismatchReport};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::{EvalScores, MeanStd};
use crate::trainer::{self, read_checkpoint_meta, AdaptMode, DatasetSplits, Model, RunRecord, TrainOptions, CHECKPOINT_FILE};

pub use config::{DatasetRef, ExperimentConfig, RefLayout};
pub use report::{read_literature, read_table, report, write_table, ReportRow};

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.json";
pub const RECORD_FILE: &str = "run_record.json";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_CSV: &str = "summary.csv";

/// Contents of `metrics.json`: per-dataset IoU keyed by dataset id, plus
/// the macro average and run identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    #[serde(flatten)]
    pub per_dataset: BTreeMap<String, f64>,
    pub macro_iou_fg: f64,
    pub fingerprint: String,
    pub seed: u64,
}

impl RunMetrics {
    pub fn new(scores: EvalScores, fingerprint: &str, seed: u64) -> Self {
        Self {
            per_dataset: scores.per_dataset,
            macro_iou_fg: scores.macro_iou_fg,
            fingerprint: fingerprint.to_string(),
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub fingerprint: String,
    pub backbone: String,
    pub adapt: AdaptMode,
    pub regime: trainer::Regime,
    pub sampling: trainer::Sampling,
    pub seeds: Vec<u64>,
    pub per_dataset: BTreeMap<String, MeanStd>,
    pub macro_iou_fg: MeanStd,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub record: RunRecord,
    pub metrics: RunMetrics,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?)
}

/// Next free `rNNN` index in an experiment directory.
fn next_run_index(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .into_iter()
        .flatten()
        .filter_map(|e| {
            let name = e.ok()?.file_name().into_string().ok()?;
            name.strip_prefix('r')?.split('_').next()?.parse::<usize>().ok()
        })
        .map(|i| i + 1)
        .max()
        .unwrap_or(0)
}

fn load_all(cfg: &ExperimentConfig, exec: Exec) -> Result<Vec<LoadedDataset>> {
    let loaded = cfg
        .dataset_refs()?
        .iter()
        .map(|r| r.load(cfg, exec))
        .collect::<Result<Vec<_>>>()?;
    for d in &loaded {
        if d.train.is_empty() || d.test.is_empty() {
            return Err(Error::Layout(format!("{}: needs labelled train and test slices", d.dataset_id)));
        }
    }
    Ok(loaded)
}

fn build_model(cfg: &ExperimentConfig, seed: u64) -> Result<Model> {
    let mut model = Model::build(&cfg.model_config(), cfg.adapt, cfg.regime, seed)?;
    model.resize_target = cfg.resize_longest_edge;
    Ok(model)
}

/// One seeded repetition into `run_dir`.
pub fn run_once(cfg: &ExperimentConfig, loaded: &[LoadedDataset], seed: u64, run_dir: &Path, exec: Exec) -> Result<RunOutcome> {
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let snapshot = run_dir.join(CONFIG_SNAPSHOT);
    std::fs::write(&snapshot, cfg.to_toml()?).map_err(|e| Error::io(&snapshot, e))?;
    let fingerprint = cfg.fingerprint();
    let split = SplitConfig { validation_fraction: cfg.validation_fraction, seed };
    let data = loaded
        .iter()
        .map(|d| {
            let (train, val) = make_split(&d.train, &split)?;
            Ok(DatasetSplits { dataset_id: d.dataset_id.clone(), train, val })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut model = build_model(cfg, seed)?;
    let opts = TrainOptions { exec, run_dir: Some(run_dir.to_path_buf()), fingerprint: fingerprint.clone() };
    let record = trainer::train(&mut model, &data, &cfg.train_config(seed), &opts)?;
    write_json(&run_dir.join(RECORD_FILE), &record)?;
    let test: Vec<Sample> = loaded.iter().flat_map(|d| d.test.iter().cloned()).collect();
    let scores = EvalScores::from_accumulators(&model.evaluate(&test, exec)?)?;
    let metrics = RunMetrics::new(scores, &fingerprint, seed);
    write_json(&run_dir.join(METRICS_FILE), &metrics)?;
    log::info!("run {} finished: macro IoU_fg {:.4}", run_dir.display(), metrics.macro_iou_fg);
    Ok(RunOutcome { run_dir: run_dir.to_path_buf(), record, metrics })
}

/// `num_runs` repetitions with seeds `seed, seed + 1, ...`, then refresh the
/// experiment summary.
pub fn train_runs(cfg: &ExperimentConfig, exec: Exec) -> Result<(Vec<RunOutcome>, ExperimentSummary)> {
    let loaded = load_all(cfg, exec)?;
    let dir = cfg.experiment_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut outcomes = Vec::new();
    for r in 0..cfg.num_runs {
        let seed = cfg.seed + r as u64;
        let run_dir = dir.join(format!("r{:03}_seed{seed}", next_run_index(&dir)));
        outcomes.push(run_once(cfg, &loaded, seed, &run_dir, exec)?);
    }
    let summary = summarize(cfg, &dir)?;
    Ok((outcomes, summary))
}

/// Aggregate every completed run (one with `metrics.json`) in `dir`.
pub fn summarize(cfg: &ExperimentConfig, dir: &Path) -> Result<ExperimentSummary> {
    let mut runs: Vec<(String, RunMetrics)> = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let metrics = path.join(METRICS_FILE);
        if metrics.is_file() {
            runs.push((path.file_name().unwrap_or_default().to_string_lossy().into_owned(), read_json(&metrics)?));
        }
    }
    runs.sort_by(|a, b| a.0.cmp(&b.0));
    if runs.is_empty() {
        return Err(Error::Config(format!("no completed runs in {}", dir.display())));
    }
    let fingerprint = cfg.fingerprint();
    if let Some((name, _)) = runs.iter().find(|(_, m)| m.fingerprint != fingerprint) {
        return Err(Error::Config(format!("run {name} in {} has a different fingerprint", dir.display())));
    }
    let mut per_dataset = BTreeMap::new();
    for key in runs[0].1.per_dataset.keys() {
        let values: Vec<f64> = runs.iter().filter_map(|(_, m)| m.per_dataset.get(key).copied()).collect();
        per_dataset.insert(key.clone(), MeanStd::of(&values)?);
    }
    let macros: Vec<f64> = runs.iter().map(|(_, m)| m.macro_iou_fg).collect();
    let summary = ExperimentSummary {
        fingerprint,
        backbone: cfg.backbone.clone(),
        adapt: cfg.adapt,
        regime: cfg.regime,
        sampling: cfg.sampling,
        seeds: runs.iter().map(|(_, m)| m.seed).collect(),
        per_dataset,
        macro_iou_fg: MeanStd::of(&macros)?,
    };
    write_json(&dir.join(SUMMARY_JSON), &summary)?;
    write_table(&dir.join(SUMMARY_CSV), &[ReportRow::from_summary(&summary)])?;
    Ok(summary)
}

pub fn read_summary(path: &Path) -> Result<ExperimentSummary> {
    let file = if path.is_dir() { path.join(SUMMARY_JSON) } else { path.to_path_buf() };
    read_json(&file)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Train,
    Test,
}

/// Evaluate a saved checkpoint; refuses checkpoints from another config.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path, split: EvalSplit, exec: Exec) -> Result<RunMetrics> {
    if !checkpoint.is_file() {
        return Err(Error::Checkpoint(format!("no checkpoint at {}", checkpoint.display())));
    }
    let meta = read_checkpoint_meta(checkpoint)?;
    let fingerprint = cfg.fingerprint();
    if meta.fingerprint != fingerprint {
        return Err(Error::Checkpoint(format!(
            "{} was produced by config {} but this config is {}; evaluate it with the config it was trained with",
            checkpoint.display(),
            meta.fingerprint,
            fingerprint
        )));
    }
    let model = build_model(cfg, 0)?;
    model.load_checkpoint(checkpoint)?;
    let loaded = load_all(cfg, exec)?;
    let samples: Vec<Sample> = loaded
        .into_iter()
        .flat_map(|d| match split {
            EvalSplit::Train => d.train,
            EvalSplit::Test => d.test,
        })
        .collect();
    let scores = EvalScores::from_accumulators(&model.evaluate(&samples, exec)?)?;
    Ok(RunMetrics::new(scores, &fingerprint, 0))
}

/// Pooled embeddings of each diagnostic domain, written to `out_dir`.
/// Without a checkpoint the backbone is used as loaded; with one, its
/// adapters (if any) are applied first.
pub fn extract_embeddings(cfg: &ExperimentConfig, checkpoint: Option<&Path>, out_dir: &Path, exec: Exec) -> Result<Vec<Embeddings>> {
    let (model, fingerprint) = match checkpoint {
        None => {
            let frozen = ExperimentConfig { adapt: AdaptMode::HeadOnly, ..cfg.clone() };
            (build_model(&frozen, 0)?, format!("{}:frozen", cfg.fingerprint()))
        }
        Some(path) => {
            if !path.is_file() {
                return Err(Error::Checkpoint(format!(
                    "no checkpoint at {}; train first (`mitobench train`) or drop --checkpoint for frozen-only diagnostics",
                    path.display()
                )));
            }
            let meta = read_checkpoint_meta(path)?;
            let adapted = ExperimentConfig { adapt: meta.adapt, ..cfg.clone() };
            let model = build_model(&adapted, 0)?;
            model.load_checkpoint(path)?;
            (model, format!("{}:{}", meta.fingerprint, meta.adapt))
        }
    };
    let mut out = Vec::new();
    for r in cfg.diagnose_refs()? {
        let (domain, images) = r.diagnostic_images(cfg, exec)?;
        let rows = model.embed(&images, cfg.pooling, exec)?;
        let items = images.iter().map(|s| s.name.clone()).collect();
        let e = Embeddings::new(domain, rows, items, fingerprint.clone())?;
        e.save(out_dir)?;
        out.push(e);
    }
    Ok(out)
}

/// Frozen (and, with a checkpoint, adapted) mismatch diagnostics between
/// the first two diagnostic domains. Everything lands in `out_dir`.
pub fn diagnose(cfg: &ExperimentConfig, checkpoint: Option<&Path>, out_dir: &Path, exec: Exec) -> Result<MismatchReport> {
    if cfg.diagnose_refs()?.len() < 2 {
        return Err(Error::Config("diagnostics need two domains in `diagnose_datasets` (or `datasets`)".into()));
    }
    let frozen = extract_embeddings(cfg, None, &out_dir.join("embeddings/frozen"), exec)?;
    let adapted = checkpoint
        .map(|c| extract_embeddings(cfg, Some(c), &out_dir.join("embeddings/adapted"), exec))
        .transpose()?;
    let report = diagnostics::mismatch_report(
        (&frozen[0], &frozen[1]),
        adapted.as_ref().map(|a| (&a[0], &a[1])),
        &cfg.probe_config(cfg.seed),
        Some(out_dir),
    )?;
    diagnostics::write_report(&report, &out_dir.join(diagnostics::REPORT_FILE))?;
    Ok(report)
}

/// Best checkpoint of the most recent completed run of this config.
pub fn latest_checkpoint(cfg: &ExperimentConfig) -> Option<PathBuf> {
    let dir = cfg.experiment_dir();
    let mut runs: Vec<PathBuf> = std::fs::read_dir(&dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(METRICS_FILE).is_file() && p.join(CHECKPOINT_FILE).is_file())
        .collect();
    runs.sort();
    runs.pop().map(|p| p.join(CHECKPOINT_FILE))
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub config_path: PathBuf,
    pub summary: ExperimentSummary,
    pub evaluation: RunMetrics,
    pub report: MismatchReport,
    pub report_csv: PathBuf,
}

/// Parameters of a generated split-directory dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub style: crate::datasets::synthetic::DomainStyle,
    pub train: usize,
    pub test: usize,
    pub size: usize,
    pub cell: usize,
    pub seed: u64,
}

impl SyntheticData {
    pub fn new(style: crate::datasets::synthetic::DomainStyle) -> Self {
        Self { style, train: 12, test: 4, size: 56, cell: 14, seed: 1 }
    }
}

/// Generate a synthetic dataset under `root`; its directory name becomes
/// the dataset id.
pub fn prepare_synthetic(root: &Path, data: &SyntheticData) -> Result<()> {
    use crate::datasets::synthetic::{generate, write_split_dirs, SyntheticSpec};
    let name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| Error::Config(format!("{} has no directory name", root.display())))?;
    let spec = |count, seed| SyntheticSpec {
        dataset_id: crate::datasets::DatasetId::Other(name.clone()),
        count,
        height: data.size,
        width: data.size,
        cell: data.cell,
        style: data.style,
        seed,
    };
    let train = generate(&spec(data.train, data.seed))?;
    let test = generate(&spec(data.test, crate::trainer::derive_seed(data.seed, 1)))?;
    write_split_dirs(root, &train, &test)
}

/// Slice counts of one configured dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DatasetCheck {
    pub entry: String,
    pub dataset_id: String,
    pub train: usize,
    pub test: usize,
    pub unlabelled: usize,
}

/// Load every dataset the config names and report what was found.
pub fn check_datasets(cfg: &ExperimentConfig, exec: Exec) -> Result<Vec<DatasetCheck>> {
    let mut entries: Vec<&String> = cfg.datasets.iter().collect();
    for d in &cfg.diagnose_datasets {
        if !entries.contains(&d) {
            entries.push(d);
        }
    }
    entries
        .into_iter()
        .map(|entry| {
            let loaded = DatasetRef::parse(entry)?.load(cfg, exec)?;
            Ok(DatasetCheck {
                entry: entry.clone(),
                dataset_id: loaded.dataset_id.to_string(),
                train: loaded.train.len(),
                test: loaded.test.len(),
                unlabelled: loaded.unlabelled.len(),
            })
        })
        .collect()
}

/// Synthetic two-domain data, a toy-backbone config, one training run,
/// evaluation of its checkpoint, diagnostics and a report, all under `root`.
pub fn pipeline(root: &Path, adapt: AdaptMode, max_epochs: usize, exec: Exec) -> Result<PipelineOutcome> {
    use crate::datasets::synthetic::DomainStyle;

    let data = root.join("data");
    prepare_synthetic(&data.join("bright"), &SyntheticData::new(DomainStyle::Bright))?;
    prepare_synthetic(&data.join("inverted"), &SyntheticData { seed: 2, ..SyntheticData::new(DomainStyle::Inverted) })?;
    let text = format!(
        "backbone = \"toy-s14\"\nadapt = \"{adapt}\"\ndatasets = [\"split:data/bright\"]\n\
         diagnose_datasets = [\"split:data/bright\", \"split:data/inverted\"]\n\
         num_runs = 1\nmax_epochs = {max_epochs}\nhead_hidden = 16\nlearning_rate = 1e-3\noutput_root = \"runs\"\n"
    );
    let config_path = root.join("experiment.toml");
    std::fs::write(&config_path, text).map_err(|e| Error::io(&config_path, e))?;
    let cfg = ExperimentConfig::load(&config_path)?;
    let (runs, summary) = train_runs(&cfg, exec)?;
    let checkpoint = runs[0].run_dir.join(CHECKPOINT_FILE);
    let evaluation = evaluate_checkpoint(&cfg, &checkpoint, EvalSplit::Test, exec)?;
    // A head-only checkpoint leaves the encoder untouched, so only LoRA runs
    // have an adapted feature space to compare.
    let adapted = (adapt == AdaptMode::Lora).then_some(checkpoint.as_path());
    let diag = diagnose(&cfg, adapted, &cfg.experiment_dir().join("diagnostics"), exec)?;
    let report_csv = cfg.experiment_dir().join("report.csv");
    report(&[cfg.experiment_dir()], None, &report_csv)?;
    Ok(PipelineOutcome { config_path, summary, evaluation, report: diag, report_csv })
}
