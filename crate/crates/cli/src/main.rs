use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mitobench_core::datasets::synthetic::DomainStyle;
use mitobench_core::experiment::{self, EvalSplit, ExperimentConfig, SyntheticData};
use mitobench_core::trainer::{AdaptMode, Regime, Sampling};
use mitobench_core::{Error, Exec, Result};

/// Benchmark frozen and LoRA-adapted ViT encoders for EM mitochondria
/// segmentation.
#[derive(Parser)]
#[command(name = "mitobench", version)]
struct Cli {
    /// Run every stage on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset, or check the datasets a config names.
    PrepareData(PrepareArgs),
    /// Run seeded repetitions and aggregate mean ± std.
    Train(TrainArgs),
    /// Score a checkpoint on the configured datasets.
    Evaluate(EvalArgs),
    /// Write pooled embeddings of the diagnostic domains.
    ExtractEmbeddings(EmbedArgs),
    /// FD, linear probe and PCA figures for frozen (and adapted) features.
    Diagnose(EmbedArgs),
    /// Comparison table and bar chart from run summaries.
    Report(ReportArgs),
    /// Synthetic data, toy backbone: prepare, train, evaluate, diagnose, report.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    /// Output root; run directories go under `<out>/<fingerprint>/`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long)]
    adapt: Option<AdaptMode>,
    #[arg(long)]
    regime: Option<Regime>,
    #[arg(long)]
    sampling: Option<Sampling>,
}

impl Overrides {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(runs) = self.runs {
            cfg.num_runs = runs;
        }
        if let Some(out) = &self.out {
            // Relative to the working directory, not the config file.
            cfg.output_root = std::path::absolute(out).map_err(|e| Error::Config(format!("--out: {e}")))?;
        }
        if let Some(b) = &self.backbone {
            cfg.backbone = b.clone();
        }
        if let Some(a) = self.adapt {
            cfg.adapt = a;
        }
        if let Some(r) = self.regime {
            cfg.regime = r;
        }
        if let Some(s) = self.sampling {
            cfg.sampling = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Style {
    Bright,
    Inverted,
}

#[derive(Args)]
struct PrepareArgs {
    /// Load and count every dataset in this config.
    #[arg(long, conflicts_with = "synthetic")]
    config: Option<PathBuf>,
    /// Write a generated dataset in the split-directory layout.
    #[arg(long, requires = "out")]
    synthetic: Option<Style>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 12)]
    count: usize,
    #[arg(long, default_value_t = 4)]
    test_count: usize,
    #[arg(long, default_value_t = 56)]
    size: usize,
    #[arg(long, default_value_t = 14)]
    cell: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: Overrides,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: Overrides,
    /// Defaults to the newest completed run of this config.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Where to write the metrics JSON; printed to stdout when omitted.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    cfg: Overrides,
    /// Adapted checkpoint; without it only frozen features are used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory; defaults inside the experiment directory.
    #[arg(long)]
    dest: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Experiment directories (or their summary.json files).
    #[arg(required = true)]
    summaries: Vec<PathBuf>,
    /// CSV with columns `label,iou_fg[,std]`.
    #[arg(long)]
    literature: Option<PathBuf>,
    #[arg(long, default_value = "report.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "head")]
    adapt: AdaptMode,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match cli.command {
        Command::PrepareData(a) => match (a.config, a.synthetic) {
            (Some(config), _) => {
                let cfg = ExperimentConfig::load(&config)?;
                for c in experiment::check_datasets(&cfg, exec)? {
                    println!("{}: {} train, {} test, {} unlabelled", c.entry, c.train, c.test, c.unlabelled);
                }
                Ok(())
            }
            (None, Some(style)) => {
                let style = match style {
                    Style::Bright => DomainStyle::Bright,
                    Style::Inverted => DomainStyle::Inverted,
                };
                let out = a.out.expect("clap requires --out");
                let data = SyntheticData { style, train: a.count, test: a.test_count, size: a.size, cell: a.cell, seed: a.seed };
                experiment::prepare_synthetic(&out, &data)?;
                println!("wrote {}", out.display());
                Ok(())
            }
            (None, None) => Err(Error::Config("prepare-data needs --config or --synthetic".into())),
        },
        Command::Train(a) => {
            let cfg = a.cfg.load()?;
            let (runs, summary) = experiment::train_runs(&cfg, exec)?;
            for r in &runs {
                println!("{}  macro IoU_fg {:.4}", r.run_dir.display(), r.metrics.macro_iou_fg);
            }
            for (id, v) in &summary.per_dataset {
                println!("{id}: {v}");
            }
            println!("macro IoU_fg over {} runs: {}", summary.macro_iou_fg.n, summary.macro_iou_fg);
            println!("summary: {}", cfg.experiment_dir().join(experiment::SUMMARY_JSON).display());
            Ok(())
        }
        Command::Evaluate(a) => {
            let cfg = a.cfg.load()?;
            let checkpoint = match a.checkpoint {
                Some(c) => c,
                None => experiment::latest_checkpoint(&cfg)
                    .ok_or_else(|| Error::Checkpoint(format!("no completed run under {}; pass --checkpoint", cfg.experiment_dir().display())))?,
            };
            let split = match a.split {
                SplitArg::Train => EvalSplit::Train,
                SplitArg::Test => EvalSplit::Test,
            };
            let metrics = experiment::evaluate_checkpoint(&cfg, &checkpoint, split, exec)?;
            match a.metrics {
                Some(path) => write_json(&path, &metrics),
                None => print_json(&metrics),
            }
        }
        Command::ExtractEmbeddings(a) => {
            let cfg = a.cfg.load()?;
            let sub = if a.checkpoint.is_some() { "adapted" } else { "frozen" };
            let dest = a.dest.unwrap_or_else(|| cfg.experiment_dir().join("embeddings").join(sub));
            for e in experiment::extract_embeddings(&cfg, a.checkpoint.as_deref(), &dest, exec)? {
                println!("{}: {} x {} -> {}", e.domain, e.n(), e.dim, dest.display());
            }
            Ok(())
        }
        Command::Diagnose(a) => {
            let cfg = a.cfg.load()?;
            let dest = a.dest.unwrap_or_else(|| cfg.experiment_dir().join("diagnostics"));
            let report = experiment::diagnose(&cfg, a.checkpoint.as_deref(), &dest, exec)?;
            print_json(&report)?;
            println!("report: {}", dest.join(mitobench_core::diagnostics::REPORT_FILE).display());
            Ok(())
        }
        Command::Report(a) => {
            let rows = experiment::report(&a.summaries, a.literature.as_deref(), &a.out)?;
            for r in &rows {
                match r.std {
                    Some(s) => println!("{:<40} {:.3} ± {:.3}", r.label, r.macro_iou_fg, s),
                    None => println!("{:<40} {:.3}", r.label, r.macro_iou_fg),
                }
            }
            println!("table: {}  figure: {}", a.out.display(), a.out.with_extension("svg").display());
            Ok(())
        }
        Command::Pipeline(a) => {
            let out = experiment::pipeline(&a.out, a.adapt, a.epochs, exec)?;
            println!("config: {}", out.config_path.display());
            println!("macro IoU_fg: {}", out.summary.macro_iou_fg);
            println!("evaluated checkpoint: {:.4}", out.evaluation.macro_iou_fg);
            println!("frozen FD: {:.4}", out.report.frozen.frechet.distance);
            println!("report: {}", out.report_csv.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
