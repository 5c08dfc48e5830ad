//! Acceptance criteria 1-9, one PASS/FAIL line each. Criterion 9 needs
//! pretrained weights and the real datasets and is skipped without them.

use std::time::{Duration, Instant};

use candle_core::{Device, Tensor};
use mitobench_core::backbones::{registry, Backbone, SeededInit};
use mitobench_core::datasets::synthetic::{generate, DomainStyle, SyntheticSpec};
use mitobench_core::datasets::{make_split, DatasetId, SplitConfig};
use mitobench_core::diagnostics::{diagnose_pair, frechet_distance, Embeddings, ProbeConfig};
use mitobench_core::experiment::{train_runs, ExperimentConfig};
use mitobench_core::lora::{inject, planned_parameter_count, AdapterConfig};
use mitobench_core::metrics::{accumulate, macro_average, EvalScores, MetricAccumulator};
use mitobench_core::trainer::*;
use mitobench_core::Exec;
use nalgebra::DMatrix;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, budget: Duration) -> std::result::Result<(), String> {
    ensure(elapsed <= budget, format!("took {elapsed:.2?}, budget {budget:?}"))
}

fn c1_lora_accounting() -> Check {
    let t0 = Instant::now();
    let cfg = AdapterConfig::default();
    for (key, expected) in [
        ("dinov2-s14", 442_368),
        ("dinov2-b14", 884_736),
        ("dinov2-l14", 2_359_296),
        ("dinov2-g14", 5_898_240),
        ("openclip-h14", 3_932_160),
    ] {
        let got = planned_parameter_count(&registry(key).map_err(|e| e.to_string())?, &cfg).map_err(|e| e.to_string())?;
        ensure(got == expected, format!("{key}: {got} != {expected}"))?;
    }
    let mut toy = Backbone::from_registry("toy-s14", &SeededInit { seed: 1 }).map_err(|e| e.to_string())?.frozen();
    let planned = planned_parameter_count(toy.spec(), &cfg).map_err(|e| e.to_string())?;
    let report = inject(&mut toy, &cfg, 0).map_err(|e| e.to_string())?;
    ensure(report.trainable_lora == planned, "injected count differs from plan")?;
    within(t0.elapsed(), Duration::from_secs(1))?;
    Ok("S/B/L/G/H counts exact".into())
}

fn max_forward_deviation(key: &str, side: usize) -> std::result::Result<f64, String> {
    let mut bb = Backbone::from_registry(key, &SeededInit { seed: 5 }).map_err(|e| e.to_string())?.frozen();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pixels: Vec<f32> = (0..3 * side * side).map(|_| rng.random_range(-2.0..2.0)).collect();
    let batch = Tensor::from_vec(pixels, (1, 3, side, side), &Device::Cpu).map_err(|e| e.to_string())?;
    let before = bb.extract_feature_map(&batch).map_err(|e| e.to_string())?;
    inject(&mut bb, &AdapterConfig::default(), 3).map_err(|e| e.to_string())?;
    let after = bb.extract_feature_map(&batch).map_err(|e| e.to_string())?;
    let diff = (before.tokens - after.tokens)
        .and_then(|d| d.abs()?.flatten_all()?.max(0)?.to_scalar::<f32>())
        .map_err(|e| e.to_string())?;
    Ok(diff as f64)
}

fn c2_identity_at_init() -> Check {
    let t0 = Instant::now();
    let toy = max_forward_deviation("toy-s14", 56)?;
    ensure(toy == 0.0, format!("toy deviation {toy:e}"))?;
    within(t0.elapsed(), Duration::from_secs(10))?;
    let mut worst: f64 = 0.0;
    for (key, side) in [("dinov2-s14", 28), ("dinov3-s16", 32)] {
        worst = worst.max(max_forward_deviation(key, side)?);
    }
    ensure(worst <= 1e-6, format!("ViT-S deviation {worst:e}"))?;
    Ok(format!("toy 0, ViT-S architectures {worst:e}"))
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, j| rng.sample::<f64, _>(StandardNormal) * (1.0 + j as f64 * 0.05) + shift)
}

fn c3_frechet() -> Check {
    let t0 = Instant::now();
    let fd = |a: &DMatrix<f64>, b: &DMatrix<f64>| frechet_distance(a, b).map_err(|e| e.to_string());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let e = gaussian(&mut rng, 200, 64, 0.0);
    let self_fd = fd(&e, &e)?;
    ensure(self_fd.abs() <= 1e-8, format!("FD(E,E) = {self_fd:e}"))?;

    // Means 0 and 3, sample standard deviations sqrt(2) and sqrt(2) + 1.
    let c = 1.0 + 1.0 / 2f64.sqrt();
    let a = DMatrix::from_column_slice(2, 1, &[-1.0, 1.0]);
    let b = DMatrix::from_column_slice(2, 1, &[3.0 - c, 3.0 + c]);
    let one_d = fd(&a, &b)?;
    ensure((one_d - 10.0).abs() <= 1e-6, format!("1-D case {one_d}"))?;

    let f = gaussian(&mut rng, 150, 64, 0.3);
    let (ef, fe) = (fd(&e, &f)?, fd(&f, &e)?);
    ensure((ef - fe).abs() <= 1e-6, format!("asymmetry {:e}", (ef - fe).abs()))?;

    let q = DMatrix::<f64>::from_fn(64, 64, |_, _| rng.sample(StandardNormal)).qr().q();
    let rotated = fd(&(&e * &q), &(&f * &q))?;
    ensure((rotated - ef).abs() <= 1e-5, format!("rotation changed FD by {:e}", (rotated - ef).abs()))?;
    within(t0.elapsed(), Duration::from_secs(5))?;
    Ok(format!("1-D {one_d:.9}, FD(E,F) {ef:.4}"))
}

fn c4_iou_streaming() -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pairs: Vec<(Array2<u8>, Array2<u8>)> = (0..100)
        .map(|_| {
            let (h, w) = (rng.random_range(1..40), rng.random_range(1..40));
            let p = rng.random_range(0.0..1.0);
            let mut cell = || u8::from(rng.random_bool(p));
            let pred = Array2::from_shape_fn((h, w), |_| cell());
            let gt = Array2::from_shape_fn((h, w), |_| cell());
            (pred, gt)
        })
        .collect();
    let (mut inter, mut union) = (0u64, 0u64);
    for (p, g) in &pairs {
        for (&a, &b) in p.iter().zip(g) {
            inter += u64::from(a == 1 && b == 1);
            union += u64::from(a == 1 || b == 1);
        }
    }
    let brute = inter as f64 / (union as f64 + 1e-7);
    for trial in 0..20 {
        let mut acc = MetricAccumulator::new(DatasetId::Lucchi);
        let mut start = 0;
        while start < pairs.len() {
            let end = (start + rng.random_range(1..=17)).min(pairs.len());
            let exec = if trial % 2 == 0 { Exec::Sequential } else { Exec::Parallel };
            let chunk = accumulate(DatasetId::Lucchi, &pairs[start..end], exec).map_err(|e| e.to_string())?;
            acc = acc.merge(&chunk).map_err(|e| e.to_string())?;
            start = end;
        }
        let streamed = acc.finalize();
        ensure((streamed - brute).abs() <= 1e-12, format!("streamed {streamed} vs {brute}"))?;
    }
    let m = macro_average(&[0.007, 0.661]).map_err(|e| e.to_string())?;
    ensure((m - 0.334).abs() <= 1e-12, format!("macro {m}"))?;
    within(t0.elapsed(), Duration::from_secs(5))?;
    Ok(format!("IoU {brute:.6}, macro {m:.3}"))
}

fn c5_early_stopping() -> Check {
    let mut trace = vec![1.0, 0.9];
    trace.extend((0..20).map(|i| 0.9 + 0.001 * (i % 3) as f64));
    let (stopped, best) = simulate(&trace, 20);
    ensure((stopped, best) == (22, 2), format!("stopped {stopped}, best {best}"))?;
    let steps = steps_per_epoch(17, 2);
    ensure(steps == 9, format!("{steps} steps"))?;
    Ok("stop 22, best 2, 9 steps".into())
}

fn c6_balanced_sampler() -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for epoch in 0..1000 {
        let batches = make_batches(&[149, 15], Sampling::Balanced, 2, &mut rng).map_err(|e| e.to_string())?;
        ensure(batches.len() == 149, format!("epoch {epoch}: {} batches", batches.len()))?;
        for b in &batches {
            let mut ds: Vec<usize> = b.iter().map(|i| i.dataset).collect();
            ds.sort_unstable();
            ensure(ds == [0, 1], format!("epoch {epoch}: batch {b:?}"))?;
        }
    }
    within(t0.elapsed(), Duration::from_secs(10))?;
    Ok("1000 epochs".into())
}

fn smoke_iou(adapt: AdaptMode) -> std::result::Result<(f64, Duration), String> {
    let t0 = Instant::now();
    let spec = |count, seed| SyntheticSpec {
        dataset_id: DatasetId::Other("blobs".into()),
        count,
        height: 112,
        width: 112,
        cell: 28,
        style: DomainStyle::Bright,
        seed,
    };
    let labelled = generate(&spec(24, 1)).map_err(|e| e.to_string())?;
    let test = generate(&spec(8, 2)).map_err(|e| e.to_string())?;
    let (train_set, val) = make_split(&labelled, &SplitConfig { validation_fraction: 0.1, seed: 0 }).map_err(|e| e.to_string())?;
    let mcfg = ModelConfig { backbone: "toy-s14".into(), head_hidden: 32, ..Default::default() };
    let mut model = Model::build(&mcfg, adapt, Regime::Single, 0).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { max_epochs: 50, adapt, ..Default::default() };
    let data = [DatasetSplits { dataset_id: DatasetId::Other("blobs".into()), train: train_set, val }];
    train(&mut model, &data, &cfg, &TrainOptions::default()).map_err(|e| e.to_string())?;
    let accs = model.evaluate(&test, Exec::default()).map_err(|e| e.to_string())?;
    let iou = EvalScores::from_accumulators(&accs).map_err(|e| e.to_string())?.macro_iou_fg;
    Ok((iou, t0.elapsed()))
}

fn c7_smoke() -> Check {
    let (head, t_head) = smoke_iou(AdaptMode::HeadOnly)?;
    ensure(head >= 0.90, format!("head-only IoU_fg {head:.4} < 0.90"))?;
    within(t_head, Duration::from_secs(300))?;
    let (lora, t_lora) = smoke_iou(AdaptMode::Lora)?;
    ensure(lora >= head - 0.02, format!("LoRA IoU_fg {lora:.4} < head-only {head:.4} - 0.02"))?;
    within(t_lora, Duration::from_secs(300))?;
    Ok(format!("head {head:.4} in {t_head:.0?}, LoRA {lora:.4} in {t_lora:.0?}"))
}

fn embeddings(domain: &str, m: &DMatrix<f64>) -> std::result::Result<Embeddings, String> {
    let rows = m.row_iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect();
    let items = (0..m.nrows()).map(|i| format!("{domain}_{i}")).collect();
    Embeddings::new(domain, rows, items, "acceptance").map_err(|e| e.to_string())
}

fn c8_diagnostics() -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = embeddings("a", &gaussian(&mut rng, 60, 16, 0.0))?;
    let b = embeddings("b", &gaussian(&mut rng, 60, 16, 12.0))?;
    let probe = ProbeConfig::default();
    let split = diagnose_pair(&a, &b, &probe, None).map_err(|e| e.to_string())?;
    ensure(split.probe.accuracy == 1.0, format!("disjoint accuracy {}", split.probe.accuracy))?;
    ensure(split.frechet.distance > 0.0, "disjoint FD not positive")?;

    let twin = embeddings("a2", &a.matrix())?;
    let same = diagnose_pair(&a, &twin, &probe, None).map_err(|e| e.to_string())?;
    ensure((0.4..=0.6).contains(&same.probe.auroc), format!("control AUROC {}", same.probe.auroc))?;
    ensure(same.frechet.distance <= 1e-6, format!("control FD {:e}", same.frechet.distance))?;
    within(t0.elapsed(), Duration::from_secs(30))?;
    Ok(format!(
        "disjoint acc {:.2} FD {:.1}; control AUROC {:.2} FD {:.1e}",
        split.probe.accuracy, split.frechet.distance, same.probe.auroc, same.frechet.distance
    ))
}

const REAL_ENV: [&str; 3] = ["MITOBENCH_WEIGHTS", "MITOBENCH_LUCCHI", "MITOBENCH_VNC"];

fn real_macro(base: &ExperimentConfig, adapt: AdaptMode, regime: Regime, datasets: Vec<String>) -> std::result::Result<f64, String> {
    let cfg = ExperimentConfig { adapt, regime, datasets, ..base.clone() };
    cfg.validate().map_err(|e| e.to_string())?;
    let (_, summary) = train_runs(&cfg, Exec::default()).map_err(|e| e.to_string())?;
    Ok(summary.macro_iou_fg.mean)
}

/// `None` when the real weights or datasets are not configured.
fn c9_real_data_direction() -> Option<Check> {
    let vars: Vec<String> = REAL_ENV.iter().map(|k| std::env::var(k).ok()).collect::<Option<_>>()?;
    Some((|| {
        let out = tempfile::tempdir().map_err(|e| e.to_string())?;
        let base = ExperimentConfig {
            backbone: std::env::var("MITOBENCH_BACKBONE").unwrap_or_else(|_| "dinov2-l14".into()),
            num_runs: std::env::var("MITOBENCH_RUNS").ok().and_then(|v| v.parse().ok()).unwrap_or(3),
            output_root: out.path().to_path_buf(),
            ..Default::default()
        };
        let lucchi = format!("lucchi:{}", vars[1]);
        let vnc = format!("vnc:{}", vars[2]);
        let mut singles = Vec::new();
        for ds in [&lucchi, &vnc] {
            let frozen = real_macro(&base, AdaptMode::HeadOnly, Regime::Single, vec![ds.clone()])?;
            let lora = real_macro(&base, AdaptMode::Lora, Regime::Single, vec![ds.clone()])?;
            ensure(lora > frozen, format!("{ds}: LoRA {lora:.3} <= frozen {frozen:.3}"))?;
            singles.extend([frozen, lora]);
        }
        let paired = real_macro(&base, AdaptMode::HeadOnly, Regime::Paired, vec![lucchi, vnc])?;
        let lowest = singles.iter().copied().fold(f64::INFINITY, f64::min);
        ensure(paired < lowest, format!("paired {paired:.3} >= single {lowest:.3}"))?;
        Ok(format!("paired {paired:.3} below singles {singles:.3?}"))
    })())
}

fn main() {
    // The suite is one binary; honour a name filter so `cargo test <name>`
    // elsewhere does not rerun it.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filter.is_empty() && !filter.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    let criteria: [(u8, &str, fn() -> Check); 8] = [
        (1, "LoRA parameter accounting", c1_lora_accounting),
        (2, "LoRA identity at init", c2_identity_at_init),
        (3, "Frechet distance oracles", c3_frechet),
        (4, "streaming IoU oracle", c4_iou_streaming),
        (5, "early-stopping trace", c5_early_stopping),
        (6, "balanced sampler", c6_balanced_sampler),
        (7, "synthetic end-to-end smoke", c7_smoke),
        (8, "diagnostics discrimination", c8_diagnostics),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        match check() {
            Ok(detail) => println!("criterion {id} PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {id} FAIL {name}: {why}");
            }
        }
    }
    match c9_real_data_direction() {
        None => println!("criterion 9 SKIP real-data direction (optional): set {} to run", REAL_ENV.join(", ")),
        Some(Ok(detail)) => println!("criterion 9 PASS real-data direction: {detail}"),
        Some(Err(why)) => println!("criterion 9 FAIL real-data direction (optional, not gating): {why}"),
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
