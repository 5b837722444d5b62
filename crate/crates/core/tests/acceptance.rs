//! Acceptance criteria A1-A8. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; the process fails if any
//! criterion fails. Pass criterion ids (e.g. `A3 A4`) to run a subset.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use ttnet::bench::{bench_layer, BenchOptions, Variant, WallClock};
use ttnet::compression::{sweep, Assumptions, DEFAULT_BONDS, REFERENCE_REDUCTIONS};
use ttnet::contrastive::{AugmentConfig, ContrastiveBatch};
use ttnet::dataset::{
    decode_ppm, encode_ppm, gen_synthetic, load_dataset, split_80_20, Dataset, NUM_CLASSES, REFERENCE_COUNTS,
};
use ttnet::nn::{dense_forward, tt_forward, DenseLayer, EncoderConfig, Module, TtDenseLayer, TtSpec};
use ttnet::pipeline::{finetune, pretrain, write_checkpoint, ClassifierKind, Model, ModelConfig, TrainConfig};
use ttnet::rng;
use ttnet::tensor::{kernel, Tensor};

// A1
const A1_SPECS: usize = 100;
const A1_MAX_DIM: usize = 64;
const A1_REL_TOL: f64 = 1e-5;
// A2
const A2_CASES: u64 = 50;
// A3
const A3_BATCHES: usize = 20;
const A3_REL_TOL: f64 = 1e-5;
// A4
const A4_BOND16_TOL_PP: f64 = 1.0;
// A5
const A5_IMAGES_PER_CLASS: usize = 20;
const A5_IMAGE_SIZE: usize = 64;
const A5_LR0: f64 = 1e-3;
const A5_BATCH: usize = 16;
const A5_BOND: usize = 8;
const A5_MIN_LOSS_DROP: f64 = 0.10;
const A5_MIN_TRAIN_TOP1: f64 = 0.80;
const A5_MIN_VAL_TOP1: f64 = 2.0 / 11.0;
// A6
const A6_BATCH: usize = 32;
const A6_FLOP_RATIO: f64 = 0.3125;
// A7
const A7_REMOVED: usize = 4096 * 1024 + 1024 + 1024 * 512 + 512;
// A8
const A8_TRAIN_TOTAL: usize = 2030;
const A8_VAL_TOTAL: usize = 513;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

struct Criterion {
    id: &'static str,
    title: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn max_rel_diff(got: &Tensor, want: &Tensor) -> f64 {
    let scale = want.data().iter().map(|v| v.abs() as f64).fold(0.0, f64::max).max(1e-6);
    got.data()
        .iter()
        .zip(want.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .fold(0.0, f64::max)
        / scale
}

fn a1() -> Outcome {
    let mut r = rng::stream(0xA1, &[]);
    let mut worst = 0.0f64;
    let mut n = 0;
    while n < A1_SPECS {
        let (a, b, c, d) = (r.gen_range(1..=8), r.gen_range(1..=8), r.gen_range(1..=8), r.gen_range(1..=8));
        if a * b > A1_MAX_DIM || c * d > A1_MAX_DIM {
            continue;
        }
        let spec = TtSpec::new((a, b), (c, d), r.gen_range(1..=8)).unwrap();
        let mut layer = TtDenseLayer::init(spec, n as u64).unwrap();
        layer.bias = Tensor::uniform(&[c * d], -1.0, 1.0, &mut r).unwrap();
        let x = Tensor::uniform(&[r.gen_range(1..=4), a * b], -1.0, 1.0, &mut r).unwrap();
        let dense = DenseLayer::new(layer.materialize(), layer.bias.clone()).unwrap();
        worst = worst.max(max_rel_diff(&tt_forward(&layer, &x).unwrap(), &dense_forward(&dense, &x).unwrap()));
        n += 1;
    }
    outcome(worst < A1_REL_TOL, format!("{A1_SPECS} specs, worst relative difference {worst:.2e} (tolerance {A1_REL_TOL:.0e})"))
}

fn a2() -> Outcome {
    let mut worst = (0.0f64, "", 0);
    for op in common::OPS {
        for seed in 0..A2_CASES {
            let e = common::op_grad_error(op, seed);
            if e > worst.0 {
                worst = (e, op, seed);
            }
        }
    }
    outcome(
        worst.0 < common::FD_TOL,
        format!(
            "{} ops x {A2_CASES} cases, h={}, worst relative error {:.2e} ({} seed {}), tolerance {:.0e}",
            common::OPS.len(),
            common::FD_STEP,
            worst.0,
            worst.1,
            worst.2,
            common::FD_TOL
        ),
    )
}

fn a3() -> Outcome {
    let mut r = rng::stream(0xA3, &[]);
    let mut worst = 0.0f64;
    let mut worst_scale = 0.0f64;
    let mut n1_max = 0.0f64;
    for n in 1..=4usize {
        for _ in 0..A3_BATCHES {
            let d = r.gen_range(2..=6);
            let tau: f32 = r.gen_range(0.1..2.0);
            let z: Vec<f32> = (0..2 * n * d)
                .map(|_| {
                    let v: f32 = r.gen_range(0.1..2.0);
                    if r.gen_bool(0.5) {
                        v
                    } else {
                        -v
                    }
                })
                .collect();
            let want = common::nt_xent_oracle(&z, 2 * n, tau as f64);
            let loss = |z: Vec<f32>| {
                ContrastiveBatch::new(Tensor::new(&[2 * n, d], z).unwrap(), tau)
                    .unwrap()
                    .loss()
                    .unwrap() as f64
            };
            let got = loss(z.clone());
            worst = worst.max((got - want).abs() / want.abs().max(1.0));
            let scaled: Vec<f32> = z
                .chunks(d)
                .flat_map(|row| {
                    let s: f32 = r.gen_range(0.05..20.0);
                    row.iter().map(move |v| v * s).collect::<Vec<_>>()
                })
                .collect();
            worst_scale = worst_scale.max((loss(scaled) - got).abs() / got.abs().max(1.0));
            if n == 1 {
                n1_max = n1_max.max(got.abs());
            }
        }
    }
    let pass = worst < A3_REL_TOL && worst_scale < A3_REL_TOL && n1_max < A3_REL_TOL;
    outcome(
        pass,
        format!(
            "N=1..4 x {A3_BATCHES} batches: oracle error {worst:.2e}, rescaling drift {worst_scale:.2e}, max |loss| at N=1 {n1_max:.2e} (tolerance {A3_REL_TOL:.0e})"
        ),
    )
}

fn a4() -> Outcome {
    let rep = sweep(&Assumptions::default(), &DEFAULT_BONDS).unwrap();
    let text = rep.to_text();
    let refs_printed = REFERENCE_REDUCTIONS.iter().all(|(_, v)| text.contains(&format!("{v:.2}")));
    let bond16 = rep.entries[0].model_reduction_pct;
    let pass = rep.is_monotone_decreasing() && (bond16 - 95.4).abs() <= A4_BOND16_TOL_PP && refs_printed;
    let rows: Vec<String> = rep
        .entries
        .iter()
        .map(|e| format!("r={} {:.2}% (ref {:.1}, |dev| {:.2})", e.bond, e.model_reduction_pct, e.reference_pct.unwrap(), e.deviation_pct.unwrap()))
        .collect();
    outcome(pass, format!("monotone={}, {}", rep.is_monotone_decreasing(), rows.join("; ")))
}

struct A5Result {
    first: f64,
    last: f64,
    train_top1: f64,
    val_top1: f64,
    seconds: f64,
}

fn a5_variant(ds: &Dataset, tt: bool) -> A5Result {
    let start = Instant::now();
    let split = split_80_20(&ds.labels(), 1, true).unwrap();
    let mut mc = ModelConfig::default();
    if tt {
        mc.tt = Some(TtSpec::new((8, 8), (64, 64), A5_BOND).unwrap());
    }
    let mut model = Model::init(mc, 1).unwrap();
    let cfg = TrainConfig {
        lr0: A5_LR0,
        freeze_epochs: 2,
        pretrain_epochs: 5,
        finetune_epochs: 10,
        batch_size: A5_BATCH,
        seed: 1,
        ..TrainConfig::default()
    };
    let aug = AugmentConfig::new((A5_IMAGE_SIZE, A5_IMAGE_SIZE), 1);
    let pre = pretrain(&mut model, ds, &split.train, &cfg, &aug).unwrap();
    model.snip_and_attach(ClassifierKind::TwoLayer, 1).unwrap();
    let ft = finetune(&mut model, ds, &split.train, &split.validation, &cfg).unwrap();
    let last = ft.last().unwrap();
    A5Result {
        first: pre[0].loss,
        last: pre[pre.len() - 1].loss,
        train_top1: last.train_top1,
        val_top1: last.val_top1.unwrap(),
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn a5() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    gen_synthetic(dir.path(), A5_IMAGES_PER_CLASS, A5_IMAGE_SIZE, 1).unwrap();
    let ds = load_dataset(dir.path(), A5_IMAGE_SIZE).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, tt) in [("general", false), ("tensorized", true)] {
        let r = a5_variant(&ds, tt);
        let drop = 1.0 - r.last / r.first;
        let ok = drop >= A5_MIN_LOSS_DROP && r.train_top1 >= A5_MIN_TRAIN_TOP1 && r.val_top1 > A5_MIN_VAL_TOP1;
        pass &= ok;
        parts.push(format!(
            "{name}: loss {:.3} -> {:.3} (-{:.1}%), train {:.3}, val {:.3}, {:.0}s",
            r.first,
            r.last,
            100.0 * drop,
            r.train_top1,
            r.val_top1,
            r.seconds
        ));
    }
    outcome(pass, parts.join("; "))
}

fn a6() -> Outcome {
    kernel::set_threads(1);
    let spec = TtSpec::new((256, 256), (64, 64), 16).unwrap();
    let rep = bench_layer(&spec, &[A6_BATCH], &BenchOptions::default(), &mut WallClock).unwrap();
    let dense = rep.rows.iter().find(|r| r.variant == Variant::Dense).unwrap();
    let tt = rep.rows.iter().find(|r| r.variant == Variant::Tt).unwrap();
    let ratio = tt.flops as f64 / dense.flops as f64;
    let s = tt.speedup.unwrap();
    outcome(
        s > 0.0 && ratio == A6_FLOP_RATIO,
        format!(
            "batch {A6_BATCH}, 1 thread: dense {:.3}s, tt {:.3}s (median of {}), speedup {:.1}%, FLOP ratio {ratio}",
            dense.median_s,
            tt.median_s,
            rep.repeats,
            100.0 * s
        ),
    )
}

fn small_model(tt: bool) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            in_channels: 3,
            stages: vec![(1, 5)],
            kernel: 3,
        },
        head: vec![16, 8, 4],
        tt: tt.then(|| TtSpec::new((2, 4), (4, 4), 2).unwrap()),
        classifier: ClassifierKind::TwoLayer,
    }
}

fn bits(ts: Vec<&Tensor>) -> Vec<Vec<u32>> {
    ts.iter().map(|t| t.data().iter().map(|v| v.to_bits()).collect()).collect()
}

fn a7() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    gen_synthetic(dir.path(), 3, 16, 2).unwrap();
    let ds = load_dataset(dir.path(), 16).unwrap();
    let split = split_80_20(&ds.labels(), 0, true).unwrap();
    let cfg = TrainConfig {
        lr0: 1e-3,
        freeze_epochs: 2,
        pretrain_epochs: 3,
        finetune_epochs: 2,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let aug = AugmentConfig::new((16, 16), 0);

    // freezing: two frozen epochs leave the encoder untouched
    let mut m = Model::init(small_model(true), 4).unwrap();
    let enc = bits(m.encoder.params());
    let head = bits(m.projection.iter().flat_map(|l| l.params()).collect());
    let frozen_cfg = TrainConfig {
        pretrain_epochs: 2,
        ..cfg.clone()
    };
    pretrain(&mut m, &ds, &split.train, &frozen_cfg, &aug).unwrap();
    let freeze_ok = bits(m.encoder.params()) == enc && bits(m.projection.iter().flat_map(|l| l.params()).collect()) != head;

    // snipping at the default sizes
    let mut big = Model::init(ModelConfig::default(), 5).unwrap();
    let survivors = (bits(big.encoder.params()), bits(big.projection[0].params()));
    let before = big.param_count();
    let projection_before: usize = big.projection.iter().map(|l| l.param_count()).sum();
    big.snip_and_attach(ClassifierKind::TwoLayer, 6).unwrap();
    let projection_after: usize = big.projection.iter().map(|l| l.param_count()).sum();
    let removed = projection_before - projection_after;
    let snip_ok = removed == A7_REMOVED
        && (bits(big.encoder.params()), bits(big.projection[0].params())) == survivors
        && before - removed + big.classifier.iter().map(|l| l.param_count()).sum::<usize>() == big.param_count();

    // determinism of a full run
    let run = || {
        let mut m = Model::init(small_model(true), 7).unwrap();
        pretrain(&mut m, &ds, &split.train, &cfg, &aug).unwrap();
        m.snip_and_attach(ClassifierKind::TwoLayer, 8).unwrap();
        finetune(&mut m, &ds, &split.train, &split.validation, &cfg).unwrap();
        write_checkpoint(&m)
    };
    let (c1, c2) = (run(), run());
    let det_ok = c1 == c2;
    outcome(
        freeze_ok && snip_ok && det_ok,
        format!(
            "freeze bitwise: {freeze_ok}; snip removed {removed} (expected {A7_REMOVED}), survivors bitwise: {snip_ok}; reruns identical ({} bytes): {det_ok}",
            c1.len()
        ),
    )
}

fn a8() -> Outcome {
    let labels: Vec<usize> = REFERENCE_COUNTS.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
    let split = split_80_20(&labels, 0, true).unwrap();
    let per_class_ok = (0..NUM_CLASSES).all(|c| {
        split.train.iter().filter(|&&i| labels[i] == c).count() == REFERENCE_COUNTS[c] * 8 / 10
    });
    let split_ok = per_class_ok && split.train.len() == A8_TRAIN_TOTAL && split.validation.len() == A8_VAL_TOTAL;

    let mut r = rng::stream(0xA8, &[]);
    let img = Tensor::new(&[7, 9, 3], (0..7 * 9 * 3).map(|_| r.gen_range(0..=255u8) as f32 / 255.0).collect()).unwrap();
    let ppm_ok = decode_ppm(&encode_ppm(&img).unwrap()).unwrap() == img;

    let report = common::bench_fixture(true);
    let compression = sweep(&Assumptions::default(), &DEFAULT_BONDS).unwrap();
    let goldens = [
        ("bench_two_rows.csv", ttnet::bench::to_csv(&common::bench_fixture(false))),
        ("bench_report.json", ttnet::bench::to_json(&report)),
        ("bench_speedup.svg", ttnet::bench::to_svg(&report)),
        ("compression_sweep.csv", compression.to_csv()),
        ("compression_sweep.txt", compression.to_text()),
    ];
    let failed: Vec<&str> = goldens
        .iter()
        .filter(|(name, text)| !common::golden_matches(name, text))
        .map(|(name, _)| *name)
        .collect();
    outcome(
        split_ok && ppm_ok && failed.is_empty(),
        format!(
            "split {}/{} per-class floor: {per_class_ok}; PPM exact: {ppm_ok}; goldens {}/{} byte-exact{}",
            split.train.len(),
            split.validation.len(),
            goldens.len() - failed.len(),
            goldens.len(),
            if failed.is_empty() { String::new() } else { format!(" (mismatch: {})", failed.join(", ")) }
        ),
    )
}

fn main() -> ExitCode {
    kernel::set_threads(1);
    let criteria = [
        Criterion { id: "A1", title: "oracle equivalence", budget: Duration::from_secs(10), run: a1 },
        Criterion { id: "A2", title: "gradient correctness", budget: Duration::from_secs(60), run: a2 },
        Criterion { id: "A3", title: "loss oracle", budget: Duration::from_secs(10), run: a3 },
        Criterion { id: "A4", title: "compression", budget: Duration::from_secs(1), run: a4 },
        Criterion { id: "A5", title: "desk-scale end-to-end", budget: Duration::from_secs(15 * 60), run: a5 },
        Criterion { id: "A6", title: "speedup sign", budget: Duration::from_secs(5 * 60), run: a6 },
        Criterion { id: "A7", title: "pipeline contracts", budget: Duration::from_secs(5 * 60), run: a7 },
        Criterion { id: "A8", title: "data plumbing", budget: Duration::from_secs(30), run: a8 },
    ];
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for c in &criteria {
        if !wanted.is_empty() && !wanted.iter().any(|w| w == c.id) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            outcome(false, format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let in_budget = elapsed <= c.budget;
        let pass = result.pass && in_budget;
        if !pass {
            failures += 1;
        }
        println!(
            "{} {} {}: {} [{:.2}s of {}s budget{}]",
            c.id,
            if pass { "PASS" } else { "FAIL" },
            c.title,
            result.detail,
            elapsed.as_secs_f64(),
            c.budget.as_secs(),
            if in_budget { "" } else { ", over budget" }
        );
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
