//! Wall-clock comparison of dense and tensor-train layers, and of full
//! pretraining iterations, over a batch-size sweep.
//!
//! Speedup is `(t_dense - t_tt) / t_dense`; it is negative when the
//! factorized variant is slower. Times are per iteration (forward plus
//! backward, plus the optimizer update for training runs) and the median of
//! the repeats is the primary statistic.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::compression::flops_estimate;
use crate::contrastive::{augment_pair, nt_xent, AugmentConfig};
use crate::dataset::Dataset;
use crate::nn::{DenseLayer, Module, TtDenseLayer, TtSpec};
use crate::pipeline::{lr_at, train_step, AdamState, Model, ModelConfig, TrainConfig};
use crate::rng;
use crate::tensor::kernel::{self, count_ops, gemm, MatRef};
use crate::tensor::{Graph, Tensor};
use crate::{Error, Result};

pub fn speedup(t_base: f64, t_tt: f64) -> Result<f64> {
    if !(t_base > 0.0 && t_tt > 0.0) {
        return Err(Error::Data(format!("timings must be positive, got {t_base} and {t_tt}")));
    }
    Ok((t_base - t_tt) / t_base)
}

/// Source of per-iteration durations, replaceable in tests.
pub trait Timer {
    fn time(&mut self, f: &mut dyn FnMut() -> Result<()>) -> Result<f64>;
}

pub struct WallClock;

impl Timer for WallClock {
    fn time(&mut self, f: &mut dyn FnMut() -> Result<()>) -> Result<f64> {
        let start = Instant::now();
        f()?;
        Ok(start.elapsed().as_secs_f64())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub median: f64,
    pub min: f64,
    pub mean: f64,
}

impl Stats {
    pub fn of(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("no timing samples".into()));
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
        Ok(Self {
            median,
            min: s[0],
            mean: s.iter().sum::<f64>() / n as f64,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Dense,
    Tt,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Dense => "dense",
            Variant::Tt => "tt",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub batch: usize,
    pub variant: Variant,
    pub median_s: f64,
    pub min_s: f64,
    pub mean_s: f64,
    /// Estimated forward FLOPs of the timed layer (or model head) per iteration.
    pub flops: u64,
    /// Multiply-adds counted by the contraction kernel in one forward pass.
    pub counted_macs: u64,
    /// Trainable plus frozen parameters of the timed layer or model.
    pub params: u64,
    /// Filled on `tt` rows.
    pub speedup: Option<f64>,
    /// On `tt` rows: whether the FLOP estimate predicts the factorized variant to be faster.
    pub predicted_faster: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub threads: usize,
    pub optimized: bool,
    pub target_features: Vec<String>,
    pub arch: String,
    pub os: String,
    pub timing_basis: String,
}

impl Environment {
    pub fn current(timing_basis: &str) -> Self {
        let mut features = Vec::new();
        if cfg!(target_feature = "avx2") {
            features.push("avx2".to_string());
        }
        if cfg!(target_feature = "fma") {
            features.push("fma".to_string());
        }
        if cfg!(target_feature = "avx512f") {
            features.push("avx512f".to_string());
        }
        Self {
            threads: kernel::threads(),
            optimized: !cfg!(debug_assertions),
            target_features: features,
            arch: std::env::consts::ARCH.into(),
            os: std::env::consts::OS.into(),
            timing_basis: timing_basis.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mode: String,
    pub description: String,
    pub repeats: usize,
    pub warmup: usize,
    pub environment: Environment,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn speedups(&self) -> Vec<(usize, f64)> {
        self.rows.iter().filter_map(|r| r.speedup.map(|s| (r.batch, s))).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            repeats: 5,
            warmup: 1,
            seed: 0,
        }
    }
}

impl BenchOptions {
    fn validate(&self) -> Result<()> {
        if self.repeats < 5 || self.warmup < 1 {
            return Err(Error::Config(format!(
                "benchmarks need at least 5 repeats and 1 warmup, got {} and {}",
                self.repeats, self.warmup
            )));
        }
        Ok(())
    }
}

fn check_batches(batches: &[usize]) -> Result<()> {
    if batches.is_empty() || batches.contains(&0) {
        return Err(Error::Config(format!("batch sizes must be a nonempty list of positive values, got {batches:?}")));
    }
    Ok(())
}

/// Fails early, with the size, if a buffer of `floats` f32 values cannot be reserved.
fn ensure_alloc(floats: usize, what: &str) -> Result<()> {
    let mut probe: Vec<f32> = Vec::new();
    probe
        .try_reserve_exact(floats)
        .map_err(|_| Error::Data(format!("cannot allocate {} bytes for {what}", floats * 4)))
}

fn measure(timer: &mut dyn Timer, opts: &BenchOptions, f: &mut dyn FnMut() -> Result<()>) -> Result<Stats> {
    for _ in 0..opts.warmup {
        f()?;
    }
    let samples = (0..opts.repeats).map(|_| timer.time(f)).collect::<Result<Vec<_>>>()?;
    Stats::of(&samples)
}

/// One forward plus backward pass with respect to the layer parameters.
fn layer_iteration(layer: &dyn Module, x: &Tensor) -> Result<()> {
    let mut g = Graph::new();
    let xv = g.leaf_ref(x);
    let y = layer.forward(&mut g, xv, &mut Vec::new())?;
    let loss = g.sum(y, None)?;
    g.backward(loss)?;
    Ok(())
}

fn forward_macs(layer: &dyn Module, x: &Tensor) -> Result<u64> {
    let (out, counts) = count_ops(|| -> Result<()> {
        let mut g = Graph::new();
        let xv = g.leaf_ref(x);
        layer.forward(&mut g, xv, &mut Vec::new())?;
        Ok(())
    });
    out?;
    Ok(counts.macs)
}

fn fill_speedups(rows: &mut [BenchRow]) -> Result<()> {
    for pair in rows.chunks_mut(2) {
        if let [dense, tt] = pair {
            tt.speedup = Some(speedup(dense.median_s, tt.median_s)?);
            tt.predicted_faster = Some(tt.flops < dense.flops);
        }
    }
    Ok(())
}

/// Times the dense layer `(in, out)` against its factorization `spec` for
/// every batch size, on identical random inputs.
pub fn bench_layer(spec: &TtSpec, batches: &[usize], opts: &BenchOptions, timer: &mut dyn Timer) -> Result<BenchReport> {
    spec.validate()?;
    opts.validate()?;
    check_batches(batches)?;
    let (n_in, n_out) = (spec.in_dim(), spec.out_dim());
    ensure_alloc(2 * n_in * n_out, "the dense weight and its gradient")?;
    let dense = DenseLayer::init(n_in, n_out, rng::derive(opts.seed, &[1]))?;
    let tt = TtDenseLayer::init(*spec, rng::derive(opts.seed, &[2]))?;
    let mut rows = Vec::with_capacity(2 * batches.len());
    for &batch in batches {
        let x = Tensor::uniform(&[batch, n_in], -1.0, 1.0, &mut rng::stream(opts.seed, &[3, batch as u64]))?;
        let (tt_flops, dense_flops) = flops_estimate(spec, batch);
        let variants: [(Variant, &dyn Module, u64); 2] =
            [(Variant::Dense, &dense, dense_flops), (Variant::Tt, &tt, tt_flops)];
        for (variant, layer, flops) in variants {
            let counted_macs = forward_macs(layer, &x)?;
            let stats = measure(timer, opts, &mut || layer_iteration(layer, &x))?;
            log::info!("batch {batch} {}: median {:.4}s", variant.name(), stats.median);
            rows.push(BenchRow {
                batch,
                variant,
                median_s: stats.median,
                min_s: stats.min,
                mean_s: stats.mean,
                flops,
                counted_macs,
                params: layer.param_count() as u64,
                speedup: None,
                predicted_faster: None,
            });
        }
    }
    fill_speedups(&mut rows)?;
    Ok(BenchReport {
        mode: "layer".into(),
        description: format!(
            "{n_in} -> {n_out}, in split {:?}, out split {:?}, bond {}",
            spec.in_split, spec.out_split, spec.bond
        ),
        repeats: opts.repeats,
        warmup: opts.warmup,
        environment: Environment::current("per iteration: forward + backward"),
        rows,
    })
}

/// Times full pretraining iterations (forward, loss, backward, Adam update)
/// of a dense-head and a tensorized-head model. Augmentation happens before
/// the timed region.
pub fn bench_training(
    dense_cfg: &ModelConfig,
    tt_cfg: &ModelConfig,
    ds: &Dataset,
    train: &TrainConfig,
    batches: &[usize],
    opts: &BenchOptions,
    timer: &mut dyn Timer,
) -> Result<BenchReport> {
    opts.validate()?;
    check_batches(batches)?;
    let spec = tt_cfg
        .tt
        .ok_or_else(|| Error::Config("the tensorized model config has no TT spec".into()))?;
    if ds.is_empty() {
        return Err(Error::Data("benchmark dataset is empty".into()));
    }
    let aug = AugmentConfig::new((ds.image_size, ds.image_size), opts.seed);
    let mut rows = Vec::with_capacity(2 * batches.len());
    for &batch in batches {
        let mut data = Vec::new();
        for k in 0..batch {
            let i = k % ds.len();
            let (a, b) = augment_pair(&ds.samples[i].image, &aug, 0, k)?;
            data.extend_from_slice(a.data());
            data.extend_from_slice(b.data());
        }
        let s = ds.image_size;
        let input = Tensor::new(&[2 * batch, s, s, 3], data)?;
        let (tt_flops, dense_flops) = flops_estimate(&spec, 2 * batch);
        for (variant, cfg, flops) in [(Variant::Dense, dense_cfg, dense_flops), (Variant::Tt, tt_cfg, tt_flops)] {
            let mut model = Model::init(cfg.clone(), opts.seed)?;
            let mut adam = AdamState::new(&model.params());
            let counted_macs = {
                let (out, counts) = count_ops(|| -> Result<()> {
                    let mut g = Graph::new();
                    let x = g.constant(input.clone());
                    model.forward(&mut g, x, &mut Vec::new())?;
                    Ok(())
                });
                out?;
                counts.macs
            };
            let stats = measure(timer, opts, &mut || {
                let lr = lr_at(train, adam.step);
                train_step(&mut model, &mut adam, lr, input.clone(), |g, z| nt_xent(g, z, train.tau)).map(|_| ())
            })?;
            log::info!("batch {batch} {}: median {:.4}s", variant.name(), stats.median);
            rows.push(BenchRow {
                batch,
                variant,
                median_s: stats.median,
                min_s: stats.min,
                mean_s: stats.mean,
                flops,
                counted_macs,
                params: model.param_count() as u64,
                speedup: None,
                predicted_faster: None,
            });
        }
    }
    fill_speedups(&mut rows)?;
    Ok(BenchReport {
        mode: "training".into(),
        description: format!(
            "pretraining step, {}x{} images, first head layer {:?} -> {:?} bond {}",
            ds.image_size, ds.image_size, spec.in_split, spec.out_split, spec.bond
        ),
        repeats: opts.repeats,
        warmup: opts.warmup,
        environment: Environment::current("per iteration: forward + loss + backward + update"),
        rows,
    })
}

/// Factorized forward with the opposite contraction order: `core2` first
/// over `b`, then `core1` over `(a, r)`. Costs `a*b*d*r + a*c*d*r`
/// multiply-adds per sample. Not differentiable; used for comparisons only.
pub fn tt_forward_reversed(layer: &TtDenseLayer, x: &Tensor) -> Result<Tensor> {
    let (a, b) = layer.spec.in_split;
    let (c, d) = layer.spec.out_split;
    let r = layer.spec.bond;
    if x.rank() != 2 || x.shape()[1] != a * b {
        return Err(Error::Data(format!("expected (batch, {}), got {:?}", a * b, x.shape())));
    }
    let batch = x.shape()[0];
    // (batch*a, b) x (b, d*r) -> (batch, a, d, r)
    let mut t = vec![0.0f32; batch * a * d * r];
    gemm(batch * a, b, d * r, MatRef::row_major(x.data(), b), MatRef::row_major(layer.core2.data(), d * r), &mut t, true);
    // regroup to (batch, d, a, r) so (a, r) is contiguous
    let mut u = vec![0.0f32; t.len()];
    for n in 0..batch {
        for i in 0..a {
            for l in 0..d {
                let src = ((n * a + i) * d + l) * r;
                let dst = ((n * d + l) * a + i) * r;
                u[dst..dst + r].copy_from_slice(&t[src..src + r]);
            }
        }
    }
    // (batch*d, a*r) x (a*r, c) with core1 viewed as (a, c, r) -> transpose of (c, a*r)
    let mut core1_t = vec![0.0f32; a * r * c];
    for i in 0..a {
        for k in 0..c {
            for s in 0..r {
                core1_t[(i * r + s) * c + k] = layer.core1.data()[(i * c + k) * r + s];
            }
        }
    }
    let mut y = vec![0.0f32; batch * d * c];
    gemm(batch * d, a * r, c, MatRef::row_major(&u, a * r), MatRef::row_major(&core1_t, c), &mut y, true);
    let bias = layer.bias.data();
    let mut out = vec![0.0f32; batch * c * d];
    for n in 0..batch {
        for l in 0..d {
            for k in 0..c {
                out[(n * c + k) * d + l] = y[(n * d + l) * c + k] + bias[k * d + l];
            }
        }
    }
    Ok(Tensor::new(&[batch, c * d], out)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Svg,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "svg" => Ok(Self::Svg),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

fn opt_f64(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

pub fn to_csv(report: &BenchReport) -> String {
    let mut out = String::from("batch,variant,median_s,min_s,mean_s,flops,speedup\n");
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{},{}",
            r.batch,
            r.variant.name(),
            r.median_s,
            r.min_s,
            r.mean_s,
            r.flops,
            opt_f64(r.speedup)
        );
    }
    out
}

pub fn to_json(report: &BenchReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

pub fn from_json(text: &str) -> Result<BenchReport> {
    serde_json::from_str(text).map_err(|e| Error::Data(format!("invalid benchmark report: {e}")))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Bar chart of speedup (percent) per batch size.
pub fn to_svg(report: &BenchReport) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const LEFT: f64 = 70.0;
    const RIGHT: f64 = 20.0;
    const TOP: f64 = 40.0;
    const BOTTOM: f64 = 60.0;
    let points = report.speedups();
    let values: Vec<f64> = points.iter().map(|&(_, s)| 100.0 * s).collect();
    let hi = values.iter().copied().fold(0.0f64, f64::max);
    let lo = values.iter().copied().fold(0.0f64, f64::min);
    let span = if hi - lo > 0.0 { hi - lo } else { 1.0 };
    let (hi, lo) = (hi + 0.1 * span, lo - if lo < 0.0 { 0.1 * span } else { 0.0 });
    let plot_h = H - TOP - BOTTOM;
    let plot_w = W - LEFT - RIGHT;
    let y_of = |v: f64| TOP + (hi - v) / (hi - lo) * plot_h;
    let zero = y_of(0.0);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
        W / 2.0,
        escape(&format!("Speedup per batch size ({})", report.mode))
    );
    let _ = writeln!(
        out,
        r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.2}" stroke="black"/>"#,
        H - BOTTOM
    );
    let _ = writeln!(
        out,
        r#"<line x1="{LEFT}" y1="{zero:.2}" x2="{:.2}" y2="{zero:.2}" stroke="black"/>"#,
        W - RIGHT
    );
    for v in [lo, 0.0, hi] {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-family="sans-serif" font-size="10">{v:.1}</text>"#,
            LEFT - 6.0,
            y_of(v) + 3.0
        );
    }
    let slot = plot_w / points.len().max(1) as f64;
    for (i, (&(batch, _), &v)) in points.iter().zip(&values).enumerate() {
        let x = LEFT + slot * i as f64 + 0.2 * slot;
        let (y, h) = if v >= 0.0 { (y_of(v), zero - y_of(v)) } else { (zero, y_of(v) - zero) };
        let fill = if v >= 0.0 { "#4878a8" } else { "#c85a50" };
        let _ = writeln!(
            out,
            r#"<rect class="bar" x="{x:.2}" y="{y:.2}" width="{:.2}" height="{h:.2}" fill="{fill}"><title>batch {batch}: {v:.2}%</title></rect>"#,
            0.6 * slot
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="10">{batch}</text>"#,
            x + 0.3 * slot,
            H - BOTTOM + 16.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="12">batch size</text>"#,
        LEFT + plot_w / 2.0,
        H - 16.0
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {:.2})">speedup (%)</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );
    out.push_str("</svg>\n");
    out
}

pub fn render(report: &BenchReport, format: ReportFormat) -> Result<String> {
    if report.rows.is_empty() {
        return Err(Error::Data("benchmark report has no rows".into()));
    }
    Ok(match format {
        ReportFormat::Csv => to_csv(report),
        ReportFormat::Json => to_json(report),
        ReportFormat::Svg => to_svg(report),
    })
}

pub fn emit_report(report: &BenchReport, format: ReportFormat, path: &Path) -> Result<()> {
    fs::write(path, render(report, format)?).map_err(|e| Error::io(path, e))
}
