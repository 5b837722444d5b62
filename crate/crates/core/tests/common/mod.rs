//! Shared oracles and fixtures for the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use rand::Rng;
use ttnet::bench::{BenchReport, BenchRow, Environment, Variant};
use ttnet::contrastive::cosine_sim;
use ttnet::nn::{Module, TtDenseLayer, TtSpec};
use ttnet::rng;
use ttnet::tensor::{finite_diff_grad, grad_rel_error, Graph, Result, Tensor, Var};

pub const FD_STEP: f32 = 1e-3;
pub const FD_TOL: f64 = 1e-3;
pub const FD_FLOOR: f64 = 1e-5;

/// Direct double-loop NT-Xent in f64.
pub fn nt_xent_oracle(z: &[f32], rows: usize, tau: f64) -> f64 {
    let d = z.len() / rows;
    let row = |i: usize| &z[i * d..(i + 1) * d];
    let sim = |i: usize, k: usize| cosine_sim(row(i), row(k)).unwrap() / tau;
    let mut total = 0.0;
    for i in 0..rows {
        let den: f64 = (0..rows).filter(|&k| k != i).map(|k| sim(i, k).exp()).sum();
        total += den.ln() - sim(i, i ^ 1);
    }
    total / rows as f64
}

pub fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compares against the stored file; `UPDATE_GOLDEN=1` rewrites it first.
pub fn golden_matches(name: &str, actual: &str) -> bool {
    let path = golden_path(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
    }
    std::fs::read_to_string(&path).map(|s| s == actual).unwrap_or(false)
}

fn row(batch: usize, variant: Variant, t: [f64; 3], flops: u64, speedup: Option<f64>) -> BenchRow {
    BenchRow {
        batch,
        variant,
        median_s: t[0],
        min_s: t[1],
        mean_s: t[2],
        flops,
        counted_macs: flops / 2,
        params: if variant == Variant::Dense { 268_439_552 } else { 528_384 },
        speedup,
        predicted_faster: speedup.map(|_| true),
    }
}

/// Hand-built report behind the golden files.
pub fn bench_fixture(two_batches: bool) -> BenchReport {
    let mut rows = vec![
        row(32, Variant::Dense, [2.0, 1.9, 2.05], 17_179_869_184, None),
        row(32, Variant::Tt, [1.5, 1.45, 1.52], 5_368_709_120, Some(0.25)),
    ];
    if two_batches {
        rows.push(row(8, Variant::Dense, [0.5, 0.49, 0.51], 4_294_967_296, None));
        rows.push(row(8, Variant::Tt, [0.55, 0.5, 0.56], 1_342_177_280, Some(-0.1)));
    }
    BenchReport {
        mode: "layer".into(),
        description: "65536 -> 4096, in split (256, 256), out split (64, 64), bond 16".into(),
        repeats: 5,
        warmup: 1,
        environment: Environment {
            threads: 1,
            optimized: true,
            target_features: vec!["avx2".into(), "fma".into()],
            arch: "x86_64".into(),
            os: "linux".into(),
            timing_basis: "per iteration: forward + backward".into(),
        },
        rows,
    }
}

/// Differentiable operations covered by the gradient checks.
pub const OPS: &[&str] = &[
    "contract-lhs",
    "contract-rhs",
    "contract-outer",
    "add",
    "add-scalar",
    "sub",
    "mul",
    "mul-scalar",
    "relu",
    "exp",
    "log",
    "scale",
    "clamp",
    "sum",
    "sum-axis",
    "mean",
    "mean-axis",
    "max",
    "max-axis",
    "reshape",
    "patches",
    "avg-pool2",
    "concat",
    "tt-core1",
    "tt-core2",
];

fn uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape, -2.0, 2.0, rng).unwrap()
}

/// Values in [-2, 2] kept at least `gap` away from every point in `kinks`.
fn away_from(shape: &[usize], kinks: &[f32], gap: f32, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f32 = rng.gen_range(-2.0..=2.0);
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Distinct values in [-2, 2] at least `4 / n` apart, in random order.
fn distinct(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut data: Vec<f32> = (0..n).map(|i| -2.0 + 4.0 * (i as f32 + 0.5) / n as f32).collect();
    data.shuffle(rng);
    Tensor::new(shape, data).unwrap()
}

/// `sum(y * w)` with fixed weights, so every output entry matters.
fn weighted(g: &mut Graph<'_>, y: Var, w: &Tensor) -> Result<Var> {
    let wv = g.constant(w.clone());
    let axes: Vec<(usize, usize)> = (0..w.rank()).map(|i| (i, i)).collect();
    g.contract(y, wv, &axes)
}

type Build = Box<dyn Fn(&mut Graph<'_>, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor>,
    wrt: usize,
    build: Build,
}

fn unary(x: Tensor, f: impl Fn(&mut Graph<'_>, Var) -> Result<Var> + 'static) -> Case {
    Case {
        inputs: vec![x],
        wrt: 0,
        build: Box::new(move |g, v| f(g, v[0])),
    }
}

fn binary(x: Tensor, y: Tensor, wrt: usize, f: impl Fn(&mut Graph<'_>, Var, Var) -> Result<Var> + 'static) -> Case {
    Case {
        inputs: vec![x, y],
        wrt,
        build: Box::new(move |g, v| f(g, v[0], v[1])),
    }
}

/// Gradient of a weighted output sum with respect to one core of a real
/// TT layer, through its `Module::forward`.
fn tt_grad_error(seed: u64, which: usize) -> f64 {
    let mut r = rng::stream(seed, &[0x5454]);
    let spec = TtSpec::new((2, 2), (2, 2), 2).unwrap();
    let mut layer = TtDenseLayer::init(spec, seed).unwrap();
    layer.core1 = uniform(&[2, 2, 2], &mut r).with_requires_grad();
    layer.core2 = uniform(&[2, 2, 2], &mut r).with_requires_grad();
    layer.bias = uniform(&[4], &mut r).with_requires_grad();
    let x = uniform(&[3, 4], &mut r);
    let w = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut r).unwrap();

    let analytic = {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut bound = Vec::new();
        let y = layer.forward(&mut g, xv, &mut bound).unwrap();
        let loss = weighted(&mut g, y, &w).unwrap();
        g.backward(loss).unwrap().get(bound[which - 1]).unwrap().clone()
    };
    let core = if which == 1 { &layer.core1 } else { &layer.core2 };
    let numeric = finite_diff_grad(
        |t| {
            let mut l = layer.clone();
            if which == 1 {
                l.core1 = t.clone();
            } else {
                l.core2 = t.clone();
            }
            let y = ttnet::nn::tt_forward(&l, &x)?;
            Ok(y.data().iter().zip(w.data()).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() as f32)
        },
        core,
        FD_STEP,
    )
    .unwrap();
    grad_rel_error(analytic.data(), numeric.data(), FD_FLOOR)
}

fn case(op: &str, seed: u64) -> Case {
    let mut r = rng::stream(seed, &[0x4744]);
    let r = &mut r;
    match op {
        "contract-lhs" | "contract-rhs" => {
            let x = uniform(&[2, 3, 4], r);
            let y = uniform(&[4, 3, 2], r);
            binary(x, y, usize::from(op == "contract-rhs"), |g, a, b| g.contract(a, b, &[(1, 1), (2, 0)]))
        }
        "contract-outer" => binary(uniform(&[3], r), uniform(&[2, 2], r), 0, |g, a, b| g.contract(a, b, &[])),
        "add" => binary(uniform(&[3, 4], r), uniform(&[3, 4], r), 1, |g, a, b| g.add(a, b)),
        "add-scalar" => binary(uniform(&[3, 4], r), uniform(&[], r), 1, |g, a, b| g.add(a, b)),
        "sub" => binary(uniform(&[3, 4], r), uniform(&[3, 4], r), 1, |g, a, b| g.sub(a, b)),
        "mul" => binary(uniform(&[3, 4], r), uniform(&[3, 4], r), 0, |g, a, b| g.mul(a, b)),
        "mul-scalar" => binary(uniform(&[3, 4], r), uniform(&[], r), 1, |g, a, b| g.mul(a, b)),
        "relu" => unary(away_from(&[3, 4], &[0.0], 0.01, r), |g, x| Ok(g.relu(x))),
        "exp" => unary(uniform(&[3, 4], r), |g, x| Ok(g.exp(x))),
        "log" => {
            let x = Tensor::uniform(&[3, 4], 0.1, 2.0, r).unwrap();
            unary(x, |g, x| g.log(x))
        }
        "scale" => unary(uniform(&[3, 4], r), |g, x| Ok(g.scale(x, -1.7))),
        "clamp" => unary(away_from(&[3, 4], &[-1.0, 1.0], 0.01, r), |g, x| g.clamp(x, -1.0, 1.0)),
        "sum" => unary(uniform(&[3, 4], r), |g, x| g.sum(x, None)),
        "sum-axis" => unary(uniform(&[3, 4], r), |g, x| g.sum(x, Some(1))),
        "mean" => unary(uniform(&[3, 4], r), |g, x| g.mean(x, None)),
        "mean-axis" => unary(uniform(&[3, 4], r), |g, x| g.mean(x, Some(0))),
        "max" => unary(distinct(&[3, 4], r), |g, x| g.max(x, None)),
        "max-axis" => unary(distinct(&[3, 4], r), |g, x| g.max(x, Some(1))),
        "reshape" => unary(uniform(&[3, 4], r), |g, x| g.reshape(x, &[2, 6])),
        "patches" => unary(uniform(&[1, 4, 4, 2], r), |g, x| g.patches(x, 3)),
        "avg-pool2" => unary(uniform(&[1, 4, 4, 2], r), |g, x| g.avg_pool2(x)),
        "concat" => binary(uniform(&[2, 3], r), uniform(&[2, 2], r), 0, |g, a, b| g.concat(&[a, b], 1)),
        other => panic!("unknown op {other}"),
    }
}

/// Relative error between backward and central differences for one seeded case.
pub fn op_grad_error(op: &str, seed: u64) -> f64 {
    match op {
        "tt-core1" => return tt_grad_error(seed, 1),
        "tt-core2" => return tt_grad_error(seed, 2),
        _ => {}
    }
    let c = case(op, seed);
    // output weights depend on the output shape, which one forward reveals
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = c.inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = (c.build)(&mut g, &vars).unwrap();
        g.shape(y).to_vec()
    };
    // positive weights keep broadcast gradients (sums of weights) away from zero
    let w = Tensor::uniform(&out_shape, 0.5, 1.5, &mut rng::stream(seed, &[0x57])).unwrap();

    let eval = |inputs: &[Tensor], grad: bool| -> Result<(f32, Option<Tensor>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if grad && i == c.wrt {
                    g.leaf(t.clone().with_requires_grad())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        let y = (c.build)(&mut g, &vars)?;
        if !grad {
            let dot: f64 = g.value(y).data().iter().zip(w.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
            return Ok((dot as f32, None));
        }
        let loss = weighted(&mut g, y, &w)?;
        let grads = g.backward(loss)?;
        Ok((g.value(loss).item(), Some(grads.get(vars[c.wrt]).expect("gradient present").clone())))
    };

    let analytic = eval(&c.inputs, true).unwrap().1.unwrap();
    let numeric = finite_diff_grad(
        |t| {
            let mut inputs = c.inputs.clone();
            inputs[c.wrt] = t.clone();
            Ok(eval(&inputs, false)?.0)
        },
        &c.inputs[c.wrt],
        FD_STEP,
    )
    .unwrap();
    grad_rel_error(analytic.data(), numeric.data(), FD_FLOOR)
}
