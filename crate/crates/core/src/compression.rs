//! Parameter accounting for dense versus tensor-train layers and whole
//! models.
//!
//! A model here is an opaque encoder parameter count followed by a dense
//! projection head whose first layer may be factorized. The reduction rate is
//! `1 - actual / dense_equivalent` over the whole model. The single-layer
//! reduction of the factorized layer is reported alongside, since both
//! readings of a "parameter reduction" figure are plausible.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::nn::TtSpec;
use crate::{Error, Result};

/// Published whole-model reductions (percent) for bonds 16..256.
pub const REFERENCE_REDUCTIONS: [(usize, f64); 5] = [(16, 95.4), (32, 95.0), (64, 94.2), (128, 92.6), (256, 89.4)];

pub const DEFAULT_BONDS: [usize; 5] = [16, 32, 64, 128, 256];

/// `(tt_count, dense_count)` for one layer.
pub fn layer_params(spec: &TtSpec, include_bias: bool) -> (u64, u64) {
    let (a, b) = spec.in_split;
    let (c, d) = spec.out_split;
    let (a, b, c, d, r) = (a as u64, b as u64, c as u64, d as u64, spec.bond as u64);
    let bias = if include_bias { c * d } else { 0 };
    (a * c * r + b * d * r + bias, a * b * c * d + bias)
}

/// Bond at which the factorized layer has as many weights as the dense one.
pub fn parity_bond(spec: &TtSpec) -> f64 {
    let (a, b) = spec.in_split;
    let (c, d) = spec.out_split;
    (a * b * c * d) as f64 / (a * c + b * d) as f64
}

/// `(tt_flops, dense_flops)` for a batch, counting a multiply-add as two.
pub fn flops_estimate(spec: &TtSpec, batch: usize) -> (u64, u64) {
    let (a, b) = spec.in_split;
    let (c, d) = spec.out_split;
    let (a, b, c, d, r, n) = (a as u64, b as u64, c as u64, d as u64, spec.bond as u64, batch as u64);
    (2 * (a * b * c * r + b * c * d * r) * n, 2 * a * b * c * d * n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Assumptions {
    pub encoder_params: u64,
    pub flatten_dim: usize,
    pub head: Vec<usize>,
    /// `None` picks the most balanced factorization.
    pub in_split: Option<(usize, usize)>,
    pub out_split: Option<(usize, usize)>,
    pub include_bias: bool,
    pub note: String,
}

impl Default for Assumptions {
    fn default() -> Self {
        Self {
            encoder_params: 8_000_000,
            flatten_dim: 65_536,
            head: vec![4096, 1024, 512],
            in_split: None,
            out_split: None,
            include_bias: false,
            note: "encoder size and flatten width are reconstructions; the reference figures do not state them".into(),
        }
    }
}

impl Assumptions {
    pub fn spec(&self, bond: usize) -> Result<TtSpec> {
        let first = *self
            .head
            .first()
            .ok_or_else(|| Error::Config("projection head must have at least one layer".into()))?;
        let spec = TtSpec {
            in_split: self.in_split.unwrap_or_else(|| TtSpec::balanced_split(self.flatten_dim)),
            out_split: self.out_split.unwrap_or_else(|| TtSpec::balanced_split(first)),
            bond,
        };
        spec.check_dims(self.flatten_dim, first)?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub name: String,
    pub kind: String,
    pub dense_equivalent: u64,
    pub actual: u64,
    pub reduction: f64,
}

impl LayerRow {
    fn new(name: String, kind: &str, dense_equivalent: u64, actual: u64) -> Self {
        Self {
            name,
            kind: kind.into(),
            dense_equivalent,
            actual,
            reduction: 1.0 - actual as f64 / dense_equivalent as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub bond: usize,
    pub spec: TtSpec,
    pub rows: Vec<LayerRow>,
    pub total_dense_equivalent: u64,
    pub total_actual: u64,
    /// Whole-model reading.
    pub reduction_rate: f64,
    /// Factorized layer alone.
    pub layer_reduction: f64,
    pub assumptions: Assumptions,
}

pub fn model_reduction(assumptions: &Assumptions, bond: usize) -> Result<CompressionReport> {
    let spec = assumptions.spec(bond)?;
    let (tt, dense) = layer_params(&spec, assumptions.include_bias);
    let mut rows = vec![
        LayerRow::new("encoder".into(), "opaque", assumptions.encoder_params, assumptions.encoder_params),
        LayerRow::new(format!("projection 1 ({} -> {})", assumptions.flatten_dim, assumptions.head[0]), "tt", dense, tt),
    ];
    for w in assumptions.head.windows(2) {
        let n = (w[0] * w[1] + if assumptions.include_bias { w[1] } else { 0 }) as u64;
        rows.push(LayerRow::new(format!("projection {} ({} -> {})", rows.len(), w[0], w[1]), "dense", n, n));
    }
    let total_dense_equivalent: u64 = rows.iter().map(|r| r.dense_equivalent).sum();
    let total_actual: u64 = rows.iter().map(|r| r.actual).sum();
    Ok(CompressionReport {
        bond,
        spec,
        layer_reduction: rows[1].reduction,
        reduction_rate: 1.0 - total_actual as f64 / total_dense_equivalent as f64,
        rows,
        total_dense_equivalent,
        total_actual,
        assumptions: assumptions.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub bond: usize,
    pub total_actual: u64,
    pub model_reduction_pct: f64,
    pub layer_reduction_pct: f64,
    pub reference_pct: Option<f64>,
    pub deviation_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub assumptions: Assumptions,
    pub total_dense_equivalent: u64,
    pub entries: Vec<SweepEntry>,
}

pub fn sweep(assumptions: &Assumptions, bonds: &[usize]) -> Result<SweepReport> {
    if bonds.is_empty() {
        return Err(Error::Config("bond list is empty".into()));
    }
    let mut entries = Vec::with_capacity(bonds.len());
    let mut total_dense_equivalent = 0;
    for &bond in bonds {
        let r = model_reduction(assumptions, bond)?;
        total_dense_equivalent = r.total_dense_equivalent;
        let model = 100.0 * r.reduction_rate;
        let reference = REFERENCE_REDUCTIONS.iter().find(|(b, _)| *b == bond).map(|&(_, v)| v);
        entries.push(SweepEntry {
            bond,
            total_actual: r.total_actual,
            model_reduction_pct: model,
            layer_reduction_pct: 100.0 * r.layer_reduction,
            reference_pct: reference,
            deviation_pct: reference.map(|v| (model - v).abs()),
        });
    }
    Ok(SweepReport {
        assumptions: assumptions.clone(),
        total_dense_equivalent,
        entries,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.2}"))
}

impl SweepReport {
    pub fn is_monotone_decreasing(&self) -> bool {
        self.entries.windows(2).all(|w| w[1].model_reduction_pct < w[0].model_reduction_pct)
    }

    pub fn to_text(&self) -> String {
        let a = &self.assumptions;
        let mut out = String::new();
        let _ = writeln!(out, "assumptions:");
        let _ = writeln!(out, "  encoder params   {}", a.encoder_params);
        let _ = writeln!(out, "  flatten dim      {}", a.flatten_dim);
        let _ = writeln!(out, "  head             {:?}", a.head);
        let _ = writeln!(out, "  include bias     {}", a.include_bias);
        let _ = writeln!(out, "  note             {}", a.note);
        let _ = writeln!(out, "  dense total      {}", self.total_dense_equivalent);
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:>6} {:>14} {:>10} {:>10} {:>10} {:>10}",
            "bond", "params", "model %", "layer %", "reference", "|dev|"
        );
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{:>6} {:>14} {:>10.2} {:>10.2} {:>10} {:>10}",
                e.bond,
                e.total_actual,
                e.model_reduction_pct,
                e.layer_reduction_pct,
                opt(e.reference_pct),
                opt(e.deviation_pct)
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bond,total_params,model_reduction_pct,layer_reduction_pct,reference_pct,deviation_pct\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{},{:.4},{:.4},{},{}",
                e.bond,
                e.total_actual,
                e.model_reduction_pct,
                e.layer_reduction_pct,
                e.reference_pct.map_or(String::new(), |v| format!("{v:.1}")),
                e.deviation_pct.map_or(String::new(), |v| format!("{v:.4}")),
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
