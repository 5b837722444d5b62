mod common;

use common::{bench_fixture as fixture, golden_matches};
use proptest::prelude::*;
use ttnet::bench::{
    bench_layer, bench_training, emit_report, from_json, speedup, to_csv, to_json, to_svg, BenchOptions, BenchReport,
    ReportFormat, Stats, Timer, Variant,
};
use ttnet::compression::layer_params;
use ttnet::dataset::{gen_synthetic, load_dataset, Dataset};
use ttnet::nn::{EncoderConfig, TtSpec};
use ttnet::pipeline::{ClassifierKind, ModelConfig, TrainConfig};
use ttnet::Result;

fn check_golden(name: &str, actual: &str) {
    assert!(golden_matches(name, actual), "golden mismatch for {name}");
}

#[test]
fn csv_golden() {
    let csv = to_csv(&fixture(false));
    assert_eq!(csv.lines().count(), 3);
    check_golden("bench_two_rows.csv", &csv);
}

#[test]
fn json_golden_and_round_trip() {
    let report = fixture(true);
    let json = to_json(&report);
    check_golden("bench_report.json", &json);
    assert_eq!(from_json(&json).unwrap(), report);
    assert!(from_json("{\"mode\": 1}").is_err());
}

#[test]
fn svg_golden_and_structure() {
    let svg = to_svg(&fixture(true));
    check_golden("bench_speedup.svg", &svg);
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let bars: Vec<_> = doc
        .descendants()
        .filter(|n| n.has_tag_name("rect") && n.attribute("class") == Some("bar"))
        .collect();
    assert_eq!(bars.len(), 2);
    let texts: Vec<_> = doc.descendants().filter_map(|n| n.text()).collect();
    assert!(texts.contains(&"batch size"));
    assert!(texts.contains(&"speedup (%)"));
}

#[test]
fn emit_writes_each_format() {
    let dir = tempfile::tempdir().unwrap();
    let report = fixture(true);
    for (fmt, name) in [(ReportFormat::Csv, "r.csv"), (ReportFormat::Json, "r.json"), (ReportFormat::Svg, "r.svg")] {
        let path = dir.path().join(name);
        emit_report(&report, fmt, &path).unwrap();
        assert!(std::fs::metadata(&path).unwrap().len() > 0);
    }
    let missing = dir.path().join("no/such/dir/r.csv");
    assert!(emit_report(&report, ReportFormat::Csv, &missing).is_err());
    let empty = BenchReport {
        rows: vec![],
        ..report
    };
    assert!(emit_report(&empty, ReportFormat::Csv, &dir.path().join("e.csv")).is_err());
}

struct Fixed(f64);

impl Timer for Fixed {
    fn time(&mut self, f: &mut dyn FnMut() -> Result<()>) -> Result<f64> {
        f()?;
        Ok(self.0)
    }
}

#[test]
fn layer_sweep_covers_every_batch() {
    let spec = TtSpec::new((8, 8), (4, 4), 2).unwrap();
    let rep = bench_layer(&spec, &[8, 16, 32], &BenchOptions::default(), &mut Fixed(0.01)).unwrap();
    assert_eq!(rep.rows.len(), 6);
    for pair in rep.rows.chunks(2) {
        assert_eq!(pair[0].batch, pair[1].batch);
        assert_eq!((pair[0].variant, pair[1].variant), (Variant::Dense, Variant::Tt));
        assert_eq!(pair[1].speedup, Some(0.0));
        assert!(pair[1].counted_macs < pair[0].counted_macs);
        assert_eq!(pair[1].predicted_faster, Some(true));
    }
}

#[test]
fn above_parity_is_flagged_slower() {
    // parity bond is 4*4/(4+4) = 2 in FLOP terms for a = d = 4
    let spec = TtSpec::new((4, 2), (2, 4), 6).unwrap();
    let rep = bench_layer(&spec, &[4], &BenchOptions::default(), &mut Fixed(0.01)).unwrap();
    assert_eq!(rep.rows[1].predicted_faster, Some(false));
    assert!(rep.rows[1].counted_macs > rep.rows[0].counted_macs);
}

#[test]
fn training_sweep_matches_compression_counts() {
    let dir = tempfile::tempdir().unwrap();
    gen_synthetic(dir.path(), 1, 16, 3).unwrap();
    let ds = load_dataset(dir.path(), 16).unwrap();
    let encoder = EncoderConfig {
        in_channels: 3,
        stages: vec![(1, 5)],
        kernel: 3,
    };
    let feat = encoder.feat_dim();
    let spec = TtSpec::new((2, feat / 2), (4, 4), 2).unwrap();
    let dense = ModelConfig {
        encoder,
        head: vec![16, 8, 4],
        tt: None,
        classifier: ClassifierKind::TwoLayer,
    };
    let tt = ModelConfig {
        tt: Some(spec),
        ..dense.clone()
    };
    let train = TrainConfig::default();
    let rep = bench_training(&dense, &tt, &ds, &train, &[2, 4], &BenchOptions::default(), &mut Fixed(0.02)).unwrap();
    assert_eq!(rep.rows.len(), 4);
    assert_eq!(rep.speedups().iter().map(|&(b, _)| b).collect::<Vec<_>>(), vec![2, 4]);
    let (tt_w, dense_w) = layer_params(&spec, false);
    assert_eq!(rep.rows[0].params - rep.rows[1].params, dense_w - tt_w);

    let empty = Dataset {
        samples: vec![],
        counts: [0; 11],
        image_size: 16,
        warnings: vec![],
    };
    let err = bench_training(&dense, &tt, &empty, &train, &[2], &BenchOptions::default(), &mut Fixed(0.02));
    assert!(err.is_err());
}

proptest! {
    #[test]
    fn speedup_recovers_the_fraction(t in 1e-6f64..1e3, s in -0.999f64..0.999) {
        let got = speedup(t, t * (1.0 - s)).unwrap();
        prop_assert!((got - s).abs() < 1e-12);
    }

    #[test]
    fn median_ignores_sample_order(mut v in prop::collection::vec(1e-6f64..10.0, 5..20), seed in any::<u64>()) {
        let a = Stats::of(&v).unwrap();
        use rand::{seq::SliceRandom, SeedableRng};
        v.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let b = Stats::of(&v).unwrap();
        prop_assert_eq!(a.median, b.median);
        prop_assert_eq!(a.min, b.min);
    }
}
