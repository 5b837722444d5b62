//! `ttnet` command-line driver.

mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use ttnet::bench::{self, BenchOptions, ReportFormat, WallClock};
use ttnet::compression::{sweep, DEFAULT_BONDS};
use ttnet::dataset::{gen_synthetic, load_dataset, split_80_20};
use ttnet::nn::TtSpec;
use ttnet::pipeline::{finetune, load_checkpoint, pretrain, save_checkpoint, Model, RunReport};
use ttnet::tensor::kernel;
use ttnet::{Error, ErrorClass, Result};

use config::{parse_pair, relative_to, RunConfig, TtOverrides};

#[derive(Parser, Debug)]
#[command(name = "ttnet", version, about = "Tensor-train projection heads for contrastive cloud classification")]
struct Cli {
    /// Worker threads for contractions and data loading.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic 11-class PPM dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Contrastive pretraining; writes a checkpoint and run metadata.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        tt: TtArgs,
        /// Pretraining epochs.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        freeze_epochs: Option<usize>,
    },
    /// Supervised fine-tuning of a pretrained checkpoint.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        /// Fine-tuning epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Parameter reduction over a bond sweep.
    Analyze {
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BONDS)]
        bonds: Vec<usize>,
        #[arg(long, value_enum, default_value_t = AnalyzeFormat::Text)]
        format: AnalyzeFormat,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        include_bias: bool,
    },
    /// Dense versus factorized timing over a batch-size sweep.
    Bench {
        #[arg(long, value_enum, default_value_t = BenchMode::Layer)]
        mode: BenchMode,
        #[arg(long, value_delimiter = ',', default_values_t = [32])]
        batches: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long, value_enum, default_value_t = OutFormat::Csv)]
        format: OutFormat,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dataset for `--mode training`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        image_size: Option<usize>,
        #[command(flatten)]
        tt: TtArgs,
    },
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory for checkpoints and metadata.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    tau: Option<f32>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    decay_steps: Option<u64>,
    #[arg(long)]
    decay_rate: Option<f64>,
    /// Images per batch.
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
struct TtArgs {
    /// Factorize the first projection layer.
    #[arg(long)]
    tensorized: bool,
    #[arg(long)]
    bond: Option<usize>,
    /// Input split `a,b` with a*b equal to the input width.
    #[arg(long, value_parser = parse_pair)]
    in_split: Option<(usize, usize)>,
    /// Output split `c,d` with c*d equal to the output width.
    #[arg(long, value_parser = parse_pair)]
    out_split: Option<(usize, usize)>,
}

impl TtArgs {
    fn overrides(&self) -> TtOverrides {
        TtOverrides {
            tensorized: self.tensorized,
            bond: self.bond,
            in_split: self.in_split,
            out_split: self.out_split,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AnalyzeFormat {
    Text,
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BenchMode {
    Layer,
    Training,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OutFormat {
    Csv,
    Json,
    Svg,
}

impl From<OutFormat> for ReportFormat {
    fn from(f: OutFormat) -> Self {
        match f {
            OutFormat::Csv => ReportFormat::Csv,
            OutFormat::Json => ReportFormat::Json,
            OutFormat::Svg => ReportFormat::Svg,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
            })
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    if cfg.threads == 0 {
        return Err(Error::Config("threads must be at least 1".into()));
    }
    kernel::set_threads(cfg.threads);
    // only the first call configures the global pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    Ok(cfg)
}

fn apply_run_args(cfg: &mut RunConfig, a: &RunArgs) {
    if let Some(d) = &a.data {
        cfg.data = Some(d.clone());
    }
    if let Some(o) = &a.out {
        cfg.out = o.clone();
    }
    if let Some(s) = a.image_size {
        cfg.image_size = s;
    }
    let t = &mut cfg.train;
    if let Some(v) = a.tau {
        t.tau = v;
    }
    if let Some(v) = a.lr0 {
        t.lr0 = v;
    }
    if let Some(v) = a.decay_steps {
        t.decay_steps = v;
    }
    if let Some(v) = a.decay_rate {
        t.decay_rate = v;
    }
    if let Some(v) = a.batch {
        t.batch_size = v;
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_file(p, text.as_bytes()),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}

/// Resolved config as recorded in run metadata, with paths relative to the run directory.
fn config_record(cfg: &RunConfig) -> Value {
    let mut rec = cfg.clone();
    if let Some(d) = &rec.data {
        rec.data = Some(relative_to(d, &cfg.out));
    }
    rec.out = PathBuf::from(".");
    serde_json::to_value(rec).expect("config serializes")
}

/// Splits wall-clock fields out of the epoch records so run metadata stays
/// reproducible; they go to a separate timings file.
fn split_timings(report: &RunReport) -> (Value, Value) {
    let mut value = serde_json::to_value(report).expect("report serializes");
    let mut timings = serde_json::Map::new();
    for phase in ["pretrain", "finetune"] {
        let mut secs = Vec::new();
        if let Some(rows) = value[phase].as_array_mut() {
            for r in rows {
                if let Some(obj) = r.as_object_mut() {
                    secs.push(obj.remove("seconds").unwrap_or(Value::Null));
                }
            }
        }
        timings.insert(phase.into(), Value::Array(secs));
    }
    (value, Value::Object(timings))
}

fn write_metadata(cfg: &RunConfig, name: &str, checkpoint: &str, report: &RunReport) -> Result<()> {
    let (report, timings) = split_timings(report);
    let meta = json!({
        "config": config_record(cfg),
        "checkpoint": checkpoint,
        "report": report,
    });
    let pretty = |v: &Value| serde_json::to_string_pretty(v).expect("json") + "\n";
    write_file(&cfg.out.join(format!("{name}.json")), pretty(&meta).as_bytes())?;
    write_file(&cfg.out.join(format!("{name}.timings.json")), pretty(&timings).as_bytes())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve(&cli)?;
    match &cli.command {
        Command::GenData { out, per_class, size } => {
            let n = gen_synthetic(out, *per_class, *size, cfg.train.seed)?;
            log::info!("wrote {n} images to {}", out.display());
        }
        Command::Pretrain {
            run,
            tt,
            epochs,
            freeze_epochs,
        } => {
            apply_run_args(&mut cfg, run);
            if let Some(e) = epochs {
                cfg.train.pretrain_epochs = *e;
            }
            if let Some(f) = freeze_epochs {
                cfg.train.freeze_epochs = *f;
            }
            tt.overrides().apply(&mut cfg.model)?;
            cfg.train.validate()?;
            let ds = load_dataset(cfg.data_root()?, cfg.image_size)?;
            let split = split_80_20(&ds.labels(), cfg.train.seed, cfg.train.stratified)?;
            let aug = cfg.augment_config();
            let mut model = Model::init(cfg.model.clone(), cfg.train.seed)?;
            log::info!(
                "pretraining {} model ({} parameters) on {} images",
                if cfg.model.tt.is_some() { "tensorized" } else { "general" },
                ttnet::nn::Module::param_count(&model),
                split.train.len()
            );
            let mut report = RunReport::new(&cfg.model, &cfg.train, &aug, cfg.image_size);
            report.train_size = split.train.len();
            report.val_size = split.validation.len();
            report.pretrain = pretrain(&mut model, &ds, &split.train, &cfg.train, &aug)?;
            create_dir(&cfg.out)?;
            save_checkpoint(&model, &cfg.out.join("checkpoint.ttnet"))?;
            write_metadata(&cfg, "pretrain", "checkpoint.ttnet", &report)?;
        }
        Command::Finetune { checkpoint, run, epochs } => {
            apply_run_args(&mut cfg, run);
            if let Some(e) = epochs {
                cfg.train.finetune_epochs = *e;
            }
            cfg.train.validate()?;
            let mut model = load_checkpoint(checkpoint)?;
            if !model.is_snipped() {
                log::info!("checkpoint still has its full projection head; snipping and attaching a classifier");
                let kind = model.config.classifier;
                model.snip_and_attach(kind, cfg.train.seed)?;
            }
            cfg.model = model.config.clone();
            let ds = load_dataset(cfg.data_root()?, cfg.image_size)?;
            let split = split_80_20(&ds.labels(), cfg.train.seed, cfg.train.stratified)?;
            let aug = cfg.augment_config();
            let mut report = RunReport::new(&cfg.model, &cfg.train, &aug, cfg.image_size);
            report.train_size = split.train.len();
            report.val_size = split.validation.len();
            report.finetune = finetune(&mut model, &ds, &split.train, &split.validation, &cfg.train)?;
            create_dir(&cfg.out)?;
            save_checkpoint(&model, &cfg.out.join("finetuned.ttnet"))?;
            write_metadata(&cfg, "finetune", "finetuned.ttnet", &report)?;
            if let Some(last) = report.finetune.last() {
                println!(
                    "train top-1 {:.4}  validation top-1 {}",
                    last.train_top1,
                    last.val_top1.map_or("-".into(), |v| format!("{v:.4}"))
                );
            }
        }
        Command::Analyze {
            bonds,
            format,
            out,
            include_bias,
        } => {
            if *include_bias {
                cfg.assumptions.include_bias = true;
            }
            let rep = sweep(&cfg.assumptions, bonds)?;
            let text = match format {
                AnalyzeFormat::Text => rep.to_text(),
                AnalyzeFormat::Csv => rep.to_csv(),
                AnalyzeFormat::Json => rep.to_json() + "\n",
            };
            write_or_print(out.as_deref(), &text)?;
        }
        Command::Bench {
            mode,
            batches,
            repeats,
            warmup,
            format,
            out,
            data,
            image_size,
            tt,
        } => {
            let opts = BenchOptions {
                repeats: *repeats,
                warmup: *warmup,
                seed: cfg.train.seed,
            };
            let report = match mode {
                BenchMode::Layer => {
                    let spec = TtSpec::new(
                        tt.in_split.unwrap_or((256, 256)),
                        tt.out_split.unwrap_or((64, 64)),
                        tt.bond.unwrap_or(config::DEFAULT_BOND),
                    )?;
                    bench::bench_layer(&spec, batches, &opts, &mut WallClock)?
                }
                BenchMode::Training => {
                    if let Some(d) = data {
                        cfg.data = Some(d.clone());
                    }
                    if let Some(s) = image_size {
                        cfg.image_size = *s;
                    }
                    let mut dense = cfg.model.clone();
                    dense.tt = None;
                    dense.validate()?;
                    let mut tensorized = cfg.model.clone();
                    TtOverrides {
                        tensorized: true,
                        ..tt.overrides()
                    }
                    .apply(&mut tensorized)?;
                    let ds = load_dataset(cfg.data_root()?, cfg.image_size)?;
                    bench::bench_training(&dense, &tensorized, &ds, &cfg.train, batches, &opts, &mut WallClock)?
                }
            };
            for (batch, s) in report.speedups() {
                log::info!("batch {batch}: speedup {:.2}%", 100.0 * s);
            }
            write_or_print(out.as_deref(), &bench::render(&report, (*format).into())?)?;
        }
    }
    Ok(())
}
