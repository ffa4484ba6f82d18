//! Command-line front end: dataset synthesis, training, evaluation, gradient checks, latency
//! benchmark and receptive-field export.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use sconv_core::bench::{run_bench, BenchConfig};
use sconv_core::data::{read_label, synth_generate, write_gray, DatasetManifest, SynthConfig};
use sconv_core::gradcheck::{self, GradcheckConfig, SignFlip};
use sconv_core::metrics::{ConfusionMatrix, Metrics};
use sconv_core::net::{load_checkpoint, read_manifest, Mode, NetworkConfig, SegModel};
use sconv_core::train::{evaluate, fit, prepare_eval_input, Dataset, FitOptions, TrainConfig};
use sconv_core::{Error, Real, Result};

#[derive(Parser, Debug)]
#[command(name = "sconv", version, about = "Guided-convolution RGBD segmentation toolkit")]
struct Cli {
    /// TOML file with optional [network], [train], [synth] and [bench] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic texture-confusable dataset.
    Synth(SynthArgs),
    /// Train a network and write logs, metrics and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or a directory of predicted label maps) on a split.
    Eval(EvalArgs),
    /// Finite-difference check of every hand-written backward pass.
    Gradcheck(GradcheckArgs),
    /// Compare forward latency and parameters of the guided network and its baseline twin.
    Bench(BenchArgs),
    /// Export per-layer receptive-field maps of a checkpoint as PNGs.
    Rfvis(RfvisArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    train_scenes: Option<usize>,
    #[arg(long)]
    val_scenes: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training split manifest.
    #[arg(long)]
    train: PathBuf,
    /// Held-out split manifest, evaluated after each epoch.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Train the plain-convolution twin instead of the guided network.
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Continue from a `checkpoints/last` directory of an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many completed epochs.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Split manifest whose labels are the ground truth.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Directory of predicted label PNGs named like the ground-truth label files.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Registered op name, or `all`.
    #[arg(long, default_value = "all")]
    op: String,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
    /// Negate the analytic gradient of `op` or `op:group` to show the checker catches it.
    #[arg(long)]
    flip: Option<String>,
    /// List the registered ops and exit.
    #[arg(long)]
    list: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Class count of the benchmarked network when no [network] table is given.
    #[arg(long, default_value_t = 6)]
    classes: usize,
}

#[derive(Args, Debug)]
struct RfvisArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Sample index within the manifest.
    #[arg(long, default_value_t = 0)]
    index: usize,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    network: Option<NetworkConfig>,
    train: TrainConfig,
    synth: SynthConfig,
    bench: BenchConfig,
}

impl FileConfig {
    fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut c = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => FileConfig::default(),
        };
        if let Some(s) = seed {
            c.train.seed = s;
            c.synth.seed = s;
            c.bench.seed = s;
            if let Some(n) = c.network.as_mut() {
                n.seed = s;
            }
        }
        Ok(c)
    }

    /// The configured network, or the toy network for `classes` seeded like training.
    fn network(&self, classes: usize) -> Result<NetworkConfig> {
        let n = match &self.network {
            Some(n) => n.clone(),
            None => NetworkConfig {
                seed: self.train.seed,
                ..NetworkConfig::toy(classes)
            },
        };
        if n.num_classes != classes {
            return Err(Error::Config(format!("network has {} classes, dataset {classes}", n.num_classes)));
        }
        n.validate()?;
        Ok(n)
    }
}

fn require_out(out: &Option<PathBuf>, cmd: &str) -> Result<PathBuf> {
    out.clone()
        .ok_or_else(|| Error::Config(format!("`{cmd}` needs --out <dir>")))
}

fn write_json<S: Serialize>(path: &Path, v: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn print_metrics(m: &Metrics) {
    println!("acc {:.4}  macc {:.4}  miou {:.4}", m.acc, m.macc, m.miou);
    let per: Vec<String> = m
        .per_class_iou
        .iter()
        .enumerate()
        .map(|(c, v)| match v {
            Some(v) => format!("{c}:{v:.3}"),
            None => format!("{c}:-"),
        })
        .collect();
    println!("per-class IoU {}", per.join(" "));
}

fn cmd_synth(cli: &Cli, cfg: &FileConfig, a: &SynthArgs) -> Result<()> {
    let mut s = cfg.synth.clone();
    s.train_scenes = a.train_scenes.unwrap_or(s.train_scenes);
    s.val_scenes = a.val_scenes.unwrap_or(s.val_scenes);
    s.height = a.height.unwrap_or(s.height);
    s.width = a.width.unwrap_or(s.width);
    let out = require_out(&cli.out, "synth")?;
    let o = synth_generate(&s, &out, a.force)?;
    println!(
        "wrote {} train / {} val scenes to {}",
        o.train.len(),
        o.val.as_ref().map_or(0, |v| v.len()),
        o.root.display()
    );
    Ok(())
}

fn cmd_train<T: Real>(cli: &Cli, cfg: &FileConfig, a: &TrainArgs) -> Result<()> {
    let mut tc = cfg.train.clone();
    tc.base_lr = a.lr.unwrap_or(tc.base_lr);
    tc.epochs = a.epochs.unwrap_or(tc.epochs);
    tc.batch_size = a.batch_size.unwrap_or(tc.batch_size);
    tc.validate()?;
    let out = require_out(&cli.out, "train")?;
    let train = Dataset::load(&DatasetManifest::load(&a.train)?)?;
    let val = match &a.val {
        Some(p) => Some(Dataset::load(&DatasetManifest::load(p)?)?),
        None => None,
    };
    let mut net = cfg.network(train.num_classes)?;
    if a.baseline {
        net = net.baseline();
    }
    let mut model = SegModel::<T>::new(net.clone())?;
    create_dir(&out)?;
    let effective = FileConfig {
        network: Some(net),
        train: tc.clone(),
        synth: cfg.synth.clone(),
        bench: cfg.bench.clone(),
    };
    let text = toml::to_string(&effective).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(out.join("config.toml"), text).map_err(|e| Error::io(out.join("config.toml"), e))?;
    let opts = FitOptions {
        out_dir: Some(out.clone()),
        resume_from: a.resume.clone(),
        stop_after_epochs: a.stop_after,
    };
    let report = fit(&mut model, &train, val.as_ref(), &tc, &opts)?;
    if let Some(r) = report.history.last() {
        println!("finished epoch {} after {} iterations, mean loss {:.4}", r.epoch, r.iteration, r.mean_loss);
        if let Some(m) = &r.metrics {
            print_metrics(m);
        }
    }
    if let Some(b) = report.best_miou {
        println!("best val miou {b:.4}");
    }
    Ok(())
}

fn normalize_flag(dir: &Path, default: bool) -> Result<bool> {
    Ok(read_manifest(dir)?.extra["normalize_spatial"].as_bool().unwrap_or(default))
}

fn cmd_eval<T: Real>(cli: &Cli, cfg: &FileConfig, a: &EvalArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let cm = if let Some(pred_dir) = &a.predictions {
        let mut cm = ConfusionMatrix::new(manifest.num_classes);
        for e in &manifest.entries {
            let name = e
                .label
                .file_name()
                .ok_or_else(|| Error::Data(format!("label path {} has no file name", e.label.display())))?;
            let gt = read_label(manifest.root.join(&e.label))?;
            let pred = read_label(pred_dir.join(name))?;
            cm.accumulate(&pred, &gt, manifest.ignore_label)?;
        }
        cm
    } else {
        let dir = a.checkpoint.as_ref().expect("clap enforces checkpoint or predictions");
        let normalize = normalize_flag(dir, cfg.train.normalize_spatial)?;
        let (mut model, _) = load_checkpoint::<T>(dir)?;
        let data = Dataset::load(&manifest)?;
        if model.config().num_classes != data.num_classes {
            return Err(Error::Config(format!(
                "checkpoint has {} classes, dataset {}",
                model.config().num_classes,
                data.num_classes
            )));
        }
        evaluate(&mut model, &data, normalize)?
    };
    let m = cm.compute()?;
    print_metrics(&m);
    if let Some(out) = &cli.out {
        create_dir(out)?;
        m.write_json(out.join("metrics.json"))?;
    }
    Ok(())
}

fn cmd_gradcheck(cli: &Cli, cfg: &FileConfig, a: &GradcheckArgs) -> Result<bool> {
    if a.list {
        for s in gradcheck::registry() {
            println!("{}", s.name);
        }
        return Ok(true);
    }
    let d = GradcheckConfig::default();
    let mutation = a.flip.as_ref().map(|f| match f.split_once(':') {
        Some((op, g)) => SignFlip {
            op: op.into(),
            group: Some(g.into()),
        },
        None => SignFlip {
            op: f.clone(),
            group: None,
        },
    });
    let gc = GradcheckConfig {
        trials: a.trials.unwrap_or(d.trials),
        tolerance: a.tolerance.unwrap_or(d.tolerance),
        seed: cfg.train.seed,
        mutation,
        ..d
    };
    if gc.trials == 0 || !(gc.tolerance > 0.0) {
        return Err(Error::Config("trials and tolerance must be positive".into()));
    }
    let reports = gradcheck::run(&gc, Some(&a.op))?;
    println!("{:<24} {:<14} {:>7} {:>14}  result", "op", "group", "trials", "max rel err");
    for r in &reports {
        println!(
            "{:<24} {:<14} {:>7} {:>14.3e}  {}",
            r.op,
            r.group,
            r.trials,
            r.max_rel_error,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    if let Some(out) = &cli.out {
        create_dir(out)?;
        write_json(&out.join("gradcheck.json"), &reports)?;
    }
    Ok(reports.iter().all(|r| r.passed))
}

fn cmd_bench<T: Real>(cli: &Cli, cfg: &FileConfig, a: &BenchArgs) -> Result<()> {
    let mut b = cfg.bench.clone();
    b.height = a.height.unwrap_or(b.height);
    b.width = a.width.unwrap_or(b.width);
    b.batch = a.batch.unwrap_or(b.batch);
    b.runs = a.runs.unwrap_or(b.runs);
    b.warmup = a.warmup.unwrap_or(b.warmup);
    let classes = cfg.network.as_ref().map_or(a.classes, |n| n.num_classes);
    let net = cfg.network(classes)?;
    let report = run_bench::<T>(&net, &b)?;
    print!("{}", report.table());
    if let Some(out) = &cli.out {
        create_dir(out)?;
        report.write_json(out.join("bench.json"))?;
    }
    Ok(())
}

fn cmd_rfvis<T: Real>(cli: &Cli, cfg: &FileConfig, a: &RfvisArgs) -> Result<()> {
    let out = require_out(&cli.out, "rfvis")?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    if a.index >= manifest.len() {
        return Err(Error::Config(format!("index {} outside {} samples", a.index, manifest.len())));
    }
    let normalize = normalize_flag(&a.checkpoint, cfg.train.normalize_spatial)?;
    let (mut model, _) = load_checkpoint::<T>(&a.checkpoint)?;
    if !model.config().is_guided() {
        return Err(Error::Config("checkpoint has no guided convolutions".into()));
    }
    let sample = sconv_core::data::load_sample(&manifest, a.index)?;
    let k = manifest.read_intrinsics()?;
    let (x, sp) = prepare_eval_input::<T>(&sample, &k, model.config().source, normalize)?;
    model.forward(&x, &sp, Mode::Eval)?;
    let maps = model.receptive_field_maps(0)?;
    create_dir(&out)?;
    let mut summary = Vec::new();
    for m in &maps {
        let file = format!("rf_{}.png", m.site.replace('.', "_"));
        write_gray(out.join(&file), m.height, m.width, &m.pixels)?;
        summary.push(serde_json::json!({
            "site": m.site, "file": file, "height": m.height, "width": m.width,
            "max_magnitude": m.max_magnitude,
        }));
        println!("{:<28} {}x{}  max offset sum {:.4e}", m.site, m.height, m.width, m.max_magnitude);
    }
    write_json(&out.join("rf.json"), &summary)
}

fn init_threads() -> Result<()> {
    let threads = match std::env::var("SCONV_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("SCONV_THREADS={v} is not a positive integer")))?,
        Err(_) => return Ok(()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn run(cli: &Cli) -> Result<bool> {
    init_threads()?;
    let cfg = FileConfig::load(cli.config.as_deref(), cli.seed)?;
    let f64_mode = cli.precision == Precision::F64;
    match &cli.command {
        Command::Synth(a) => cmd_synth(cli, &cfg, a)?,
        Command::Train(a) if f64_mode => cmd_train::<f64>(cli, &cfg, a)?,
        Command::Train(a) => cmd_train::<f32>(cli, &cfg, a)?,
        Command::Eval(a) if f64_mode => cmd_eval::<f64>(cli, &cfg, a)?,
        Command::Eval(a) => cmd_eval::<f32>(cli, &cfg, a)?,
        Command::Gradcheck(a) => return cmd_gradcheck(cli, &cfg, a),
        Command::Bench(a) if f64_mode => cmd_bench::<f64>(cli, &cfg, a)?,
        Command::Bench(a) => cmd_bench::<f32>(cli, &cfg, a)?,
        Command::Rfvis(a) if f64_mode => cmd_rfvis::<f64>(cli, &cfg, a)?,
        Command::Rfvis(a) => cmd_rfvis::<f32>(cli, &cfg, a)?,
    }
    Ok(true)
}

/// Exit status per error category; 1 is reserved for failed gradient checks.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io { .. } => 3,
        Error::Image { .. } | Error::Data(_) => 4,
        Error::Dimension(_) => 5,
        Error::Numeric(_) => 6,
        Error::State(_) => 7,
        Error::Metric(_) => 8,
        Error::Generation(_) => 9,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error[gradcheck]: at least one gradient group exceeded the tolerance");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}
