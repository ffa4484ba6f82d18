//! Forward-latency and parameter-count comparison of a guided network and its baseline twin.
//!
//! Protocol: random inputs are built once, then each model runs `warmup` untimed forward
//! passes followed by `runs` timed ones in evaluation mode. The two models alternate run by run
//! so slow drifts in machine load hit both equally. Only the forward call is inside the timer;
//! no I/O or data loading is measured. Absolute numbers depend on the host and are not
//! comparable with GPU figures.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Mode, NetworkConfig, ParamBreakdown, SegModel, OUTPUT_STRIDE};
use crate::tensor::{Real, Tensor};

pub const MIN_RUNS: usize = 30;
pub const MIN_WARMUP: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub height: usize,
    pub width: usize,
    pub batch: usize,
    pub warmup: usize,
    pub runs: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            height: 64,
            width: 64,
            batch: 1,
            warmup: MIN_WARMUP,
            runs: MIN_RUNS,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs < MIN_RUNS || self.warmup < MIN_WARMUP {
            return Err(Error::Config(format!(
                "need at least {MIN_RUNS} timed runs and {MIN_WARMUP} warmup runs, got {} and {}",
                self.runs, self.warmup
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        for d in [self.height, self.width] {
            if d == 0 || d % OUTPUT_STRIDE != 0 {
                return Err(Error::Config(format!(
                    "input {}x{} must be positive multiples of {OUTPUT_STRIDE}",
                    self.height, self.width
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTiming {
    pub name: String,
    pub params: ParamBreakdown,
    pub latency_mean_ms: f64,
    pub latency_std_ms: f64,
    pub images_per_sec: f64,
    pub latencies_ms: Vec<f64>,
}

impl ModelTiming {
    fn from_samples(name: &str, params: ParamBreakdown, secs: &[f64], batch: usize) -> Self {
        let n = secs.len() as f64;
        let mean = secs.iter().sum::<f64>() / n;
        let var = secs.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        ModelTiming {
            name: name.to_string(),
            params,
            latency_mean_ms: mean * 1e3,
            latency_std_ms: var.sqrt() * 1e3,
            images_per_sec: batch as f64 / mean,
            latencies_ms: secs.iter().map(|s| s * 1e3).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub machine: String,
    pub precision: String,
    /// `[batch, height, width]`.
    pub input: [usize; 3],
    pub warmup: usize,
    pub runs: usize,
    pub protocol: String,
    pub guided: ModelTiming,
    pub baseline: ModelTiming,
    /// Guided mean latency over baseline mean latency.
    pub latency_ratio: f64,
    /// Guidance-only parameters as a fraction of the baseline total.
    pub param_overhead: f64,
}

/// OS, architecture, CPU model when known, and available cores.
pub fn machine_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|v| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{} {} / {cpu} / {cores} cores available, 1 used",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

/// Times the guided network described by `net` against its baseline twin.
pub fn run_bench<T: Real>(net: &NetworkConfig, cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    if !net.is_guided() {
        return Err(Error::Config("bench needs a network with at least one guided convolution".into()));
    }
    let mut guided = SegModel::<T>::new(net.clone())?;
    let mut baseline = SegModel::<T>::new(net.baseline())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, h, w) = (cfg.batch, cfg.height, cfg.width);
    let image = Tensor::from_fn(&[n, 3, h, w], |_| T::lit(rng.gen_range(0.0..1.0)));
    let spatial = Tensor::from_fn(&[n, net.source.channels(), h, w], |_| T::lit(rng.gen_range(-1.0..1.0)));

    for _ in 0..cfg.warmup {
        guided.forward(&image, &spatial, Mode::Eval)?;
        baseline.forward(&image, &spatial, Mode::Eval)?;
    }
    let (mut tg, mut tb) = (Vec::with_capacity(cfg.runs), Vec::with_capacity(cfg.runs));
    for _ in 0..cfg.runs {
        let t0 = Instant::now();
        guided.forward(&image, &spatial, Mode::Eval)?;
        tg.push(t0.elapsed().as_secs_f64());
        let t0 = Instant::now();
        baseline.forward(&image, &spatial, Mode::Eval)?;
        tb.push(t0.elapsed().as_secs_f64());
    }
    if tg.iter().chain(&tb).any(|&t| t <= 0.0) {
        return Err(Error::Numeric("timer returned a non-positive latency".into()));
    }
    let gp = guided.param_breakdown();
    let bp = baseline.param_breakdown();
    let param_overhead = gp.sconv_extra as f64 / bp.total as f64;
    let guided = ModelTiming::from_samples("guided", gp, &tg, n);
    let baseline = ModelTiming::from_samples("baseline", bp, &tb, n);
    Ok(BenchReport {
        machine: machine_descriptor(),
        precision: format!("{:?}", T::DTYPE).to_lowercase(),
        input: [n, h, w],
        warmup: cfg.warmup,
        runs: cfg.runs,
        protocol: format!(
            "single-threaded CPU forward pass in eval mode, batch {n}, {} warmup then {} timed runs \
             alternating between models; timer wraps the forward call only; not comparable with GPU figures",
            cfg.warmup, cfg.runs
        ),
        latency_ratio: guided.latency_mean_ms / baseline.latency_mean_ms,
        guided,
        baseline,
        param_overhead,
    })
}

impl BenchReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Human-readable summary.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let [n, h, w] = self.input;
        let _ = writeln!(s, "machine: {}", self.machine);
        let _ = writeln!(s, "input {n}x3x{h}x{w}, {}, {} warmup, {} runs", self.precision, self.warmup, self.runs);
        let _ = writeln!(
            s,
            "{:<10} {:>12} {:>12} {:>10} {:>10} {:>10} {:>12} {:>10}",
            "model", "params", "guidance", "decoder", "aux", "mean ms", "std ms", "img/s"
        );
        for m in [&self.guided, &self.baseline] {
            let _ = writeln!(
                s,
                "{:<10} {:>12} {:>12} {:>10} {:>10} {:>10.3} {:>12.3} {:>10.1}",
                m.name,
                m.params.total,
                m.params.sconv_extra,
                m.params.decoder,
                m.params.aux,
                m.latency_mean_ms,
                m.latency_std_ms,
                m.images_per_sec
            );
        }
        let _ = writeln!(
            s,
            "latency ratio {:.3}, guidance parameters {:.2}% of baseline",
            self.latency_ratio,
            100.0 * self.param_overhead
        );
        s
    }
}
