use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::augment::{augment, AugmentedSample};
use super::optim::{compute_class_weights, sgd_step, SgdState};
use super::TrainConfig;
use crate::data::{load_all, DatasetManifest, Sample};
use crate::error::{Error, Result};
use crate::geometry::{encode_spatial, sanitize_depth, CameraIntrinsics};
use crate::layers::Parameterized;
use crate::metrics::{ConfusionMatrix, Metrics};
use crate::net::{load_checkpoint, save_checkpoint, Mode, SegModel};
use crate::ops::softmax_cross_entropy_batch;
use crate::sconv::SpatialSource;
use crate::tensor::{read_tensor, write_tensor, LabelMap, Real, Tensor};

/// Samples held in memory with their split-wide metadata.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub intrinsics: CameraIntrinsics,
    pub num_classes: usize,
    pub ignore_label: u8,
}

impl Dataset {
    pub fn load(m: &DatasetManifest) -> Result<Self> {
        Ok(Dataset {
            samples: load_all(m)?,
            intrinsics: m.read_intrinsics()?,
            num_classes: m.num_classes,
            ignore_label: m.ignore_label,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Pixel count per class, ignoring `ignore_label`.
    pub fn label_histogram(&self) -> Vec<u64> {
        let mut h = vec![0u64; self.num_classes];
        for s in &self.samples {
            for &v in &s.label.data {
                if v != self.ignore_label && (v as usize) < self.num_classes {
                    h[v as usize] += 1;
                }
            }
        }
        h
    }
}

/// A stacked training batch.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub image: Tensor<T>,
    pub spatial: Tensor<T>,
    pub labels: Vec<LabelMap>,
}

fn stack_batch<T: Real>(items: &[AugmentedSample], source: SpatialSource, normalize: bool) -> Result<Batch<T>> {
    let mut images = Vec::with_capacity(items.len());
    let mut spatial = Vec::with_capacity(items.len());
    for a in items {
        images.push(a.rgb.cast::<T>());
        spatial.push(encode_spatial(&a.depth, source, &a.intrinsics, normalize)?.cast::<T>());
    }
    Ok(Batch {
        image: Tensor::stack(&images)?,
        spatial: Tensor::stack(&spatial)?,
        labels: items.iter().map(|a| a.label.clone()).collect(),
    })
}

/// Un-augmented network input `[1, 3, h, w]` and `[1, c', h, w]` for one sample.
pub fn prepare_eval_input<T: Real>(
    s: &Sample,
    k: &CameraIntrinsics,
    source: SpatialSource,
    normalize: bool,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let depth = sanitize_depth(&s.depth)?;
    let sp = encode_spatial(&depth, source, k, normalize)?;
    Ok((s.rgb.cast::<T>().unsqueeze0(), sp.cast::<T>().unsqueeze0()))
}

/// Per-pixel argmax over classes of `[1, C, h, w]` logits; ties go to the lower id.
pub fn predict<T: Real>(logits: &Tensor<T>) -> Result<LabelMap> {
    let (_, c, h, w) = logits.nchw()?;
    let p = h * w;
    let d = logits.data();
    let labels = (0..p)
        .map(|px| {
            let mut best = 0;
            for k in 1..c {
                if d[k * p + px] > d[best * p + px] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(h, w, labels)
}

/// Full-image evaluation, one sample at a time in dataset order.
pub fn evaluate<T: Real>(model: &mut SegModel<T>, data: &Dataset, normalize: bool) -> Result<ConfusionMatrix> {
    let source = model.config().source;
    let mut cm = ConfusionMatrix::new(data.num_classes);
    for s in &data.samples {
        let (x, sp) = prepare_eval_input::<T>(s, &data.intrinsics, source, normalize)?;
        let out = model.forward(&x, &sp, Mode::Eval)?;
        cm.accumulate(&predict(&out.logits)?, &s.label, data.ignore_label)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub iteration: usize,
    pub lr: f64,
    /// `main + aux_weight * aux`.
    pub loss: f64,
    pub main_loss: f64,
    pub aux_loss: Option<f64>,
}

/// Optimiser progress. The data order and augmentation streams are derived from the seed, the
/// epoch and the sample index, so the seed and epoch fully determine the random state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub iteration: usize,
    /// Completed epochs.
    pub epoch: usize,
    pub sgd: SgdState<T>,
    pub best_miou: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_checkpoint: Option<PathBuf>,
}

pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub state: TrainState<T>,
    class_weights: Option<Tensor<T>>,
    steps_per_epoch: usize,
    max_iter: usize,
}

fn stream_rng(seed: u64, tag: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(stream);
    rng
}

const ORDER_TAG: u64 = 1;
const AUGMENT_TAG: u64 = 2;

impl<T: Real> Trainer<T> {
    pub fn new(model: &SegModel<T>, train: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        if train.num_classes != model.config().num_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, model {}",
                train.num_classes,
                model.config().num_classes
            )));
        }
        let class_weights = if cfg.class_reweight {
            let w = compute_class_weights(&train.label_histogram())?;
            Some(Tensor::from_fn(&[w.weights.len()], |i| T::lit(w.weights[i])))
        } else {
            None
        };
        let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
        Ok(Trainer {
            cfg: cfg.clone(),
            state: TrainState {
                iteration: 0,
                epoch: 0,
                sgd: SgdState::new(model),
                best_miou: None,
                best_epoch: None,
                best_checkpoint: None,
            },
            class_weights,
            steps_per_epoch,
            max_iter: steps_per_epoch * cfg.epochs,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn max_iter(&self) -> usize {
        self.max_iter
    }

    pub fn class_weights(&self) -> Option<&Tensor<T>> {
        self.class_weights.as_ref()
    }

    /// Shuffled sample order of `epoch`.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(self.cfg.seed, ORDER_TAG, epoch as u64));
        order
    }

    /// Augments and stacks `indices` of `data`; each sample's transform depends only on the
    /// seed, the epoch and its index, so parallel workers do not affect the result.
    pub fn make_batch(&self, model: &SegModel<T>, data: &Dataset, epoch: usize, indices: &[usize]) -> Result<Batch<T>> {
        let items = indices
            .par_iter()
            .map(|&i| {
                let mut rng = stream_rng(self.cfg.seed, AUGMENT_TAG, ((epoch as u64) << 32) | i as u64);
                augment(&data.samples[i], &data.intrinsics, &self.cfg, data.ignore_label, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        stack_batch(&items, model.config().source, self.cfg.normalize_spatial)
    }

    /// One forward/backward/update at the scheduled learning rate.
    pub fn step(&mut self, model: &mut SegModel<T>, batch: &Batch<T>, ignore: u8) -> Result<StepStats> {
        let lr = self.cfg.lr_at(self.state.iteration, self.max_iter, self.steps_per_epoch);
        model.zero_grads();
        let out = model.forward(&batch.image, &batch.spatial, Mode::Train)?;
        let cw = self.class_weights.as_ref();
        let main = softmax_cross_entropy_batch(&out.logits, &batch.labels, ignore, cw)?;
        let aux = match &out.aux {
            Some(a) => Some(softmax_cross_entropy_batch(a, &batch.labels, ignore, cw)?),
            None => None,
        };
        let aw = self.cfg.aux_weight;
        let main_loss = main.loss.as_f64();
        let aux_loss = aux.as_ref().map(|a| a.loss.as_f64());
        let loss = main_loss + aw * aux_loss.unwrap_or(0.0);
        let grad_aux = aux.map(|a| a.grad.scale(T::lit(aw)));
        model.backward(&main.grad, grad_aux.as_ref())?;
        if !loss.is_finite() {
            return Err(Error::Numeric(nan_diagnostic(model, self.state.iteration, lr, loss)));
        }
        sgd_step(model, &mut self.state.sgd, lr, self.cfg.momentum, self.cfg.weight_decay)?;
        let stats = StepStats {
            iteration: self.state.iteration,
            lr,
            loss,
            main_loss,
            aux_loss,
        };
        self.state.iteration += 1;
        Ok(stats)
    }

    /// Writes the model and the optimiser state to `dir`.
    pub fn save(&self, model: &SegModel<T>, dir: &Path) -> Result<()> {
        let extra = json!({
            "normalize_spatial": self.cfg.normalize_spatial,
            "trainer": {
                "iteration": self.state.iteration,
                "epoch": self.state.epoch,
                "best_miou": self.state.best_miou,
                "best_epoch": self.state.best_epoch,
                "train_config": self.cfg,
            }
        });
        save_checkpoint(model, dir, extra)?;
        let mdir = dir.join("momentum");
        fs::create_dir_all(&mdir).map_err(|e| Error::io(&mdir, e))?;
        for (name, buf) in self.state.sgd.names.iter().zip(&self.state.sgd.buffers) {
            write_tensor(mdir.join(format!("{name}.sct")), buf)?;
        }
        Ok(())
    }

    /// Restores model parameters and optimiser state written by [`Trainer::save`].
    pub fn restore(&mut self, model: &mut SegModel<T>, dir: &Path) -> Result<()> {
        let (loaded, manifest) = load_checkpoint::<T>(dir)?;
        // The initialisation seed is irrelevant once the weights are restored.
        let unseeded = |c: &crate::net::NetworkConfig| crate::net::NetworkConfig { seed: 0, ..c.clone() };
        if unseeded(loaded.config()) != unseeded(model.config()) {
            return Err(Error::Config(format!("checkpoint {} was written for a different network", dir.display())));
        }
        let t = &manifest.extra["trainer"];
        let get = |k: &str| {
            t[k].as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Data(format!("{}: trainer state lacks `{k}`", dir.display())))
        };
        let (iteration, epoch) = (get("iteration")?, get("epoch")?);
        let mut sgd = SgdState::new(&loaded);
        for (name, buf) in sgd.names.iter().zip(sgd.buffers.iter_mut()) {
            let t: Tensor<T> = read_tensor(dir.join("momentum").join(format!("{name}.sct")))?;
            if t.shape() != buf.shape() {
                return Err(Error::Data(format!("momentum for {name} has shape {:?}", t.shape())));
            }
            *buf = t;
        }
        *model = loaded;
        self.state = TrainState {
            iteration,
            epoch,
            sgd,
            best_miou: t["best_miou"].as_f64(),
            best_epoch: t["best_epoch"].as_u64().map(|v| v as usize),
            best_checkpoint: None,
        };
        Ok(())
    }
}

fn nan_diagnostic<T: Real>(model: &SegModel<T>, iteration: usize, lr: f64, loss: f64) -> String {
    let mut groups: Vec<(String, f64)> = Vec::new();
    model.visit_params(&mut |p| {
        let key: String = p.name.split('.').take(2).collect::<Vec<_>>().join(".");
        let sq: f64 = p.grad.data().iter().map(|v| v.as_f64() * v.as_f64()).sum();
        match groups.last_mut() {
            Some((k, s)) if *k == key => *s += sq,
            _ => groups.push((key, sq)),
        }
    });
    let norms: Vec<String> = groups.iter().map(|(k, s)| format!("{k}={:.3e}", s.sqrt())).collect();
    format!(
        "non-finite loss {loss} at iteration {iteration} (lr {lr:.3e}); gradient norms: {}",
        norms.join(", ")
    )
}

/// Where and how `fit` writes its artefacts.
#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Log, metrics and checkpoints are written here when set.
    pub out_dir: Option<PathBuf>,
    /// Continue from a checkpoint written by a previous run (its `checkpoints/last`).
    pub resume_from: Option<PathBuf>,
    /// Stop after this many completed epochs (simulates an interrupted run).
    pub stop_after_epochs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub mean_loss: f64,
    pub metrics: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub history: Vec<EpochRecord>,
    /// Loss of the first step taken by this call.
    pub first_batch_loss: Option<f64>,
    pub iterations: usize,
    pub best_miou: Option<f64>,
}

struct Log(Option<File>);

impl Log {
    fn line(&mut self, v: serde_json::Value) -> Result<()> {
        if let Some(f) = self.0.as_mut() {
            writeln!(f, "{v}").map_err(|e| Error::io("train_log.jsonl", e))?;
        }
        Ok(())
    }
}

/// Trains `model` on `train` for `cfg.epochs`, evaluating on `val` and keeping the best-mIoU
/// checkpoint. Output layout under `out_dir`: `train_log.jsonl`, `metrics.json`,
/// `metrics_epoch_NNN.json`, `checkpoints/{init,last,best}`.
pub fn fit<T: Real>(
    model: &mut SegModel<T>,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    opts: &FitOptions,
) -> Result<FitReport> {
    let mut trainer = Trainer::new(model, train, cfg)?;
    if let Some(v) = val {
        if v.num_classes != train.num_classes {
            return Err(Error::Config("train and val splits disagree on the class count".into()));
        }
    }
    let out = opts.out_dir.as_deref();
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    if let Some(from) = &opts.resume_from {
        trainer.restore(model, from)?;
        log::info!("resumed at epoch {} iteration {}", trainer.state.epoch, trainer.state.iteration);
    } else if let Some(dir) = out {
        save_checkpoint(model, dir.join("checkpoints/init"), json!({"normalize_spatial": cfg.normalize_spatial}))?;
    }
    let mut log = Log(match out {
        Some(dir) => {
            let path = dir.join("train_log.jsonl");
            let f = OpenOptions::new()
                .create(true)
                .append(opts.resume_from.is_some())
                .write(true)
                .truncate(opts.resume_from.is_none())
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some(f)
        }
        None => None,
    });

    let mut report = FitReport {
        history: Vec::new(),
        first_batch_loss: None,
        iterations: 0,
        best_miou: trainer.state.best_miou,
    };
    let ignore = train.ignore_label;
    while trainer.state.epoch < cfg.epochs {
        if opts.stop_after_epochs.is_some_and(|s| trainer.state.epoch >= s) {
            break;
        }
        let epoch = trainer.state.epoch;
        let order = trainer.epoch_order(train.len(), epoch);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = trainer.make_batch(model, train, epoch, chunk)?;
            let st = trainer.step(model, &batch, ignore).map_err(|e| {
                if let (Error::Numeric(msg), Some(dir)) = (&e, out) {
                    let _ = fs::write(dir.join("nan_dump.txt"), format!("{msg}\n"));
                }
                e
            })?;
            report.first_batch_loss.get_or_insert(st.loss);
            report.iterations += 1;
            sum += st.loss;
            count += 1;
            log.line(json!({
                "iter": st.iteration, "epoch": epoch, "lr": st.lr,
                "loss": st.loss, "aux_loss": st.aux_loss,
            }))?;
        }
        trainer.state.epoch += 1;
        let done = trainer.state.epoch;
        let mut record = EpochRecord {
            epoch: done,
            iteration: trainer.state.iteration,
            mean_loss: sum / count.max(1) as f64,
            metrics: None,
        };
        if let Some(v) = val.filter(|_| done % cfg.eval_every == 0 || done == cfg.epochs) {
            let m = evaluate(model, v, cfg.normalize_spatial)?.compute()?;
            log::info!("epoch {done}: loss {:.4} acc {:.4} miou {:.4}", record.mean_loss, m.acc, m.miou);
            log.line(json!({
                "iter": trainer.state.iteration, "epoch": done,
                "lr": cfg.lr_at(trainer.state.iteration, trainer.max_iter, trainer.steps_per_epoch),
                "loss": record.mean_loss, "mIoU": m.miou,
            }))?;
            if let Some(dir) = out {
                m.write_json(dir.join("metrics.json"))?;
                m.write_json(dir.join(format!("metrics_epoch_{done:03}.json")))?;
            }
            if trainer.state.best_miou.map_or(true, |b| m.miou > b) {
                trainer.state.best_miou = Some(m.miou);
                trainer.state.best_epoch = Some(done);
                if let Some(dir) = out {
                    let best = dir.join("checkpoints/best");
                    save_checkpoint(model, &best, json!({"epoch": done, "miou": m.miou, "normalize_spatial": cfg.normalize_spatial}))?;
                    trainer.state.best_checkpoint = Some(best);
                }
            }
            record.metrics = Some(m);
        } else {
            log::info!("epoch {done}: loss {:.4}", record.mean_loss);
        }
        if let Some(dir) = out {
            trainer.save(model, &dir.join("checkpoints/last"))?;
        }
        report.history.push(record);
    }
    report.best_miou = trainer.state.best_miou;
    Ok(report)
}
