//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and exits non-zero when
//! any criterion fails. The long-running training experiments live here too, so expect this
//! target to take most of half an hour on a single core.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sconv_core::data::{synth_generate, DatasetManifest, SynthConfig};
use sconv_core::geometry::DepthMap;
use sconv_core::gradcheck::{self, GradcheckConfig};
use sconv_core::layers::Parameterized;
use sconv_core::metrics::ConfusionMatrix;
use sconv_core::net::{Mode, NetworkConfig, SegModel};
use sconv_core::ops::{conv2d_forward, ConvGeometry};
use sconv_core::sconv::{sconv_forward, ProjectedSpatial, SConvMode, SConvState, SpatialSource, PROJECTED_CHANNELS};
use sconv_core::train::{evaluate, fit, poly_lr, prepare_eval_input, sgd_step, Dataset, FitOptions, SgdState, TrainConfig, Trainer};
use sconv_core::{LabelMap, Tensor};

type Outcome = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

// Training budget of the geometry-gain experiment; shared by guided and baseline runs.
const GAIN_SEEDS: [u64; 3] = [0, 1, 2];
const GAIN_EPOCHS: usize = 15;

// ---------------------------------------------------------------------------------------------
// Independent oracles.

/// Direct convolution from the definition, zero padding, `x: [C_in, h, w]`.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, g: &ConvGeometry) -> Tensor<f64> {
    let (c_in, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
    let c_out = w.dim(0);
    let oh = (h + 2 * g.padding - g.dilation * (g.kh - 1) - 1) / g.stride + 1;
    let ow = (wd + 2 * g.padding - g.dilation * (g.kw - 1) - 1) / g.stride + 1;
    let (xd, wv) = (x.data(), w.data());
    let mut out = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b.map_or(0.0, |b| b.data()[o]);
                for c in 0..c_in {
                    for i in 0..g.kh {
                        for j in 0..g.kw {
                            let iy = (oy * g.stride + i * g.dilation) as isize - g.padding as isize;
                            let ix = (ox * g.stride + j * g.dilation) as isize - g.padding as isize;
                            if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= wd {
                                continue;
                            }
                            acc += wv[((o * c_in + c) * g.kh + i) * g.kw + j] * xd[(c * h + iy as usize) * wd + ix as usize];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::from_vec(&[c_out, oh, ow], out).unwrap()
}

fn random_operator(rng: &mut ChaCha8Rng) -> (SConvState<f64>, Tensor<f64>, ProjectedSpatial<f64>) {
    let k = [1, 3, 5][rng.gen_range(0..3)];
    let geom = ConvGeometry::new(k, k, rng.gen_range(1..=2), rng.gen_range(0..=k / 2), rng.gen_range(1..=2)).unwrap();
    let (c_in, c_out) = (rng.gen_range(1..5), rng.gen_range(1..5));
    let (h, w) = (rng.gen_range(9..16), rng.gen_range(9..16));
    let s = SConvState::new("", c_in, c_out, geom, rng.gen_range(1..6), rng.gen_bool(0.5), rng);
    let x = Tensor::from_fn(&[c_in, h, w], |_| rng.gen_range(-1.0..1.0));
    let sp = Tensor::from_fn(&[1, PROJECTED_CHANNELS, h, w], |_| rng.gen_range(0.0..1.0));
    (s, x, ProjectedSpatial::new(sp, SpatialSource::Depth).unwrap())
}

/// Brute-force metrics straight from (prediction, label) pixel pairs.
fn brute_force_metrics(pairs: &[(u8, u8)], classes: usize) -> (f64, f64, f64) {
    let (mut correct, mut total) = (0u64, 0u64);
    let mut accs = Vec::new();
    let mut ious = Vec::new();
    for c in 0..classes as u8 {
        let (mut tp, mut fp, mut fnc) = (0u64, 0u64, 0u64);
        for &(p, g) in pairs {
            match (p == c, g == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fnc += 1,
                _ => {}
            }
        }
        if tp + fnc > 0 {
            accs.push(tp as f64 / (tp + fnc) as f64);
        }
        if tp + fp + fnc > 0 {
            ious.push(tp as f64 / (tp + fp + fnc) as f64);
        }
    }
    for &(p, g) in pairs {
        total += 1;
        correct += (p == g) as u64;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (correct as f64 / total as f64, mean(&accs), mean(&ious))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

fn load_split(path: PathBuf) -> std::result::Result<Dataset, String> {
    ok(Dataset::load(&ok(DatasetManifest::load(path))?))
}

// ---------------------------------------------------------------------------------------------
// Criteria.

fn degenerate_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let draws = 60;
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let (mut s, x, sp) = random_operator(&mut rng);
        // Learned guidance parameters must not matter in degenerate mode.
        s.visit_params_mut(&mut |p| {
            if p.name.contains("eta") || p.name.contains("f.") {
                p.value = Tensor::from_fn(p.value.shape(), |_| rng.gen_range(-0.5..0.5));
            }
        });
        s.mode = SConvMode::Degenerate;
        let y = ok(sconv_forward(&x, &mut s, &sp))?;
        let bias = s.bias.as_ref().map(|b| &b.value);
        let (lib, _) = ok(conv2d_forward(&x, &s.weight.value, bias, &s.geom))?;
        let direct = naive_conv(&x, &s.weight.value, bias, &s.geom);
        worst = worst.max(y.max_abs_diff(&lib)).max(y.max_abs_diff(&direct));
    }
    ensure!(worst <= 1e-12, "max abs diff {worst:.3e} > 1e-12");
    Ok(format!("{draws} draws, max abs diff {worst:.2e}"))
}

fn fresh_init_halving() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let draws = 50;
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let (mut s, x, sp) = random_operator(&mut rng);
        let y = ok(sconv_forward(&x, &mut s, &sp))?;
        // Bias is zero at init, so half the convolution is also half of conv + bias.
        let direct = naive_conv(&x, &s.weight.value, s.bias.as_ref().map(|b| &b.value), &s.geom).scale(0.5);
        worst = worst.max(y.max_abs_diff(&direct));
    }
    ensure!(worst <= 1e-12, "max abs diff {worst:.3e} > 1e-12");
    Ok(format!("{draws} draws, max abs diff {worst:.2e}"))
}

fn gradient_suite() -> Outcome {
    let cfg = GradcheckConfig::default();
    ensure!(cfg.trials >= 20 && cfg.tolerance <= 1e-5, "default config weaker than required");
    let reports = ok(gradcheck::run(&cfg, None))?;
    let ops: Vec<&str> = gradcheck::registry().iter().map(|o| o.name).collect();
    let required = [
        "conv2d",
        "fully_connected",
        "relu",
        "sigmoid",
        "bilinear_sample",
        "softmax_cross_entropy",
        "sconv",
        "sconv_projector",
    ];
    for r in required {
        ensure!(ops.contains(&r), "op `{r}` not registered");
    }
    let groups = |op: &str| reports.iter().filter(|r| r.op == op).map(|r| r.group.as_str()).collect::<Vec<_>>();
    for g in ["x", "y"] {
        ensure!(groups("bilinear_sample").contains(&g), "bilinear_sample lacks coordinate group `{g}`");
    }
    for g in ["eta.w", "f.0.w", "f.1.w", "spatial"] {
        ensure!(groups("sconv").contains(&g), "sconv lacks group `{g}`");
    }
    ensure!(groups("sconv_projector").iter().any(|g| g.starts_with("phi")), "projector lacks phi groups");
    for op in &ops {
        ensure!(!groups(op).is_empty(), "no report for `{op}`");
    }
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed || r.trials < 20)
        .map(|r| format!("{}/{} {:.2e}", r.op, r.group, r.max_rel_error))
        .collect();
    ensure!(failed.is_empty(), "failing groups: {}", failed.join(", "));
    Ok(format!("{} ops, {} groups, {} trials, worst rel err {worst:.2e}", ops.len(), reports.len(), cfg.trials))
}

struct GainOutcome {
    detail: String,
    trained: Option<(SegModel<f32>, Dataset, bool)>,
}

fn geometry_gain(root: &Path) -> std::result::Result<GainOutcome, String> {
    let synth = SynthConfig::default();
    ensure!(synth.train_scenes >= 200 && synth.val_scenes >= 50 && synth.height == 64 && synth.width == 64, "synthetic split too small");
    let out = ok(synth_generate(&synth, root.join("gain-data"), false))?;
    let train = load_split(out.train_manifest_path())?;
    let val = load_split(out.val_manifest_path())?;
    let mut gaps = Vec::new();
    let mut lines = Vec::new();
    let mut trained = None;
    for seed in GAIN_SEEDS {
        let cfg = TrainConfig {
            epochs: GAIN_EPOCHS,
            eval_every: GAIN_EPOCHS,
            seed,
            ..TrainConfig::default()
        };
        let net = NetworkConfig {
            seed,
            ..NetworkConfig::toy(train.num_classes)
        };
        let mut scores = [0.0; 2];
        for (slot, cfg_net) in [net.clone(), net.baseline()].into_iter().enumerate() {
            let mut model = ok(SegModel::<f32>::new(cfg_net))?;
            ok(fit(&mut model, &train, Some(&val), &cfg, &FitOptions::default()))?;
            // Scored independently of the training loop's own bookkeeping.
            scores[slot] = ok(ok(evaluate(&mut model, &val, cfg.normalize_spatial))?.compute())?.miou;
            if slot == 0 && trained.is_none() {
                trained = Some((model, val.clone(), cfg.normalize_spatial));
            }
        }
        let gap = (scores[0] - scores[1]) * 100.0;
        lines.push(format!("seed {seed}: {:.1} vs {:.1}", scores[0] * 100.0, scores[1] * 100.0));
        gaps.push(gap);
    }
    let gain = median(gaps);
    let detail = format!("median gain {gain:.1} mIoU points ({}; {GAIN_EPOCHS} epochs each)", lines.join(", "));
    ensure!(gain >= 5.0, "{detail}");
    Ok(GainOutcome { detail, trained })
}

fn overfit_sanity(root: &Path) -> Outcome {
    let synth = SynthConfig {
        train_scenes: 8,
        val_scenes: 1,
        seed: 8,
        ..SynthConfig::default()
    };
    let out = ok(synth_generate(&synth, root.join("overfit-data"), false))?;
    let data = load_split(out.train_manifest_path())?;
    ensure!(data.len() == 8, "expected 8 samples, found {}", data.len());
    let max_iter = 2000;
    let cfg = TrainConfig {
        base_lr: 0.02,
        batch_size: 8,
        epochs: max_iter,
        scale_range: [1.0, 1.0],
        hflip_prob: 0.0,
        ..TrainConfig::default()
    };
    let mut model = ok(SegModel::<f32>::new(NetworkConfig::toy(data.num_classes)))?;
    let mut trainer = ok(Trainer::new(&model, &data, &cfg))?;
    let all: Vec<usize> = (0..data.len()).collect();
    let mut acc = 0.0;
    for it in 0..max_iter {
        let batch = ok(trainer.make_batch(&model, &data, it, &all))?;
        ok(trainer.step(&mut model, &batch, data.ignore_label))?;
        if (it + 1) % 25 == 0 {
            acc = ok(ok(evaluate(&mut model, &data, cfg.normalize_spatial))?.compute())?.acc;
            if acc >= 0.99 {
                return Ok(format!("train pixel accuracy {:.2}% after {} iterations", acc * 100.0, it + 1));
            }
        }
    }
    Err(format!("train pixel accuracy {:.2}% after {max_iter} iterations", acc * 100.0))
}

fn parameter_overhead() -> Outcome {
    let net = NetworkConfig::toy(6);
    let guided = ok(SegModel::<f32>::new(net.clone()))?;
    let baseline = ok(SegModel::<f32>::new(net.baseline()))?;
    // Registry count: every parameter the optimiser sees.
    let registry = |m: &SegModel<f32>| {
        let mut n = 0;
        m.visit_params(&mut |p| n += p.value.len());
        n
    };
    let (g_total, b_total) = (registry(&guided), registry(&baseline));
    let mut extra = 0;
    guided.visit_params(&mut |p| {
        if p.name.starts_with("phi.") || p.name.contains(".eta.") || p.name.contains(".f.") {
            extra += p.value.len();
        }
    });
    // Closed form: projector (1 -> 64 -> 64 -> 64, 3x3 with bias) plus, per 3x3 guided conv,
    // the offset generator (64 -> 2K, 3x3, bias) and the two-layer mask network (64K -> hidden -> K).
    let (c, k, hid) = (PROJECTED_CHANNELS, 9, net.f_hidden);
    let phi = net.source.channels() * c * 9 + c + 2 * (c * c * 9 + c);
    let per_conv = (c * 2 * k * k + 2 * k) + (c * k * hid + hid) + (hid * k + k);
    let guided_convs = guided.guided_convs().len();
    let closed = phi + guided_convs * per_conv;
    let per_layer: usize = guided.guided_convs().iter().map(|s| s.extra_param_count()).sum();
    let b = guided.param_breakdown();
    ensure!(closed == extra, "closed form {closed} != registry {extra}");
    ensure!(per_layer + phi == extra, "per-layer counts {per_layer} + {phi} != {extra}");
    ensure!(b.sconv_extra == extra && b.total == g_total, "breakdown {b:?} disagrees with registry");
    ensure!(g_total == b_total + extra, "guided {g_total} != baseline {b_total} + extra {extra}");
    ensure!(guided.param_breakdown() == net.expected_breakdown(), "model disagrees with expected breakdown");
    let ratio = extra as f64 / b_total as f64;
    ensure!(ratio <= 0.05, "sconv_extra {extra} is {:.2}% of baseline {b_total}", ratio * 100.0);
    Ok(format!("sconv_extra {extra} = {:.2}% of baseline {b_total} ({guided_convs} guided convs)", ratio * 100.0))
}

fn latency_overhead(root: &Path) -> Outcome {
    let out = root.join("bench");
    let status = ok(Command::new(env!("CARGO_BIN_EXE_sconv"))
        .args(["bench", "--height", "64", "--width", "64", "--runs", "30", "--warmup", "5", "--out"])
        .arg(&out)
        .env("SCONV_THREADS", "1")
        .output())?;
    ensure!(status.status.success(), "bench failed: {}", String::from_utf8_lossy(&status.stderr));
    let report: serde_json::Value = ok(serde_json::from_str(&ok(std::fs::read_to_string(out.join("bench.json")))?))?;
    let mean = |who: &str| -> std::result::Result<f64, String> {
        let l: Vec<f64> = report[who]["latencies_ms"]
            .as_array()
            .ok_or("missing latencies")?
            .iter()
            .filter_map(|v| v.as_f64())
            .collect();
        ensure!(l.len() >= 30, "{who}: only {} timed runs", l.len());
        Ok(l.iter().sum::<f64>() / l.len() as f64)
    };
    let (g, b) = (mean("guided")?, mean("baseline")?);
    let ratio = g / b;
    let reported = report["latency_ratio"].as_f64().ok_or("missing latency_ratio")?;
    ensure!((reported - ratio).abs() <= 1e-9 * ratio.max(1.0), "reported ratio {reported} != recomputed {ratio}");
    ensure!(ratio <= 2.0, "guided {g:.2} ms vs baseline {b:.2} ms, ratio {ratio:.3} > 2.0");
    Ok(format!("guided {g:.2} ms vs baseline {b:.2} ms, ratio {ratio:.3}"))
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let cases = 150;
    let ignore = 255u8;
    for case in 0..cases {
        let classes = rng.gen_range(2..8);
        let (h, w) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let gt: Vec<u8> = (0..h * w)
            .map(|_| if rng.gen_bool(0.1) { ignore } else { rng.gen_range(0..classes) as u8 })
            .collect();
        let pred: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..classes) as u8).collect();
        let mut cm = ConfusionMatrix::new(classes);
        ok(cm.accumulate(&ok(LabelMap::new(h, w, pred.clone()))?, &ok(LabelMap::new(h, w, gt.clone()))?, ignore))?;
        let pairs: Vec<(u8, u8)> = pred.iter().zip(&gt).filter(|(_, &g)| g != ignore).map(|(&p, &g)| (p, g)).collect();
        if pairs.is_empty() {
            continue;
        }
        let m = ok(cm.compute())?;
        let (acc, macc, miou) = brute_force_metrics(&pairs, classes);
        ensure!(
            m.acc == acc && m.macc == macc && m.miou == miou,
            "case {case}: got ({}, {}, {}) want ({acc}, {macc}, {miou})",
            m.acc,
            m.macc,
            m.miou
        );
    }
    let labels: Vec<u8> = (0..64).map(|i| (i % 5) as u8).collect();
    let map = ok(LabelMap::new(8, 8, labels))?;
    let mut cm = ConfusionMatrix::new(5);
    ok(cm.accumulate(&map, &map, ignore))?;
    let m = ok(cm.compute())?;
    ensure!(m.acc == 1.0 && m.macc == 1.0 && m.miou == 1.0, "perfect prediction scored {m:?}");
    Ok(format!("{cases} random pairs match exactly; perfect prediction scores 1.0"))
}

fn schedule_and_optimizer() -> Outcome {
    for (base, max, power) in [(0.01, 1000, 0.9), (5e-3, 37, 1.0), (1.0, 1, 2.0)] {
        ensure!(poly_lr(0, max, base, power) == base, "poly_lr(0) != base_lr");
        ensure!(poly_lr(max, max, base, power) == 0.0, "poly_lr(max) != 0");
    }
    let net = NetworkConfig {
        stem_width: 4,
        widths: [4, 4, 4, 6],
        blocks: [1, 1, 1, 1],
        sconv_policy: sconv_core::net::default_policy(&[1, 1, 1, 1]),
        f_hidden: 2,
        ..NetworkConfig::toy(3)
    };
    let mut model = ok(SegModel::<f64>::new(net))?;
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let (lr, mom, wd) = (0.05, 0.9, 1e-3);
    let mut state = SgdState::new(&model);
    let mut start = Vec::new();
    let mut decays = Vec::new();
    model.visit_params(&mut |p| {
        start.push(p.value.data().to_vec());
        decays.push(p.decay);
    });
    let mut grads: Vec<Vec<Vec<f64>>> = Vec::new();
    for _ in 0..2 {
        let mut g = Vec::new();
        model.visit_params_mut(&mut |p| {
            p.grad = Tensor::from_fn(p.value.shape(), |_| rng.gen_range(-1.0..1.0));
            g.push(p.grad.data().to_vec());
        });
        grads.push(g);
        ok(sgd_step(&mut model, &mut state, lr, mom, wd))?;
    }
    // Hand-unrolled: v1 = g0 + wd p0; p1 = p0 - lr v1; v2 = m v1 + g1 + wd p1; p2 = p1 - lr v2.
    let mut worst: f64 = 0.0;
    let mut idx = 0;
    model.visit_params(&mut |p| {
        let w = if decays[idx] { wd } else { 0.0 };
        for (j, &got) in p.value.data().iter().enumerate() {
            let p0 = start[idx][j];
            let v1 = grads[0][idx][j] + w * p0;
            let p1 = p0 - lr * v1;
            let v2 = mom * v1 + grads[1][idx][j] + w * p1;
            let p2 = p1 - lr * v2;
            worst = worst.max((got - p2).abs());
        }
        idx += 1;
    });
    ensure!(worst <= 1e-12, "momentum SGD deviates by {worst:.3e}");
    Ok(format!("poly endpoints exact; two-step SGD max deviation {worst:.2e}"))
}

fn receptive_field_export(trained: Option<&mut (SegModel<f32>, Dataset, bool)>) -> Outcome {
    let (trained, val, normalize) = trained.map(|t| (&mut t.0, &t.1, t.2)).ok_or("no trained model from the geometry-gain run")?;
    let sample = &val.samples[0];
    let source = trained.config().source;
    let maps = |m: &mut SegModel<f32>, depth: &DepthMap| -> std::result::Result<Vec<Vec<u8>>, String> {
        let mut s = sample.clone();
        s.depth = depth.clone();
        let (x, sp) = ok(prepare_eval_input::<f32>(&s, &val.intrinsics, source, normalize))?;
        ok(m.forward(&x, &sp, Mode::Eval))?;
        Ok(ok(m.receptive_field_maps(0))?.into_iter().map(|r| r.pixels).collect())
    };
    let mut fresh = ok(SegModel::<f32>::new(trained.config().clone()))?;
    let fresh_maps = maps(&mut fresh, &sample.depth)?;
    ensure!(!fresh_maps.is_empty(), "no guided convolutions");
    ensure!(fresh_maps.iter().all(|m| m.iter().all(|&v| v == 0)), "fresh model maps are not all zero");

    let before = maps(trained, &sample.depth)?;
    // Raise a central square by 30 cm.
    let mut bumped = sample.depth.clone();
    let (h, w) = (bumped.height, bumped.width);
    for y in h / 4..3 * h / 4 {
        for x in w / 4..3 * w / 4 {
            let v = &mut bumped.meters[y * w + x];
            if *v > 0.0 {
                *v -= 0.3;
            }
        }
    }
    let after = maps(trained, &bumped)?;
    let changed = before
        .iter()
        .zip(&after)
        .map(|(a, b)| a.iter().zip(b).map(|(&p, &q)| (p as i32 - q as i32).abs()).max().unwrap_or(0))
        .max()
        .unwrap_or(0);
    let nonzero = before.iter().filter(|m| m.iter().any(|&v| v > 0)).count();
    // u8 pixels are within [0, 255] by construction; a non-constant map must reach both ends.
    ensure!(nonzero > 0, "trained maps are all zero");
    ensure!(changed > 0, "perturbing depth left every map unchanged");
    Ok(format!(
        "{} sites; fresh maps all zero; {nonzero} trained maps non-constant; depth bump changes maps by up to {changed}/255",
        before.len()
    ))
}

fn determinism(root: &Path) -> Outcome {
    let config = root.join("det.toml");
    ok(std::fs::write(
        &config,
        "[synth]\ntrain_scenes = 16\nval_scenes = 4\n[train]\nepochs = 2\nbatch_size = 8\n",
    ))?;
    let run = |dir: &Path| -> std::result::Result<(), String> {
        let data = dir.join("data");
        let (train, val) = (data.join("train/manifest.txt"), data.join("val/manifest.txt"));
        let steps: [Vec<&std::ffi::OsStr>; 3] = [
            vec!["synth".as_ref(), "--out".as_ref(), data.as_ref()],
            vec!["train".as_ref(), "--train".as_ref(), train.as_ref(), "--val".as_ref(), val.as_ref()],
            vec!["eval".as_ref(), "--manifest".as_ref(), val.as_ref()],
        ];
        let outs = [data.clone(), dir.join("run"), dir.join("eval")];
        let checkpoint = dir.join("run/checkpoints/last");
        for (i, (args, out_dir)) in steps.iter().zip(&outs).enumerate() {
            let mut cmd = Command::new(env!("CARGO_BIN_EXE_sconv"));
            cmd.arg("--config").arg(&config).args(args).args(["--seed", "5"]).env("SCONV_THREADS", "1");
            if i == 2 {
                cmd.arg("--checkpoint").arg(&checkpoint);
            }
            if i > 0 {
                cmd.arg("--out").arg(out_dir);
            }
            let out = ok(cmd.output())?;
            ensure!(out.status.success(), "{:?} failed: {}", args[0], String::from_utf8_lossy(&out.stderr));
        }
        Ok(())
    };
    let (a, b) = (root.join("det-a"), root.join("det-b"));
    run(&a)?;
    run(&b)?;
    let files = |dir: &Path| -> std::result::Result<BTreeMap<String, Vec<u8>>, String> {
        let mut m = BTreeMap::new();
        for e in ok(std::fs::read_dir(dir))? {
            let e = ok(e)?;
            m.insert(e.file_name().to_string_lossy().into_owned(), ok(std::fs::read(e.path()))?);
        }
        Ok(m)
    };
    let init_a = files(&a.join("run/checkpoints/init"))?;
    ensure!(init_a.len() > 1, "initial checkpoint is empty");
    ensure!(init_a == files(&b.join("run/checkpoints/init"))?, "initial checkpoints differ");
    let first_loss = |dir: &Path| -> std::result::Result<u64, String> {
        let log = ok(std::fs::read_to_string(dir.join("run/train_log.jsonl")))?;
        let line: serde_json::Value = ok(serde_json::from_str(log.lines().next().ok_or("empty log")?))?;
        Ok(line["loss"].as_f64().ok_or("no loss")?.to_bits())
    };
    let (la, lb) = (first_loss(&a)?, first_loss(&b)?);
    ensure!(la == lb, "first-batch losses differ: {} vs {}", f64::from_bits(la), f64::from_bits(lb));
    let metrics = |dir: &Path| ok(std::fs::read(dir.join("eval/metrics.json")));
    ensure!(metrics(&a)? == metrics(&b)?, "eval metrics differ");
    Ok(format!(
        "{} checkpoint tensors identical, first-batch loss {:.6}, eval metrics byte-identical",
        init_a.len() - 1,
        f64::from_bits(la)
    ))
}

// ---------------------------------------------------------------------------------------------

fn main() {
    let _ = env_logger::builder().is_test(true).try_init();
    let tmp = tempfile::tempdir().expect("temporary directory");
    let root = tmp.path();
    let mut trained = None;
    let mut failures = 0;

    let mut report = |id: usize, name: &str, budget: Option<Duration>, check: &mut dyn FnMut() -> Outcome| {
        let t0 = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = t0.elapsed();
        let res = match (res, budget) {
            (Ok(d), Some(b)) if took > b => Err(format!("{d}; took {took:.1?}, budget {b:?}")),
            (r, _) => r,
        };
        match res {
            Ok(d) => println!("PASS  {id:>2}. {name}: {d} [{took:.1?}]"),
            Err(e) => {
                failures += 1;
                println!("FAIL  {id:>2}. {name}: {e} [{took:.1?}]");
            }
        }
    };

    let secs = Duration::from_secs;
    report(1, "degenerate mode equals plain convolution", Some(secs(10)), &mut degenerate_equivalence);
    report(2, "fresh guided convolution is half the plain one", Some(secs(5)), &mut fresh_init_halving);
    report(3, "every backward passes finite differences", Some(secs(300)), &mut gradient_suite);
    report(4, "geometry gain over the baseline twin", Some(secs(1800)), &mut || {
        geometry_gain(root).map(|g| {
            trained = g.trained;
            g.detail
        })
    });
    report(5, "overfits 8 samples", Some(secs(600)), &mut || overfit_sanity(root));
    report(6, "parameter overhead", None, &mut parameter_overhead);
    report(7, "latency overhead", None, &mut || latency_overhead(root));
    report(8, "metrics match a brute-force oracle", None, &mut metrics_oracle);
    report(9, "schedule endpoints and momentum recurrence", None, &mut schedule_and_optimizer);
    report(10, "receptive-field export", None, &mut || receptive_field_export(trained.as_mut()));
    report(11, "same seed gives identical runs", None, &mut || determinism(root));

    println!("{} of 11 criteria passed", 11 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
