//! Central finite-difference verification of every hand-written backward pass.
//!
//! Each registered op builds random 64-bit instances. An instance is a named set of input
//! tensors plus a closure returning a scalar loss `L = <f(inputs), R>` (random `R`) and the
//! analytic gradient of `L` for every input group. The checker perturbs a sample of
//! coordinates per group and compares.
//!
//! Error measure per group: `||a - n||_2 / max(||a||_2 + ||n||_2, 1e-10)` over the probed
//! coordinates, which stays meaningful when individual gradient entries are near zero.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::Parameterized;
use crate::ops::{self, Activation, ConvGeometry};
use crate::sconv::{ProjectedSpatial, SConvState, SpatialProjector, SpatialSource, PROJECTED_CHANNELS};
use crate::tensor::{LabelMap, Tensor};

pub type Inputs = BTreeMap<String, Tensor<f64>>;
type EvalFn = Box<dyn Fn(&Inputs) -> Result<(f64, Inputs)>>;

/// One random problem: inputs and a loss/gradient evaluator over them.
pub struct Instance {
    pub inputs: Inputs,
    eval: EvalFn,
}

impl Instance {
    pub fn new(inputs: Inputs, eval: impl Fn(&Inputs) -> Result<(f64, Inputs)> + 'static) -> Self {
        Instance {
            inputs,
            eval: Box::new(eval),
        }
    }

    pub fn eval(&self, inputs: &Inputs) -> Result<(f64, Inputs)> {
        (self.eval)(inputs)
    }
}

/// A registered backward pass.
pub struct OpSpec {
    pub name: &'static str,
    pub build: fn(&mut ChaCha8Rng) -> Instance,
}

/// Every op whose backward is hand-written, in report order.
pub fn registry() -> Vec<OpSpec> {
    vec![
        OpSpec { name: "conv2d", build: conv2d_instance },
        OpSpec { name: "fully_connected", build: fc_instance },
        OpSpec { name: "relu", build: |r| activation_instance(r, Activation::Relu) },
        OpSpec { name: "sigmoid", build: |r| activation_instance(r, Activation::Sigmoid) },
        OpSpec { name: "bilinear_sample", build: sample_instance },
        OpSpec { name: "bilinear_resize", build: resize_instance },
        OpSpec { name: "softmax_cross_entropy", build: ce_instance },
        OpSpec { name: "channel_norm", build: norm_instance },
        OpSpec { name: "sconv", build: sconv_instance },
        OpSpec { name: "sconv_projector", build: projector_instance },
    ]
}

/// Deliberately corrupts an analytic gradient to prove the checker catches it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignFlip {
    pub op: String,
    /// `None` flips every group of the op.
    pub group: Option<String>,
}

#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub tolerance: f64,
    pub step: f64,
    pub seed: u64,
    /// Upper bound on probed coordinates per group and trial.
    pub max_coords: usize,
    pub mutation: Option<SignFlip>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            trials: 20,
            tolerance: 1e-5,
            step: 1e-5,
            seed: 0,
            max_coords: 48,
            mutation: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupReport {
    pub op: String,
    pub group: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Checks one instance; returns the error per input group.
pub fn check_instance(
    inst: &Instance,
    cfg: &GradcheckConfig,
    flip: Option<&SignFlip>,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeMap<String, f64>> {
    let (_, mut analytic) = inst.eval(&inst.inputs)?;
    if let Some(f) = flip {
        for (name, g) in analytic.iter_mut() {
            if f.group.as_deref().map_or(true, |grp| grp == name) {
                *g = g.scale(-1.0);
            }
        }
    }
    let mut out = BTreeMap::new();
    let mut probe = inst.inputs.clone();
    for (name, value) in &inst.inputs {
        let a = analytic
            .get(name)
            .ok_or_else(|| Error::State(format!("no analytic gradient for `{name}`")))?;
        if a.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "gradient for `{name}` has shape {:?}, input {:?}",
                a.shape(),
                value.shape()
            )));
        }
        let n = value.len();
        let coords: Vec<usize> = if n <= cfg.max_coords {
            (0..n).collect()
        } else {
            sample(rng, n, cfg.max_coords).into_vec()
        };
        let (mut diff2, mut an2, mut nu2) = (0.0, 0.0, 0.0);
        for j in coords {
            let orig = value.data()[j];
            probe.get_mut(name).unwrap().data_mut()[j] = orig + cfg.step;
            let lp = inst.eval(&probe)?.0;
            probe.get_mut(name).unwrap().data_mut()[j] = orig - cfg.step;
            let lm = inst.eval(&probe)?.0;
            probe.get_mut(name).unwrap().data_mut()[j] = orig;
            let num = (lp - lm) / (2.0 * cfg.step);
            let ana = a.data()[j];
            diff2 += (ana - num) * (ana - num);
            an2 += ana * ana;
            nu2 += num * num;
        }
        let rel = diff2.sqrt() / (an2.sqrt() + nu2.sqrt()).max(1e-10);
        out.insert(name.clone(), rel);
    }
    Ok(out)
}

/// Runs `trials` instances of every op matching `selector` (all when `None`).
pub fn run(cfg: &GradcheckConfig, selector: Option<&str>) -> Result<Vec<GroupReport>> {
    let specs: Vec<OpSpec> = registry()
        .into_iter()
        .filter(|s| selector.map_or(true, |sel| sel == "all" || sel == s.name))
        .collect();
    if specs.is_empty() {
        let names: Vec<_> = registry().iter().map(|s| s.name).collect();
        return Err(Error::Config(format!(
            "unknown op `{}`; registered: {}",
            selector.unwrap_or_default(),
            names.join(", ")
        )));
    }
    let mut reports = Vec::new();
    for (si, spec) in specs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1000 * si as u64 + 17));
        let flip = cfg.mutation.as_ref().filter(|m| m.op == spec.name);
        let mut worst: BTreeMap<String, f64> = BTreeMap::new();
        for _ in 0..cfg.trials {
            let inst = (spec.build)(&mut rng);
            for (g, e) in check_instance(&inst, cfg, flip, &mut rng)? {
                let w = worst.entry(g).or_insert(0.0);
                // NaN must never be hidden by max().
                if e.is_nan() || e > *w {
                    *w = e;
                }
            }
        }
        for (group, err) in worst {
            reports.push(GroupReport {
                op: spec.name.to_string(),
                group,
                trials: cfg.trials,
                max_rel_error: err,
                passed: err <= cfg.tolerance,
            });
        }
    }
    Ok(reports)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// A coordinate at least `margin` away from any integer, so a finite-difference step never
/// crosses a bilinear cell boundary.
fn fractional(rng: &mut ChaCha8Rng, lo: f64, hi: f64, margin: f64) -> f64 {
    loop {
        let v: f64 = rng.gen_range(lo..hi);
        let f = v - v.floor();
        if f > margin && f < 1.0 - margin {
            return v;
        }
    }
}

/// Random values bounded away from zero, for ops with a kink at the origin.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.gen_range(0.05..2.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn inputs(items: Vec<(&str, Tensor<f64>)>) -> Inputs {
    items.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn conv2d_instance(rng: &mut ChaCha8Rng) -> Instance {
    let c_in = rng.gen_range(1..=3);
    let c_out = rng.gen_range(1..=3);
    let k = [1, 3][rng.gen_range(0..2)];
    let geom = ConvGeometry::new(k, k, rng.gen_range(1..=2), rng.gen_range(0..=k / 2 + 1), 1).unwrap();
    let (h, w) = (rng.gen_range(3..=6), rng.gen_range(3..=6));
    let (oh, ow) = geom.output_extent(h, w).unwrap();
    let r = rand_tensor(rng, &[c_out, oh, ow], 1.0);
    Instance::new(
        inputs(vec![
            ("x", rand_tensor(rng, &[c_in, h, w], 1.0)),
            ("w", rand_tensor(rng, &[c_out, c_in, k, k], 1.0)),
            ("b", rand_tensor(rng, &[c_out], 1.0)),
        ]),
        move |p| {
            let (y, cache) = ops::conv2d_forward(&p["x"], &p["w"], Some(&p["b"]), &geom)?;
            let g = ops::conv2d_backward(&cache, &p["w"], &r)?;
            Ok((
                y.dot(&r),
                inputs(vec![("x", g.input), ("w", g.weight), ("b", g.bias.unwrap())]),
            ))
        },
    )
}

fn fc_instance(rng: &mut ChaCha8Rng) -> Instance {
    let (m, n) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
    let r = rand_tensor(rng, &[m], 1.0);
    Instance::new(
        inputs(vec![
            ("x", rand_tensor(rng, &[n], 1.0)),
            ("w", rand_tensor(rng, &[m, n], 1.0)),
            ("b", rand_tensor(rng, &[m], 1.0)),
        ]),
        move |p| {
            let y = ops::fully_connected(&p["x"], &p["w"], &p["b"])?;
            let g = ops::fully_connected_backward(&p["x"], &p["w"], &p["b"], &r)?;
            Ok((y.dot(&r), inputs(vec![("x", g.input), ("w", g.weight), ("b", g.bias)])))
        },
    )
}

fn activation_instance(rng: &mut ChaCha8Rng, kind: Activation) -> Instance {
    let shape = [rng.gen_range(1..=4), rng.gen_range(1..=4)];
    let r = rand_tensor(rng, &shape, 1.0);
    let x = match kind {
        Activation::Relu => away_from_zero(rng, &shape),
        Activation::Sigmoid => rand_tensor(rng, &shape, 4.0),
    };
    Instance::new(inputs(vec![("x", x)]), move |p| {
        let y = ops::activation(kind, &p["x"]);
        let g = ops::activation_backward(kind, &p["x"], &r)?;
        Ok((y.dot(&r), inputs(vec![("x", g)])))
    })
}

fn sample_instance(rng: &mut ChaCha8Rng) -> Instance {
    let (c, h, w) = (rng.gen_range(1..=3), rng.gen_range(2..=5), rng.gen_range(2..=5));
    let r = rand_tensor(rng, &[c], 1.0);
    // Extends past the border so zero-padded taps are exercised too.
    let x = fractional(rng, -0.9, w as f64 - 0.1, 1e-3);
    let y = fractional(rng, -0.9, h as f64 - 0.1, 1e-3);
    Instance::new(
        inputs(vec![
            ("map", rand_tensor(rng, &[c, h, w], 1.0)),
            ("x", Tensor::scalar(x)),
            ("y", Tensor::scalar(y)),
        ]),
        move |p| {
            let (x, y) = (p["x"].data()[0], p["y"].data()[0]);
            let v = ops::bilinear_sample(&p["map"], x, y)?;
            let g = ops::bilinear_sample_backward(&p["map"], x, y, &r)?;
            Ok((
                v.dot(&r),
                inputs(vec![
                    ("map", g.map),
                    ("x", Tensor::scalar(g.x)),
                    ("y", Tensor::scalar(g.y)),
                ]),
            ))
        },
    )
}

fn resize_instance(rng: &mut ChaCha8Rng) -> Instance {
    let (c, h, w) = (rng.gen_range(1..=3), rng.gen_range(1..=6), rng.gen_range(1..=6));
    let (h2, w2) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
    let r = rand_tensor(rng, &[c, h2, w2], 1.0);
    Instance::new(inputs(vec![("map", rand_tensor(rng, &[c, h, w], 1.0))]), move |p| {
        let y = ops::bilinear_resize(&p["map"], h2, w2)?;
        let g = ops::bilinear_resize_backward(&r, h, w)?;
        Ok((y.dot(&r), inputs(vec![("map", g)])))
    })
}

fn ce_instance(rng: &mut ChaCha8Rng) -> Instance {
    let (pc, h, w) = (rng.gen_range(2..=4), rng.gen_range(1..=3), rng.gen_range(1..=3));
    let labels: Vec<u8> = (0..h * w)
        .map(|_| if rng.gen_bool(0.2) { 255 } else { rng.gen_range(0..pc as u8) })
        .collect();
    let labels = LabelMap::new(h, w, labels).unwrap();
    let weights = rng.gen_bool(0.5).then(|| Tensor::from_fn(&[pc], |_| rng.gen_range(0.2..2.0)));
    Instance::new(inputs(vec![("logits", rand_tensor(rng, &[pc, h, w], 3.0))]), move |p| {
        let out = ops::softmax_cross_entropy(&p["logits"], &labels, 255, weights.as_ref())?;
        Ok((out.loss, inputs(vec![("logits", out.grad)])))
    })
}

fn norm_instance(rng: &mut ChaCha8Rng) -> Instance {
    let (n, c, h, w) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(2..=4), rng.gen_range(2..=4));
    let r = rand_tensor(rng, &[n, c, h, w], 1.0);
    Instance::new(
        inputs(vec![
            ("x", rand_tensor(rng, &[n, c, h, w], 2.0)),
            ("scale", rand_tensor(rng, &[c], 1.5)),
            ("shift", rand_tensor(rng, &[c], 1.0)),
        ]),
        move |p| {
            let (y, cache) = ops::channel_norm_forward(&p["x"], &p["scale"], &p["shift"])?;
            let (gx, gs, gb) = ops::channel_norm_backward(&cache, &p["scale"], &r)?;
            Ok((y.dot(&r), inputs(vec![("x", gx), ("scale", gs), ("shift", gb)])))
        },
    )
}

/// Random guided-convolution setup with non-trivial offsets and mask.
struct SConvSetup {
    geom: ConvGeometry,
    c_in: usize,
    c_out: usize,
    hidden: usize,
    n: usize,
    h: usize,
    w: usize,
}

impl SConvSetup {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        SConvSetup {
            geom: ConvGeometry::square(3, rng.gen_range(1..=2), 1),
            c_in: 2,
            c_out: 2,
            hidden: rng.gen_range(2..=5),
            n: rng.gen_range(1..=2),
            h: 5,
            w: 5,
        }
    }

    fn params(&self, rng: &mut ChaCha8Rng) -> Vec<(&'static str, Tensor<f64>)> {
        let k = self.geom.taps();
        let d = PROJECTED_CHANNELS * k;
        vec![
            ("w", rand_tensor(rng, &[self.c_out, self.c_in, 3, 3], 1.0)),
            ("b", rand_tensor(rng, &[self.c_out], 1.0)),
            ("eta.w", rand_tensor(rng, &[2 * k, PROJECTED_CHANNELS, 3, 3], 0.06)),
            ("eta.b", rand_tensor(rng, &[2 * k], 0.7)),
            ("f.0.w", rand_tensor(rng, &[self.hidden, d], 0.1)),
            ("f.0.b", rand_tensor(rng, &[self.hidden], 0.5)),
            ("f.1.w", rand_tensor(rng, &[k, self.hidden], 1.0)),
            ("f.1.b", rand_tensor(rng, &[k], 0.5)),
        ]
    }

    fn state(&self, p: &Inputs) -> SConvState<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = SConvState::new("", self.c_in, self.c_out, self.geom, self.hidden, true, &mut rng);
        s.visit_params_mut(&mut |param| {
            if let Some(v) = p.get(&param.name) {
                param.value = v.clone();
            }
        });
        s
    }

    fn out_shape(&self) -> [usize; 4] {
        let (oh, ow) = self.geom.output_extent(self.h, self.w).unwrap();
        [self.n, self.c_out, oh, ow]
    }
}

fn sconv_grads(g: crate::sconv::SConvGrads<f64>) -> Vec<(&'static str, Tensor<f64>)> {
    vec![
        ("w", g.weight),
        ("b", g.bias.unwrap()),
        ("eta.w", g.eta_w),
        ("eta.b", g.eta_b),
        ("f.0.w", g.f0_w),
        ("f.0.b", g.f0_b),
        ("f.1.w", g.f1_w),
        ("f.1.b", g.f1_b),
    ]
}

fn sconv_instance(rng: &mut ChaCha8Rng) -> Instance {
    let s = SConvSetup::random(rng);
    let r = rand_tensor(rng, &s.out_shape(), 1.0);
    let mut items = s.params(rng);
    items.push(("x", rand_tensor(rng, &[s.n, s.c_in, s.h, s.w], 1.0)));
    items.push(("spatial", Tensor::from_fn(&[s.n, PROJECTED_CHANNELS, s.h, s.w], |_| rng.gen_range(0.0..1.0))));
    Instance::new(inputs(items), move |p| {
        let mut st = s.state(p);
        let sp = ProjectedSpatial::new(p["spatial"].clone(), SpatialSource::Depth)?;
        let y = st.forward(&p["x"], &sp, true)?;
        let g = st.backward(&r)?;
        let (gx, gsp) = (g.input.clone(), g.spatial.clone());
        let mut out = sconv_grads(g);
        out.push(("x", gx));
        out.push(("spatial", gsp));
        Ok((y.dot(&r), inputs(out)))
    })
}

/// Raw depth through the spatial projector into a guided convolution: checks the projector
/// parameters and the raw spatial input via the full chain.
fn projector_instance(rng: &mut ChaCha8Rng) -> Instance {
    let s = SConvSetup::random(rng);
    let r = rand_tensor(rng, &s.out_shape(), 1.0);
    let mut proj_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let proj = SpatialProjector::<f64>::new("phi", SpatialSource::Depth, &mut proj_rng);
    let mut items: Vec<(String, Tensor<f64>)> = Vec::new();
    proj.visit_params(&mut |param| {
        // Positive biases keep most projector units active so every layer carries gradient.
        let v = if param.name.ends_with(".b") {
            Tensor::from_fn(param.value.shape(), |_| proj_rng.gen_range(0.05..0.3))
        } else {
            param.value.clone()
        };
        items.push((param.name.clone(), v));
    });
    let host = s.params(rng);
    let x = rand_tensor(rng, &[s.n, s.c_in, s.h, s.w], 1.0);
    items.push(("depth".into(), Tensor::from_fn(&[s.n, 1, s.h, s.w], |_| rng.gen_range(0.5..3.0))));
    let fixed: Inputs = host.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    Instance::new(items.into_iter().collect(), move |p| {
        let mut pr = proj.clone();
        pr.visit_params_mut(&mut |param| param.value = p[&param.name].clone());
        let sp = pr.forward(&p["depth"], true)?;
        let mut st = s.state(&fixed);
        let y = st.forward(&x, &sp, true)?;
        let (_, gsp) = st.backward_accumulate(&r)?;
        let gdepth = pr.backward(&gsp)?;
        let mut out = Inputs::new();
        pr.visit_params(&mut |param| {
            out.insert(param.name.clone(), param.grad.clone());
        });
        out.insert("depth".into(), gdepth);
        Ok((y.dot(&r), out))
    })
}
