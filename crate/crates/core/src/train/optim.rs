use crate::error::{Error, Result};
use crate::layers::Parameterized;
use crate::tensor::{Real, Tensor};

/// `base_lr * (1 - iter / max_iter)^power`, and 0 from `max_iter` on.
pub fn poly_lr(iter: usize, max_iter: usize, base_lr: f64, power: f64) -> f64 {
    if iter >= max_iter {
        return 0.0;
    }
    base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power)
}

/// Momentum buffers, one per parameter in visiting order.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<T> {
    pub names: Vec<String>,
    pub buffers: Vec<Tensor<T>>,
}

impl<T: Real> SgdState<T> {
    /// Zero buffers mirroring every parameter of `model`.
    pub fn new(model: &impl Parameterized<T>) -> Self {
        let (mut names, mut buffers) = (Vec::new(), Vec::new());
        model.visit_params(&mut |p| {
            names.push(p.name.clone());
            buffers.push(Tensor::zeros(p.value.shape()));
        });
        SgdState { names, buffers }
    }
}

/// One step of `v <- momentum * v + g + wd * p; p <- p - lr * v`. Weight decay skips parameters
/// flagged `decay = false` (the normalisation scales and shifts).
pub fn sgd_step<T: Real>(
    model: &mut impl Parameterized<T>,
    state: &mut SgdState<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let (lr, mom) = (T::lit(lr), T::lit(momentum));
    let mut i = 0;
    let mut err = None;
    model.visit_params_mut(&mut |p| {
        if err.is_some() {
            return;
        }
        let Some(v) = state.buffers.get_mut(i) else {
            err = Some(Error::State(format!("no momentum buffer for {}", p.name)));
            return;
        };
        if state.names[i] != p.name || v.shape() != p.value.shape() {
            err = Some(Error::State(format!(
                "momentum buffer {} {:?} does not mirror parameter {} {:?}",
                state.names[i],
                v.shape(),
                p.name,
                p.value.shape()
            )));
            return;
        }
        let wd = T::lit(if p.decay { weight_decay } else { 0.0 });
        for ((vj, &gj), pj) in v.data_mut().iter_mut().zip(p.grad.data()).zip(p.value.data_mut()) {
            *vj = mom * *vj + gj + wd * *pj;
            *pj = *pj - lr * *vj;
        }
        i += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if i != state.buffers.len() {
        return Err(Error::State(format!("{} momentum buffers for {i} parameters", state.buffers.len())));
    }
    Ok(())
}

/// Median-frequency weights and the classes that never occur.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub absent: Vec<usize>,
}

/// `w_c = median(freq) / freq_c`, the median taken over classes that occur; absent classes get 0.
pub fn compute_class_weights(histogram: &[u64]) -> Result<ClassWeights> {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return Err(Error::Data("class histogram is empty".into()));
    }
    let freq: Vec<f64> = histogram.iter().map(|&c| c as f64 / total as f64).collect();
    let mut present: Vec<f64> = freq.iter().copied().filter(|&f| f > 0.0).collect();
    present.sort_by(f64::total_cmp);
    let n = present.len();
    let median = if n % 2 == 1 {
        present[n / 2]
    } else {
        (present[n / 2 - 1] + present[n / 2]) / 2.0
    };
    let absent: Vec<usize> = (0..freq.len()).filter(|&c| histogram[c] == 0).collect();
    if !absent.is_empty() {
        log::warn!("classes {absent:?} never occur in the training labels; their loss weight is 0");
    }
    Ok(ClassWeights {
        weights: freq.iter().map(|&f| if f > 0.0 { median / f } else { 0.0 }).collect(),
        absent,
    })
}
