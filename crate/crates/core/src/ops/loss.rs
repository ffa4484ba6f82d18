use crate::error::{dim_err, Error, Result};
use crate::tensor::{LabelMap, Real, Tensor};

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: T,
    pub grad: Tensor<T>,
    /// Number of pixels that contributed (label != ignore).
    pub counted: usize,
    /// Set when every pixel carried the ignore label; loss and gradient are then zero.
    pub all_ignored: bool,
}

/// Mean (over non-ignored pixels of the whole batch) of the weighted negative log-softmax.
///
/// `logits` is `[N, p_c, h, w]`; `labels` holds one map per sample.
pub fn softmax_cross_entropy_batch<T: Real>(
    logits: &Tensor<T>,
    labels: &[LabelMap],
    ignore_label: u8,
    class_weights: Option<&Tensor<T>>,
) -> Result<LossOutput<T>> {
    let (n, pc, h, w) = logits.nchw()?;
    if labels.len() != n {
        return Err(dim_err!("{} label maps for a batch of {n}", labels.len()));
    }
    if let Some(cw) = class_weights {
        if cw.shape() != [pc] {
            return Err(dim_err!("class weights {:?} for {pc} classes", cw.shape()));
        }
    }
    let hw = h * w;
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = T::zero();
    let mut counted = 0usize;
    let x = logits.data();
    let mut probs = vec![T::zero(); pc];
    for (ni, lab) in labels.iter().enumerate() {
        if (lab.height, lab.width) != (h, w) {
            return Err(dim_err!(
                "label map {}x{} does not match logits {h}x{w}",
                lab.height,
                lab.width
            ));
        }
        for px in 0..hw {
            let y = lab.data[px];
            if y == ignore_label {
                continue;
            }
            let y = y as usize;
            if y >= pc {
                return Err(Error::Data(format!("label {y} outside [0, {pc})")));
            }
            let base = ni * pc * hw + px;
            let mut mx = T::neg_infinity();
            for c in 0..pc {
                mx = mx.max(x[base + c * hw]);
            }
            let mut z = T::zero();
            for c in 0..pc {
                let e = (x[base + c * hw] - mx).exp();
                probs[c] = e;
                z += e;
            }
            let wt = class_weights.map_or(T::one(), |cw| cw.data()[y]);
            total += wt * (z.ln() - (x[base + y * hw] - mx));
            let g = grad.data_mut();
            for c in 0..pc {
                let p = probs[c] / z;
                let ind = if c == y { T::one() } else { T::zero() };
                g[base + c * hw] = wt * (p - ind);
            }
            counted += 1;
        }
    }
    if counted == 0 {
        return Ok(LossOutput {
            loss: T::zero(),
            grad,
            counted,
            all_ignored: true,
        });
    }
    let inv = T::one() / T::lit(counted as f64);
    grad.data_mut().iter_mut().for_each(|v| *v *= inv);
    Ok(LossOutput {
        loss: total * inv,
        grad,
        counted,
        all_ignored: false,
    })
}

/// Single-sample form over `[p_c, h, w]` logits.
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    labels: &LabelMap,
    ignore_label: u8,
    class_weights: Option<&Tensor<T>>,
) -> Result<LossOutput<T>> {
    logits.chw()?;
    let out = softmax_cross_entropy_batch(
        &logits.clone().unsqueeze0(),
        std::slice::from_ref(labels),
        ignore_label,
        class_weights,
    )?;
    Ok(LossOutput {
        grad: out.grad.squeeze0()?,
        ..out
    })
}
