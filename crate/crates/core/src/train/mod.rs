//! Training: poly schedule, momentum SGD, joint RGB/depth/label augmentation, class weighting,
//! and the fit/evaluate loops.

mod augment;
mod fit;
mod optim;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::OUTPUT_STRIDE;

pub use augment::{augment, apply_transform, sample_transform, AugmentedSample, Transform};
pub use fit::{
    evaluate, fit, predict, prepare_eval_input, Batch, Dataset, EpochRecord, FitOptions, FitReport, StepStats, Trainer,
    TrainState,
};
pub use optim::{compute_class_weights, poly_lr, sgd_step, ClassWeights, SgdState};

/// How often the poly schedule advances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrStepGranularity {
    /// Every iteration.
    #[default]
    Iteration,
    /// Held constant within blocks of `lr_step_epochs` epochs.
    Epochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub poly_power: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Training crop `[h, w]`; both multiples of 16.
    pub crop: [usize; 2],
    pub scale_range: [f64; 2],
    pub hflip_prob: f64,
    pub aux_weight: f64,
    /// Median-frequency class balancing from the training label histogram.
    pub class_reweight: bool,
    pub seed: u64,
    pub lr_step_granularity: LrStepGranularity,
    pub lr_step_epochs: usize,
    /// Standardise each spatial channel per image before the projector.
    pub normalize_spatial: bool,
    /// Evaluate on the held-out split every this many epochs (and after the last).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 5e-3,
            poly_power: 0.9,
            weight_decay: 5e-4,
            momentum: 0.9,
            batch_size: 8,
            epochs: 30,
            crop: [64, 64],
            scale_range: [0.75, 1.25],
            hflip_prob: 0.5,
            aux_weight: 0.4,
            class_reweight: false,
            seed: 0,
            lr_step_granularity: LrStepGranularity::Iteration,
            lr_step_epochs: 40,
            normalize_spatial: true,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        // A zero rate is allowed: it freezes the parameters, which is a useful check.
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr {} must be finite and non-negative", self.base_lr));
        }
        if !(self.poly_power >= 0.0 && self.weight_decay >= 0.0 && (0.0..1.0).contains(&self.momentum)) {
            return bad("poly_power >= 0, weight_decay >= 0 and momentum in [0, 1) required".into());
        }
        if self.batch_size == 0 || self.epochs == 0 || self.eval_every == 0 || self.lr_step_epochs == 0 {
            return bad("batch_size, epochs, eval_every and lr_step_epochs must be positive".into());
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("scale_range {:?} must be positive and ordered", self.scale_range));
        }
        if self.crop.iter().any(|&c| c == 0 || c % OUTPUT_STRIDE != 0) {
            return bad(format!("crop {:?} must be positive multiples of {OUTPUT_STRIDE}", self.crop));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) || !(self.aux_weight >= 0.0) {
            return bad("hflip_prob in [0, 1] and aux_weight >= 0 required".into());
        }
        Ok(())
    }

    /// Learning rate for `iteration` out of `max_iter`, honouring the step granularity.
    pub fn lr_at(&self, iteration: usize, max_iter: usize, steps_per_epoch: usize) -> f64 {
        let it = match self.lr_step_granularity {
            LrStepGranularity::Iteration => iteration,
            LrStepGranularity::Epochs => {
                let block = self.lr_step_epochs * steps_per_epoch.max(1);
                iteration / block * block
            }
        };
        poly_lr(it, max_iter, self.base_lr, self.poly_power)
    }
}
