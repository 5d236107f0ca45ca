//! Mini-batch Adam training with a seeded, schedule-independent reduction.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::loss::{sample_loss, sample_loss_grad};
use crate::model::CorrectorModel;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Squared Euclidean distance.
    #[default]
    Euclidean,
}

/// Learning-rate schedule over epochs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Constant,
    /// Half-cosine decay from `learning_rate` to zero over the run.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub adam_betas: (f64, f64),
    pub seed: u64,
    pub loss: LossKind,
    pub mask_loss: bool,
    /// Share of the dataset held out for the validation loss.
    pub val_fraction: f64,
    /// Random square training crops of this side; full slices when unset.
    pub crop: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 4,
            learning_rate: 1e-3,
            schedule: Schedule::Constant,
            adam_betas: (0.9, 0.999),
            seed: 0,
            loss: LossKind::Euclidean,
            mask_loss: true,
            val_fraction: 0.125,
            crop: None,
        }
    }
}

impl TrainConfig {
    /// `learning_rate = 0` is accepted as a frozen run.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} is not usable", self.learning_rate)));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::InvalidArgument("Adam betas must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidArgument("val_fraction must lie in [0, 1)".into()));
        }
        if self.crop == Some(0) {
            return Err(Error::InvalidArgument("crop size must be positive".into()));
        }
        Ok(())
    }
}

/// Training pairs sharing one echo schedule.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub times: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when nothing is held out.
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for r in &self.epochs {
            let val = r.val_loss.map(|v| format!("{v:.9e}")).unwrap_or_default();
            out.push_str(&format!("{},{:.9e},{}\n", r.epoch, r.train_loss, val));
        }
        out
    }
}

pub struct Adam {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64, betas: (f64, f64)) -> Self {
        Self { lr, b1: betas.0, b2: betas.1, eps: 1e-8, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.b1.powi(self.t);
        let c2 = 1.0 - self.b2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * grad[i];
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

fn unmasked(s: &Sample) -> Sample {
    Sample { mask: vec![true; s.mask.len()], ..s.clone() }
}

/// Trains a copy of `model`. See [`train_with`].
pub fn train(model: &CorrectorModel, data: &Dataset, cfg: &TrainConfig) -> Result<(CorrectorModel, History)> {
    train_with(model, data, cfg, |_| {})
}

/// Trains a copy of `model`, calling `on_epoch` after every epoch.
///
/// A seeded shuffle splits off the validation samples once; each epoch then
/// reshuffles the training samples. Per-sample gradients may be computed in
/// parallel but are summed in batch order, so the result does not depend on
/// the thread count.
pub fn train_with(
    model: &CorrectorModel,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(CorrectorModel, History)> {
    cfg.validate()?;
    if data.samples.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let samples: Vec<Sample> =
        if cfg.mask_loss { data.samples.clone() } else { data.samples.iter().map(unmasked).collect() };
    let depth_mult = 1usize << model.depth();
    if let Some(c) = cfg.crop {
        if c % depth_mult != 0 {
            return Err(Error::InvalidArgument(format!("crop {c} must be a multiple of {depth_mult}")));
        }
        if samples.iter().any(|s| s.input.shape()[1] < c || s.input.shape()[2] < c) {
            return Err(Error::InvalidArgument(format!("crop {c} exceeds a slice")));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((samples.len() as f64 * cfg.val_fraction).floor() as usize).min(samples.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let (val_idx, mut train_idx) = (val_idx.to_vec(), train_idx.to_vec());

    let mut model = model.clone();
    let mut adam = Adam::new(model.n_params(), cfg.learning_rate, cfg.adam_betas);
    let mut history = History::default();
    let times = &data.times;

    for epoch in 1..=cfg.epochs {
        let lr = match cfg.schedule {
            Schedule::Constant => cfg.learning_rate,
            Schedule::Cosine => {
                let progress = (epoch - 1) as f64 / cfg.epochs as f64;
                0.5 * cfg.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        };
        adam.set_learning_rate(lr);
        train_idx.shuffle(&mut rng);
        let mut losses = vec![0.0; samples.len()];
        for batch in train_idx.chunks(cfg.batch_size) {
            let inputs: Vec<(usize, Sample)> = batch
                .iter()
                .map(|&i| {
                    let s = &samples[i];
                    let s = match cfg.crop {
                        Some(c) => {
                            let y0 = rng.random_range(0..=s.input.shape()[1] - c);
                            let z0 = rng.random_range(0..=s.input.shape()[2] - c);
                            s.crop(y0, z0, c, c)
                        }
                        None => s.clone(),
                    };
                    (i, s)
                })
                .collect();
            let results: Vec<Result<(f64, Vec<f64>)>> =
                inputs.par_iter().map(|(_, s)| sample_loss_grad(&model, s, times)).collect();
            let mut grad = vec![0.0; model.n_params()];
            for ((i, _), r) in inputs.iter().zip(results) {
                let (loss, g) = r?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, learning_rate: cfg.learning_rate, loss });
                }
                losses[*i] = loss;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            adam.step(&mut model.params, &grad);
        }
        if model.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged { epoch, learning_rate: cfg.learning_rate, loss: f64::NAN });
        }
        let mut sorted_train = train_idx.clone();
        sorted_train.sort_unstable();
        let train_loss = sorted_train.iter().map(|&i| losses[i]).sum::<f64>() / sorted_train.len() as f64;
        let val_loss = if val_idx.is_empty() {
            None
        } else {
            let vals: Vec<Result<f64>> =
                val_idx.par_iter().map(|&i| sample_loss(&model, &samples[i], times)).collect();
            let mut total = 0.0;
            for v in vals {
                total += v?;
            }
            let mean = total / val_idx.len() as f64;
            if !mean.is_finite() {
                return Err(Error::Diverged { epoch, learning_rate: cfg.learning_rate, loss: mean });
            }
            Some(mean)
        };
        let rec = EpochRecord { epoch, train_loss, val_loss };
        on_epoch(&rec);
        history.epochs.push(rec);
    }
    Ok((model, history))
}
