//! Masked-pixel regression pretext task.
//!
//! A fixed fraction of pixels per image is replaced (not perturbed) by
//! Gaussian noise, and the model is trained to restore the original values
//! under an L1 loss that only looks at the replaced pixels.

use rand::seq::index;
use rand_distr::{Distribution, Normal};

use crate::model::{HeadKind, ModelError, ModelParams};
use crate::rng::{self, Rng};
use crate::tensor::{AdamConfig, AdamState, Real, Result as TensorResult, Tape, Tensor, Var};
use crate::train::{EpochRecord, PlateauScheduler, Result, ScheduleConfig, TrainError};
use crate::par;

#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionConfig {
    pub fraction: f64,
    /// Standard deviation of the replacement noise.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self { fraction: 0.10, sigma: 0.01, seed: 0 }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(TrainError::InvalidConfig(format!("corruption fraction {} outside [0,1]", self.fraction)));
        }
        if !(self.sigma > 0.0) {
            return Err(TrainError::InvalidConfig(format!("corruption sigma {} must be positive", self.sigma)));
        }
        Ok(())
    }

    /// Number of replaced pixels in an `h`x`w` image.
    pub fn masked_count(&self, h: usize, w: usize) -> usize {
        (self.fraction * (h * w) as f64).round() as usize
    }
}

/// Binary indicator of replaced pixels, shaped like the image batch.
#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionMask<T> {
    pub mask: Tensor<T>,
}

impl<T: Real> CorruptionMask<T> {
    pub fn popcount(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v != T::zero()).count()
    }

    pub fn stack(masks: &[CorruptionMask<T>]) -> TensorResult<Self> {
        let parts: Vec<Tensor<T>> = masks.iter().map(|m| m.mask.clone()).collect();
        Ok(Self { mask: Tensor::stack(&parts)? })
    }
}

/// Replaces exactly `round(fraction*H*W)` distinct pixels of every image in
/// `x: [B,1,H,W]` with draws from `N(0, sigma^2)`.
pub fn corrupt_image<T: Real>(x: &Tensor<T>, config: &CorruptionConfig, rng: &mut Rng) -> (Tensor<T>, CorruptionMask<T>) {
    let [b, c, h, w] = x.dims4().expect("corrupt_image expects [B,C,H,W]");
    let hw = h * w;
    let count = config.masked_count(h, w);
    let noise = Normal::new(0.0, config.sigma).expect("sigma validated");
    let mut out = x.clone();
    let mut mask = Tensor::zeros(x.shape().to_vec());
    for bi in 0..b {
        for pix in index::sample(rng, hw, count) {
            for ci in 0..c {
                let i = (bi * c + ci) * hw + pix;
                out.data_mut()[i] = T::lit(noise.sample(rng));
                mask.data_mut()[i] = T::one();
            }
        }
    }
    (out, CorruptionMask { mask })
}

/// Mean absolute error over masked pixels only. Pixels outside the mask get
/// an exactly zero gradient.
pub fn masked_l1_loss<T: Real>(
    tape: &mut Tape<T>,
    recon: Var,
    reference: &Tensor<T>,
    mask: &CorruptionMask<T>,
) -> TensorResult<Var> {
    let neg_ref = reference.map(|v| -v);
    let diff = tape.add_const(recon, &neg_ref)?;
    let abs = tape.abs(diff);
    let masked = tape.mul_const(abs, &mask.mask)?;
    let total = tape.sum(masked);
    let count = mask.popcount();
    if count == 0 {
        log::warn!("masked_l1_loss: empty corruption mask, loss is 0");
        return Ok(tape.affine(total, T::zero(), T::zero()));
    }
    Ok(tape.affine(total, T::one() / T::from_usize_lossy(count), T::zero()))
}

pub struct PretrainOutcome<T> {
    pub params: ModelParams<T>,
    pub history: Vec<EpochRecord>,
    pub steps: usize,
}

/// Trains backbone and reconstruction head jointly on freshly corrupted
/// copies of `images` (each `[1,1,H,W]`). Masks are redrawn every epoch.
pub fn pretrain_regression<T: Real>(
    model: &ModelParams<T>,
    images: &[Tensor<T>],
    corruption: &CorruptionConfig,
    schedule: &ScheduleConfig,
) -> Result<PretrainOutcome<T>> {
    if images.is_empty() {
        return Err(TrainError::EmptyDataset("unlabeled"));
    }
    schedule.validate()?;
    corruption.validate()?;
    if model.head() != Some(HeadKind::Regression) {
        return Err(ModelError::HeadNotAttached {
            expected: HeadKind::Regression,
            actual: model.head().map_or("no head".into(), |h| h.to_string()),
        }
        .into());
    }
    let mut params = model.clone();
    let mut adam = AdamState::new(AdamConfig::with_lr(schedule.initial_lr), params.tensors());
    let mut scheduler = PlateauScheduler::new(schedule);
    let mut history = Vec::with_capacity(schedule.epochs);
    let mut steps = 0;
    for epoch in 0..schedule.epochs {
        let lr = scheduler.lr();
        let mut total = 0.0;
        let batches = schedule.epoch_batches(images.len(), epoch);
        for batch in &batches {
            let corrupted: Vec<(Tensor<T>, CorruptionMask<T>)> = par::map_indexed(batch.len(), |j| {
                let id = batch[j] as u64;
                let mut r = rng::stream(corruption.seed, &[rng::key("corrupt"), id, epoch as u64]);
                corrupt_image(&images[batch[j]], corruption, &mut r)
            });
            let refs: Vec<Tensor<T>> = batch.iter().map(|&i| images[i].clone()).collect();
            let x_hat = Tensor::stack(&corrupted.iter().map(|c| c.0.clone()).collect::<Vec<_>>())?;
            let mask = CorruptionMask::stack(&corrupted.iter().map(|c| c.1.clone()).collect::<Vec<_>>())?;
            let reference = Tensor::stack(&refs)?;

            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, |_| true);
            let xv = tape.constant(x_hat);
            let out = params.forward(&mut tape, &bound, xv)?;
            let loss = masked_l1_loss(&mut tape, out.head_output, &reference, &mask)?;
            let value = tape.value(loss).item().to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() {
                let origin = tape.non_finite_origin().unwrap_or("loss");
                return Err(TrainError::NonFiniteLoss { epoch, origin });
            }
            tape.backward(loss)?;
            let grads = bound.gradients(&mut tape);
            adam.step(params.tensors_mut(), &grads)?;
            total += value;
            steps += 1;
        }
        let train_loss = total / batches.len() as f64;
        history.push(EpochRecord { epoch, train_loss, val_loss: f64::NAN, lr });
        let next = scheduler.step(train_loss);
        adam.set_learning_rate(next);
        log::debug!("regression epoch {epoch}: loss {train_loss:.5} lr {lr:.2e}");
    }
    Ok(PretrainOutcome { params, history, steps })
}
