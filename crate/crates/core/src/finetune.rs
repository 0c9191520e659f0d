//! Supervised finetuning with a soft multi-class Dice loss, plus volume-level
//! Dice evaluation.

use rand::Rng as _;

use crate::augment::{bilinear, elastic_field, nearest, CropBox};
use crate::model::{HeadKind, ModelError, ModelParams};
use crate::par;
use crate::rng::{self, Rng};
use crate::tensor::{invalid, AdamConfig, AdamState, Real, Result as TensorResult, Tape, Tensor, Var};
use crate::train::{EpochRecord, PlateauScheduler, Result, ScheduleConfig, TrainError};

pub use crate::train::PlateauScheduler as LrSchedule;

const DICE_EPS: f64 = 1e-5;

/// One labeled slice.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample<T> {
    /// `[1,1,H,W]` in `[0,1]`.
    pub image: Tensor<T>,
    /// Row-major class indices, `H*W` entries.
    pub labels: Vec<u8>,
}

impl<T: Real> SegSample<T> {
    pub fn new(image: Tensor<T>, labels: Vec<u8>) -> TensorResult<Self> {
        let [_, _, h, w] = image.dims4().ok_or_else(|| invalid("seg_sample", "image must be [1,C,H,W]"))?;
        if labels.len() != h * w {
            return Err(invalid("seg_sample", format!("{} labels for {h}x{w} image", labels.len())));
        }
        Ok(Self { image, labels })
    }

    pub fn dims(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s[2], s[3])
    }
}

/// `1 - mean_c (2 sum p g + eps) / (sum p + sum g + eps)` over foreground
/// classes `c >= 1`, with `p` the per-pixel softmax and `g` the one-hot
/// labels; sums run over the whole batch.
pub fn dice_loss<T: Real>(tape: &mut Tape<T>, scores: Var, labels: &[u8]) -> TensorResult<Var> {
    let [b, c, h, w] = tape.value(scores).dims4().ok_or_else(|| invalid("dice_loss", "scores must be [B,C,H,W]"))?;
    let hw = h * w;
    if labels.len() != b * hw {
        return Err(invalid("dice_loss", format!("{} labels for {b}x{h}x{w} scores", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(invalid("dice_loss", format!("label {bad} not below class count {c}")));
    }
    let mut onehot = Tensor::zeros([b, c, h, w]);
    let mut gsum = vec![T::zero(); c];
    for (i, &l) in labels.iter().enumerate() {
        let (bi, pix) = (i / hw, i % hw);
        onehot.data_mut()[(bi * c + l as usize) * hw + pix] = T::one();
        gsum[l as usize] = gsum[l as usize] + T::one();
    }
    let eps = T::lit(DICE_EPS);
    let p = tape.softmax_axis1(scores)?;
    let pg = tape.mul_const(p, &onehot)?;
    let inter = tape.sum_per_channel(pg)?;
    let psum = tape.sum_per_channel(p)?;
    let numer = tape.affine(inter, T::lit(2.0), eps);
    let denom = tape.affine(psum, T::one(), eps);
    let denom = tape.add_const(denom, &Tensor::new([c], gsum)?)?;
    let ratio = tape.div(numer, denom)?;
    let fg = tape.narrow(ratio, 1, c - 1)?;
    let mean = tape.mean(fg);
    Ok(tape.affine(mean, -T::one(), T::one()))
}

/// Intersection and set sizes for one class, accumulable across slices.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DiceCounts {
    pub intersection: u64,
    pub predicted: u64,
    pub truth: u64,
}

impl DiceCounts {
    pub fn from_maps(pred: &[u8], truth: &[u8], class: u8) -> Self {
        let mut c = DiceCounts::default();
        for (&p, &g) in pred.iter().zip(truth) {
            let (ip, ig) = (p == class, g == class);
            c.predicted += ip as u64;
            c.truth += ig as u64;
            c.intersection += (ip && ig) as u64;
        }
        c
    }

    pub fn add(&mut self, other: DiceCounts) {
        self.intersection += other.intersection;
        self.predicted += other.predicted;
        self.truth += other.truth;
    }

    /// `2|P∩G| / (|P|+|G|)`, and 1 when both sets are empty.
    pub fn dice(&self) -> f64 {
        if self.predicted + self.truth == 0 {
            return 1.0;
        }
        2.0 * self.intersection as f64 / (self.predicted + self.truth) as f64
    }
}

pub fn dice_score(pred: &[u8], truth: &[u8], class: u8) -> f64 {
    assert_eq!(pred.len(), truth.len(), "dice_score: label maps differ in size");
    DiceCounts::from_maps(pred, truth, class).dice()
}

/// Per-pixel argmax over classes; ties resolve to the lowest class index.
pub fn argmax_labels<T: Real>(scores: &Tensor<T>) -> Vec<u8> {
    let [b, c, h, w] = scores.dims4().expect("scores [B,C,H,W]");
    let hw = h * w;
    let d = scores.data();
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for pix in 0..hw {
            let mut best = 0;
            for ch in 1..c {
                if d[(bi * c + ch) * hw + pix] > d[(bi * c + best) * hw + pix] {
                    best = ch;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneAugmentConfig {
    /// Maximum shift as a fraction of the image extent.
    pub translate: f64,
    /// Area fraction range of the random crop (resized back).
    pub crop_scale: (f64, f64),
    /// Smoothing of the displacement field, pixels.
    pub elastic_sigma: f64,
    /// Peak displacement, pixels.
    pub elastic_alpha: f64,
}

impl Default for FinetuneAugmentConfig {
    fn default() -> Self {
        Self { translate: 0.10, crop_scale: (0.8, 1.0), elastic_sigma: 8.0, elastic_alpha: 10.0 }
    }
}

impl FinetuneAugmentConfig {
    pub fn identity() -> Self {
        Self { translate: 0.0, crop_scale: (1.0, 1.0), elastic_sigma: 8.0, elastic_alpha: 0.0 }
    }
}

/// Random translation, crop-and-resize and elastic deformation applied as one
/// resampling: bilinear for the image, nearest-neighbour for labels.
pub fn augment_finetune<T: Real>(sample: &SegSample<T>, config: &FinetuneAugmentConfig, rng: &mut Rng) -> SegSample<T> {
    let (h, w) = sample.dims();
    let shift = |extent: usize, rng: &mut Rng| {
        let m = config.translate * extent as f64;
        if m > 0.0 {
            rng.random_range(-m..=m)
        } else {
            0.0
        }
    };
    let (ty, tx) = (shift(h, rng), shift(w, rng));
    let crop = CropBox::random(h, w, config.crop_scale, rng);
    let (dy, dx) = elastic_field(h, w, config.elastic_sigma, config.elastic_alpha, rng);

    let channels = sample.image.shape()[1];
    let mut image = Tensor::zeros(sample.image.shape().to_vec());
    let mut labels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (ey, ex) = (y as f64 + dy[i], x as f64 + dx[i]);
            let (cy, cx) = crop.to_source(ey, ex, h, w);
            let (sy, sx) = (cy - ty, cx - tx);
            for ch in 0..channels {
                let plane = &sample.image.data()[ch * h * w..(ch + 1) * h * w];
                let v = bilinear(plane, h, w, sy, sx, T::zero());
                image.data_mut()[ch * h * w + i] = v.max(T::zero()).min(T::one());
            }
            labels[i] = nearest(&sample.labels, h, w, sy, sx, 0u8);
        }
    }
    SegSample { image, labels }
}

/// Training-time knobs beyond the schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneOptions {
    /// `None` disables augmentation.
    pub augment: Option<FinetuneAugmentConfig>,
    /// Train on random square crops of this size (after augmentation).
    pub train_crop: Option<usize>,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        Self { augment: Some(FinetuneAugmentConfig::default()), train_crop: None }
    }
}

pub struct FinetuneOutcome<T> {
    /// Parameters at the epoch with the lowest monitored loss.
    pub params: ModelParams<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

fn random_crop<T: Real>(s: &SegSample<T>, size: usize, rng: &mut Rng) -> SegSample<T> {
    let (h, w) = s.dims();
    if size >= h && size >= w {
        return s.clone();
    }
    let (ch, cw) = (size.min(h), size.min(w));
    let top = rng.random_range(0..=h - ch);
    let left = rng.random_range(0..=w - cw);
    let c = s.image.shape()[1];
    let mut data = Vec::with_capacity(c * ch * cw);
    for plane in s.image.data().chunks(h * w) {
        for y in top..top + ch {
            data.extend_from_slice(&plane[y * w + left..y * w + left + cw]);
        }
    }
    let mut labels = Vec::with_capacity(ch * cw);
    for y in top..top + ch {
        labels.extend_from_slice(&s.labels[y * w + left..y * w + left + cw]);
    }
    SegSample { image: Tensor::new([1, c, ch, cw], data).expect("crop dims"), labels }
}

fn batch_tensors<T: Real>(samples: &[SegSample<T>]) -> TensorResult<(Tensor<T>, Vec<u8>)> {
    let images: Vec<Tensor<T>> = samples.iter().map(|s| s.image.clone()).collect();
    let labels = samples.iter().flat_map(|s| s.labels.iter().copied()).collect();
    Ok((Tensor::stack(&images)?, labels))
}

/// Dice loss of `model` on `samples`, averaged over fixed batches.
pub fn evaluate_loss<T: Real>(model: &ModelParams<T>, samples: &[SegSample<T>], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let (x, labels) = batch_tensors(chunk)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, |_| false);
        let xv = tape.constant(x);
        let out = model.forward(&mut tape, &bound, xv)?;
        let loss = dice_loss(&mut tape, out.head_output, &labels)?;
        total += tape.value(loss).item().to_f64().unwrap_or(f64::NAN);
        n += 1;
    }
    Ok(total / n.max(1) as f64)
}

/// Adam + Dice training of a segmentation-headed model. The returned
/// parameters are those of the epoch with the lowest validation loss (train
/// loss when `val` is empty).
pub fn finetune<T: Real>(
    model: &ModelParams<T>,
    train: &[SegSample<T>],
    val: &[SegSample<T>],
    schedule: &ScheduleConfig,
    options: &FinetuneOptions,
) -> Result<FinetuneOutcome<T>> {
    if train.is_empty() {
        return Err(TrainError::EmptyDataset("labeled training"));
    }
    schedule.validate()?;
    if model.head() != Some(HeadKind::Segmentation) {
        return Err(ModelError::HeadNotAttached {
            expected: HeadKind::Segmentation,
            actual: model.head().map_or("no head".into(), |h| h.to_string()),
        }
        .into());
    }
    let mut params = model.clone();
    let mut adam = AdamState::new(AdamConfig::with_lr(schedule.initial_lr), params.tensors());
    let mut scheduler = PlateauScheduler::new(schedule);
    let mut history = Vec::with_capacity(schedule.epochs);
    let mut best = (f64::INFINITY, 0usize, params.clone());
    for epoch in 0..schedule.epochs {
        let lr = scheduler.lr();
        let batches = schedule.epoch_batches(train.len(), epoch);
        let mut total = 0.0;
        for batch in &batches {
            let samples: Vec<SegSample<T>> = par::map_indexed(batch.len(), |j| {
                let id = batch[j] as u64;
                let mut r = rng::stream(schedule.seed, &[rng::key("finetune-aug"), id, epoch as u64]);
                let s = match &options.augment {
                    Some(cfg) => augment_finetune(&train[batch[j]], cfg, &mut r),
                    None => train[batch[j]].clone(),
                };
                match options.train_crop {
                    Some(size) => random_crop(&s, size, &mut r),
                    None => s,
                }
            });
            let (x, labels) = batch_tensors(&samples)?;
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, |_| true);
            let xv = tape.constant(x);
            let out = params.forward(&mut tape, &bound, xv)?;
            let loss = dice_loss(&mut tape, out.head_output, &labels)?;
            let value = tape.value(loss).item().to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() {
                let origin = tape.non_finite_origin().unwrap_or("loss");
                return Err(TrainError::NonFiniteLoss { epoch, origin });
            }
            tape.backward(loss)?;
            let grads = bound.gradients(&mut tape);
            adam.step(params.tensors_mut(), &grads)?;
            total += value;
        }
        let train_loss = total / batches.len() as f64;
        let val_loss = if val.is_empty() { f64::NAN } else { evaluate_loss(&params, val, schedule.batch_size)? };
        let monitored = if val.is_empty() { train_loss } else { val_loss };
        if !monitored.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, origin: "validation loss" });
        }
        history.push(EpochRecord { epoch, train_loss, val_loss, lr });
        if monitored < best.0 {
            best = (monitored, epoch, params.clone());
        }
        adam.set_learning_rate(scheduler.step(monitored));
        log::debug!("finetune epoch {epoch}: train {train_loss:.4} val {val_loss:.4} lr {lr:.2e}");
    }
    Ok(FinetuneOutcome { params: best.2, history, best_epoch: best.1 })
}

/// Predicted label maps for a stack of slices.
pub fn predict<T: Real>(model: &ModelParams<T>, slices: &[Tensor<T>], batch_size: usize) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(slices.len());
    for chunk in slices.chunks(batch_size.max(1)) {
        let x = Tensor::stack(chunk)?;
        let scores = model.forward_segmentation(&x)?;
        let labels = argmax_labels(&scores);
        let per = labels.len() / chunk.len();
        out.extend(labels.chunks(per).map(<[u8]>::to_vec));
    }
    Ok(out)
}

/// Volume Dice per foreground class `1..num_classes`, with counts summed over
/// all slices before the ratio is taken.
pub fn volume_dice(pred: &[Vec<u8>], truth: &[Vec<u8>], num_classes: usize) -> Vec<f64> {
    (1..num_classes as u8)
        .map(|class| {
            let mut counts = DiceCounts::default();
            for (p, g) in pred.iter().zip(truth) {
                counts.add(DiceCounts::from_maps(p, g, class));
            }
            counts.dice()
        })
        .collect()
}

/// Predicts every slice of one subject and scores it against its labels.
pub fn evaluate_volume<T: Real>(model: &ModelParams<T>, slices: &[SegSample<T>]) -> Result<Vec<f64>> {
    let images: Vec<Tensor<T>> = slices.iter().map(|s| s.image.clone()).collect();
    let pred = predict(model, &images, 8)?;
    let truth: Vec<Vec<u8>> = slices.iter().map(|s| s.labels.clone()).collect();
    Ok(volume_dice(&pred, &truth, model.config().num_classes))
}
