//! Contrastive pretext task: temperature-scaled cosine-similarity loss over
//! augmented positive pairs, trained in two stages.
//!
//! Stage one trains the encoder and a global projection head on
//! whole-image embeddings. Stage two swaps in a per-pixel local head and
//! trains the decoder on average-pooled patch embeddings, where the positive
//! for a patch is the patch at the corresponding location of the other view
//! and every other sampled patch (same image or not) is a negative.

use rand::seq::index;
use rand::Rng as _;
use thiserror::Error;

use crate::augment::{bilinear, CropBox};
use crate::model::{is_decoder_param, is_encoder_param, is_head_param, HeadKind, ModelParams};
use crate::par;
use crate::rng::{self, Rng};
use crate::tensor::{AdamConfig, AdamState, Real, Tape, Tensor, TensorError, Var};
use crate::train::{EpochRecord, PlateauScheduler, ScheduleConfig, TrainError};

#[derive(Debug, Error)]
pub enum ContrastiveError {
    #[error("cosine similarity of a zero vector")]
    ZeroVector,
    #[error("anchor {anchor} has {available} entries in its denominator, need at least 2")]
    TooFewCandidates { anchor: usize, available: usize },
    #[error("requested {requested} patches per image but only {available} non-overlapping locations exist")]
    PatchCount { requested: usize, available: usize },
    #[error("positive index {index} out of range for {candidates} candidates")]
    BadPositive { index: usize, candidates: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub batch_size: usize,
    pub local_patch_size: usize,
    pub local_patches_per_image: usize,
    /// Keep encoder weights fixed during the local (decoder) stage.
    pub freeze_encoder: bool,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            batch_size: 16,
            local_patch_size: 3,
            local_patches_per_image: 16,
            freeze_encoder: true,
            seed: 0,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.temperature > 0.0) {
            return Err(TrainError::InvalidConfig(format!("temperature {} must be positive", self.temperature)));
        }
        if self.batch_size < 2 {
            return Err(TrainError::InvalidConfig(format!(
                "contrastive batch_size {} must be at least 2",
                self.batch_size
            )));
        }
        if self.local_patch_size % 2 == 0 {
            return Err(TrainError::InvalidConfig(format!("local_patch_size {} must be odd", self.local_patch_size)));
        }
        if self.local_patches_per_image == 0 {
            return Err(TrainError::InvalidConfig("local_patches_per_image must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationConfig {
    /// Area fraction range of the random crop (resized back to full size).
    pub crop_scale: (f64, f64),
    /// Additive brightness offset drawn from `[-brightness_delta, brightness_delta]`.
    pub brightness_delta: f64,
    pub contrast_factor: (f64, f64),
    /// Skip the crop so both views stay pixel-aligned.
    pub intensity_only: bool,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self { crop_scale: (0.7, 1.0), brightness_delta: 0.2, contrast_factor: (0.8, 1.25), intensity_only: false }
    }
}

impl AugmentationConfig {
    pub fn local_default() -> Self {
        Self { intensity_only: true, ..Self::default() }
    }

    pub fn identity() -> Self {
        Self { crop_scale: (1.0, 1.0), brightness_delta: 0.0, contrast_factor: (1.0, 1.0), intensity_only: false }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(TrainError::InvalidConfig(format!("crop_scale {:?} must satisfy 0 < lo <= hi <= 1", self.crop_scale)));
        }
        if self.brightness_delta < 0.0 {
            return Err(TrainError::InvalidConfig("brightness_delta must be non-negative".into()));
        }
        let (clo, chi) = self.contrast_factor;
        if !(clo > 0.0 && clo <= chi) {
            return Err(TrainError::InvalidConfig(format!("contrast_factor {:?} must satisfy 0 < lo <= hi", self.contrast_factor)));
        }
        Ok(())
    }
}

/// Crop windows of both views, in original-image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometryRecord {
    pub crop_a: CropBox,
    pub crop_b: CropBox,
    pub height: usize,
    pub width: usize,
}

impl GeometryRecord {
    pub fn identity(height: usize, width: usize) -> Self {
        let full = CropBox::full(height, width);
        Self { crop_a: full, crop_b: full, height, width }
    }

    /// Position in view b showing the same content as `(y, x)` in view a.
    pub fn a_to_b(&self, y: f64, x: f64) -> (f64, f64) {
        if self.crop_a == self.crop_b {
            return (y, x);
        }
        let (oy, ox) = self.crop_a.to_source(y, x, self.height, self.width);
        self.crop_b.from_source(oy, ox, self.height, self.width)
    }
}

fn uniform(lo: f64, hi: f64, rng: &mut Rng) -> f64 {
    if lo < hi {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn augment_view<T: Real>(x: &Tensor<T>, aug: &AugmentationConfig, rng: &mut Rng) -> (Tensor<T>, CropBox) {
    let [_, _, h, w] = x.dims4().expect("image [1,C,H,W]");
    let crop = if aug.intensity_only { CropBox::full(h, w) } else { CropBox::random(h, w, aug.crop_scale, rng) };
    let delta = T::lit(uniform(-aug.brightness_delta, aug.brightness_delta, rng));
    let factor = T::lit(uniform(aug.contrast_factor.0, aug.contrast_factor.1, rng));
    let cropped = if crop == CropBox::full(h, w) {
        x.clone()
    } else {
        let mut out = x.clone();
        for (plane_in, plane_out) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(h * w)) {
            for y in 0..h {
                for xx in 0..w {
                    let (sy, sx) = crop.to_source(y as f64, xx as f64, h, w);
                    plane_out[y * w + xx] = bilinear(plane_in, h, w, sy, sx, T::zero());
                }
            }
        }
        out
    };
    let bright = cropped.map(|v| v + delta);
    let n = T::from_usize_lossy(bright.numel());
    let mean = bright.data().iter().copied().sum::<T>() / n;
    // x*c + (1-c)*mean is exactly x when c == 1
    let offset = (T::one() - factor) * mean;
    let view = bright.map(|v| (v * factor + offset).max(T::zero()).min(T::one()));
    (view, crop)
}

/// Two independently augmented views of `x: [1,1,H,W]`, clamped to `[0,1]`.
pub fn make_positive_pair<T: Real>(
    x: &Tensor<T>,
    aug: &AugmentationConfig,
    rng: &mut Rng,
) -> (Tensor<T>, Tensor<T>, GeometryRecord) {
    let [_, _, h, w] = x.dims4().expect("image [1,C,H,W]");
    let (a, crop_a) = augment_view(x, aug, rng);
    let (b, crop_b) = augment_view(x, aug, rng);
    (a, b, GeometryRecord { crop_a, crop_b, height: h, width: w })
}

/// `u·v / (|u||v|)`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, ContrastiveError> {
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(ContrastiveError::ZeroVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Anchors, their candidate set, and which candidate is each anchor's
/// positive. Every other candidate is a negative for that anchor; the anchor
/// itself is never in its own denominator.
#[derive(Clone, Debug)]
pub struct EmbeddingBatch {
    pub anchors: Var,
    pub candidates: Var,
    pub positive_index: Vec<usize>,
}

impl EmbeddingBatch {
    /// In-batch pairing: anchor `i` is positive with candidate `i`.
    pub fn paired(anchors: Var, candidates: Var, n: usize) -> Self {
        Self { anchors, candidates, positive_index: (0..n).collect() }
    }

    pub fn swapped(&self) -> Self {
        Self { anchors: self.candidates, candidates: self.anchors, positive_index: self.positive_index.clone() }
    }
}

/// Mean over anchors of `-log(exp(D(a,p)/t) / sum_k exp(D(a,k)/t))` with
/// `D` the cosine similarity and `k` ranging over all candidates.
pub fn contrastive_loss<T: Real>(
    tape: &mut Tape<T>,
    batch: &EmbeddingBatch,
    temperature: f64,
) -> Result<Var, ContrastiveError> {
    let n_candidates = tape.shape(batch.candidates)[0];
    if n_candidates < 2 {
        return Err(ContrastiveError::TooFewCandidates { anchor: 0, available: n_candidates });
    }
    if let Some(&bad) = batch.positive_index.iter().find(|&&p| p >= n_candidates) {
        return Err(ContrastiveError::BadPositive { index: bad, candidates: n_candidates });
    }
    let a = tape.l2_normalize_axis1(batch.anchors)?;
    let c = tape.l2_normalize_axis1(batch.candidates)?;
    let sims = tape.matmul_nt(a, c)?;
    let logits = tape.affine(sims, T::lit(1.0 / temperature), T::zero());
    Ok(tape.cross_entropy_rows(logits, &batch.positive_index)?)
}

/// Average of the loss in both directions of a paired batch.
pub fn symmetric_contrastive_loss<T: Real>(
    tape: &mut Tape<T>,
    batch: &EmbeddingBatch,
    temperature: f64,
) -> Result<Var, ContrastiveError> {
    let forward = contrastive_loss(tape, batch, temperature)?;
    let backward = contrastive_loss(tape, &batch.swapped(), temperature)?;
    let sum = tape.add(forward, backward)?;
    Ok(tape.affine(sum, T::lit(0.5), T::zero()))
}

/// Picks `patches_per_image` non-overlapping `p`x`p` windows per image of
/// `map_a` and the windows showing the same content in `map_b`, pooled and
/// re-normalized to unit length.
pub fn sample_local_patch_pairs<T: Real>(
    tape: &mut Tape<T>,
    map_a: Var,
    map_b: Var,
    geometry: &[GeometryRecord],
    config: &ContrastiveConfig,
    rng: &mut Rng,
) -> Result<EmbeddingBatch, ContrastiveError> {
    let [b, _, h, w] = tape
        .value(map_a)
        .dims4()
        .ok_or_else(|| TensorError::Shape { op: "sample_local_patch_pairs", detail: "expected [B,D,H,W]".into() })?;
    if tape.shape(map_a) != tape.shape(map_b) {
        return Err(TensorError::Shape {
            op: "sample_local_patch_pairs",
            detail: format!("{:?} vs {:?}", tape.shape(map_a), tape.shape(map_b)),
        }
        .into());
    }
    let p = config.local_patch_size;
    let (gh, gw) = (h / p, w / p);
    let available = gh * gw;
    let wanted = config.local_patches_per_image;
    if wanted > available {
        return Err(ContrastiveError::PatchCount { requested: wanted, available });
    }
    let half = (p / 2) as f64;
    let mut patches_a = Vec::with_capacity(b * wanted);
    let mut patches_b = Vec::with_capacity(b * wanted);
    for bi in 0..b {
        let geo = geometry.get(bi).copied().unwrap_or_else(|| GeometryRecord::identity(h, w));
        // Random visiting order over all grid cells; cells whose counterpart
        // falls outside view b are skipped and the next cell is drawn.
        let order = index::sample(rng, available, available);
        let mut taken = 0;
        for cell in order {
            if taken == wanted {
                break;
            }
            let (top, left) = ((cell / gw) * p, (cell % gw) * p);
            let (cy, cx) = geo.a_to_b(top as f64 + half, left as f64 + half);
            let (ty, tx) = ((cy - half).round(), (cx - half).round());
            if ty < 0.0 || tx < 0.0 || ty as usize + p > h || tx as usize + p > w {
                continue;
            }
            patches_a.push([bi, top, left]);
            patches_b.push([bi, ty as usize, tx as usize]);
            taken += 1;
        }
        if taken < wanted {
            return Err(ContrastiveError::PatchCount { requested: wanted, available: taken });
        }
    }
    let pa = tape.patch_pool(map_a, &patches_a, p)?;
    let pb = tape.patch_pool(map_b, &patches_b, p)?;
    let anchors = tape.l2_normalize_axis1(pa)?;
    let candidates = tape.l2_normalize_axis1(pb)?;
    Ok(EmbeddingBatch::paired(anchors, candidates, patches_a.len()))
}

pub struct ContrastiveOutcome<T> {
    /// Backbone after both stages, local head attached.
    pub params: ModelParams<T>,
    /// Backbone and global head at the end of stage one.
    pub global_stage: ModelParams<T>,
    pub global_history: Vec<EpochRecord>,
    pub local_history: Vec<EpochRecord>,
}

fn pair_batch<T: Real>(
    images: &[Tensor<T>],
    batch: &[usize],
    aug: &AugmentationConfig,
    seed: u64,
    stage: &str,
    epoch: usize,
) -> Result<(Tensor<T>, Vec<GeometryRecord>), TensorError> {
    let pairs: Vec<(Tensor<T>, Tensor<T>, GeometryRecord)> = par::map_indexed(batch.len(), |j| {
        let mut r = rng::stream(seed, &[rng::key(stage), batch[j] as u64, epoch as u64]);
        make_positive_pair(&images[batch[j]], aug, &mut r)
    });
    let mut views: Vec<Tensor<T>> = pairs.iter().map(|p| p.0.clone()).collect();
    views.extend(pairs.iter().map(|p| p.1.clone()));
    Ok((Tensor::stack(&views)?, pairs.iter().map(|p| p.2).collect()))
}

fn contrastive_err(e: ContrastiveError) -> TrainError {
    match e {
        ContrastiveError::Tensor(t) => TrainError::Tensor(t),
        other => TrainError::InvalidConfig(other.to_string()),
    }
}

/// One contrastive stage; `loss_fn` maps the stacked `[2N, ...]` head output
/// to a scalar loss.
#[allow(clippy::too_many_arguments)]
fn run_stage<T: Real>(
    params: &mut ModelParams<T>,
    images: &[Tensor<T>],
    aug: &AugmentationConfig,
    schedule: &ScheduleConfig,
    trainable: impl Fn(&str) -> bool + Copy,
    stage: &str,
    seed: u64,
    mut loss_fn: impl FnMut(&mut Tape<T>, Var, usize, &[GeometryRecord], &mut Rng) -> Result<Var, ContrastiveError>,
) -> Result<Vec<EpochRecord>, TrainError> {
    let mut adam = AdamState::new(AdamConfig::with_lr(schedule.initial_lr), params.tensors());
    let mut scheduler = PlateauScheduler::new(schedule);
    let mut history = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        let lr = scheduler.lr();
        let mut total = 0.0;
        let mut count = 0;
        for (bi, batch) in schedule.epoch_batches(images.len(), epoch).iter().enumerate() {
            if batch.len() < 2 {
                // a lone trailing image has no negatives
                continue;
            }
            let (views, geometry) = pair_batch(images, batch, aug, seed, stage, epoch)?;
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, trainable);
            let x = tape.constant(views);
            let out = params.forward(&mut tape, &bound, x)?;
            let mut r = rng::stream(seed, &[rng::key(stage), rng::key("patches"), epoch as u64, bi as u64]);
            let loss = loss_fn(&mut tape, out.head_output, batch.len(), &geometry, &mut r).map_err(contrastive_err)?;
            let value = tape.value(loss).item().to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() {
                let origin = tape.non_finite_origin().unwrap_or("loss");
                return Err(TrainError::NonFiniteLoss { epoch, origin });
            }
            tape.backward(loss)?;
            let grads = bound.gradients(&mut tape);
            adam.step(params.tensors_mut(), &grads)?;
            total += value;
            count += 1;
        }
        let train_loss = if count > 0 { total / count as f64 } else { f64::NAN };
        history.push(EpochRecord { epoch, train_loss, val_loss: f64::NAN, lr });
        adam.set_learning_rate(scheduler.step(train_loss));
        log::debug!("contrastive {stage} epoch {epoch}: loss {train_loss:.5} lr {lr:.2e}");
    }
    Ok(history)
}

/// Two-stage contrastive pretraining on unlabeled `images` (each `[1,1,H,W]`).
pub fn pretrain_contrastive<T: Real>(
    model: &ModelParams<T>,
    images: &[Tensor<T>],
    config: &ContrastiveConfig,
    global_aug: &AugmentationConfig,
    local_aug: &AugmentationConfig,
    global_schedule: &ScheduleConfig,
    local_schedule: &ScheduleConfig,
) -> Result<ContrastiveOutcome<T>, TrainError> {
    if images.is_empty() {
        return Err(TrainError::EmptyDataset("unlabeled"));
    }
    config.validate()?;
    global_aug.validate()?;
    local_aug.validate()?;
    global_schedule.validate()?;
    local_schedule.validate()?;
    let with_batch = |s: &ScheduleConfig| ScheduleConfig { batch_size: config.batch_size, ..s.clone() };
    let tau = config.temperature;

    let mut params = model.swap_heads(HeadKind::Global, config.seed);
    let global_history = run_stage(
        &mut params,
        images,
        global_aug,
        &with_batch(global_schedule),
        |name| is_encoder_param(name) || is_head_param(name),
        "global",
        config.seed,
        |tape, z, n, _, _| {
            let a = tape.narrow(z, 0, n)?;
            let b = tape.narrow(z, n, n)?;
            symmetric_contrastive_loss(tape, &EmbeddingBatch::paired(a, b, n), tau)
        },
    )?;
    let global_stage = params.clone();

    let mut params = params.swap_heads(HeadKind::Local, config.seed);
    let freeze = config.freeze_encoder;
    let local_history = run_stage(
        &mut params,
        images,
        local_aug,
        &with_batch(local_schedule),
        move |name| is_decoder_param(name) || is_head_param(name) || (!freeze && is_encoder_param(name)),
        "local",
        config.seed,
        |tape, maps, n, geometry, r| {
            let a = tape.narrow(maps, 0, n)?;
            let b = tape.narrow(maps, n, n)?;
            let batch = sample_local_patch_pairs(tape, a, b, geometry, config, r)?;
            symmetric_contrastive_loss(tape, &batch, tau)
        },
    )?;
    Ok(ContrastiveOutcome { params, global_stage, global_history, local_history })
}
