//! Synthetic abdominal-style phantoms: a body outline on a smooth
//! background, a few elliptical organs with per-subject intensity and shape,
//! multiplicative texture noise, and a label map for one designated organ.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::volume::{normalize_unit, Volume};
use super::{DataError, Result};
use crate::augment::gaussian_blur;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    pub slices: usize,
    /// Inclusive range of organs per subject, target organ included.
    pub organ_count: (usize, usize),
    /// Bounds on the target organ's area fraction in every slice.
    pub area_fraction: (f64, f64),
    /// Relative amplitude of the multiplicative texture.
    pub texture_noise: f64,
    /// Half-width of the per-subject organ intensity jitter; also scales the
    /// per-subject tone curve and bias field.
    pub intensity_variation: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            slices: 8,
            organ_count: (1, 3),
            area_fraction: (0.05, 0.30),
            texture_noise: 0.15,
            intensity_variation: 0.15,
            seed: 0,
        }
    }
}

// Aspect ratios of the target organ (vertical over horizontal half-axis).
const ASPECT: (f64, f64) = (0.7, 1.4);

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.area_fraction;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(DataError::InvalidConfig(format!("area_fraction {:?} must satisfy 0 < lo <= hi < 1", self.area_fraction)));
        }
        if self.slices == 0 || self.height == 0 || self.width == 0 {
            return Err(DataError::InvalidConfig("phantom dimensions must be positive".into()));
        }
        let (cmin, cmax) = self.organ_count;
        if cmin == 0 || cmin > cmax {
            return Err(DataError::InvalidConfig(format!("organ_count {:?} must satisfy 1 <= lo <= hi", self.organ_count)));
        }
        if !(self.texture_noise >= 0.0 && self.texture_noise < 1.0) {
            return Err(DataError::InvalidConfig(format!("texture_noise {} outside [0,1)", self.texture_noise)));
        }
        if !(0.0..0.3).contains(&self.intensity_variation) {
            return Err(DataError::InvalidConfig(format!("intensity_variation {} outside [0,0.3)", self.intensity_variation)));
        }
        let pixels = (self.height * self.width) as f64;
        if lo * pixels < 8.0 {
            return Err(DataError::Unsatisfiable(format!(
                "smallest organ covers {:.1} pixels of a {}x{} image",
                lo * pixels,
                self.height,
                self.width
            )));
        }
        let reach = (hi * pixels * ASPECT.1 / std::f64::consts::PI).sqrt();
        if 2.0 * reach + 4.0 > self.height.min(self.width) as f64 {
            return Err(DataError::Unsatisfiable(format!(
                "an organ covering {hi} of a {}x{} image does not fit",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    /// Half-axes before rotation.
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = c * dy + s * dx;
        let v = -s * dy + c * dx;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    fn count(&self, h: usize, w: usize) -> usize {
        (0..h * w).filter(|i| self.contains((i / w) as f64, (i % w) as f64)).count()
    }
}

fn smooth_noise(h: usize, w: usize, sigma: f64, rng: &mut Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
    let f = gaussian_blur(&raw, h, w, sigma);
    let sd = (f.iter().map(|v| v * v).sum::<f64>() / f.len() as f64).sqrt();
    f.into_iter().map(|v| if sd > 0.0 { v / sd } else { 0.0 }).collect()
}

/// One subject; deterministic in `(config.seed, index)`.
pub fn generate_subject(config: &PhantomConfig, index: usize) -> Result<Volume> {
    config.validate()?;
    let (h, w, s) = (config.height, config.width, config.slices);
    let (hf, wf) = (h as f64, w as f64);
    let pixels = hf * wf;
    let mut rng = rng::stream(config.seed, &[rng::key("phantom"), index as u64]);
    let r = &mut rng;

    let base = r.random_range(0.10..0.20);
    let (gy, gx) = (r.random_range(-0.08..0.08), r.random_range(-0.08..0.08));
    let body = Ellipse {
        cy: hf * r.random_range(0.48..0.52),
        cx: wf * r.random_range(0.48..0.52),
        a: hf * r.random_range(0.42..0.47),
        b: wf * r.random_range(0.44..0.48),
        theta: 0.0,
    };
    let body_level = r.random_range(0.28..0.36);
    // per-subject appearance: tone curve, slow bias field, noise level
    let iv = config.intensity_variation;
    let gamma = (2.0 * iv * r.random_range(-1.0..1.0)).exp();
    let bias_amp = 1.5 * iv * r.random_range(0.0..1.0);
    let bias = smooth_noise(h, w, 0.25 * hf.min(wf), r);
    let noise_scale = r.random_range(0.5..1.5);

    // target organ: size profile over slices stays inside the area bounds
    let (lo, hi) = config.area_fraction;
    let margin = 0.02 * (hi - lo);
    let (lo, hi) = (lo + margin, hi - margin);
    let f_lo = lo + (hi - lo) * r.random_range(0.0..0.5);
    let f_hi = f_lo + (hi - f_lo) * r.random_range(0.3..1.0);
    let aspect = r.random_range(ASPECT.0..ASPECT.1);
    let theta = r.random_range(-0.5..0.5);
    let target_level = 0.62 + r.random_range(-1.0..1.0) * config.intensity_variation;
    let reach = (f_hi * pixels * ASPECT.1 / std::f64::consts::PI).sqrt() + 1.0;
    let clamp = |v: f64, extent: f64| v.clamp(reach, extent - 1.0 - reach);
    let cy0 = hf * r.random_range(0.42..0.58);
    let cx0 = wf * r.random_range(0.30..0.45);
    let (dcy, dcx) = (r.random_range(-0.6..0.6), r.random_range(-0.6..0.6));

    let extra = r.random_range(config.organ_count.0..=config.organ_count.1) - 1;
    let distractors: Vec<(Ellipse, f64, f64, f64)> = (0..extra)
        .map(|_| {
            let area = pixels * r.random_range(0.015..0.06);
            let asp = r.random_range(0.6..1.6);
            let a = (area * asp / std::f64::consts::PI).sqrt();
            let e = Ellipse {
                cy: hf * r.random_range(0.25..0.75),
                cx: wf * r.random_range(0.35..0.78),
                a,
                b: a / asp,
                theta: r.random_range(-1.5..1.5),
            };
            let level = r.random_range(0.45..0.90);
            (e, level, r.random_range(-0.8..0.8), r.random_range(-0.8..0.8))
        })
        .collect();

    let mut image = Vec::with_capacity(s * h * w);
    let mut labels = Vec::with_capacity(s * h * w);
    for si in 0..s {
        let t = si as f64 - (s as f64 - 1.0) / 2.0;
        let profile = (std::f64::consts::PI * (si as f64 + 0.5) / s as f64).sin();
        let target_area = (f_lo + (f_hi - f_lo) * profile) * pixels;
        let mut organ = Ellipse { cy: clamp(cy0 + dcy * t, hf), cx: clamp(cx0 + dcx * t, wf), a: 1.0, b: 1.0, theta };
        let mut k = (target_area / std::f64::consts::PI).sqrt();
        let mut count = 0;
        for _ in 0..40 {
            organ.a = k * aspect.sqrt();
            organ.b = k / aspect.sqrt();
            count = organ.count(h, w);
            let frac = count as f64 / pixels;
            if frac >= config.area_fraction.0 && frac <= config.area_fraction.1 {
                break;
            }
            k *= (target_area / count.max(1) as f64).sqrt();
        }
        let frac = count as f64 / pixels;
        if frac < config.area_fraction.0 || frac > config.area_fraction.1 {
            return Err(DataError::Unsatisfiable(format!("target organ area fraction {frac:.4} outside bounds")));
        }

        let fine = smooth_noise(h, w, 0.7, r);
        let coarse = smooth_noise(h, w, 2.5, r);
        for y in 0..h {
            for x in 0..w {
                let (yf, xf) = (y as f64, x as f64);
                let mut v = base + gy * (yf / hf - 0.5) + gx * (xf / wf - 0.5);
                let mut inside = false;
                if body.contains(yf, xf) {
                    v = body_level + gy * (yf / hf - 0.5);
                }
                for (e, level, my, mx) in &distractors {
                    let moved = Ellipse { cy: e.cy + my * t, cx: e.cx + mx * t, ..*e };
                    if moved.contains(yf, xf) {
                        v = *level;
                    }
                }
                if organ.contains(yf, xf) {
                    v = target_level;
                    inside = true;
                }
                let i = y * w + x;
                let amp = config.texture_noise * noise_scale;
                let mut tex = 1.0 + amp * fine[i];
                if inside {
                    tex += amp * coarse[i];
                }
                let shaded = (v * tex).max(0.0).powf(gamma) * (1.0 + bias_amp * bias[i]).max(0.1);
                image.push(shaded as f32);
                labels.push(inside as u8);
            }
        }
    }
    let raw = Tensor::new([s, 1, h, w], image).map_err(|e| DataError::InvalidConfig(e.to_string()))?;
    Volume::new(format!("subj{index:04}"), normalize_unit(&raw)?, Some(labels))
}

/// Subjects `0..n_subjects`, each carrying its target-organ labels.
pub fn generate_phantom_dataset(config: &PhantomConfig, n_subjects: usize) -> Result<Vec<Volume>> {
    config.validate()?;
    let out = crate::par::map_indexed(n_subjects, |i| generate_subject(config, i));
    out.into_iter().collect()
}
