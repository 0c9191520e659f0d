//! Resampling primitives shared by the contrastive and finetuning
//! augmentations. Coordinates refer to pixel centres: pixel `(y, x)` sits at
//! continuous position `(y, x)`.

use rand::Rng as _;

use crate::rng::Rng;
use crate::tensor::Real;

/// Axis-aligned window in source pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropBox {
    pub top: f64,
    pub left: f64,
    pub height: f64,
    pub width: f64,
}

impl CropBox {
    pub fn full(h: usize, w: usize) -> Self {
        Self { top: 0.0, left: 0.0, height: h as f64, width: w as f64 }
    }

    /// Random aspect-preserving crop covering `area` (fraction) of the image.
    pub fn random(h: usize, w: usize, area: (f64, f64), rng: &mut Rng) -> Self {
        let a = if area.0 < area.1 { rng.random_range(area.0..=area.1) } else { area.0 };
        if a >= 1.0 {
            return Self::full(h, w);
        }
        let side = a.sqrt();
        let (ch, cw) = (h as f64 * side, w as f64 * side);
        let top = rng.random_range(0.0..=(h as f64 - ch));
        let left = rng.random_range(0.0..=(w as f64 - cw));
        Self { top, left, height: ch, width: cw }
    }

    /// Source position of output pixel `(y, x)` when this box is resized to
    /// `out_h` x `out_w`.
    pub fn to_source(&self, y: f64, x: f64, out_h: usize, out_w: usize) -> (f64, f64) {
        let sy = self.height / out_h as f64;
        let sx = self.width / out_w as f64;
        (self.top + (y + 0.5) * sy - 0.5, self.left + (x + 0.5) * sx - 0.5)
    }

    /// Inverse of [`to_source`](Self::to_source).
    pub fn from_source(&self, sy: f64, sx: f64, out_h: usize, out_w: usize) -> (f64, f64) {
        let y = (sy - self.top + 0.5) * out_h as f64 / self.height - 0.5;
        let x = (sx - self.left + 0.5) * out_w as f64 / self.width - 0.5;
        (y, x)
    }
}

/// Bilinear read of a single `h`x`w` plane; taps outside the plane read
/// `fill`.
pub fn bilinear<T: Real>(plane: &[T], h: usize, w: usize, sy: f64, sx: f64, fill: T) -> T {
    let y0 = sy.floor();
    let x0 = sx.floor();
    let fy = T::lit(sy - y0);
    let fx = T::lit(sx - x0);
    let tap = |y: f64, x: f64| -> T {
        if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
            fill
        } else {
            plane[y as usize * w + x as usize]
        }
    };
    let one = T::one();
    let top = tap(y0, x0) * (one - fx) + tap(y0, x0 + 1.0) * fx;
    let bottom = tap(y0 + 1.0, x0) * (one - fx) + tap(y0 + 1.0, x0 + 1.0) * fx;
    top * (one - fy) + bottom * fy
}

/// Nearest-neighbour read; never invents values outside the plane's alphabet
/// (plus `fill`).
pub fn nearest<L: Copy>(plane: &[L], h: usize, w: usize, sy: f64, sx: f64, fill: L) -> L {
    let y = sy.round();
    let x = sx.round();
    if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
        fill
    } else {
        plane[y as usize * w + x as usize]
    }
}

/// Separable Gaussian blur with zero padding (radius `3 sigma`).
pub fn gaussian_blur(field: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return field.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / norm).collect();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let xx = x as isize + ki as isize - radius;
                if xx >= 0 && xx < w as isize {
                    s += k * field[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let yy = y as isize + ki as isize - radius;
                if yy >= 0 && yy < h as isize {
                    s += k * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

/// Smooth random displacement fields `(dy, dx)` whose largest component
/// magnitude equals `amplitude` pixels.
pub fn elastic_field(h: usize, w: usize, sigma: f64, amplitude: f64, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
    if amplitude == 0.0 {
        return (vec![0.0; h * w], vec![0.0; h * w]);
    }
    let mut draw = || -> Vec<f64> { (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let (ry, rx) = (draw(), draw());
    let dy = gaussian_blur(&ry, h, w, sigma);
    let dx = gaussian_blur(&rx, h, w, sigma);
    let peak = dy.iter().chain(&dx).fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { amplitude / peak } else { 0.0 };
    (dy.into_iter().map(|v| v * scale).collect(), dx.into_iter().map(|v| v * scale).collect())
}
