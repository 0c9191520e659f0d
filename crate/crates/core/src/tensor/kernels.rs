// Raw forward/backward kernels on row-major slices. Shapes are validated by
// the tape ops before they get here.

use super::Real;
use crate::par;

/// Lowers one `[cin, h, w]` image into `[cin*k*k, h*w]` patch columns for a
/// stride-1, zero-padded ("same") convolution.
#[cfg(test)]
pub(crate) fn im2col<T: Real>(x: &[T], cin: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    im2col_rows(x, cin, h, w, k, 0, h, cols);
}

/// [`im2col`] restricted to output rows `y0..y1`; `cols` is
/// `[cin*k*k, (y1-y0)*w]`.
#[allow(clippy::too_many_arguments)]
fn im2col_rows<T: Real>(x: &[T], cin: usize, h: usize, w: usize, k: usize, y0: usize, y1: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let n = (y1 - y0) * w;
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                let dx = kx as isize - pad;
                let dy = ky as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in y0..y1 {
                    let sy = y as isize + dy;
                    let out_row = &mut dst[(y - y0) * w..(y - y0 + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out_row[..x0.min(w)].fill(T::zero());
                    if x1 > x0 {
                        let s0 = (x0 as isize + dx) as usize;
                        out_row[x0..x1].copy_from_slice(&src_row[s0..s0 + (x1 - x0)]);
                    }
                    out_row[x1.max(x0)..].fill(T::zero());
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
#[cfg(test)]
pub(crate) fn col2im<T: Real>(cols: &[T], cin: usize, h: usize, w: usize, k: usize, dx_out: &mut [T]) {
    dx_out.fill(T::zero());
    col2im_rows(cols, cin, h, w, k, 0, h, dx_out);
}

/// Adjoint of [`im2col_rows`], accumulating into `dx_out`.
#[allow(clippy::too_many_arguments)]
fn col2im_rows<T: Real>(cols: &[T], cin: usize, h: usize, w: usize, k: usize, y0: usize, y1: usize, dx_out: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let n = (y1 - y0) * w;
    for ci in 0..cin {
        let plane = &mut dx_out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                let dx = kx as isize - pad;
                let dy = ky as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x1 <= x0 {
                    continue;
                }
                let s0 = (x0 as isize + dx) as usize;
                for y in y0..y1 {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let r = (y - y0) * w;
                    let dst_row = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                    for (d, &g) in dst_row.iter_mut().zip(&src[r + x0..r + x1]) {
                        *d = *d + g;
                    }
                }
            }
        }
    }
}

// Column buffers are processed in bands of rows small enough to stay in
// cache (about 256 KiB of f32).
const BAND_ELEMS: usize = 64 * 1024;

fn bands(h: usize, w: usize, ckk: usize) -> impl Iterator<Item = (usize, usize)> {
    let rows = (BAND_ELEMS / (ckk * w).max(1)).clamp(1, h.max(1));
    (0..h).step_by(rows).map(move |y0| (y0, (y0 + rows).min(h)))
}

pub(crate) struct ConvDims {
    pub b: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], weight: &[T], bias: &[T], d: &ConvDims) -> Vec<T> {
    let hw = d.h * d.w;
    let ckk = d.cin * d.k * d.k;
    let mut out = vec![T::zero(); d.b * d.cout * hw];
    par::for_each_chunk_mut(&mut out, d.cout * hw, |bi, out_b| {
        let x_b = &x[bi * d.cin * hw..(bi + 1) * d.cin * hw];
        for (co, row) in out_b.chunks_mut(hw).enumerate() {
            row.fill(bias[co]);
        }
        if d.k == 1 {
            T::gemm(d.cout, ckk, hw, T::one(), weight, ckk as isize, 1, x_b, hw as isize, 1, T::one(), out_b, hw as isize, 1);
        } else {
            let mut cols = Vec::new();
            for (y0, y1) in bands(d.h, d.w, ckk) {
                let n = (y1 - y0) * d.w;
                cols.resize(ckk * n, T::zero());
                im2col_rows(x_b, d.cin, d.h, d.w, d.k, y0, y1, &mut cols);
                let out_band = &mut out_b[y0 * d.w..];
                T::gemm(d.cout, ckk, n, T::one(), weight, ckk as isize, 1, &cols, n as isize, 1, T::one(), out_band, hw as isize, 1);
            }
        }
    });
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dweight: Option<Vec<T>>,
    pub dbias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    d: &ConvDims,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let hw = d.h * d.w;
    let ckk = d.cin * d.k * d.k;
    let (need_x, need_w, need_b) = need;
    // Per-sample partials, summed below in batch order.
    let partials: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = par::map_indexed(d.b, |bi| {
        let x_b = &x[bi * d.cin * hw..(bi + 1) * d.cin * hw];
        let g_b = &dout[bi * d.cout * hw..(bi + 1) * d.cout * hw];
        if d.k == 1 {
            let dw = need_w.then(|| {
                let mut dw = vec![T::zero(); d.cout * ckk];
                T::gemm(d.cout, hw, ckk, T::one(), g_b, hw as isize, 1, x_b, 1, hw as isize, T::zero(), &mut dw, ckk as isize, 1);
                dw
            });
            let dx = need_x.then(|| {
                let mut dx = vec![T::zero(); ckk * hw];
                T::gemm(ckk, d.cout, hw, T::one(), weight, 1, ckk as isize, g_b, hw as isize, 1, T::zero(), &mut dx, hw as isize, 1);
                dx
            });
            return (dx, dw);
        }
        let mut dw = need_w.then(|| vec![T::zero(); d.cout * ckk]);
        let mut dx = need_x.then(|| vec![T::zero(); d.cin * hw]);
        let mut cols = Vec::new();
        for (y0, y1) in bands(d.h, d.w, ckk) {
            let n = (y1 - y0) * d.w;
            let g_band = &g_b[y0 * d.w..];
            cols.resize(ckk * n, T::zero());
            if let Some(dw) = dw.as_mut() {
                im2col_rows(x_b, d.cin, d.h, d.w, d.k, y0, y1, &mut cols);
                T::gemm(d.cout, n, ckk, T::one(), g_band, hw as isize, 1, &cols, 1, n as isize, T::one(), dw, ckk as isize, 1);
            }
            if let Some(dx) = dx.as_mut() {
                T::gemm(ckk, d.cout, n, T::one(), weight, 1, ckk as isize, g_band, hw as isize, 1, T::zero(), &mut cols, n as isize, 1);
                col2im_rows(&cols, d.cin, d.h, d.w, d.k, y0, y1, dx);
            }
        }
        (dx, dw)
    });
    let mut dx_all = need_x.then(|| Vec::with_capacity(d.b * d.cin * hw));
    let mut dw_sum = need_w.then(|| vec![T::zero(); d.cout * ckk]);
    for (dx, dw) in partials {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend(dx);
        }
        if let (Some(sum), Some(dw)) = (dw_sum.as_mut(), dw) {
            for (s, v) in sum.iter_mut().zip(dw) {
                *s = *s + v;
            }
        }
    }
    let dbias = need_b.then(|| {
        let mut db = vec![T::zero(); d.cout];
        for bi in 0..d.b {
            for (co, acc) in db.iter_mut().enumerate() {
                let off = (bi * d.cout + co) * hw;
                *acc = *acc + dout[off..off + hw].iter().copied().sum::<T>();
            }
        }
        db
    });
    ConvGrads { dx: dx_all, dweight: dw_sum, dbias }
}

/// 2x2 max pooling. Returns values and, per output, the flat input index of
/// the first maximum in row-major window order.
pub(crate) fn max_pool2_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample2_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        for y in 0..oh {
            let src = &x[p * h * w + (y / 2) * w..p * h * w + (y / 2 + 1) * w];
            let dst = &mut out[p * oh * ow + y * ow..p * oh * ow + (y + 1) * ow];
            for (xo, v) in dst.iter_mut().enumerate() {
                *v = src[xo / 2];
            }
        }
    }
    out
}

/// Sum of each 2x2 block; upsample's adjoint and (scaled) average pooling.
pub(crate) fn block_sum2<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = p * h * w + 2 * oy * w + 2 * ox;
                out[p * oh * ow + oy * ow + ox] = x[i0] + x[i0 + 1] + x[i0 + w] + x[i0 + w + 1];
            }
        }
    }
    out
}

pub(crate) const NORM_EPS: f64 = 1e-5;

pub(crate) struct NormSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn instance_norm_forward<T: Real>(
    x: &[T],
    gain: &[T],
    shift: &[T],
    b: usize,
    c: usize,
    hw: usize,
) -> (Vec<T>, NormSaved<T>) {
    let eps = T::lit(NORM_EPS);
    let n = T::from_usize_lossy(hw);
    let mut xhat = vec![T::zero(); b * c * hw];
    let mut inv_std = vec![T::zero(); b * c];
    let mut y = vec![T::zero(); b * c * hw];
    for p in 0..b * c {
        let ch = p % c;
        let xs = &x[p * hw..(p + 1) * hw];
        let mean = xs.iter().copied().sum::<T>() / n;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std[p] = is;
        for i in 0..hw {
            let xh = (xs[i] - mean) * is;
            xhat[p * hw + i] = xh;
            y[p * hw + i] = gain[ch] * xh + shift[ch];
        }
    }
    (y, NormSaved { xhat, inv_std })
}

pub(crate) fn instance_norm_backward<T: Real>(
    dy: &[T],
    gain: &[T],
    saved: &NormSaved<T>,
    b: usize,
    c: usize,
    hw: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = T::from_usize_lossy(hw);
    let mut dx = vec![T::zero(); b * c * hw];
    let mut dgain = vec![T::zero(); c];
    let mut dshift = vec![T::zero(); c];
    for p in 0..b * c {
        let ch = p % c;
        let g = &dy[p * hw..(p + 1) * hw];
        let xh = &saved.xhat[p * hw..(p + 1) * hw];
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for i in 0..hw {
            sum_g = sum_g + g[i];
            sum_gx = sum_gx + g[i] * xh[i];
        }
        dgain[ch] = dgain[ch] + sum_gx;
        dshift[ch] = dshift[ch] + sum_g;
        // dxhat = g * gain; dx = inv_std/n * (n*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
        let scale = gain[ch] * saved.inv_std[p] / n;
        for i in 0..hw {
            dx[p * hw + i] = scale * (n * g[i] - sum_g - xh[i] * sum_gx);
        }
    }
    (dx, dgain, dshift)
}
