use super::kernels::{self, ConvDims, NormSaved};
use super::{invalid, shape_err, Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, k: usize },
    Relu(Var),
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Upsample2(Var),
    AvgPool2(Var),
    InstanceNorm { x: Var, gain: Var, shift: Var, saved: NormSaved<T> },
    Linear { x: Var, w: Var, b: Var },
    ConcatChannels(Var, Var),
    GlobalAvgPool(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine { x: Var, scale: T },
    MulConst { x: Var, c: Vec<T> },
    AddConst(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    SumPerChannel(Var),
    Narrow { x: Var, start: usize },
    SoftmaxAxis1(Var),
    L2NormalizeAxis1 { x: Var, norms: Vec<T> },
    MatMulNT(Var, Var),
    CrossEntropyRows { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    PatchPool { x: Var, patches: Vec<[usize; 3]>, size: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    finite: bool,
}

/// Records ops in execution order; [`Tape::backward`] walks them in reverse.
///
/// Nodes are appended only after their inputs exist, so the node order is a
/// topological order of the graph.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    /// First op whose output went non-finite from finite inputs.
    origin: Option<&'static str>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn len_prod(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `[outer, axis, inner]` split of a shape around axis 1.
fn split_axis1(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), origin: None }
    }

    /// Name of the op that first produced a NaN or infinity, if any did.
    pub fn non_finite_origin(&self) -> Option<&'static str> {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) loss w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let finite = value.all_finite();
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, finite });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let inputs_finite = inputs.iter().all(|v| self.nodes[v.0].finite);
        let finite = inputs_finite && value.all_finite();
        if inputs_finite && !finite && self.origin.is_none() {
            self.origin = Some(name);
        }
        self.nodes.push(Node { value, op, requires_grad, finite });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn dims4(&self, op: &'static str, v: Var) -> Result<[usize; 4]> {
        self.value(v)
            .dims4()
            .ok_or_else(|| shape_err(op, format!("expected [B,C,H,W], got {:?}", self.shape(v))))
    }

    // ── layers ───────────────────────────────────────────────────────

    /// Stride-1 convolution with zero "same" padding and an odd square kernel.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let [b, cin, h, w] = self.dims4("conv2d", x)?;
        let [cout, kcin, kh, kw] = self.dims4("conv2d", weight)?;
        if kcin != cin {
            return Err(shape_err("conv2d", format!("input has {cin} channels, kernel expects {kcin}")));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(invalid("conv2d", format!("kernel must be odd and square, got {kh}x{kw}")));
        }
        if self.shape(bias) != [cout] {
            return Err(shape_err("conv2d", format!("bias {:?} for {cout} output channels", self.shape(bias))));
        }
        let d = ConvDims { b, cin, cout, h, w, k: kh };
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(weight).data(), self.value(bias).data(), &d);
        let value = Tensor { shape: vec![b, cout, h, w], data: out };
        Ok(self.push("conv2d", value, Op::Conv2d { x, w: weight, b: bias, k: kh }, &[x, weight, bias]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", value, Op::Relu(x), &[x])
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.dims4("max_pool2", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(invalid("max_pool2", format!("spatial dims must be even, got {h}x{w}")));
        }
        let (out, argmax) = kernels::max_pool2_forward(self.value(x).data(), b * c, h, w);
        let value = Tensor { shape: vec![b, c, h / 2, w / 2], data: out };
        Ok(self.push("max_pool2", value, Op::MaxPool2 { x, argmax }, &[x]))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.dims4("avg_pool2", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(invalid("avg_pool2", format!("spatial dims must be even, got {h}x{w}")));
        }
        let quarter = T::lit(0.25);
        let out = kernels::block_sum2(self.value(x).data(), b * c, h, w).into_iter().map(|v| v * quarter).collect();
        let value = Tensor { shape: vec![b, c, h / 2, w / 2], data: out };
        Ok(self.push("avg_pool2", value, Op::AvgPool2(x), &[x]))
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.dims4("upsample_nearest2", x)?;
        let out = kernels::upsample2_forward(self.value(x).data(), b * c, h, w);
        let value = Tensor { shape: vec![b, c, 2 * h, 2 * w], data: out };
        Ok(self.push("upsample_nearest2", value, Op::Upsample2(x), &[x]))
    }

    /// Per-(sample, channel) normalization followed by a per-channel affine.
    pub fn instance_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let [b, c, h, w] = self.dims4("instance_norm", x)?;
        if h * w < 2 {
            return Err(invalid("instance_norm", format!("needs at least 2 pixels per channel, got {h}x{w}")));
        }
        if self.shape(gain) != [c] || self.shape(shift) != [c] {
            return Err(shape_err("instance_norm", format!("gain/shift must be [{c}]")));
        }
        let (y, saved) = kernels::instance_norm_forward(
            self.value(x).data(),
            self.value(gain).data(),
            self.value(shift).data(),
            b,
            c,
            h * w,
        );
        let value = Tensor { shape: vec![b, c, h, w], data: y };
        Ok(self.push("instance_norm", value, Op::InstanceNorm { x, gain, shift, saved }, &[x, gain, shift]))
    }

    /// `x · weightᵀ + bias` for `x: [B,F]`, `weight: [G,F]`, `bias: [G]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(weight), self.shape(bias));
        let (&[b, f], &[g, wf], &[bg]) = (xs, ws, bs) else {
            return Err(shape_err("linear", format!("x {xs:?}, weight {ws:?}, bias {bs:?}")));
        };
        if wf != f || bg != g {
            return Err(shape_err("linear", format!("x {xs:?}, weight {ws:?}, bias {bs:?}")));
        }
        let mut out = Vec::with_capacity(b * g);
        for _ in 0..b {
            out.extend_from_slice(self.value(bias).data());
        }
        T::gemm(b, f, g, T::one(), self.value(x).data(), f as isize, 1, self.value(weight).data(), 1, f as isize, T::one(), &mut out, g as isize, 1);
        let value = Tensor { shape: vec![b, g], data: out };
        Ok(self.push("linear", value, Op::Linear { x, w: weight, b: bias }, &[x, weight, bias]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ba, ca, ha, wa] = self.dims4("concat_channels", a)?;
        let [bb, cb, hb, wb] = self.dims4("concat_channels", b)?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(shape_err("concat_channels", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let hw = ha * wa;
        let mut out = Vec::with_capacity(ba * (ca + cb) * hw);
        for i in 0..ba {
            out.extend_from_slice(&self.value(a).data()[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&self.value(b).data()[i * cb * hw..(i + 1) * cb * hw]);
        }
        let value = Tensor { shape: vec![ba, ca + cb, ha, wa], data: out };
        Ok(self.push("concat_channels", value, Op::ConcatChannels(a, b), &[a, b]))
    }

    /// Spatial mean: `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.dims4("global_avg_pool", x)?;
        let n = T::from_usize_lossy(h * w);
        let out = self.value(x).data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() / n).collect();
        let value = Tensor { shape: vec![b, c], data: out };
        Ok(self.push("global_avg_pool", value, Op::GlobalAvgPool(x), &[x]))
    }

    // ── elementwise ──────────────────────────────────────────────────

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor { shape: self.shape(a).to_vec(), data }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push("add", value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push("sub", value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push("mul", value, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let value = self.zip_with(a, b, |x, y| x / y);
        Ok(self.push("div", value, Op::Div(a, b), &[a, b]))
    }

    /// `x * scale + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let value = self.value(x).map(|v| v * scale + shift);
        self.push("affine", value, Op::Affine { x, scale }, &[x])
    }

    pub fn mul_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(shape_err("mul_const", format!("{:?} vs {:?}", self.shape(x), c.shape())));
        }
        let data = self.value(x).data().iter().zip(c.data()).map(|(&a, &b)| a * b).collect();
        let value = Tensor { shape: c.shape().to_vec(), data };
        Ok(self.push("mul_const", value, Op::MulConst { x, c: c.data().to_vec() }, &[x]))
    }

    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(shape_err("add_const", format!("{:?} vs {:?}", self.shape(x), c.shape())));
        }
        let data = self.value(x).data().iter().zip(c.data()).map(|(&a, &b)| a + b).collect();
        let value = Tensor { shape: c.shape().to_vec(), data };
        Ok(self.push("add_const", value, Op::AddConst(x), &[x]))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.abs());
        self.push("abs", value, Op::Abs(x), &[x])
    }

    // ── reductions and reshaping ─────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize_lossy(self.value(x).numel());
        let s = self.value(x).data().iter().copied().sum::<T>() / n;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Sums everything except axis 1: `[B,C,...] -> [C]`.
    pub fn sum_per_channel(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() < 2 {
            return Err(shape_err("sum_per_channel", format!("{:?}", self.shape(x))));
        }
        let (outer, c, inner) = split_axis1(self.shape(x));
        let data = self.value(x).data();
        let mut out = vec![T::zero(); c];
        for o in 0..outer {
            for (ch, acc) in out.iter_mut().enumerate() {
                let off = (o * c + ch) * inner;
                *acc = *acc + data[off..off + inner].iter().copied().sum::<T>();
            }
        }
        Ok(self.push("sum_per_channel", Tensor { shape: vec![c], data: out }, Op::SumPerChannel(x), &[x]))
    }

    /// Rows `start..start+len` of the leading axis.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || start + len > shape[0] {
            return Err(shape_err("narrow", format!("{start}..{} of {shape:?}", start + len)));
        }
        let row = len_prod(&shape[1..]);
        let data = self.value(x).data()[start * row..(start + len) * row].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        Ok(self.push("narrow", Tensor { shape: out_shape, data }, Op::Narrow { x, start }, &[x]))
    }

    /// Softmax over axis 1 (class channel of `[B,C,H,W]`, or columns of `[B,C]`).
    pub fn softmax_axis1(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() < 2 {
            return Err(shape_err("softmax_axis1", format!("{:?}", self.shape(x))));
        }
        let (outer, c, inner) = split_axis1(self.shape(x));
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |ch: usize| (o * c + ch) * inner + i;
                let m = (0..c).map(|ch| src[idx(ch)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for ch in 0..c {
                    let e = (src[idx(ch)] - m).exp();
                    out[idx(ch)] = e;
                    z = z + e;
                }
                for ch in 0..c {
                    out[idx(ch)] = out[idx(ch)] / z;
                }
            }
        }
        let value = Tensor { shape: self.shape(x).to_vec(), data: out };
        Ok(self.push("softmax_axis1", value, Op::SoftmaxAxis1(x), &[x]))
    }

    /// Divides every axis-1 vector by its Euclidean norm.
    pub fn l2_normalize_axis1(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() < 2 {
            return Err(shape_err("l2_normalize_axis1", format!("{:?}", self.shape(x))));
        }
        let (outer, c, inner) = split_axis1(self.shape(x));
        let tiny = T::lit(1e-12);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        let mut norms = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |ch: usize| (o * c + ch) * inner + i;
                let n = (0..c).map(|ch| src[idx(ch)] * src[idx(ch)]).sum::<T>().sqrt().max(tiny);
                norms[o * inner + i] = n;
                for ch in 0..c {
                    out[idx(ch)] = src[idx(ch)] / n;
                }
            }
        }
        let value = Tensor { shape: self.shape(x).to_vec(), data: out };
        Ok(self.push("l2_normalize_axis1", value, Op::L2NormalizeAxis1 { x, norms }, &[x]))
    }

    /// `a · bᵀ` for `a: [M,D]`, `b: [N,D]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (&[m, d], &[n, db]) = (self.shape(a), self.shape(b)) else {
            return Err(shape_err("matmul_nt", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        };
        if d != db {
            return Err(shape_err("matmul_nt", format!("inner dims {d} vs {db}")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, d, n, T::one(), self.value(a).data(), d as isize, 1, self.value(b).data(), 1, d as isize, T::zero(), &mut out, n as isize, 1);
        Ok(self.push("matmul_nt", Tensor { shape: vec![m, n], data: out }, Op::MatMulNT(a, b), &[a, b]))
    }

    /// Mean over rows of `logsumexp(row) - row[target]`, evaluated with the
    /// row maximum subtracted before exponentiation.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let &[m, n] = self.shape(logits) else {
            return Err(shape_err("cross_entropy_rows", format!("{:?}", self.shape(logits))));
        };
        if targets.len() != m || targets.iter().any(|&t| t >= n) {
            return Err(invalid("cross_entropy_rows", format!("{} targets for {m} rows of {n}", targets.len())));
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); m * n];
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &src[r * n..(r + 1) * n];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[r * n + j] = e;
                z = z + e;
            }
            for p in &mut probs[r * n..(r + 1) * n] {
                *p = *p / z;
            }
            // -(row[t] - mx - ln z)
            total = total + (z.ln() - (row[t] - mx));
        }
        let loss = total / T::from_usize_lossy(m);
        let op = Op::CrossEntropyRows { logits, targets: targets.to_vec(), probs };
        Ok(self.push("cross_entropy_rows", Tensor::scalar(loss), op, &[logits]))
    }

    /// Average-pools `size`x`size` windows at `[batch, top, left]` corners
    /// into rows of a `[K, C]` matrix.
    pub fn patch_pool(&mut self, x: Var, patches: &[[usize; 3]], size: usize) -> Result<Var> {
        let [b, c, h, w] = self.dims4("patch_pool", x)?;
        if let Some(p) = patches.iter().find(|p| p[0] >= b || p[1] + size > h || p[2] + size > w) {
            return Err(invalid("patch_pool", format!("patch {p:?} of size {size} outside {b}x{h}x{w}")));
        }
        let src = self.value(x).data();
        let inv = T::one() / T::from_usize_lossy(size * size);
        let mut out = Vec::with_capacity(patches.len() * c);
        for &[bi, top, left] in patches {
            for ch in 0..c {
                let plane = &src[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w];
                let mut s = T::zero();
                for y in top..top + size {
                    s = s + plane[y * w + left..y * w + left + size].iter().copied().sum::<T>();
                }
                out.push(s * inv);
            }
        }
        let value = Tensor { shape: vec![patches.len(), c], data: out };
        Ok(self.push("patch_pool", value, Op::PatchPool { x, patches: patches.to_vec(), size }, &[x]))
    }

    // ── reverse pass ─────────────────────────────────────────────────

    /// Populates gradients of `loss` w.r.t. every node that requires them.
    ///
    /// Each recorded op is visited once, in reverse recording order; fan-out
    /// contributions are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if len_prod(&shape) != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (input, dg) in self.vjp(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(dg).for_each(|(a, d)| *a = *a + d),
                    slot @ None => *slot = Some(dg),
                }
            }
            // keep intermediate grads readable too
            grads[i] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|data| Tensor { shape: n.value.shape().to_vec(), data }))
            .collect();
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn vjp(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, k } => {
                let [bn, cin, h, wd] = self.nodes[x.0].value.dims4().unwrap();
                let cout = self.nodes[w.0].value.shape()[0];
                let d = ConvDims { b: bn, cin, cout, h, w: wd, k: *k };
                let grads = kernels::conv2d_backward(val(*x), val(*w), g, &d, (self.needs(*x), self.needs(*w), self.needs(*b)));
                let mut out = Vec::new();
                if let Some(dx) = grads.dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = grads.dweight {
                    out.push((*w, dw));
                }
                if let Some(db) = grads.dbias {
                    out.push((*b, db));
                }
                out
            }
            Op::Relu(x) => {
                let dx = val(*x).iter().zip(g).map(|(&v, &d)| if v > T::zero() { d } else { T::zero() }).collect();
                vec![(*x, dx)]
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![T::zero(); val(*x).len()];
                for (&a, &d) in argmax.iter().zip(g) {
                    dx[a as usize] = dx[a as usize] + d;
                }
                vec![(*x, dx)]
            }
            Op::Upsample2(x) => {
                let [b, c, h, w] = node.value.dims4().unwrap();
                vec![(*x, kernels::block_sum2(g, b * c, h, w))]
            }
            Op::AvgPool2(x) => {
                let [b, c, h, w] = node.value.dims4().unwrap();
                let quarter = T::lit(0.25);
                let dx = kernels::upsample2_forward(g, b * c, h, w).into_iter().map(|v| v * quarter).collect();
                vec![(*x, dx)]
            }
            Op::InstanceNorm { x, gain, shift, saved } => {
                let [b, c, h, w] = node.value.dims4().unwrap();
                let (dx, dgain, dshift) = kernels::instance_norm_backward(g, val(*gain), saved, b, c, h * w);
                vec![(*x, dx), (*gain, dgain), (*shift, dshift)]
            }
            Op::Linear { x, w, b } => {
                let &[bn, f] = self.nodes[x.0].value.shape() else { unreachable!() };
                let gdim = self.nodes[w.0].value.shape()[0];
                let mut out = Vec::new();
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); bn * f];
                    T::gemm(bn, gdim, f, T::one(), g, gdim as isize, 1, val(*w), f as isize, 1, T::zero(), &mut dx, f as isize, 1);
                    out.push((*x, dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); gdim * f];
                    T::gemm(gdim, bn, f, T::one(), g, 1, gdim as isize, val(*x), f as isize, 1, T::zero(), &mut dw, f as isize, 1);
                    out.push((*w, dw));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); gdim];
                    for row in g.chunks(gdim) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                    }
                    out.push((*b, db));
                }
                out
            }
            Op::ConcatChannels(a, b) => {
                let [bn, ca, h, w] = self.nodes[a.0].value.dims4().unwrap();
                let cb = self.nodes[b.0].value.shape()[1];
                let hw = h * w;
                let mut da = Vec::with_capacity(bn * ca * hw);
                let mut db = Vec::with_capacity(bn * cb * hw);
                for s in 0..bn {
                    let base = s * (ca + cb) * hw;
                    da.extend_from_slice(&g[base..base + ca * hw]);
                    db.extend_from_slice(&g[base + ca * hw..base + (ca + cb) * hw]);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = self.nodes[x.0].value.dims4().unwrap();
                let inv = T::one() / T::from_usize_lossy(h * w);
                let dx = g.iter().flat_map(|&d| std::iter::repeat_n(d * inv, h * w)).collect();
                vec![(*x, dx)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&d| -d).collect())],
            Op::Mul(a, b) => {
                let da = g.iter().zip(val(*b)).map(|(&d, &y)| d * y).collect();
                let db = g.iter().zip(val(*a)).map(|(&d, &x)| d * x).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Div(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                let da = g.iter().zip(xb).map(|(&d, &y)| d / y).collect();
                let db = g.iter().zip(xa.iter().zip(xb)).map(|(&d, (&x, &y))| -d * x / (y * y)).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Affine { x, scale } => vec![(*x, g.iter().map(|&d| d * *scale).collect())],
            Op::MulConst { x, c } => vec![(*x, g.iter().zip(c).map(|(&d, &m)| d * m).collect())],
            Op::AddConst(x) => vec![(*x, g.to_vec())],
            Op::Abs(x) => {
                let dx = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &d)| {
                        if v > T::zero() {
                            d
                        } else if v < T::zero() {
                            -d
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).len()])],
            Op::Mean(x) => {
                let n = val(*x).len();
                vec![(*x, vec![g[0] / T::from_usize_lossy(n); n])]
            }
            Op::SumPerChannel(x) => {
                let (outer, c, inner) = split_axis1(self.nodes[x.0].value.shape());
                let mut dx = Vec::with_capacity(outer * c * inner);
                for _ in 0..outer {
                    for &d in g.iter().take(c) {
                        dx.extend(std::iter::repeat_n(d, inner));
                    }
                }
                vec![(*x, dx)]
            }
            Op::Narrow { x, start } => {
                let src_len = val(*x).len();
                let row = len_prod(&node.value.shape()[1..]);
                let mut dx = vec![T::zero(); src_len];
                dx[start * row..start * row + g.len()].copy_from_slice(g);
                vec![(*x, dx)]
            }
            Op::SoftmaxAxis1(x) => {
                let (outer, c, inner) = split_axis1(node.value.shape());
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |ch: usize| (o * c + ch) * inner + i;
                        let dot = (0..c).map(|ch| y[idx(ch)] * g[idx(ch)]).sum::<T>();
                        for ch in 0..c {
                            dx[idx(ch)] = y[idx(ch)] * (g[idx(ch)] - dot);
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::L2NormalizeAxis1 { x, norms } => {
                let (outer, c, inner) = split_axis1(node.value.shape());
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |ch: usize| (o * c + ch) * inner + i;
                        let n = norms[o * inner + i];
                        let dot = (0..c).map(|ch| y[idx(ch)] * g[idx(ch)]).sum::<T>();
                        for ch in 0..c {
                            dx[idx(ch)] = (g[idx(ch)] - y[idx(ch)] * dot) / n;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::MatMulNT(a, b) => {
                let &[m, d] = self.nodes[a.0].value.shape() else { unreachable!() };
                let n = self.nodes[b.0].value.shape()[0];
                let mut out = Vec::new();
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * d];
                    T::gemm(m, n, d, T::one(), g, n as isize, 1, val(*b), d as isize, 1, T::zero(), &mut da, d as isize, 1);
                    out.push((*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); n * d];
                    T::gemm(n, m, d, T::one(), g, 1, n as isize, val(*a), d as isize, 1, T::zero(), &mut db, d as isize, 1);
                    out.push((*b, db));
                }
                out
            }
            Op::CrossEntropyRows { logits, targets, probs } => {
                let m = targets.len();
                let n = probs.len() / m;
                let scale = g[0] / T::from_usize_lossy(m);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dx[r * n + t] = dx[r * n + t] - scale;
                }
                vec![(*logits, dx)]
            }
            Op::PatchPool { x, patches, size } => {
                let [_, c, h, w] = self.nodes[x.0].value.dims4().unwrap();
                let inv = T::one() / T::from_usize_lossy(size * size);
                let mut dx = vec![T::zero(); val(*x).len()];
                for (k, &[bi, top, left]) in patches.iter().enumerate() {
                    for ch in 0..c {
                        let d = g[k * c + ch] * inv;
                        let base = (bi * c + ch) * h * w;
                        for y in top..top + size {
                            for v in &mut dx[base + y * w + left..base + y * w + left + size] {
                                *v = *v + d;
                            }
                        }
                    }
                }
                vec![(*x, dx)]
            }
        }
    }
}
