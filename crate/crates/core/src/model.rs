//! The UNet-style backbone and its interchangeable heads.
//!
//! The backbone is an encoder ladder of `depth` levels (two conv-norm-relu
//! blocks, then 2x2 max pooling), a bottleneck, and a mirrored decoder that
//! upsamples, concatenates the matching encoder output, and applies two more
//! conv-norm-relu blocks. Exactly one head sits on top:
//!
//! * `Regression`: 1x1 conv back to the input channels (pixel reconstruction).
//! * `Global`: average pool of the bottleneck, linear, relu, linear, then L2
//!   normalization (whole-image embedding).
//! * `Local`: 1x1 conv on the last decoder level, L2-normalized per pixel.
//! * `Segmentation`: 1x1 conv to per-pixel class scores.
//!
//! Swapping heads never touches backbone weights.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::Rng as _;
use thiserror::Error;

use crate::rng;
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {field} {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("input shape {shape:?} incompatible with model: {reason}")]
    InputShape { shape: Vec<usize>, reason: String },
    #[error("forward needs the {expected} head, but {actual} is attached")]
    HeadNotAttached { expected: HeadKind, actual: String },
    #[error("unknown head mode {0:?} (expected regression, global, local or segmentation)")]
    UnknownHead(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub global_embed_dim: usize,
    pub global_hidden_dim: usize,
    pub local_embed_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 16,
            in_channels: 1,
            num_classes: 2,
            global_embed_dim: 128,
            global_hidden_dim: 256,
            local_embed_dim: 64,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: &str| Err(ModelError::InvalidConfig { field, reason: reason.to_string() });
        if self.depth < 1 {
            return bad("depth", "must be at least 1");
        }
        if self.depth > 8 {
            return bad("depth", "must be at most 8");
        }
        if self.base_channels < 1 {
            return bad("base_channels", "must be at least 1");
        }
        if self.in_channels < 1 {
            return bad("in_channels", "must be at least 1");
        }
        if self.num_classes < 2 {
            return bad("num_classes", "must be at least 2 (background plus one class)");
        }
        if self.global_embed_dim < 2 {
            return bad("global_embed_dim", "must be at least 2");
        }
        if self.global_hidden_dim < 1 {
            return bad("global_hidden_dim", "must be at least 1");
        }
        if self.local_embed_dim < 2 {
            return bad("local_embed_dim", "must be at least 2");
        }
        Ok(())
    }

    /// Output channels of encoder/decoder level `level` (level `depth` is the
    /// bottleneck).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn encoder_channels(&self) -> Vec<usize> {
        (0..self.depth).map(|l| self.channels(l)).collect()
    }

    /// Rejects inputs whose spatial dims do not survive `depth` halvings.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let err = |reason: String| Err(ModelError::InputShape { shape: shape.to_vec(), reason });
        let &[_, c, h, w] = shape else {
            return err("expected [B,C,H,W]".into());
        };
        if c != self.in_channels {
            return err(format!("expected {} input channels", self.in_channels));
        }
        let f = 1usize << self.depth;
        if h % f != 0 || w % f != 0 {
            return err(format!("H and W must be divisible by 2^depth = {f}"));
        }
        if (h / f) * (w / f) < 2 {
            return err(format!("bottleneck would be {}x{}, need at least 2 pixels", h / f, w / f));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Regression,
    Global,
    Local,
    Segmentation,
}

impl HeadKind {
    pub const ALL: [HeadKind; 4] = [HeadKind::Regression, HeadKind::Global, HeadKind::Local, HeadKind::Segmentation];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Regression => "regression",
            HeadKind::Global => "global",
            HeadKind::Local => "local",
            HeadKind::Segmentation => "segmentation",
        }
    }

    fn needs_decoder(self) -> bool {
        !matches!(self, HeadKind::Global)
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        HeadKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ModelError::UnknownHead(s.to_string()))
    }
}

pub const HEAD_PREFIX: &str = "head.";

pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("enc") || name.starts_with("bottleneck")
}

pub fn is_decoder_param(name: &str) -> bool {
    name.starts_with("dec")
}

pub fn is_head_param(name: &str) -> bool {
    name.starts_with(HEAD_PREFIX)
}

/// Backbone weights plus the currently attached head, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    config: UNetConfig,
    tensors: IndexMap<String, Tensor<T>>,
    head: Option<HeadKind>,
}

fn he_uniform<T: Real>(shape: Vec<usize>, fan_in: usize, rng: &mut rng::Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
}

fn add_conv<T: Real>(
    out: &mut IndexMap<String, Tensor<T>>,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut rng::Rng,
) {
    out.insert(format!("{prefix}.weight"), he_uniform(vec![cout, cin, k, k], cin * k * k, rng));
    out.insert(format!("{prefix}.bias"), Tensor::zeros([cout]));
}

fn add_block<T: Real>(out: &mut IndexMap<String, Tensor<T>>, prefix: &str, cin: usize, cout: usize, rng: &mut rng::Rng) {
    for (j, c_in) in [(1, cin), (2, cout)] {
        add_conv(out, &format!("{prefix}.conv{j}"), c_in, cout, 3, rng);
        out.insert(format!("{prefix}.norm{j}.gain"), Tensor::full([cout], T::one()));
        out.insert(format!("{prefix}.norm{j}.shift"), Tensor::zeros([cout]));
    }
}

/// Deterministically initialized backbone (no head attached).
pub fn build_model<T: Real>(config: &UNetConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = rng::stream(seed, &[rng::key("backbone")]);
    let mut tensors = IndexMap::new();
    let mut cin = config.in_channels;
    for level in 0..config.depth {
        add_block(&mut tensors, &format!("enc{level}"), cin, config.channels(level), &mut rng);
        cin = config.channels(level);
    }
    add_block(&mut tensors, "bottleneck", cin, config.channels(config.depth), &mut rng);
    for level in (0..config.depth).rev() {
        let c_in = config.channels(level) + config.channels(level + 1);
        add_block(&mut tensors, &format!("dec{level}"), c_in, config.channels(level), &mut rng);
    }
    Ok(ModelParams { config: config.clone(), tensors, head: None })
}

/// Per-level activations of one forward pass.
pub struct ForwardOutputs {
    pub encoder_features: Vec<Var>,
    pub bottleneck: Var,
    pub decoder_features: Vec<Var>,
    pub head_output: Var,
}

/// Parameter handles of a model bound onto a tape.
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Points parameter `name` at another tape node.
    pub fn replace(&mut self, name: &str, var: Var) {
        *self.vars.get_mut(name).unwrap_or_else(|| panic!("parameter {name} not bound")) = var;
    }

    /// Gradients of the trainable parameters after `tape.backward`.
    pub fn gradients<T: Real>(&self, tape: &mut Tape<T>) -> IndexMap<String, Tensor<T>> {
        let mut out = IndexMap::new();
        for (name, &v) in &self.vars {
            if tape.requires_grad(v) {
                let g = tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec()));
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

impl<T: Real> ModelParams<T> {
    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn head(&self) -> Option<HeadKind> {
        self.head
    }

    pub fn tensors(&self) -> &IndexMap<String, Tensor<T>> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut IndexMap<String, Tensor<T>> {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    /// Reassembles a model from stored parts; shapes are checked against a
    /// freshly built model of the same config.
    pub fn from_parts(
        config: UNetConfig,
        head: Option<HeadKind>,
        tensors: IndexMap<String, Tensor<T>>,
    ) -> Result<Self> {
        let mut reference = build_model::<T>(&config, 0)?;
        if let Some(h) = head {
            reference = reference.swap_heads(h, 0);
        }
        let mismatch = |reason: String| ModelError::InvalidConfig { field: "parameters", reason };
        if reference.tensors.len() != tensors.len() {
            return Err(mismatch(format!("expected {} tensors, found {}", reference.tensors.len(), tensors.len())));
        }
        for ((rn, rt), (n, t)) in reference.tensors.iter().zip(&tensors) {
            if rn != n || rt.shape() != t.shape() {
                return Err(mismatch(format!("expected {rn} {:?}, found {n} {:?}", rt.shape(), t.shape())));
            }
        }
        Ok(Self { config, tensors, head })
    }

    pub fn backbone(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().filter(|(k, _)| !is_head_param(k)).map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Detaches any head and attaches a freshly initialized `mode` head.
    pub fn swap_heads(&self, mode: HeadKind, seed: u64) -> Self {
        let mut tensors: IndexMap<String, Tensor<T>> =
            self.tensors.iter().filter(|(k, _)| !is_head_param(k)).map(|(k, v)| (k.clone(), v.clone())).collect();
        let mut rng = rng::stream(seed, &[rng::key("head"), rng::key(mode.name())]);
        let c = &self.config;
        let base = c.channels(0);
        match mode {
            HeadKind::Regression => add_conv(&mut tensors, "head.recon", base, c.in_channels, 1, &mut rng),
            HeadKind::Segmentation => add_conv(&mut tensors, "head.seg", base, c.num_classes, 1, &mut rng),
            HeadKind::Local => {
                add_conv(&mut tensors, "head.local", base, c.local_embed_dim, 1, &mut rng);
                // a pixel whose features are all dead would otherwise embed to the zero vector
                let bound = 1.0 / (base as f64).sqrt();
                let bias = Tensor::from_fn([c.local_embed_dim], |_| T::lit(rng.random_range(-bound..bound)));
                tensors.insert("head.local.bias".into(), bias);
            }
            HeadKind::Global => {
                let cb = c.channels(c.depth);
                tensors.insert("head.fc1.weight".into(), he_uniform(vec![c.global_hidden_dim, cb], cb, &mut rng));
                tensors.insert("head.fc1.bias".into(), Tensor::zeros([c.global_hidden_dim]));
                tensors.insert(
                    "head.fc2.weight".into(),
                    he_uniform(vec![c.global_embed_dim, c.global_hidden_dim], c.global_hidden_dim, &mut rng),
                );
                tensors.insert("head.fc2.bias".into(), Tensor::zeros([c.global_embed_dim]));
            }
        }
        Self { config: self.config.clone(), tensors, head: Some(mode) }
    }

    /// Puts every parameter on `tape`; those for which `trainable` is false
    /// become constants and receive no gradient.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self.tensors.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable(k)))).collect();
        Bound { vars }
    }

    fn require_head(&self, expected: HeadKind) -> Result<()> {
        if self.head != Some(expected) {
            let actual = self.head.map_or_else(|| "no head".to_string(), |h| h.to_string());
            return Err(ModelError::HeadNotAttached { expected, actual });
        }
        Ok(())
    }

    fn block(&self, tape: &mut Tape<T>, p: &Bound, prefix: &str, mut x: Var) -> Result<Var> {
        for j in 1..=2 {
            let w = p.var(&format!("{prefix}.conv{j}.weight"));
            let b = p.var(&format!("{prefix}.conv{j}.bias"));
            let g = p.var(&format!("{prefix}.norm{j}.gain"));
            let s = p.var(&format!("{prefix}.norm{j}.shift"));
            let y = tape.conv2d(x, w, b)?;
            let y = tape.instance_norm(y, g, s)?;
            x = tape.relu(y);
        }
        Ok(x)
    }

    /// Full forward pass through the backbone and the attached head.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<ForwardOutputs> {
        let head = self.head.ok_or_else(|| ModelError::HeadNotAttached {
            expected: HeadKind::Segmentation,
            actual: "no head".into(),
        })?;
        self.config.check_input(tape.shape(x))?;
        let mut encoder_features = Vec::with_capacity(self.config.depth);
        let mut h = x;
        for level in 0..self.config.depth {
            let f = self.block(tape, p, &format!("enc{level}"), h)?;
            encoder_features.push(f);
            h = tape.max_pool2(f)?;
        }
        let bottleneck = self.block(tape, p, "bottleneck", h)?;

        let mut decoder_features = Vec::new();
        if head.needs_decoder() {
            let mut h = bottleneck;
            for level in (0..self.config.depth).rev() {
                let up = tape.upsample_nearest2(h)?;
                let cat = tape.concat_channels(encoder_features[level], up)?;
                h = self.block(tape, p, &format!("dec{level}"), cat)?;
                decoder_features.push(h);
            }
        }

        let head_output = match head {
            HeadKind::Global => {
                let pooled = tape.global_avg_pool(bottleneck)?;
                let z = tape.linear(pooled, p.var("head.fc1.weight"), p.var("head.fc1.bias"))?;
                let z = tape.relu(z);
                let z = tape.linear(z, p.var("head.fc2.weight"), p.var("head.fc2.bias"))?;
                tape.l2_normalize_axis1(z)?
            }
            HeadKind::Regression => {
                let top = *decoder_features.last().expect("decoder ran");
                tape.conv2d(top, p.var("head.recon.weight"), p.var("head.recon.bias"))?
            }
            HeadKind::Segmentation => {
                let top = *decoder_features.last().expect("decoder ran");
                tape.conv2d(top, p.var("head.seg.weight"), p.var("head.seg.bias"))?
            }
            HeadKind::Local => {
                let top = *decoder_features.last().expect("decoder ran");
                let z = tape.conv2d(top, p.var("head.local.weight"), p.var("head.local.bias"))?;
                tape.l2_normalize_axis1(z)?
            }
        };
        Ok(ForwardOutputs { encoder_features, bottleneck, decoder_features, head_output })
    }

    fn infer(&self, head: HeadKind, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.require_head(head)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, |_| false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &p, xv)?;
        Ok(tape.value(out.head_output).clone())
    }

    /// Per-pixel class scores (pre-softmax), `[B, num_classes, H, W]`.
    pub fn forward_segmentation(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer(HeadKind::Segmentation, x)
    }

    /// Image estimate from a corrupted input, same shape as the input.
    pub fn forward_reconstruction(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer(HeadKind::Regression, x)
    }

    /// Unit-norm whole-image embeddings, `[B, global_embed_dim]`.
    pub fn forward_global_embedding(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer(HeadKind::Global, x)
    }

    /// Per-pixel unit-norm embeddings, `[B, local_embed_dim, H, W]`.
    pub fn forward_local_embeddings(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer(HeadKind::Local, x)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            head: self.head,
        }
    }
}
