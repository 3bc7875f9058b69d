//! A small NHWC network: stride-1 convolutions (via im2col), token-wise
//! linear layers, ReLU, average pooling and flattening.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backprop::{self, ActivationInput, AcbpActivation, BackwardStrategy};
use crate::error::{HlqError, Result};
use crate::quantize::RngState;
use crate::tensor::{matmul, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        out: usize,
        kernel: usize,
        #[serde(default)]
        pad: usize,
        /// Strategy name replacing the global one for this layer.
        #[serde(default)]
        strategy: Option<String>,
    },
    Linear {
        out: usize,
        #[serde(default)]
        strategy: Option<String>,
    },
    Relu,
    AvgPool {
        size: usize,
    },
    Flatten,
    GlobalAvgPool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// `[H, W, C]` of one input sample.
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub init_seed: u64,
}

impl ModelSpec {
    /// Two 3×3 convolutions and two token-wise linear layers on 16×16×1 inputs, averaged over the 4×4 map.
    pub fn reference() -> Self {
        Self {
            input: [16, 16, 1],
            classes: 10,
            layers: vec![
                LayerSpec::Conv { out: 16, kernel: 3, pad: 1, strategy: None },
                LayerSpec::Relu,
                LayerSpec::AvgPool { size: 2 },
                LayerSpec::Conv { out: 32, kernel: 3, pad: 1, strategy: None },
                LayerSpec::Relu,
                LayerSpec::AvgPool { size: 2 },
                LayerSpec::Linear { out: 32, strategy: None },
                LayerSpec::Relu,
                LayerSpec::Linear { out: 10, strategy: None },
                LayerSpec::GlobalAvgPool,
            ],
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `w: [O, k·k·C]` in `(ky, kx, c)` order, `b: [O]`.
    Conv {
        w: Tensor,
        b: Tensor,
        kernel: usize,
        pad: usize,
        strategy: Option<String>,
    },
    /// `w: [O, I]`, applied to every spatial position.
    Linear {
        w: Tensor,
        b: Tensor,
        strategy: Option<String>,
    },
    Relu,
    AvgPool(usize),
    Flatten,
    GlobalAvgPool,
}

impl Layer {
    pub fn has_params(&self) -> bool {
        matches!(self, Layer::Conv { .. } | Layer::Linear { .. })
    }

    fn strategy_name(&self) -> Option<&str> {
        match self {
            Layer::Conv { strategy, .. } | Layer::Linear { strategy, .. } => strategy.as_deref(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<Layer>,
    /// `[H, W, C]` entering each layer, plus the output shape last.
    pub shapes: Vec<[usize; 3]>,
}

fn out_shape(spec: &LayerSpec, [h, w, c]: [usize; 3]) -> Result<[usize; 3]> {
    Ok(match spec {
        LayerSpec::Conv { out, kernel, pad, .. } => {
            if *kernel == 0 || *out == 0 || h + 2 * pad < *kernel || w + 2 * pad < *kernel {
                return Err(HlqError::dim(format!("conv kernel {kernel} does not fit input {h}×{w} with pad {pad}")));
            }
            [h + 2 * pad - kernel + 1, w + 2 * pad - kernel + 1, *out]
        }
        LayerSpec::Linear { out, .. } => {
            if *out == 0 {
                return Err(HlqError::dim("linear layer needs a positive width"));
            }
            [h, w, *out]
        }
        LayerSpec::Relu => [h, w, c],
        LayerSpec::AvgPool { size } => {
            if *size == 0 || h % size != 0 || w % size != 0 {
                return Err(HlqError::dim(format!("pool size {size} does not divide {h}×{w}")));
            }
            [h / size, w / size, c]
        }
        LayerSpec::Flatten => [1, 1, h * w * c],
        LayerSpec::GlobalAvgPool => [1, 1, c],
    })
}

impl Model {
    /// Builds the network with Kaiming-normal weights and zero biases.
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        if spec.input.iter().any(|&d| d == 0) || spec.classes < 2 {
            return Err(HlqError::dim("model needs a non-empty input and at least two classes"));
        }
        let mut shapes = vec![spec.input];
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (idx, ls) in spec.layers.iter().enumerate() {
            let cur = *shapes.last().unwrap();
            let next = out_shape(ls, cur)?;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(idx as u64 + 1)));
            let init = |o: usize, fan_in: usize, rng: &mut ChaCha8Rng| -> Result<Tensor> {
                let n = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).map_err(|e| HlqError::param(e.to_string()))?;
                Ok(Tensor::from_fn(&[o, fan_in], |_| n.sample(rng)))
            };
            layers.push(match ls {
                LayerSpec::Conv { out, kernel, pad, strategy } => Layer::Conv {
                    w: init(*out, kernel * kernel * cur[2], &mut rng)?,
                    b: Tensor::zeros(&[*out]),
                    kernel: *kernel,
                    pad: *pad,
                    strategy: strategy.clone(),
                },
                LayerSpec::Linear { out, strategy } => Layer::Linear {
                    w: init(*out, cur[2], &mut rng)?,
                    b: Tensor::zeros(&[*out]),
                    strategy: strategy.clone(),
                },
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::AvgPool { size } => Layer::AvgPool(*size),
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
            });
            shapes.push(next);
        }
        if *shapes.last().unwrap() != [1, 1, spec.classes] {
            return Err(HlqError::dim(format!(
                "network ends in {:?}, expected [1, 1, {}]",
                shapes.last().unwrap(),
                spec.classes
            )));
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
            shapes,
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let Layer::Conv { w, b, .. } | Layer::Linear { w, b, .. } = l {
                out.push(w);
                out.push(b);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            if let Layer::Conv { w, b, .. } | Layer::Linear { w, b, .. } = l {
                out.push(w);
                out.push(b);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Strategy in effect per layer; parameter-free layers get vanilla.
    pub fn strategies(&self, global: &BackwardStrategy) -> Result<Vec<BackwardStrategy>> {
        self.layers
            .iter()
            .map(|l| match (l.has_params(), l.strategy_name()) {
                (false, _) => Ok(BackwardStrategy::vanilla()),
                (true, None) => Ok(global.clone()),
                (true, Some(name)) => {
                    let mut s = BackwardStrategy::from_name(name)?;
                    s.block = global.block;
                    if s.rank != s.block {
                        s.rank = global.rank;
                    }
                    Ok(s)
                }
            })
            .collect()
    }

    /// `[B, L, I]` and `O` of each parameter layer for a batch of `batch`.
    pub fn layer_dims(&self, batch: usize) -> Vec<(usize, crate::tensor::LayerDims)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let [h, w, c] = self.shapes[i];
            let [ho, wo, o] = self.shapes[i + 1];
            let dims = match l {
                Layer::Conv { kernel, .. } => crate::tensor::LayerDims::new(batch, ho * wo, kernel * kernel * c, o),
                Layer::Linear { .. } => crate::tensor::LayerDims::new(batch, h * w, c, o),
                _ => continue,
            };
            if let Ok(d) = dims {
                out.push((i, d));
            }
        }
        out
    }
}

/// Activation retained for a parameter layer's weight gradient.
#[derive(Debug, Clone, PartialEq)]
pub enum Saved {
    Raw(Tensor),
    Compressed(AcbpActivation),
}

impl Saved {
    pub fn bytes(&self) -> usize {
        match self {
            Saved::Raw(t) => 4 * t.len(),
            Saved::Compressed(a) => a.payload_bytes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Entry {
    Param { saved: Saved, in_shape: [usize; 4] },
    Relu(Vec<bool>),
    Shape([usize; 4]),
}

/// Per-layer state recorded by a training forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    entries: Vec<Entry>,
}

impl Tape {
    /// Bytes of activations retained for weight gradients.
    pub fn saved_bytes(&self) -> usize {
        self.entries
            .iter()
            .map(|e| match e {
                Entry::Param { saved, .. } => saved.bytes(),
                _ => 0,
            })
            .sum()
    }
}

fn dims4(t: &Tensor) -> Result<[usize; 4]> {
    if t.rank() != 4 {
        return Err(HlqError::dim(format!("expected an NHWC tensor, got {:?}", t.shape())));
    }
    Ok([t.dim(0), t.dim(1), t.dim(2), t.dim(3)])
}

/// `[B, H, W, C]` → `[B, H'·W', k·k·C]` for a stride-1 convolution.
pub fn im2col(x: &Tensor, kernel: usize, pad: usize) -> Result<Tensor> {
    let [b, h, w, c] = dims4(x)?;
    let (ho, wo) = (h + 2 * pad + 1 - kernel, w + 2 * pad + 1 - kernel);
    let k = kernel * kernel * c;
    let mut out = vec![0.0f32; b * ho * wo * k];
    let xd = x.data();
    for bb in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((bb * ho + oy) * wo + ox) * k;
                for ky in 0..kernel {
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = ox + kx;
                        if ix < pad || ix - pad >= w {
                            continue;
                        }
                        let src = ((bb * h + iy - pad) * w + ix - pad) * c;
                        let dst = row + (ky * kernel + kx) * c;
                        out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                    }
                }
            }
        }
    }
    Tensor::new(&[b, ho * wo, k], out)
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub fn col2im(cols: &Tensor, in_shape: [usize; 4], kernel: usize, pad: usize) -> Result<Tensor> {
    let [b, h, w, c] = in_shape;
    let (ho, wo) = (h + 2 * pad + 1 - kernel, w + 2 * pad + 1 - kernel);
    let k = kernel * kernel * c;
    if cols.shape() != [b, ho * wo, k] {
        return Err(HlqError::dim(format!("col2im got {:?}, expected [{b}, {}, {k}]", cols.shape(), ho * wo)));
    }
    let mut out = vec![0.0f32; b * h * w * c];
    let cd = cols.data();
    for bb in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((bb * ho + oy) * wo + ox) * k;
                for ky in 0..kernel {
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = ox + kx;
                        if ix < pad || ix - pad >= w {
                            continue;
                        }
                        let dst = ((bb * h + iy - pad) * w + ix - pad) * c;
                        let src = row + (ky * kernel + kx) * c;
                        for ch in 0..c {
                            out[dst + ch] += cd[src + ch];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[b, h, w, c], out)
}

/// `x: [B, L, I]` → `x·wᵀ + b` as `[B, L, O]`.
fn affine(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, l) = (x.dim(0), x.dim(1));
    let o = w.dim(0);
    let mut y = matmul(&x.reshape(&[b * l, x.dim(2)])?, &w.transpose()?)?;
    for row in y.data_mut().chunks_mut(o) {
        for (v, bv) in row.iter_mut().zip(bias.data()) {
            *v += bv;
        }
    }
    y.into_reshape(&[b, l, o])
}

fn avg_pool(x: &Tensor, s: usize) -> Result<Tensor> {
    let [b, h, w, c] = dims4(x)?;
    let (ho, wo) = (h / s, w / s);
    let mut out = vec![0.0f32; b * ho * wo * c];
    let inv = 1.0 / (s * s) as f32;
    for bb in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let src = ((bb * h + y) * w + xx) * c;
                let dst = ((bb * ho + y / s) * wo + xx / s) * c;
                for ch in 0..c {
                    out[dst + ch] += x.data()[src + ch] * inv;
                }
            }
        }
    }
    Tensor::new(&[b, ho, wo, c], out)
}

fn avg_pool_back(g: &Tensor, in_shape: [usize; 4], s: usize) -> Result<Tensor> {
    let [b, h, w, c] = in_shape;
    let (ho, wo) = (h / s, w / s);
    let inv = 1.0 / (s * s) as f32;
    let mut out = vec![0.0f32; b * h * w * c];
    for bb in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let dst = ((bb * h + y) * w + xx) * c;
                let src = ((bb * ho + y / s) * wo + xx / s) * c;
                for ch in 0..c {
                    out[dst + ch] = g.data()[src + ch] * inv;
                }
            }
        }
    }
    Tensor::new(&[b, h, w, c], out)
}

fn global_pool(x: &Tensor) -> Result<Tensor> {
    let [b, h, w, c] = dims4(x)?;
    let mut out = vec![0.0f32; b * c];
    let inv = 1.0 / (h * w) as f32;
    for bb in 0..b {
        for p in 0..h * w {
            for ch in 0..c {
                out[bb * c + ch] += x.data()[(bb * h * w + p) * c + ch] * inv;
            }
        }
    }
    Tensor::new(&[b, 1, 1, c], out)
}

fn global_pool_back(g: &Tensor, [b, h, w, c]: [usize; 4]) -> Result<Tensor> {
    let inv = 1.0 / (h * w) as f32;
    let mut out = vec![0.0f32; b * h * w * c];
    for bb in 0..b {
        for p in 0..h * w {
            for ch in 0..c {
                out[(bb * h * w + p) * c + ch] = g.data()[bb * c + ch] * inv;
            }
        }
    }
    Tensor::new(&[b, h, w, c], out)
}

/// Stream tag of parameter layer `idx` within one step.
fn layer_rng(rng: &RngState, idx: usize) -> RngState {
    rng.split(idx as u64 + 1)
}

impl Model {
    /// Full-precision forward pass; returns logits `[B, classes]`.
    ///
    /// With `record` the tape keeps what backward needs; layers whose
    /// strategy compresses activations store only the compressed form.
    pub fn forward(
        &self,
        x: &Tensor,
        strategies: Option<&[BackwardStrategy]>,
        rng: &RngState,
    ) -> Result<(Tensor, Option<Tape>)> {
        let [b, h, w, c] = dims4(x)?;
        if [h, w, c] != self.spec.input {
            return Err(HlqError::dim(format!("input {:?} does not match model input {:?}", [h, w, c], self.spec.input)));
        }
        if let Some(s) = strategies {
            if s.len() != self.layers.len() {
                return Err(HlqError::param("one strategy per layer is required"));
            }
        }
        let mut cur = x.clone();
        let mut entries = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            let in_shape = dims4(&cur)?;
            let [ho, wo, o] = self.shapes[idx + 1];
            match layer {
                Layer::Conv { w, b: bias, kernel, pad, .. } => {
                    let cols = im2col(&cur, *kernel, *pad)?;
                    let y = affine(&cols, w, bias)?;
                    if let Some(s) = strategies {
                        entries.push(Entry::Param { saved: save(cols, &s[idx], rng, idx)?, in_shape });
                    }
                    cur = y.into_reshape(&[b, ho, wo, o])?;
                }
                Layer::Linear { w, b: bias, .. } => {
                    let tokens = cur.into_reshape(&[b, in_shape[1] * in_shape[2], in_shape[3]])?;
                    let y = affine(&tokens, w, bias)?;
                    if let Some(s) = strategies {
                        entries.push(Entry::Param { saved: save(tokens, &s[idx], rng, idx)?, in_shape });
                    }
                    cur = y.into_reshape(&[b, ho, wo, o])?;
                }
                Layer::Relu => {
                    if strategies.is_some() {
                        entries.push(Entry::Relu(cur.data().iter().map(|&v| v > 0.0).collect()));
                    }
                    cur = cur.map(|v| v.max(0.0));
                }
                Layer::AvgPool(s) => {
                    if strategies.is_some() {
                        entries.push(Entry::Shape(in_shape));
                    }
                    cur = avg_pool(&cur, *s)?;
                }
                Layer::Flatten => {
                    if strategies.is_some() {
                        entries.push(Entry::Shape(in_shape));
                    }
                    cur = cur.into_reshape(&[b, 1, 1, ho * wo * o])?;
                }
                Layer::GlobalAvgPool => {
                    if strategies.is_some() {
                        entries.push(Entry::Shape(in_shape));
                    }
                    cur = global_pool(&cur)?;
                }
            }
        }
        let logits = cur.into_reshape(&[b, self.spec.classes])?;
        Ok((logits, strategies.map(|_| Tape { entries })))
    }

    /// Parameter gradients (aligned with [`Model::params`]) from `g_logits`,
    /// the gradient of the batch-summed loss.
    pub fn backward(
        &self,
        tape: &Tape,
        g_logits: &Tensor,
        strategies: &[BackwardStrategy],
        rng: &RngState,
    ) -> Result<Vec<Tensor>> {
        self.backward_visit(tape, g_logits, strategies, rng, &mut |_, _, _, _| {})
    }

    /// Exact operands `(x, w, g_y)` of every parameter layer's GEMM on a vanilla pass, input side first.
    pub fn layer_operands(&self, x: &Tensor, labels: &[usize]) -> Result<Vec<LayerOperands>> {
        let vanilla = self.strategies(&BackwardStrategy::vanilla())?;
        let rng = RngState::new(0);
        let (logits, tape) = self.forward(x, Some(&vanilla), &rng)?;
        let (_, g) = softmax_cross_entropy(&logits, labels)?;
        let mut ops = Vec::new();
        self.backward_visit(&tape.expect("tape recorded"), &g, &vanilla, &rng, &mut |layer, saved, w, g_y| {
            if let Saved::Raw(x) = saved {
                ops.push(LayerOperands {
                    layer,
                    x: x.clone(),
                    w: w.clone(),
                    g_y: g_y.clone(),
                });
            }
        })?;
        ops.reverse();
        Ok(ops)
    }

    fn backward_visit(
        &self,
        tape: &Tape,
        g_logits: &Tensor,
        strategies: &[BackwardStrategy],
        rng: &RngState,
        visit: &mut dyn FnMut(usize, &Saved, &Tensor, &Tensor),
    ) -> Result<Vec<Tensor>> {
        if tape.entries.len() != self.layers.len() || strategies.len() != self.layers.len() {
            return Err(HlqError::State("tape does not belong to this model's forward pass".into()));
        }
        let b = g_logits.dim(0);
        let first_param = self.layers.iter().position(Layer::has_params);
        let mut g = g_logits.reshape(&[b, 1, 1, self.spec.classes])?;
        let mut grads: Vec<Tensor> = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let need_gx = first_param.is_some_and(|f| idx > f);
            match (layer, &tape.entries[idx]) {
                (Layer::Conv { w, kernel, pad, .. }, Entry::Param { saved, in_shape }) => {
                    let [_, ho, wo, o] = dims4(&g)?;
                    let gy = g.into_reshape(&[b, ho * wo, o])?;
                    visit(idx, saved, w, &gy);
                    let (gw, gb) = param_grads(saved, &gy, &strategies[idx], rng, idx)?;
                    grads.push(gb);
                    grads.push(gw);
                    g = if need_gx {
                        let gc = backprop::input_grad(&gy, w, &strategies[idx], &mut layer_rng(rng, idx).split(10))?;
                        col2im(&gc, *in_shape, *kernel, *pad)?
                    } else {
                        Tensor::zeros(in_shape)
                    };
                }
                (Layer::Linear { w, .. }, Entry::Param { saved, in_shape }) => {
                    let [_, ho, wo, o] = dims4(&g)?;
                    let gy = g.into_reshape(&[b, ho * wo, o])?;
                    visit(idx, saved, w, &gy);
                    let (gw, gb) = param_grads(saved, &gy, &strategies[idx], rng, idx)?;
                    grads.push(gb);
                    grads.push(gw);
                    g = if need_gx {
                        backprop::input_grad(&gy, w, &strategies[idx], &mut layer_rng(rng, idx).split(10))?
                            .into_reshape(in_shape)?
                    } else {
                        Tensor::zeros(in_shape)
                    };
                }
                (Layer::Relu, Entry::Relu(mask)) => {
                    for (v, &m) in g.data_mut().iter_mut().zip(mask) {
                        if !m {
                            *v = 0.0;
                        }
                    }
                }
                (Layer::AvgPool(s), Entry::Shape(shape)) => g = avg_pool_back(&g, *shape, *s)?,
                (Layer::Flatten, Entry::Shape(shape)) => g = g.into_reshape(shape)?,
                (Layer::GlobalAvgPool, Entry::Shape(shape)) => g = global_pool_back(&g, *shape)?,
                _ => return Err(HlqError::State(format!("missing saved state for layer {idx}"))),
            }
        }
        grads.reverse();
        Ok(grads)
    }
}

/// One parameter layer's GEMM operands: `x: [B, L, I]`, `w: [O, I]`, `g_y: [B, L, O]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOperands {
    pub layer: usize,
    pub x: Tensor,
    pub w: Tensor,
    pub g_y: Tensor,
}

fn save(x: Tensor, s: &BackwardStrategy, rng: &RngState, idx: usize) -> Result<Saved> {
    if s.uses_acbp() {
        let a = backprop::compress_activation(&x, s, &mut layer_rng(rng, idx).split(11))?;
        Ok(Saved::Compressed(a))
    } else {
        Ok(Saved::Raw(x))
    }
}

fn param_grads(
    saved: &Saved,
    gy: &Tensor,
    s: &BackwardStrategy,
    rng: &RngState,
    idx: usize,
) -> Result<(Tensor, Tensor)> {
    let input = match saved {
        Saved::Raw(x) => ActivationInput::Raw(x),
        Saved::Compressed(a) => ActivationInput::Compressed(a),
    };
    let gw = backprop::weight_grad(input, gy, s, &mut layer_rng(rng, idx).split(11))?;
    let (b, l, o) = (gy.dim(0), gy.dim(1), gy.dim(2));
    let mut gb = vec![0.0f64; o];
    for t in 0..b * l {
        for (acc, v) in gb.iter_mut().zip(&gy.data()[t * o..(t + 1) * o]) {
            *acc += *v as f64;
        }
    }
    let inv = 1.0 / b.max(1) as f64;
    Ok((gw, Tensor::new(&[o], gb.into_iter().map(|v| (v * inv) as f32).collect())?))
}

/// Mean softmax cross-entropy and its gradient w.r.t. logits for the summed loss.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, c) = logits.rows_cols();
    if logits.rank() != 2 || labels.len() != b {
        return Err(HlqError::dim(format!("logits {:?} vs {} labels", logits.shape(), labels.len())));
    }
    let mut grad = vec![0.0f32; b * c];
    let mut loss = 0.0f64;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(HlqError::Value(format!("label {y} outside {c} classes")));
        }
        let row = &logits.data()[i * c..(i + 1) * c];
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v)) as f64;
        let z: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
        loss += z.ln() + m - row[y] as f64;
        for (j, &v) in row.iter().enumerate() {
            let p = (v as f64 - m).exp() / z;
            grad[i * c + j] = (p - if j == y { 1.0 } else { 0.0 }) as f32;
        }
    }
    Ok((loss / b.max(1) as f64, Tensor::new(&[b, c], grad)?))
}

/// Index of the largest logit per row.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let (_, c) = logits.rows_cols();
    logits
        .data()
        .chunks(c)
        .map(|r| r.iter().enumerate().fold((0, f32::NEG_INFINITY), |a, (i, &v)| if v > a.1 { (i, v) } else { a }).0)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::max_abs_diff;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| r.random_range(-1.0f32..1.0))
    }

    #[test]
    fn reference_model_shapes() {
        let m = Model::new(&ModelSpec::reference()).unwrap();
        assert_eq!(*m.shapes.last().unwrap(), [1, 1, 10]);
        assert!(m.param_count() < 10_000);
        let dims = m.layer_dims(32);
        assert_eq!(dims.len(), 4);
        assert_eq!((dims[0].1.seq, dims[0].1.in_ch), (256, 9));
        assert_eq!((dims[1].1.seq, dims[1].1.in_ch), (64, 144));
    }

    #[test]
    fn identity_linear_passes_input() {
        let spec = ModelSpec {
            input: [1, 1, 4],
            classes: 4,
            layers: vec![LayerSpec::Linear { out: 4, strategy: None }],
            init_seed: 0,
        };
        let mut m = Model::new(&spec).unwrap();
        *m.params_mut()[0] = Tensor::identity(4);
        let x = random(&[3, 1, 1, 4], 1);
        let (y, _) = m.forward(&x, None, &RngState::new(0)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn uniform_logits_loss_is_ln_c() {
        let (l, g) = softmax_cross_entropy(&Tensor::zeros(&[2, 10]), &[3, 7]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        assert!((g.data()[3] + 0.9).abs() < 1e-6);
        assert!((g.sum()).abs() < 1e-6);
    }

    #[test]
    fn im2col_adjoint() {
        // <im2col(x), c> == <x, col2im(c)>
        let x = random(&[2, 5, 4, 3], 2);
        let cols = im2col(&x, 3, 1).unwrap();
        let c = random(cols.shape(), 3);
        let lhs: f64 = cols.data().iter().zip(c.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
        let back = col2im(&c, [2, 5, 4, 3], 3, 1).unwrap();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn one_by_one_conv_equals_linear() {
        let conv = ModelSpec {
            input: [4, 4, 3],
            classes: 5,
            layers: vec![
                LayerSpec::Conv { out: 5, kernel: 1, pad: 0, strategy: None },
                LayerSpec::GlobalAvgPool,
            ],
            init_seed: 4,
        };
        let lin = ModelSpec {
            layers: vec![LayerSpec::Linear { out: 5, strategy: None }, LayerSpec::GlobalAvgPool],
            ..conv.clone()
        };
        let mc = Model::new(&conv).unwrap();
        let mut ml = Model::new(&lin).unwrap();
        for (d, s) in ml.params_mut().into_iter().zip(mc.params()) {
            *d = s.clone();
        }
        let x = random(&[3, 4, 4, 3], 5);
        let strat = vec![BackwardStrategy::vanilla(); 2];
        let rng = RngState::new(0);
        let (yc, tc) = mc.forward(&x, Some(&strat), &rng).unwrap();
        let (yl, tl) = ml.forward(&x, Some(&strat), &rng).unwrap();
        assert!(max_abs_diff(&yc, &yl).unwrap() < 1e-6);
        let g = random(&[3, 5], 6);
        let gc = mc.backward(&tc.unwrap(), &g, &strat, &rng).unwrap();
        let gl = ml.backward(&tl.unwrap(), &g, &strat, &rng).unwrap();
        for (a, b) in gc.iter().zip(&gl) {
            assert!(max_abs_diff(a, b).unwrap() < 1e-6);
        }
    }

    #[test]
    fn stacked_scalar_linears() {
        // y = w2·(w1·x + b1) + b2, loss gradient g on y
        let spec = ModelSpec {
            input: [1, 1, 1],
            classes: 2,
            layers: vec![
                LayerSpec::Linear { out: 1, strategy: None },
                LayerSpec::Linear { out: 2, strategy: None },
            ],
            init_seed: 0,
        };
        let mut m = Model::new(&spec).unwrap();
        {
            let p = m.params_mut();
            let vals = [vec![2.0], vec![0.5], vec![3.0, -1.0], vec![0.0, 0.0]];
            for (t, v) in p.into_iter().zip(vals) {
                let shape = t.shape().to_vec();
                *t = Tensor::new(&shape, v).unwrap();
            }
        }
        let x = Tensor::new(&[1, 1, 1, 1], vec![4.0]).unwrap();
        let strat = vec![BackwardStrategy::vanilla(); 2];
        let rng = RngState::new(0);
        let (y, tape) = m.forward(&x, Some(&strat), &rng).unwrap();
        assert_eq!(y.data(), &[25.5, -8.5]);
        let g = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let grads = m.backward(&tape.unwrap(), &g, &strat, &rng).unwrap();
        // h = 8.5; dL/dh = 3·1 + (-1)·2 = 1
        assert_eq!(grads[2].data(), &[8.5, 17.0]);
        assert_eq!(grads[3].data(), &[1.0, 2.0]);
        assert_eq!(grads[0].data(), &[4.0]);
        assert_eq!(grads[1].data(), &[1.0]);
    }

    #[test]
    fn missing_state_is_reported() {
        let m = Model::new(&ModelSpec::reference()).unwrap();
        let strat = m.strategies(&BackwardStrategy::vanilla()).unwrap();
        let empty = Tape { entries: vec![Entry::Relu(vec![]); m.layers.len()] };
        assert!(matches!(
            m.backward(&empty, &Tensor::zeros(&[1, 10]), &strat, &RngState::new(0)),
            Err(HlqError::State(_))
        ));
    }

    #[test]
    fn bad_specs_rejected() {
        let mut s = ModelSpec::reference();
        s.classes = 7;
        assert!(Model::new(&s).is_err());
        let mut s = ModelSpec::reference();
        s.layers[2] = LayerSpec::AvgPool { size: 3 };
        assert!(Model::new(&s).is_err());
    }
}
