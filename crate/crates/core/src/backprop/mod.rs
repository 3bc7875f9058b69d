//! Backward-pass strategies for a linear layer `y = x · wᵀ` (convolutions
//! arrive here already lowered by im2col).
//!
//! Shapes: `x: [B, L, I]`, `w: [O, I]`, `g_y: [B, L, O]`. `g_y` is the
//! gradient of the batch-summed loss, so `g_x = g_y · w` is per-sample and
//! `g_w = (1/B)·ḡ_yᵀ·x̄` is the gradient of the batch-mean loss.
//!
//! Each strategy is a pair of path configurations: one for `g_x` and one
//! for `g_w`. The named variants (vanilla, naive, HQ, LBP-WHT, HLQ) are
//! constructors over that pair; ablations mix paths freely.

pub mod acbp;

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::error::{HlqError, Result};
use crate::hadamard::{self, HadamardPlan, DEFAULT_BLOCK, DEFAULT_RANK};
use crate::quantize::{self, check_bits, dequant, Granularity, QuantizedTensor, RngState, Rounding};
use crate::tensor::{matmul, LayerDims, Tensor};

pub use acbp::{acbp_header, acbp_pack, acbp_unpack, acbp_verify, AcbpHeader};

/// Transform applied on the activation-gradient path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GxTransform {
    None,
    /// Full-rank block transform along `O`, offset inside the product.
    Hadamard,
    /// Low-rank projection of `g_y` along `L` (or `B`), inverse-projected afterwards.
    LowRank,
}

/// Transform applied on the weight-gradient path, always along `L` (or `B`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GwTransform {
    None,
    Hadamard,
    LowRank,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GradXPath {
    pub transform: GxTransform,
    /// `None` keeps the product in floating point.
    pub bits: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GradWPath {
    pub transform: GwTransform,
    pub bits: Option<u8>,
}

impl GradXPath {
    pub const FLOAT: GradXPath = GradXPath {
        transform: GxTransform::None,
        bits: None,
    };
}

impl GradWPath {
    pub const FLOAT: GradWPath = GradWPath {
        transform: GwTransform::None,
        bits: None,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Vanilla,
    NaiveQuant,
    Hq,
    LbpWht,
    Hlq,
    Custom,
}

/// Which axis the `g_w`-path transform runs along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HtAxis {
    Seq,
    Batch,
}

impl HtAxis {
    /// `L` when it spans at least one block, otherwise `B`.
    pub fn for_dims(batch: usize, seq: usize, block: usize) -> HtAxis {
        let _ = batch;
        if seq >= block {
            HtAxis::Seq
        } else {
            HtAxis::Batch
        }
    }

    /// Index of the axis in a `[B, L, C]` tensor.
    pub fn index(self) -> usize {
        match self {
            HtAxis::Seq => 1,
            HtAxis::Batch => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackwardStrategy {
    pub kind: StrategyKind,
    pub gx: GradXPath,
    pub gw: GradWPath,
    pub block: usize,
    pub rank: usize,
    /// Calibrated basis for the low-rank paths; `None` uses the lowest-sequency bases.
    pub basis: Option<Vec<usize>>,
    pub rounding: Rounding,
    /// Scale sharing for `g_w`-path operands: per tensor or per channel.
    pub gw_granularity: Granularity,
    /// Run the `g_w` projection and quantization during the forward pass.
    pub acbp: bool,
    pub allow_padding: bool,
}

impl BackwardStrategy {
    fn base(kind: StrategyKind, gx: GradXPath, gw: GradWPath) -> Self {
        Self {
            kind,
            gx,
            gw,
            block: DEFAULT_BLOCK,
            rank: DEFAULT_BLOCK,
            basis: None,
            rounding: Rounding::Stochastic,
            gw_granularity: Granularity::Tensor,
            acbp: false,
            allow_padding: true,
        }
    }

    pub fn vanilla() -> Self {
        Self::base(StrategyKind::Vanilla, GradXPath::FLOAT, GradWPath::FLOAT)
    }

    /// Both products quantized directly, no transform.
    pub fn naive(bits: u8) -> Self {
        Self::base(
            StrategyKind::NaiveQuant,
            GradXPath {
                transform: GxTransform::None,
                bits: Some(bits),
            },
            GradWPath {
                transform: GwTransform::None,
                bits: Some(bits),
            },
        )
    }

    /// Hadamard quantization on both paths at full rank.
    pub fn hq(bits_gx: u8, bits_gw: u8) -> Self {
        Self::base(
            StrategyKind::Hq,
            GradXPath {
                transform: GxTransform::Hadamard,
                bits: Some(bits_gx),
            },
            GradWPath {
                transform: GwTransform::Hadamard,
                bits: Some(bits_gw),
            },
        )
    }

    /// Low-rank projection on both paths, floating point.
    pub fn lbp_wht(rank: usize) -> Self {
        Self {
            rank,
            ..Self::base(
                StrategyKind::LbpWht,
                GradXPath {
                    transform: GxTransform::LowRank,
                    bits: None,
                },
                GradWPath {
                    transform: GwTransform::LowRank,
                    bits: None,
                },
            )
        }
    }

    /// int4 HQ on `g_x`, int8 + rank-8-of-16 projection on `g_w`, compressed activations.
    pub fn hlq() -> Self {
        Self {
            rank: DEFAULT_RANK,
            rounding: Rounding::PseudoStochastic,
            acbp: true,
            ..Self::base(
                StrategyKind::Hlq,
                GradXPath {
                    transform: GxTransform::Hadamard,
                    bits: Some(4),
                },
                GradWPath {
                    transform: GwTransform::LowRank,
                    bits: Some(8),
                },
            )
        }
    }

    pub fn custom(gx: GradXPath, gw: GradWPath) -> Self {
        let mut s = Self::base(StrategyKind::Custom, gx, gw);
        if gx.transform == GxTransform::LowRank || gw.transform == GwTransform::LowRank {
            s.rank = DEFAULT_RANK;
        }
        s
    }

    /// Looks up a named variant with its defaults.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "vanilla" | "fp" => Ok(Self::vanilla()),
            "naive" | "naive-int4" | "int4" => Ok(Self::naive(4)),
            "hq" => Ok(Self::hq(4, 4)),
            "lbp-wht" | "lbp" => Ok(Self::lbp_wht(DEFAULT_RANK)),
            "hlq" => Ok(Self::hlq()),
            other => Err(HlqError::param(format!(
                "unknown strategy `{other}` (expected vanilla, naive, hq, lbp-wht or hlq)"
            ))),
        }
    }

    pub fn name(&self) -> String {
        match self.kind {
            StrategyKind::Vanilla => "vanilla".into(),
            StrategyKind::NaiveQuant => "naive".into(),
            StrategyKind::Hq => "hq".into(),
            StrategyKind::LbpWht => "lbp-wht".into(),
            StrategyKind::Hlq => "hlq".into(),
            StrategyKind::Custom => format!(
                "gx={},gw={}",
                path_label(self.gx.transform == GxTransform::Hadamard, self.gx.transform == GxTransform::LowRank, self.gx.bits),
                path_label(self.gw.transform == GwTransform::Hadamard, self.gw.transform == GwTransform::LowRank, self.gw.bits)
            ),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block < 2 || !self.block.is_power_of_two() {
            return Err(HlqError::param(format!(
                "block size must be a power of two, got {}",
                self.block
            )));
        }
        if self.rank == 0 || self.rank > self.block {
            return Err(HlqError::param(format!(
                "rank must be in 1..={}, got {}",
                self.block, self.rank
            )));
        }
        for bits in [self.gx.bits, self.gw.bits].into_iter().flatten() {
            check_bits(bits)?;
        }
        if let Some(basis) = &self.basis {
            if basis.len() != self.rank {
                return Err(HlqError::param(format!(
                    "calibrated basis has {} entries but rank is {}",
                    basis.len(),
                    self.rank
                )));
            }
        }
        Ok(())
    }

    /// Every quantizer runs at `bits` (used for the warmup phase).
    pub fn with_bits(&self, bits: u8) -> Self {
        let mut s = self.clone();
        s.gx.bits = s.gx.bits.map(|_| bits);
        s.gw.bits = s.gw.bits.map(|_| bits);
        s
    }

    /// Same transforms, no quantization and full rank: must reproduce vanilla.
    pub fn degenerate(&self) -> Self {
        let mut s = self.clone();
        s.gx.bits = None;
        s.gw.bits = None;
        s.rank = s.block;
        s.basis = None;
        s
    }

    /// Same transforms and rank, no quantization.
    pub fn unquantized(&self) -> Self {
        let mut s = self.clone();
        s.gx.bits = None;
        s.gw.bits = None;
        s
    }

    pub fn is_vanilla(&self) -> bool {
        self.gx == GradXPath::FLOAT && self.gw == GradWPath::FLOAT
    }

    /// Whether the forward pass should store a compressed activation.
    pub fn uses_acbp(&self) -> bool {
        self.acbp && self.gw.transform == GwTransform::LowRank
    }

    /// Plan for the low-rank paths, targeting `axis`.
    pub fn plan(&self, axis: usize) -> Result<HadamardPlan> {
        match &self.basis {
            Some(b) => HadamardPlan::new(self.block, axis, b.clone()),
            None => HadamardPlan::low_sequency(self.block, self.rank, axis),
        }
    }

    fn axis_for(&self, batch: usize, seq: usize) -> Result<HtAxis> {
        let axis = HtAxis::for_dims(batch, seq, self.block);
        let extent = match axis {
            HtAxis::Seq => seq,
            HtAxis::Batch => batch,
        };
        if !self.allow_padding && extent % self.block != 0 {
            return Err(HlqError::dim(format!(
                "{axis:?} extent {extent} is not a multiple of {} and padding is disabled",
                self.block
            )));
        }
        Ok(axis)
    }
}

fn path_label(hadamard: bool, lowrank: bool, bits: Option<u8>) -> String {
    let mut s = match bits {
        Some(b) => format!("int{b}"),
        None => "fp".into(),
    };
    if hadamard {
        s.push_str("+ht");
    }
    if lowrank {
        s.push_str("+hla");
    }
    s
}

/// Gradients of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GradPair {
    pub g_x: Tensor,
    pub g_w: Tensor,
}

/// Forward-time compressed activation retained for the `g_w` product.
#[derive(Debug, Clone, PartialEq)]
pub struct AcbpActivation {
    /// Original `[B, L, I]` of the activation.
    pub dims: [usize; 3],
    /// Plan with the target axis already resolved.
    pub plan: HadamardPlan,
    pub stored: StoredActivation,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StoredActivation {
    Quantized(QuantizedTensor),
    Float(Tensor),
}

impl AcbpActivation {
    pub fn axis(&self) -> HtAxis {
        if self.plan.target_axis() == 1 {
            HtAxis::Seq
        } else {
            HtAxis::Batch
        }
    }

    /// Shape of the stored projection.
    pub fn stored_shape(&self) -> [usize; 3] {
        let mut s = self.dims;
        let a = self.plan.target_axis();
        s[a] = self.plan.projected_extent(s[a]);
        s
    }

    pub fn bits(&self) -> Option<u8> {
        match &self.stored {
            StoredActivation::Quantized(q) => Some(q.bits()),
            StoredActivation::Float(_) => None,
        }
    }

    /// Bytes of stored values, excluding scales and container header.
    pub fn payload_bytes(&self) -> usize {
        match &self.stored {
            StoredActivation::Quantized(q) => q.payload_bytes(),
            StoredActivation::Float(t) => 4 * t.len(),
        }
    }
}

/// Activation handed to the weight-gradient computation.
#[derive(Debug, Clone, Copy)]
pub enum ActivationInput<'a> {
    Raw(&'a Tensor),
    Compressed(&'a AcbpActivation),
}

impl ActivationInput<'_> {
    fn dims(&self) -> Result<[usize; 3]> {
        match self {
            ActivationInput::Raw(x) => check_x(x),
            ActivationInput::Compressed(a) => Ok(a.dims),
        }
    }
}

fn check_layer(x_dims: [usize; 3], w: &Tensor, g_y: &Tensor) -> Result<LayerDims> {
    if w.rank() != 2 || g_y.rank() != 3 {
        return Err(HlqError::dim(format!(
            "expected w [O, I] and g_y [B, L, O], got {:?} and {:?}",
            w.shape(),
            g_y.shape()
        )));
    }
    let [b, l, i] = x_dims;
    if w.dim(1) != i || g_y.shape() != [b, l, w.dim(0)] {
        return Err(HlqError::dim(format!(
            "inconsistent shapes: x [{b}, {l}, {i}], w {:?}, g_y {:?}",
            w.shape(),
            g_y.shape()
        )));
    }
    LayerDims::new(b, l, i, w.dim(0))
}

fn check_x(x: &Tensor) -> Result<[usize; 3]> {
    if x.rank() != 3 {
        return Err(HlqError::dim(format!("expected x [B, L, I], got {:?}", x.shape())));
    }
    Ok([x.dim(0), x.dim(1), x.dim(2)])
}

fn as_rows(t: &Tensor) -> Result<Tensor> {
    let (r, c) = t.rows_cols();
    t.reshape(&[r, c])
}

/// Operand of the `g_w` product in token-matrix form `[rows × C]`.
enum Operand {
    Float(Tensor),
    Quant(QuantizedTensor),
}

/// Full-rank block transform along `axis` after zero padding.
fn padded_ht(t: &Tensor, block: usize, axis: usize) -> Result<Tensor> {
    let mut p = t.pad_axis(axis, block)?;
    hadamard::block_ht_in_place(&mut p, block, axis)?;
    Ok(p)
}

/// Maps a `[B, L, C]` tensor into the `g_w`-path frequency domain.
fn gw_prepare<'a>(t: &'a Tensor, s: &BackwardStrategy, axis: HtAxis) -> Result<Cow<'a, Tensor>> {
    let a = axis.index();
    Ok(match s.gw.transform {
        GwTransform::None => Cow::Borrowed(t),
        GwTransform::Hadamard => Cow::Owned(padded_ht(t, s.block, a)?),
        GwTransform::LowRank => {
            let plan = s.plan(a)?;
            if plan.is_full_rank() {
                Cow::Owned(padded_ht(t, s.block, a)?)
            } else {
                Cow::Owned(hadamard::project_lowrank(t, &plan)?)
            }
        }
    })
}

fn quantize_rows(
    t: &Tensor,
    bits: u8,
    s: &BackwardStrategy,
    granularity: Granularity,
    rng: &mut RngState,
) -> Result<QuantizedTensor> {
    quantize::quantize(t, bits, s.rounding, granularity, rng)
}

/// `factor · gyᵀ · x` over token matrices, quantized when the path asks for it.
fn gw_product(
    gy: &Tensor,
    x: Operand,
    s: &BackwardStrategy,
    factor: f64,
    rng: &mut RngState,
) -> Result<Tensor> {
    match (s.gw.bits, x) {
        (None, Operand::Float(x)) => {
            let g = matmul(&gy.transpose()?, &x)?;
            Ok(g.scale(factor as f32))
        }
        (Some(bits), x) => {
            let qx = match x {
                Operand::Quant(q) => q,
                Operand::Float(x) => quantize_rows(&x, bits, s, s.gw_granularity, &mut rng.split(2))?,
            };
            if qx.bits() != bits {
                return Err(HlqError::State(format!(
                    "stored activation is int{} but the strategy expects int{bits}",
                    qx.bits()
                )));
            }
            let qgy = quantize_rows(gy, bits, s, s.gw_granularity, &mut rng.split(3))?.transpose()?;
            Ok(quantize::int_matmul(&qgy, &qx)?.dequantize(factor))
        }
        (None, Operand::Quant(_)) => Err(HlqError::State(
            "stored activation is quantized but the strategy keeps g_w in floating point".into(),
        )),
    }
}

/// Weight gradient `[O, I]` under the strategy's `g_w` path.
pub fn weight_grad(
    input: ActivationInput<'_>,
    g_y: &Tensor,
    strategy: &BackwardStrategy,
    rng: &mut RngState,
) -> Result<Tensor> {
    strategy.validate()?;
    let dims = input.dims()?;
    if g_y.rank() != 3 || g_y.dim(0) != dims[0] || g_y.dim(1) != dims[1] {
        return Err(HlqError::dim(format!(
            "g_y {:?} does not match activation dims {dims:?}",
            g_y.shape()
        )));
    }
    let batch = dims[0];
    let factor = 1.0 / batch.max(1) as f64;
    let axis = strategy.axis_for(dims[0], dims[1])?;
    let gy = gw_prepare(g_y, strategy, axis)?;
    let gy_rows = as_rows(&gy)?;
    let x_operand = match input {
        ActivationInput::Raw(x) => {
            let prepared = gw_prepare(x, strategy, axis)?;
            Operand::Float(as_rows(&prepared)?)
        }
        ActivationInput::Compressed(acbp) => {
            if strategy.gw.transform != GwTransform::LowRank {
                return Err(HlqError::State(
                    "compressed activation supplied to a strategy without a low-rank g_w path".into(),
                ));
            }
            let expected = strategy.plan(axis.index())?;
            if acbp.plan != expected {
                return Err(HlqError::State(format!(
                    "activation was compressed with bases {:?} on axis {} but backward uses {:?} on axis {}",
                    acbp.plan.basis_indices(),
                    acbp.plan.target_axis(),
                    expected.basis_indices(),
                    expected.target_axis()
                )));
            }
            let [r0, r1, r2] = acbp.stored_shape();
            match &acbp.stored {
                StoredActivation::Float(t) => Operand::Float(t.reshape(&[r0 * r1, r2])?),
                StoredActivation::Quantized(q) => Operand::Quant(q.clone().with_shape(&[r0 * r1, r2])?),
            }
        }
    };
    gw_product(&gy_rows, x_operand, strategy, factor, rng)
}

fn gx_product(gy: &Tensor, w: &Tensor, s: &BackwardStrategy, rng: &mut RngState) -> Result<Tensor> {
    match s.gx.bits {
        None => matmul(gy, w),
        Some(bits) => {
            let qg = quantize::quantize(gy, bits, s.rounding, Granularity::Tensor, &mut rng.split(0))?;
            let qw = quantize::quantize(w, bits, s.rounding, Granularity::Tensor, &mut rng.split(1))?;
            Ok(quantize::int_matmul(&qg, &qw)?.dequantize(1.0))
        }
    }
}

/// Input gradient `[B, L, I]` under the strategy's `g_x` path.
pub fn input_grad(
    g_y: &Tensor,
    w: &Tensor,
    strategy: &BackwardStrategy,
    rng: &mut RngState,
) -> Result<Tensor> {
    strategy.validate()?;
    if g_y.rank() != 3 || w.rank() != 2 || g_y.dim(2) != w.dim(0) {
        return Err(HlqError::dim(format!(
            "expected g_y [B, L, O] and w [O, I], got {:?} and {:?}",
            g_y.shape(),
            w.shape()
        )));
    }
    let (b, l, o, i) = (g_y.dim(0), g_y.dim(1), g_y.dim(2), w.dim(1));
    match strategy.gx.transform {
        GxTransform::None => {
            let gx = gx_product(&as_rows(g_y)?, w, strategy, rng)?;
            gx.into_reshape(&[b, l, i])
        }
        GxTransform::Hadamard => {
            if !strategy.allow_padding && o % strategy.block != 0 {
                return Err(HlqError::dim(format!(
                    "O = {o} is not a multiple of {} and padding is disabled",
                    strategy.block
                )));
            }
            let gy_h = padded_ht(g_y, strategy.block, 2)?;
            let w_h = padded_ht(w, strategy.block, 0)?;
            let gx = gx_product(&as_rows(&gy_h)?, &w_h, strategy, rng)?;
            gx.into_reshape(&[b, l, i])
        }
        GxTransform::LowRank => {
            let axis = strategy.axis_for(b, l)?.index();
            let extent = g_y.dim(axis);
            let plan = strategy.plan(axis)?;
            let projected = if plan.is_full_rank() {
                padded_ht(g_y, strategy.block, axis)?
            } else {
                hadamard::project_lowrank(g_y, &plan)?
            };
            let mut shape = [projected.dim(0), projected.dim(1), i];
            let gx = gx_product(&as_rows(&projected)?, w, strategy, rng)?;
            shape[axis] = projected.dim(axis);
            let gx = gx.into_reshape(&shape)?;
            if plan.is_full_rank() {
                padded_ht(&gx, strategy.block, axis)?.crop_axis(axis, extent)
            } else {
                hadamard::unproject_lowrank(&gx, &plan, extent)
            }
        }
    }
}

/// Both gradients of one layer under any strategy.
pub fn backward(
    input: ActivationInput<'_>,
    w: &Tensor,
    g_y: &Tensor,
    strategy: &BackwardStrategy,
    rng: &mut RngState,
) -> Result<GradPair> {
    check_layer(input.dims()?, w, g_y)?;
    let g_x = input_grad(g_y, w, strategy, &mut rng.split(10))?;
    let g_w = weight_grad(input, g_y, strategy, &mut rng.split(11))?;
    Ok(GradPair { g_x, g_w })
}

/// Exact gradients: `g_w = (1/B)·ḡ_yᵀ·x̄`, `g_x = g_y·w`.
pub fn vanilla_backward(x: &Tensor, w: &Tensor, g_y: &Tensor) -> Result<GradPair> {
    backward(
        ActivationInput::Raw(x),
        w,
        g_y,
        &BackwardStrategy::vanilla(),
        &mut RngState::new(0),
    )
}

/// Low-rank projection on both paths with the bases of `plan`; the axis follows the `L`/`B` rule.
pub fn lbp_wht_backward(x: &Tensor, w: &Tensor, g_y: &Tensor, plan: &HadamardPlan) -> Result<GradPair> {
    let s = BackwardStrategy {
        rank: plan.rank(),
        block: plan.block_size(),
        basis: Some(plan.basis_indices().to_vec()),
        ..BackwardStrategy::lbp_wht(plan.rank())
    };
    backward(ActivationInput::Raw(x), w, g_y, &s, &mut RngState::new(0))
}

pub fn naive_quant_backward(
    x: &Tensor,
    w: &Tensor,
    g_y: &Tensor,
    bits: u8,
    rng: &mut RngState,
) -> Result<GradPair> {
    backward(ActivationInput::Raw(x), w, g_y, &BackwardStrategy::naive(bits), rng)
}

/// `Q(g_y·H_O) · Q(H_Oᵀ·w)`; `bits = None` skips quantization.
pub fn hq_gx(
    g_y: &Tensor,
    w: &Tensor,
    bits: Option<u8>,
    rounding: Rounding,
    rng: &mut RngState,
) -> Result<Tensor> {
    let s = BackwardStrategy {
        rounding,
        gx: GradXPath {
            transform: GxTransform::Hadamard,
            bits,
        },
        ..BackwardStrategy::vanilla()
    };
    input_grad(g_y, w, &s, rng)
}

/// Stages 1–2 of the `g_w` pipeline, run at forward time: project `x` along
/// `L` (or `B`) with the plan's bases, then quantize to `bits`.
///
/// The plan's target axis is ignored; the `L`/`B` rule decides it.
pub fn hlq_gw_forward_stage(
    x: &Tensor,
    plan: &HadamardPlan,
    bits: Option<u8>,
    rounding: Rounding,
    granularity: Granularity,
    rng: &mut RngState,
) -> Result<AcbpActivation> {
    let dims = check_x(x)?;
    let axis = HtAxis::for_dims(dims[0], dims[1], plan.block_size()).index();
    let plan = plan.on_axis(axis);
    let projected = if plan.is_full_rank() {
        padded_ht(x, plan.block_size(), axis)?
    } else {
        hadamard::project_lowrank(x, &plan)?
    };
    let stored = match bits {
        None => StoredActivation::Float(projected),
        Some(b) => StoredActivation::Quantized(quantize::quantize(&projected, b, rounding, granularity, rng)?),
    };
    Ok(AcbpActivation { dims, plan, stored })
}

/// Forward-time compression for a strategy with a low-rank `g_w` path.
pub fn compress_activation(
    x: &Tensor,
    strategy: &BackwardStrategy,
    rng: &mut RngState,
) -> Result<AcbpActivation> {
    strategy.validate()?;
    if strategy.gw.transform != GwTransform::LowRank {
        return Err(HlqError::param("activation compression needs a low-rank g_w path"));
    }
    let dims = check_x(x)?;
    let axis = strategy.axis_for(dims[0], dims[1])?;
    let plan = strategy.plan(axis.index())?;
    hlq_gw_forward_stage(
        x,
        &plan,
        strategy.gw.bits,
        strategy.rounding,
        strategy.gw_granularity,
        &mut rng.split(2),
    )
}

/// Stages 3–6 of the `g_w` pipeline against a compressed activation.
pub fn hlq_gw(
    acbp: &AcbpActivation,
    g_y: &Tensor,
    plan: &HadamardPlan,
    bits: Option<u8>,
    rounding: Rounding,
    rng: &mut RngState,
) -> Result<Tensor> {
    let expected = plan.on_axis(acbp.plan.target_axis());
    if expected != acbp.plan {
        return Err(HlqError::State(format!(
            "plan mismatch: forward bases {:?} (n={}), backward bases {:?} (n={})",
            acbp.plan.basis_indices(),
            acbp.plan.block_size(),
            plan.basis_indices(),
            plan.block_size()
        )));
    }
    if acbp.bits() != bits {
        return Err(HlqError::State(format!(
            "activation stored at {:?} bits, backward expects {bits:?}",
            acbp.bits()
        )));
    }
    let s = BackwardStrategy {
        block: plan.block_size(),
        rank: plan.rank(),
        basis: Some(plan.basis_indices().to_vec()),
        rounding,
        gw_granularity: match &acbp.stored {
            StoredActivation::Quantized(q) => q.granularity(),
            StoredActivation::Float(_) => Granularity::Tensor,
        },
        gw: GradWPath {
            transform: GwTransform::LowRank,
            bits,
        },
        ..BackwardStrategy::vanilla()
    };
    weight_grad(ActivationInput::Compressed(acbp), g_y, &s, rng)
}

/// HLQ backward from either the raw or the compressed activation.
pub fn hlq_backward(
    input: ActivationInput<'_>,
    w: &Tensor,
    g_y: &Tensor,
    strategy: &BackwardStrategy,
    rng: &mut RngState,
) -> Result<GradPair> {
    if strategy.kind != StrategyKind::Hlq {
        return Err(HlqError::param(format!(
            "hlq_backward called with strategy `{}`",
            strategy.name()
        )));
    }
    backward(input, w, g_y, strategy, rng)
}

/// Dequantized view of a stored activation's projection.
pub fn stored_projection(acbp: &AcbpActivation) -> Result<Tensor> {
    let shape = acbp.stored_shape();
    match &acbp.stored {
        StoredActivation::Float(t) => t.reshape(&shape),
        StoredActivation::Quantized(q) => dequant(q).into_reshape(&shape),
    }
}
