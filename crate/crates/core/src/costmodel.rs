//! Analytic FLOPs, bit-operation and memory accounting for the backward pass.
//!
//! Counts use `T = B·L` tokens. A low-rank path shrinks the transformed axis
//! to `⌈extent/n⌉·r`, so `T' = T·r/n` whenever that axis is a multiple of `n`.
//! Overhead terms are built per path so that HLQ reproduces the closed forms
//!
//! ```text
//! vanilla  4·T·I·O
//! g_x      2·T·O·log n + 2·I·O·log n + 2·T·O + 2·I·O
//! g_w      2·T·I·log n + 2·T·O·log n + 2·I·T' + 2·O·T'
//! dequant  2·I·O + 2·T·I
//! ```

use std::fmt::Write as _;

use serde::Serialize;

use crate::backprop::{BackwardStrategy, GwTransform, GxTransform, HtAxis};
use crate::error::{HlqError, Result};
use crate::tensor::LayerDims;

/// Bits of a floating-point operand.
pub const FP_BITS: u64 = 32;
/// Bit-operations charged per overhead flop (one 32-bit add or scale).
pub const OVERHEAD_BOPS_PER_FLOP: u64 = 32;
/// Fixed bytes of a compressed-activation container with three dims.
pub const ACBP_FIXED_BYTES: u64 = 4 + 2 + 1 + 1 + 2 + 2 + 1 + 3 * 4 + 4 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GemmCost {
    pub macs: u64,
    pub bits_a: u64,
    pub bits_b: u64,
}

impl GemmCost {
    pub fn bops(&self) -> u64 {
        self.macs * self.bits_a * self.bits_b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct FlopBreakdown {
    pub vanilla: u64,
    pub gx_overhead: u64,
    pub gw_overhead: u64,
    pub dequant_overhead: u64,
}

impl FlopBreakdown {
    pub fn overhead(&self) -> u64 {
        self.gx_overhead + self.gw_overhead + self.dequant_overhead
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub dims: LayerDims,
    pub flops: FlopBreakdown,
    pub overhead_flops: u64,
    pub gemm_gx: GemmCost,
    pub gemm_gw: GemmCost,
    pub gemm_bops: u64,
    pub overhead_bops: u64,
    pub backward_bops: u64,
    pub forward_bops: u64,
    pub activation_payload_bytes: u64,
    pub activation_overhead_bytes: u64,
    pub activation_bytes: u64,
    pub weight_bytes: u64,
    pub grad_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct CostTotals {
    pub vanilla_flops: u64,
    pub overhead_flops: u64,
    pub macs: u64,
    pub gemm_bops: u64,
    pub overhead_bops: u64,
    pub backward_bops: u64,
    pub forward_bops: u64,
    pub activation_payload_bytes: u64,
    pub activation_overhead_bytes: u64,
    pub activation_bytes: u64,
    pub weight_bytes: u64,
    pub grad_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub strategy: String,
    pub block: usize,
    pub rank: usize,
    pub layers: Vec<LayerCost>,
    pub totals: CostTotals,
}

fn log2(n: usize) -> Result<u64> {
    if n == 0 || !n.is_power_of_two() {
        return Err(HlqError::param(format!("block size must be a power of two, got {n}")));
    }
    Ok(n.trailing_zeros() as u64)
}

/// Tokens left after a low-rank projection of the `L` (or `B`) axis.
pub fn reduced_tokens(dims: &LayerDims, n: usize, r: usize) -> u64 {
    let (b, l) = (dims.batch as u64, dims.seq as u64);
    let (n, r) = (n as u64, r as u64);
    match HtAxis::for_dims(dims.batch, dims.seq, n as usize) {
        HtAxis::Seq => b * (l.div_ceil(n) * r),
        HtAxis::Batch => b.div_ceil(n) * r * l,
    }
}

fn bits_or_fp(bits: Option<u8>) -> u64 {
    bits.map_or(FP_BITS, u64::from)
}

/// FLOPs of the backward pass under `strategy`, with block `n` and rank `r`.
pub fn layer_flops(dims: &LayerDims, strategy: &BackwardStrategy, n: usize, r: usize) -> Result<FlopBreakdown> {
    let logn = log2(n)?;
    if r == 0 || r > n {
        return Err(HlqError::param(format!("rank must be in 1..={n}, got {r}")));
    }
    let t = dims.tokens() as u64;
    let (i, o) = (dims.in_ch as u64, dims.out_ch as u64);
    let t_red = reduced_tokens(dims, n, r);
    let mut f = FlopBreakdown {
        vanilla: 4 * t * i * o,
        ..FlopBreakdown::default()
    };
    let gx_q = strategy.gx.bits.is_some();
    let gw_q = strategy.gw.bits.is_some();
    f.gx_overhead = match strategy.gx.transform {
        GxTransform::None => 0,
        GxTransform::Hadamard => 2 * t * o * logn + 2 * i * o * logn,
        // project g_y, inverse-project the (reduced) g_x
        GxTransform::LowRank => 2 * t * o * logn + 2 * t * i * logn,
    };
    if gx_q {
        let rows = if strategy.gx.transform == GxTransform::LowRank { t_red } else { t };
        f.gx_overhead += 2 * rows * o + 2 * i * o;
    }
    f.gw_overhead = match strategy.gw.transform {
        GwTransform::None => 0,
        GwTransform::Hadamard | GwTransform::LowRank => 2 * t * i * logn + 2 * t * o * logn,
    };
    if gw_q {
        let rows = if strategy.gw.transform == GwTransform::LowRank { t_red } else { t };
        f.gw_overhead += 2 * i * rows + 2 * o * rows;
    }
    if gx_q {
        f.dequant_overhead += 2 * t * i;
    }
    if gw_q {
        f.dequant_overhead += 2 * i * o;
    }
    Ok(f)
}

fn gemms(dims: &LayerDims, s: &BackwardStrategy) -> (GemmCost, GemmCost) {
    let t = dims.tokens() as u64;
    let (i, o) = (dims.in_ch as u64, dims.out_ch as u64);
    let t_red = reduced_tokens(dims, s.block, s.rank);
    let gx_rows = if s.gx.transform == GxTransform::LowRank { t_red } else { t };
    let gw_rows = if s.gw.transform == GwTransform::LowRank { t_red } else { t };
    let bx = bits_or_fp(s.gx.bits);
    let bw = bits_or_fp(s.gw.bits);
    (
        GemmCost { macs: gx_rows * i * o, bits_a: bx, bits_b: bx },
        GemmCost { macs: gw_rows * i * o, bits_a: bw, bits_b: bw },
    )
}

/// Backward bit-operations: `Σ MACs·b_a·b_b` plus 32 per overhead flop.
pub fn layer_bops(dims: &LayerDims, strategy: &BackwardStrategy) -> Result<u64> {
    let (gx, gw) = gemms(dims, strategy);
    let f = layer_flops(dims, strategy, strategy.block, strategy.rank)?;
    Ok(gx.bops() + gw.bops() + f.overhead() * OVERHEAD_BOPS_PER_FLOP)
}

/// The low-rank baseline's own estimate, `(O+I)·L·r + 4·O·I·r + I·L·r`.
pub fn lbp_wht_reference_flops(l: u64, i: u64, o: u64, r: u64) -> u64 {
    (o + i) * l * r + 4 * o * i * r + i * l * r
}

/// Bytes held for the activation between forward and backward.
fn activation_bytes(dims: &LayerDims, s: &BackwardStrategy) -> (u64, u64) {
    let (b, l, i) = (dims.batch as u64, dims.seq as u64, dims.in_ch as u64);
    if !s.uses_acbp() {
        return (4 * b * l * i, 0);
    }
    let stored = reduced_tokens(dims, s.block, s.rank) * i;
    match s.gw.bits {
        None => (4 * stored, 0),
        Some(bits) => {
            let scales = match s.gw_granularity {
                crate::quantize::Granularity::Column => i,
                _ => 1,
            };
            ((stored * bits as u64).div_ceil(8), ACBP_FIXED_BYTES + 4 * scales)
        }
    }
}

/// One named layer of a catalog.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CatalogLayer {
    pub name: String,
    pub dims: LayerDims,
}

pub fn layer_cost(layer: &CatalogLayer, strategy: &BackwardStrategy) -> Result<LayerCost> {
    strategy.validate()?;
    let d = &layer.dims;
    let flops = layer_flops(d, strategy, strategy.block, strategy.rank)?;
    let (gemm_gx, gemm_gw) = gemms(d, strategy);
    let gemm_bops = gemm_gx.bops() + gemm_gw.bops();
    let overhead_bops = flops.overhead() * OVERHEAD_BOPS_PER_FLOP;
    let (payload, overhead) = activation_bytes(d, strategy);
    let weights = 4 * d.in_ch as u64 * d.out_ch as u64;
    Ok(LayerCost {
        name: layer.name.clone(),
        dims: *d,
        flops,
        overhead_flops: flops.overhead(),
        gemm_gx,
        gemm_gw,
        gemm_bops,
        overhead_bops,
        backward_bops: gemm_bops + overhead_bops,
        forward_bops: d.tokens() as u64 * d.in_ch as u64 * d.out_ch as u64 * FP_BITS * FP_BITS,
        activation_payload_bytes: payload,
        activation_overhead_bytes: overhead,
        activation_bytes: payload + overhead,
        weight_bytes: weights,
        grad_bytes: weights,
    })
}

/// Per-layer and total costs; `batch` replaces each layer's `B` when given.
pub fn memory_footprint(layers: &[CatalogLayer], strategy: &BackwardStrategy, batch: Option<usize>) -> Result<CostReport> {
    let mut out = Vec::with_capacity(layers.len());
    for l in layers {
        let mut l = l.clone();
        if let Some(b) = batch {
            l.dims = LayerDims::new(b, l.dims.seq, l.dims.in_ch, l.dims.out_ch)?;
        }
        out.push(layer_cost(&l, strategy)?);
    }
    let mut t = CostTotals::default();
    for c in &out {
        t.vanilla_flops += c.flops.vanilla;
        t.overhead_flops += c.overhead_flops;
        t.macs += c.gemm_gx.macs + c.gemm_gw.macs;
        t.gemm_bops += c.gemm_bops;
        t.overhead_bops += c.overhead_bops;
        t.backward_bops += c.backward_bops;
        t.forward_bops += c.forward_bops;
        t.activation_payload_bytes += c.activation_payload_bytes;
        t.activation_overhead_bytes += c.activation_overhead_bytes;
        t.activation_bytes += c.activation_bytes;
        t.weight_bytes += c.weight_bytes;
        t.grad_bytes += c.grad_bytes;
    }
    Ok(CostReport {
        strategy: strategy.name(),
        block: strategy.block,
        rank: strategy.rank,
        layers: out,
        totals: t,
    })
}

/// Activation-memory reduction of `report` relative to `baseline`, in percent.
pub fn reduction_percent(report: &CostReport, baseline: &CostReport) -> f64 {
    let b = baseline.totals.activation_bytes as f64;
    if b == 0.0 {
        return 0.0;
    }
    100.0 * (1.0 - report.totals.activation_bytes as f64 / b)
}

/// Parses `name B L I O [conv kH kW]` lines; `#` starts a comment.
///
/// With `conv kH kW` the `I` column is the input channel count and becomes `I·kH·kW`.
pub fn parse_catalog(text: &str) -> Result<Vec<CatalogLayer>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| HlqError::Value(format!("catalog line {}: {msg}", lineno + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 && f.len() != 8 {
            return Err(bad(format!("expected `name B L I O [conv kH kW]`, got {} fields", f.len())));
        }
        let num = |s: &str| -> Result<usize> {
            s.parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| bad(format!("`{s}` is not a positive integer")))
        };
        let (b, l, mut i, o) = (num(f[1])?, num(f[2])?, num(f[3])?, num(f[4])?);
        if f.len() == 8 {
            if f[5] != "conv" {
                return Err(bad(format!("expected `conv`, got `{}`", f[5])));
            }
            i = i
                .checked_mul(num(f[6])?)
                .and_then(|v| v.checked_mul(num(f[7]).ok()?))
                .ok_or_else(|| bad("input extent overflows".into()))?;
        }
        out.push(CatalogLayer {
            name: f[0].to_string(),
            dims: LayerDims::new(b, l, i, o)?,
        });
    }
    Ok(out)
}

pub const CSV_HEADER: &str = "layer,B,L,I,O,vanilla_flops,gx_overhead_flops,gw_overhead_flops,dequant_overhead_flops,overhead_flops,overhead_pct,gemm_bops,overhead_bops,backward_bops,forward_bops,activation_bytes,weight_bytes,grad_bytes";

impl CostReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        let row = |s: &mut String, name: &str, d: Option<&LayerDims>, c: [u64; 12]| {
            let dims = d.map_or(",,,".to_string(), |d| format!("{},{},{},{}", d.batch, d.seq, d.in_ch, d.out_ch));
            let pct = if c[0] == 0 { 0.0 } else { 100.0 * c[4] as f64 / c[0] as f64 };
            let _ = writeln!(
                s,
                "{name},{dims},{},{},{},{},{},{pct:.4},{},{},{},{},{},{},{}",
                c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7], c[8], c[9], c[10], c[11]
            );
        };
        for l in &self.layers {
            row(
                &mut s,
                &l.name,
                Some(&l.dims),
                [
                    l.flops.vanilla,
                    l.flops.gx_overhead,
                    l.flops.gw_overhead,
                    l.flops.dequant_overhead,
                    l.overhead_flops,
                    l.gemm_bops,
                    l.overhead_bops,
                    l.backward_bops,
                    l.forward_bops,
                    l.activation_bytes,
                    l.weight_bytes,
                    l.grad_bytes,
                ],
            );
        }
        let t = &self.totals;
        let (gx, gw, dq) = self.layers.iter().fold((0, 0, 0), |a, l| {
            (a.0 + l.flops.gx_overhead, a.1 + l.flops.gw_overhead, a.2 + l.flops.dequant_overhead)
        });
        row(
            &mut s,
            "total",
            None,
            [
                t.vanilla_flops,
                gx,
                gw,
                dq,
                t.overhead_flops,
                t.gemm_bops,
                t.overhead_bops,
                t.backward_bops,
                t.forward_bops,
                t.activation_bytes,
                t.weight_bytes,
                t.grad_bytes,
            ],
        );
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cost report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(b: usize, l: usize, i: usize, o: usize) -> LayerDims {
        LayerDims::new(b, l, i, o).unwrap()
    }

    #[test]
    fn vanilla_closed_form() {
        let f = layer_flops(&d(1, 196, 224, 896), &BackwardStrategy::vanilla(), 16, 8).unwrap();
        assert_eq!(f.vanilla, 157_351_936);
        assert_eq!(f.overhead(), 0);
    }

    #[test]
    fn hlq_gx_overhead_example() {
        let f = layer_flops(&d(1, 16, 16, 16), &BackwardStrategy::hlq(), 16, 8).unwrap();
        assert_eq!(f.gx_overhead, 5120);
        assert_eq!(f.gw_overhead, 2 * 16 * 16 * 4 * 2 + 2 * 16 * 8 * 2);
        assert_eq!(f.dequant_overhead, 2 * 16 * 16 * 2);
    }

    #[test]
    fn unit_dims_with_unit_block() {
        let f = layer_flops(&d(1, 1, 1, 1), &BackwardStrategy::hlq(), 1, 1).unwrap();
        assert_eq!(f.vanilla, 4);
        assert_eq!(f.gx_overhead, 4);
        assert_eq!(f.gw_overhead, 4);
        assert_eq!(f.dequant_overhead, 4);
        assert!(layer_flops(&d(1, 1, 1, 1), &BackwardStrategy::hlq(), 3, 1).is_err());
    }

    #[test]
    fn bops_units() {
        let v = layer_bops(&d(1, 1, 1, 1), &BackwardStrategy::vanilla()).unwrap();
        assert_eq!(v, 2 * 1024);
        let dims = d(1, 64, 64, 64);
        let c = layer_cost(&CatalogLayer { name: "x".into(), dims }, &BackwardStrategy::hlq()).unwrap();
        let (l, i, o) = (64u64, 64u64, 64u64);
        assert_eq!(c.gemm_bops, l * i * o * 16 + (l / 2) * i * o * 64);
    }

    #[test]
    fn memory_is_one_eighth_and_additive() {
        let layers = parse_catalog("a 4 32 16 8\nb 4 64 8 8 conv 3 3\n").unwrap();
        assert_eq!(layers[1].dims.in_ch, 72);
        let v = memory_footprint(&layers, &BackwardStrategy::vanilla(), None).unwrap();
        let h = memory_footprint(&layers, &BackwardStrategy::hlq(), None).unwrap();
        assert_eq!(h.totals.activation_payload_bytes * 8, v.totals.activation_payload_bytes);
        let h2 = memory_footprint(&layers, &BackwardStrategy::hlq(), Some(8)).unwrap();
        assert_eq!(h2.totals.activation_payload_bytes, 2 * h.totals.activation_payload_bytes);
        assert_eq!(h.totals.activation_overhead_bytes, h2.totals.activation_overhead_bytes);
        let e = memory_footprint(&[], &BackwardStrategy::hlq(), None).unwrap();
        assert_eq!(e.totals, CostTotals::default());
        assert!(reduction_percent(&h, &v) > 80.0);
    }

    #[test]
    fn catalog_errors() {
        assert!(parse_catalog("a 1 2 3").is_err());
        assert!(parse_catalog("a 1 2 3 0").is_err());
        assert!(parse_catalog("a 1 2 3 4 pool 1 1").is_err());
        assert_eq!(parse_catalog("# only a comment\n\n").unwrap(), vec![]);
    }

    #[test]
    fn csv_has_total_row() {
        let layers = parse_catalog("a 1 16 16 16").unwrap();
        let r = memory_footprint(&layers, &BackwardStrategy::hlq(), None).unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
        assert!(lines[2].starts_with("total,,,,"));
    }

    #[test]
    fn lbp_reference() {
        assert_eq!(lbp_wht_reference_flops(1, 1, 1, 1), 7);
    }
}
