//! Binary container for compressed activations.
//!
//! Layout (little-endian):
//!
//! ```text
//! "ACBP" | version u16 | bits u8 | block u8 | rank u16 | basis bitmap u16
//!        | ndims u8 | dims u32 × ndims | num_scales u32 | scales f32 × num_scales
//!        | payload | crc32 u32
//! ```
//!
//! `dims` are the original `[B, L, I]`; the projected axis follows from the
//! `L`/`B` rule. int8 payloads are raw bytes; int4 payloads hold two values
//! per byte, low nibble first, with a zero pad nibble when the count is odd.
//! The CRC covers every byte before it.

use serde::Serialize;

use super::{AcbpActivation, HtAxis, StoredActivation};
use crate::error::{HlqError, Result};
use crate::hadamard::HadamardPlan;
use crate::quantize::{qmax, Granularity, QuantizedTensor};

pub const MAGIC: &[u8; 4] = b"ACBP";
pub const VERSION: u16 = 1;
const NDIMS: u8 = 3;

/// Decoded container header.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AcbpHeader {
    pub version: u16,
    pub bits: u8,
    pub block: u8,
    pub rank: u16,
    pub basis_bitmap: u16,
    pub dims: Vec<u32>,
    pub num_scales: u32,
    pub payload_offset: usize,
    pub payload_len: usize,
    pub crc32: u32,
}

pub fn acbp_pack(act: &AcbpActivation) -> Result<Vec<u8>> {
    let q = match &act.stored {
        StoredActivation::Quantized(q) => q,
        StoredActivation::Float(_) => {
            return Err(HlqError::param("only quantized activations have a container form"))
        }
    };
    let plan = &act.plan;
    if plan.block_size() > 16 {
        return Err(HlqError::param(format!(
            "container stores a 16-bit basis bitmap; block size {} is too large",
            plan.block_size()
        )));
    }
    if q.granularity() == Granularity::Row {
        return Err(HlqError::param("container stores per-tensor or per-channel scales only"));
    }
    let dims: Vec<u32> = act
        .dims
        .iter()
        .map(|&d| u32::try_from(d).map_err(|_| HlqError::param(format!("dimension {d} exceeds u32"))))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(32 + 4 * q.scales().len() + q.payload_bytes());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(q.bits());
    out.push(plan.block_size() as u8);
    out.extend_from_slice(&(plan.rank() as u16).to_le_bytes());
    out.extend_from_slice(&(plan.basis_bitmap() as u16).to_le_bytes());
    out.push(NDIMS);
    for d in &dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&(q.scales().len() as u32).to_le_bytes());
    for s in q.scales() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    match q.bits() {
        8 => out.extend(q.payload().iter().map(|&v| v as u8)),
        _ => {
            for pair in q.payload().chunks(2) {
                let lo = pair[0] as u8 & 0x0F;
                let hi = pair.get(1).map_or(0, |&v| v as u8 & 0x0F);
                out.push(lo | hi << 4);
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                HlqError::format(
                    self.pos,
                    format!("truncated: {what} needs {n} bytes, {} left", self.bytes.len() - self.pos),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

struct Parsed {
    header: AcbpHeader,
    plan: HadamardPlan,
    dims: [usize; 3],
    stored_shape: [usize; 3],
    scales: Vec<f32>,
    scales_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Parsed> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(HlqError::format(0, "bad magic, expected \"ACBP\""));
    }
    let at = r.pos;
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(HlqError::format(at, format!("unsupported version {version}")));
    }
    let at = r.pos;
    let bits = r.u8("bits")?;
    if bits != 4 && bits != 8 {
        return Err(HlqError::format(at, format!("bits must be 4 or 8, got {bits}")));
    }
    let at = r.pos;
    let block = r.u8("block size")?;
    if !(2..=16).contains(&block) || !block.is_power_of_two() {
        return Err(HlqError::format(at, format!("block size {block} is not a power of two in 2..=16")));
    }
    let rank_at = r.pos;
    let rank = r.u16("rank")?;
    if rank == 0 || rank as usize > block as usize {
        return Err(HlqError::format(rank_at, format!("rank {rank} outside 1..={block}")));
    }
    let at = r.pos;
    let bitmap = r.u16("basis bitmap")?;
    if block < 16 && bitmap >> block != 0 {
        return Err(HlqError::format(at, format!("bitmap {bitmap:#06x} has bits beyond block {block}")));
    }
    if bitmap.count_ones() != rank as u32 {
        return Err(HlqError::format(
            at,
            format!("bitmap has {} bases but rank is {rank}", bitmap.count_ones()),
        ));
    }
    let at = r.pos;
    let ndims = r.u8("ndims")?;
    if ndims != NDIMS {
        return Err(HlqError::format(at, format!("expected {NDIMS} dims, got {ndims}")));
    }
    let mut dims = [0usize; 3];
    let mut raw_dims = Vec::with_capacity(3);
    for (k, d) in dims.iter_mut().enumerate() {
        let at = r.pos;
        let v = r.u32("dims")?;
        if k > 0 && v == 0 {
            return Err(HlqError::format(at, "sequence and channel extents must be positive"));
        }
        raw_dims.push(v);
        *d = v as usize;
    }
    let n = block as usize;
    let axis = HtAxis::for_dims(dims[0], dims[1], n).index();
    let plan = HadamardPlan::from_bitmap(n, axis, bitmap as u64)
        .map_err(|e| HlqError::format(rank_at, e.to_string()))?;
    let mut stored_shape = dims;
    stored_shape[axis] = dims[axis]
        .div_ceil(n)
        .checked_mul(rank as usize)
        .ok_or_else(|| HlqError::format(rank_at + 5, "projected extent overflows"))?;
    let count = stored_shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| HlqError::format(rank_at + 5, "element count overflows"))?;
    let at = r.pos;
    let num_scales = r.u32("num_scales")?;
    if num_scales != 1 && num_scales as usize != dims[2] {
        return Err(HlqError::format(
            at,
            format!("num_scales {num_scales} is neither 1 nor I = {}", dims[2]),
        ));
    }
    let scales_offset = r.pos;
    let raw = r.take(4 * num_scales as usize, "scales")?;
    let mut scales = Vec::with_capacity(num_scales as usize);
    for (k, c) in raw.chunks_exact(4).enumerate() {
        let s = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if !(s.is_finite() && s > 0.0) {
            return Err(HlqError::format(scales_offset + 4 * k, format!("scale {s} is not positive and finite")));
        }
        scales.push(s);
    }
    let payload_len = if bits == 8 { count } else { count.div_ceil(2) };
    let payload_offset = r.pos;
    let expected = payload_offset
        .checked_add(payload_len)
        .and_then(|v| v.checked_add(4))
        .ok_or_else(|| HlqError::format(payload_offset, "payload length overflows"))?;
    if bytes.len() != expected {
        return Err(HlqError::format(
            payload_offset,
            format!(
                "container is {} bytes but header implies {expected} ({payload_len} payload bytes)",
                bytes.len()
            ),
        ));
    }
    let c = &bytes[expected - 4..];
    let crc32 = u32::from_le_bytes([c[0], c[1], c[2], c[3]]);
    Ok(Parsed {
        header: AcbpHeader {
            version,
            bits,
            block,
            rank,
            basis_bitmap: bitmap,
            dims: raw_dims,
            num_scales,
            payload_offset,
            payload_len,
            crc32,
        },
        plan,
        dims,
        stored_shape,
        scales,
        scales_offset,
    })
}

/// Parses and validates the header, checking lengths and the CRC but not payload values.
pub fn acbp_header(bytes: &[u8]) -> Result<AcbpHeader> {
    let p = parse_header(bytes)?;
    check_crc(bytes, &p.header)?;
    Ok(p.header)
}

fn check_crc(bytes: &[u8], h: &AcbpHeader) -> Result<()> {
    let body_end = h.payload_offset + h.payload_len;
    let actual = crc32fast::hash(&bytes[..body_end]);
    if actual != h.crc32 {
        return Err(HlqError::format(
            body_end,
            format!("crc mismatch: stored {:#010x}, computed {actual:#010x}", h.crc32),
        ));
    }
    Ok(())
}

pub fn acbp_unpack(bytes: &[u8]) -> Result<AcbpActivation> {
    let p = parse_header(bytes)?;
    let h = &p.header;
    let payload_bytes = &bytes[h.payload_offset..h.payload_offset + h.payload_len];
    let count: usize = p.stored_shape.iter().product();
    let limit = qmax(h.bits);
    let mut payload = Vec::with_capacity(count);
    if h.bits == 8 {
        for (k, &b) in payload_bytes.iter().enumerate() {
            let v = b as i8;
            if (v as i32).abs() > limit {
                return Err(HlqError::format(h.payload_offset + k, format!("int8 value {v} outside ±{limit}")));
            }
            payload.push(v);
        }
    } else {
        for (k, &b) in payload_bytes.iter().enumerate() {
            for (half, nib) in [b & 0x0F, b >> 4].into_iter().enumerate() {
                if payload.len() == count {
                    if nib != 0 {
                        return Err(HlqError::format(h.payload_offset + k, "non-zero pad nibble"));
                    }
                    continue;
                }
                let v = ((nib << 4) as i8) >> 4;
                if (v as i32).abs() > limit {
                    return Err(HlqError::format(
                        h.payload_offset + k,
                        format!("int4 value {v} outside ±{limit} in {} nibble", if half == 0 { "low" } else { "high" }),
                    ));
                }
                payload.push(v);
            }
        }
    }
    check_crc(bytes, h)?;
    let granularity = if h.num_scales == 1 {
        Granularity::Tensor
    } else {
        Granularity::Column
    };
    let q = QuantizedTensor::from_parts(&p.stored_shape, payload, h.bits, p.scales, granularity)
        .map_err(|e| HlqError::format(p.scales_offset, e.to_string()))?;
    Ok(AcbpActivation {
        dims: p.dims,
        plan: p.plan,
        stored: StoredActivation::Quantized(q),
    })
}

/// Full decode; succeeds only for a well-formed container.
pub fn acbp_verify(bytes: &[u8]) -> Result<AcbpHeader> {
    acbp_unpack(bytes)?;
    acbp_header(bytes)
}
