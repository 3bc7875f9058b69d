//! Walsh-Hadamard matrices, the fast transform, block-diagonal application
//! along any tensor axis, and low-rank projection onto a subset of the
//! per-block bases.
//!
//! The transform is orthonormal (scaled by `1/√n`) and symmetric, so applying
//! it twice is the identity. Basis indices use natural (Sylvester) row order.

use serde::{Deserialize, Serialize};

use crate::error::{HlqError, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BLOCK: usize = 16;
pub const DEFAULT_RANK: usize = 8;
const MAX_ORDER: u32 = 10;

/// Block size, target axis and kept bases for a block Hadamard transform.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HadamardPlan {
    block_size: usize,
    target_axis: usize,
    basis_indices: Vec<usize>,
}

impl HadamardPlan {
    pub fn new(block_size: usize, target_axis: usize, mut basis_indices: Vec<usize>) -> Result<Self> {
        check_block(block_size)?;
        basis_indices.sort_unstable();
        basis_indices.dedup();
        if basis_indices.is_empty() || basis_indices.len() > block_size {
            return Err(HlqError::param(format!(
                "rank must be in 1..={block_size}, got {} distinct bases",
                basis_indices.len()
            )));
        }
        if let Some(&bad) = basis_indices.iter().find(|&&i| i >= block_size) {
            return Err(HlqError::param(format!(
                "basis index {bad} outside block of size {block_size}"
            )));
        }
        Ok(Self {
            block_size,
            target_axis,
            basis_indices,
        })
    }

    /// Pure block transform: every basis kept.
    pub fn full_rank(block_size: usize, target_axis: usize) -> Result<Self> {
        Self::new(block_size, target_axis, (0..block_size).collect())
    }

    /// Keeps the `rank` bases of lowest sequency (fewest sign changes).
    pub fn low_sequency(block_size: usize, rank: usize, target_axis: usize) -> Result<Self> {
        check_block(block_size)?;
        if rank == 0 || rank > block_size {
            return Err(HlqError::param(format!(
                "rank must be in 1..={block_size}, got {rank}"
            )));
        }
        let mut order: Vec<usize> = (0..block_size).collect();
        order.sort_by_key(|&i| (sequency(i, block_size), i));
        order.truncate(rank);
        Self::new(block_size, target_axis, order)
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn target_axis(&self) -> usize {
        self.target_axis
    }

    pub fn basis_indices(&self) -> &[usize] {
        &self.basis_indices
    }

    pub fn rank(&self) -> usize {
        self.basis_indices.len()
    }

    pub fn is_full_rank(&self) -> bool {
        self.rank() == self.block_size
    }

    pub fn on_axis(&self, axis: usize) -> Self {
        Self {
            target_axis: axis,
            ..self.clone()
        }
    }

    /// Extent of the target axis after projection of an axis of length `extent`.
    pub fn projected_extent(&self, extent: usize) -> usize {
        extent.div_ceil(self.block_size) * self.rank()
    }

    /// Bit `i` set when basis `i` is kept.
    pub fn basis_bitmap(&self) -> u64 {
        self.basis_indices.iter().fold(0u64, |m, &i| m | (1 << i))
    }

    pub fn from_bitmap(block_size: usize, target_axis: usize, bitmap: u64) -> Result<Self> {
        check_block(block_size)?;
        if block_size < 64 && bitmap >> block_size != 0 {
            return Err(HlqError::param(format!(
                "bitmap {bitmap:#x} has bits beyond block size {block_size}"
            )));
        }
        let basis = (0..block_size.min(64)).filter(|i| bitmap >> i & 1 == 1).collect();
        Self::new(block_size, target_axis, basis)
    }
}

fn check_block(n: usize) -> Result<()> {
    if n < 2 || !n.is_power_of_two() || n.trailing_zeros() > MAX_ORDER {
        return Err(HlqError::param(format!(
            "block size must be a power of two in 2..=2^{MAX_ORDER}, got {n}"
        )));
    }
    Ok(())
}

/// Number of sign changes along natural-order row `row` of the order-`n` Walsh matrix.
pub fn sequency(row: usize, n: usize) -> usize {
    let sign = |col: usize| (row & col).count_ones() & 1;
    (1..n).filter(|&c| sign(c) != sign(c - 1)).count()
}

/// Kronecker product of two matrices.
pub fn kronecker(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(HlqError::dim("kronecker product expects matrices"));
    }
    let (am, an) = (a.dim(0), a.dim(1));
    let (bm, bn) = (b.dim(0), b.dim(1));
    let cols = an * bn;
    let mut out = vec![0.0f32; am * bm * cols];
    for i in 0..am {
        for j in 0..an {
            let av = a.data()[i * an + j];
            for p in 0..bm {
                for q in 0..bn {
                    out[(i * bm + p) * cols + j * bn + q] = av * b.data()[p * bn + q];
                }
            }
        }
    }
    Tensor::from_parts(&[am * bm, cols], out)
}

/// Orthonormal Walsh-Hadamard matrix of order `2^k`, built as `H_1 ⊗ H_{k-1}`.
pub fn walsh_matrix(k: u32) -> Result<Tensor> {
    if k == 0 || k > MAX_ORDER {
        return Err(HlqError::param(format!(
            "walsh order must be in 1..={MAX_ORDER}, got {k}"
        )));
    }
    let s = std::f32::consts::FRAC_1_SQRT_2;
    let h1 = Tensor::from_parts(&[2, 2], vec![s, s, s, -s])?;
    let mut h = h1.clone();
    for _ in 1..k {
        h = kronecker(&h1, &h)?;
    }
    Ok(h)
}

/// In-place transform of `n` rows of length `inner` stored contiguously.
///
/// `n·log2(n)` row add/sub operations followed by one scaling pass.
fn fwht_rows(block: &mut [f32], n: usize, inner: usize) {
    debug_assert_eq!(block.len(), n * inner);
    let mut h = 1;
    while h < n {
        for start in (0..n).step_by(2 * h) {
            for j in start..start + h {
                let (lo, hi) = block.split_at_mut((j + h) * inner);
                let top = &mut lo[j * inner..(j + 1) * inner];
                let bottom = &mut hi[..inner];
                for (a, b) in top.iter_mut().zip(bottom.iter_mut()) {
                    let (x, y) = (*a, *b);
                    *a = x + y;
                    *b = x - y;
                }
            }
        }
        h *= 2;
    }
    let norm = (n as f32).sqrt().recip();
    block.iter_mut().for_each(|v| *v *= norm);
}

/// Fast transform of a power-of-two length slice.
pub fn fwht_in_place(v: &mut [f32]) -> Result<()> {
    let n = v.len();
    if n < 2 || !n.is_power_of_two() {
        return Err(HlqError::dim(format!(
            "fwht needs a power-of-two length of at least 2, got {n}"
        )));
    }
    fwht_rows(v, n, 1);
    Ok(())
}

pub fn fwht(v: &Tensor) -> Result<Tensor> {
    if v.rank() != 1 {
        return Err(HlqError::dim(format!(
            "fwht expects a vector, got shape {:?}",
            v.shape()
        )));
    }
    let mut out = v.clone();
    fwht_in_place(out.data_mut())?;
    Ok(out)
}

/// Independent `n`-point transforms over consecutive blocks of the plan's axis.
pub fn block_ht(t: &Tensor, plan: &HadamardPlan) -> Result<Tensor> {
    let mut out = t.clone();
    block_ht_in_place(&mut out, plan.block_size, plan.target_axis)?;
    Ok(out)
}

pub(crate) fn block_ht_in_place(t: &mut Tensor, n: usize, axis: usize) -> Result<()> {
    let (outer, extent, inner) = t.axis_split(axis)?;
    if extent % n != 0 {
        return Err(HlqError::dim(format!(
            "axis {axis} extent {extent} is not a multiple of block size {n}"
        )));
    }
    if inner == 0 {
        return Ok(());
    }
    for chunk in t.data_mut().chunks_exact_mut(n * inner) {
        fwht_rows(chunk, n, inner);
    }
    let _ = outer;
    Ok(())
}

/// Per-basis coefficients of `t` along the plan's axis as a `[num_blocks × n]`
/// matrix, one row per (outer, block, inner) position. Pads the axis first.
pub fn block_coefficients(t: &Tensor, plan: &HadamardPlan) -> Result<Tensor> {
    let n = plan.block_size;
    let mut padded = t.pad_axis(plan.target_axis, n)?;
    block_ht_in_place(&mut padded, n, plan.target_axis)?;
    let (outer, extent, inner) = padded.axis_split(plan.target_axis)?;
    let blocks = extent / n;
    let rows = outer * blocks * inner;
    let mut out = vec![0.0f32; rows * n];
    let data = padded.data();
    let mut row = 0;
    for o in 0..outer {
        for b in 0..blocks {
            for i in 0..inner {
                for j in 0..n {
                    out[row * n + j] = data[(o * extent + b * n + j) * inner + i];
                }
                row += 1;
            }
        }
    }
    Tensor::from_parts(&[rows, n], out)
}

/// The `r` bases with the largest mean absolute coefficient, ascending.
/// Ties go to the lower index.
pub fn select_bases(calib: &Tensor, r: usize) -> Result<Vec<usize>> {
    if calib.rank() != 2 {
        return Err(HlqError::dim(format!(
            "calibration matrix must be [blocks × n], got {:?}",
            calib.shape()
        )));
    }
    let (rows, n) = (calib.dim(0), calib.dim(1));
    if r == 0 || r > n {
        return Err(HlqError::param(format!("rank must be in 1..={n}, got {r}")));
    }
    let mut means = vec![0.0f64; n];
    for row in calib.data().chunks_exact(n) {
        for (m, &v) in means.iter_mut().zip(row) {
            *m += v.abs() as f64;
        }
    }
    if rows > 0 {
        means.iter_mut().for_each(|m| *m /= rows as f64);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| means[b].total_cmp(&means[a]).then(a.cmp(&b)));
    let mut picked = order[..r].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Block transform along the plan's axis keeping only the selected bases.
/// The axis is zero-padded to a multiple of `n` first and shrinks by `r/n`.
pub fn project_lowrank(t: &Tensor, plan: &HadamardPlan) -> Result<Tensor> {
    if plan.is_full_rank() {
        return Err(HlqError::param(
            "project_lowrank needs rank < block size; use block_ht for full rank",
        ));
    }
    let n = plan.block_size;
    let mut padded = t.pad_axis(plan.target_axis, n)?;
    block_ht_in_place(&mut padded, n, plan.target_axis)?;
    let (outer, extent, inner) = padded.axis_split(plan.target_axis)?;
    let blocks = extent / n;
    let r = plan.rank();
    let mut out = vec![0.0f32; outer * blocks * r * inner];
    let src = padded.data();
    for o in 0..outer {
        for b in 0..blocks {
            for (s, &j) in plan.basis_indices.iter().enumerate() {
                let from = (o * extent + b * n + j) * inner;
                let to = (o * blocks * r + b * r + s) * inner;
                out[to..to + inner].copy_from_slice(&src[from..from + inner]);
            }
        }
    }
    let mut shape = t.shape().to_vec();
    shape[plan.target_axis] = blocks * r;
    Tensor::from_parts(&shape, out)
}

/// Scatters kept coefficients back into their slots, inverts the block
/// transform and crops the axis to `original_extent`.
pub fn unproject_lowrank(t: &Tensor, plan: &HadamardPlan, original_extent: usize) -> Result<Tensor> {
    if plan.is_full_rank() {
        return Err(HlqError::param(
            "unproject_lowrank needs rank < block size; use block_ht for full rank",
        ));
    }
    let n = plan.block_size;
    let r = plan.rank();
    let (outer, extent, inner) = t.axis_split(plan.target_axis)?;
    let blocks = original_extent.div_ceil(n);
    if extent != blocks * r {
        return Err(HlqError::dim(format!(
            "projected extent {extent} does not match {blocks} blocks of rank {r} for original extent {original_extent}"
        )));
    }
    let full = blocks * n;
    let mut out = vec![0.0f32; outer * full * inner];
    let src = t.data();
    for o in 0..outer {
        for b in 0..blocks {
            for (s, &j) in plan.basis_indices.iter().enumerate() {
                let from = (o * extent + b * r + s) * inner;
                let to = (o * full + b * n + j) * inner;
                out[to..to + inner].copy_from_slice(&src[from..from + inner]);
            }
        }
    }
    let mut shape = t.shape().to_vec();
    shape[plan.target_axis] = full;
    let mut expanded = Tensor::from_parts(&shape, out)?;
    block_ht_in_place(&mut expanded, n, plan.target_axis)?;
    expanded.crop_axis(plan.target_axis, original_extent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{matmul, max_abs_diff};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
    }

    /// Dense `M = H^T · diag(mask) · H` for one block, applied block-wise.
    fn dense_mask_projection(x: &Tensor, plan: &HadamardPlan) -> Tensor {
        let n = plan.block_size();
        let h = walsh_matrix(n.trailing_zeros()).unwrap();
        let mut mask = Tensor::zeros(&[n, n]);
        for &j in plan.basis_indices() {
            mask.data_mut()[j * n + j] = 1.0;
        }
        let op = matmul(&matmul(&h.transpose().unwrap(), &mask).unwrap(), &h).unwrap();
        // x: [extent, cols], axis 0
        let (extent, cols) = (x.dim(0), x.dim(1));
        let mut out = Tensor::zeros(&[extent, cols]);
        for b in 0..extent / n {
            let block = Tensor::from_fn(&[n, cols], |i| x.data()[b * n * cols + i]);
            let y = matmul(&op, &block).unwrap();
            out.data_mut()[b * n * cols..(b + 1) * n * cols].copy_from_slice(y.data());
        }
        out
    }

    #[test]
    fn order_one_matrix() {
        let h = walsh_matrix(1).unwrap();
        let s = std::f32::consts::FRAC_1_SQRT_2;
        assert_eq!(h.data(), &[s, s, s, -s]);
    }

    #[test]
    fn order_two_row_three() {
        let h = walsh_matrix(2).unwrap();
        let want = [0.5, -0.5, -0.5, 0.5];
        for (a, b) in h.data()[12..16].iter().zip(want) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn orthonormal_and_symmetric() {
        for k in 1..=4 {
            let h = walsh_matrix(k).unwrap();
            let n = 1 << k;
            let hht = matmul(&h, &h.transpose().unwrap()).unwrap();
            assert!(max_abs_diff(&hht, &Tensor::identity(n)).unwrap() < 1e-6);
            assert_eq!(h, h.transpose().unwrap());
        }
        assert!(walsh_matrix(0).is_err());
        assert!(walsh_matrix(11).is_err());
    }

    #[test]
    fn fwht_of_unit_vector() {
        let e0 = Tensor::new(&[4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(fwht(&e0).unwrap().data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn fwht_is_involution_and_matches_dense() {
        let h = walsh_matrix(4).unwrap();
        for seed in 0..20 {
            let v = random(&[16], seed);
            let fast = fwht(&v).unwrap();
            let dense = matmul(&h, &v.reshape(&[16, 1]).unwrap()).unwrap();
            assert!(max_abs_diff(&fast, &dense.reshape(&[16]).unwrap()).unwrap() < 1e-5);
            assert!(max_abs_diff(&fwht(&fast).unwrap(), &v).unwrap() < 1e-5);
        }
    }

    #[test]
    fn fwht_rejects_bad_lengths() {
        assert!(matches!(fwht(&Tensor::zeros(&[12])), Err(HlqError::Dimension(_))));
        assert!(matches!(fwht(&Tensor::zeros(&[1])), Err(HlqError::Dimension(_))));
    }

    #[test]
    fn block_ht_is_per_block_fwht() {
        let t = random(&[32], 7);
        let plan = HadamardPlan::full_rank(16, 0).unwrap();
        let out = block_ht(&t, &plan).unwrap();
        let mut lo = t.data()[..16].to_vec();
        let mut hi = t.data()[16..].to_vec();
        fwht_in_place(&mut lo).unwrap();
        fwht_in_place(&mut hi).unwrap();
        assert_eq!(&out.data()[..16], &lo[..]);
        assert_eq!(&out.data()[16..], &hi[..]);
        assert!(max_abs_diff(&block_ht(&out, &plan).unwrap(), &t).unwrap() < 1e-5);
    }

    #[test]
    fn block_ht_of_constant_block() {
        let t = Tensor::filled(&[16, 3], 1.5);
        let out = block_ht(&t, &HadamardPlan::full_rank(16, 0).unwrap()).unwrap();
        for col in 0..3 {
            assert_eq!(out.data()[col], 6.0);
            for j in 1..16 {
                assert_eq!(out.data()[j * 3 + col], 0.0);
            }
        }
    }

    #[test]
    fn block_ht_on_middle_axis() {
        // [2, 16, 3] along axis 1 must equal per-(outer, inner) fwht
        let t = random(&[2, 16, 3], 8);
        let out = block_ht(&t, &HadamardPlan::full_rank(16, 1).unwrap()).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                let mut v: Vec<f32> = (0..16).map(|j| t.data()[(o * 16 + j) * 3 + i]).collect();
                fwht_in_place(&mut v).unwrap();
                for j in 0..16 {
                    assert_eq!(out.data()[(o * 16 + j) * 3 + i], v[j]);
                }
            }
        }
        assert!(block_ht(&random(&[2, 20, 3], 1), &HadamardPlan::full_rank(16, 1).unwrap()).is_err());
    }

    #[test]
    fn low_sequency_picks_even_rows_for_16() {
        let plan = HadamardPlan::low_sequency(16, 8, 0).unwrap();
        assert_eq!(plan.basis_indices(), &[0, 2, 4, 6, 8, 10, 12, 14]);
        assert_eq!(sequency(0, 16), 0);
        assert_eq!(sequency(1, 16), 15);
        assert_eq!(sequency(8, 16), 1);
    }

    #[test]
    fn plan_validation_and_bitmap() {
        assert!(HadamardPlan::new(12, 0, vec![0]).is_err());
        assert!(HadamardPlan::new(16, 0, vec![16]).is_err());
        assert!(HadamardPlan::new(16, 0, vec![]).is_err());
        let p = HadamardPlan::new(16, 0, vec![5, 1, 1, 3]).unwrap();
        assert_eq!(p.basis_indices(), &[1, 3, 5]);
        assert_eq!(p.basis_bitmap(), 0b101010);
        assert_eq!(HadamardPlan::from_bitmap(16, 0, 0b101010).unwrap(), p);
        assert!(HadamardPlan::from_bitmap(4, 0, 0b10000).is_err());
    }

    #[test]
    fn select_bases_decreasing_and_ties() {
        let calib = Tensor::from_fn(&[4, 16], |i| 16.0 - (i % 16) as f32);
        assert_eq!(select_bases(&calib, 8).unwrap(), (0..8).collect::<Vec<_>>());
        let flat = Tensor::filled(&[3, 16], 2.0);
        assert_eq!(select_bases(&flat, 2).unwrap(), vec![0, 1]);
        assert!(select_bases(&flat, 17).is_err());
        assert!(select_bases(&flat, 0).is_err());
    }

    #[test]
    fn select_bases_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let planted = [0usize, 2, 5, 9];
        let calib = Tensor::from_fn(&[50, 16], |i| {
            let j = i % 16;
            let base = if planted.contains(&j) { 5.0 + j as f32 } else { 1.0 };
            base * rng.random_range(0.8f32..1.2) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }
        });
        // oracle: full sort of column means
        let mut means: Vec<(f64, usize)> = (0..16)
            .map(|j| {
                let s: f64 = (0..50).map(|r| calib.data()[r * 16 + j].abs() as f64).sum();
                (s / 50.0, j)
            })
            .collect();
        means.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut oracle: Vec<usize> = means[..4].iter().map(|m| m.1).collect();
        oracle.sort();
        assert_eq!(oracle, planted.to_vec());
        assert_eq!(select_bases(&calib, 4).unwrap(), oracle);
    }

    #[test]
    fn projection_shape_contract() {
        let full = HadamardPlan::full_rank(16, 0).unwrap();
        assert!(matches!(
            project_lowrank(&Tensor::zeros(&[16, 2]), &full),
            Err(HlqError::Parameter(_))
        ));
        let plan = HadamardPlan::low_sequency(16, 8, 0).unwrap();
        assert_eq!(project_lowrank(&Tensor::zeros(&[16, 2]), &plan).unwrap().shape(), &[8, 2]);
        assert_eq!(project_lowrank(&Tensor::zeros(&[20, 2]), &plan).unwrap().shape(), &[16, 2]);
        assert!(matches!(
            unproject_lowrank(&Tensor::zeros(&[7, 2]), &plan, 16),
            Err(HlqError::Dimension(_))
        ));
    }

    #[test]
    fn zeros_unproject_to_zeros() {
        let plan = HadamardPlan::low_sequency(16, 8, 0).unwrap();
        let out = unproject_lowrank(&Tensor::zeros(&[16, 3]), &plan, 20).unwrap();
        assert_eq!(out, Tensor::zeros(&[20, 3]));
    }

    #[test]
    fn subspace_signal_round_trips() {
        let h = walsh_matrix(4).unwrap();
        let plan = HadamardPlan::new(16, 0, vec![0, 3, 6, 9]).unwrap();
        // x = sum of selected Walsh rows with random weights (column vector)
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = Tensor::zeros(&[16, 1]);
        for &j in plan.basis_indices() {
            let c = rng.random_range(-1.0f32..1.0);
            for i in 0..16 {
                x.data_mut()[i] += c * h.data()[j * 16 + i];
            }
        }
        let back = unproject_lowrank(&project_lowrank(&x, &plan).unwrap(), &plan, 16).unwrap();
        assert!(max_abs_diff(&back, &x).unwrap() < 1e-5);
    }

    #[test]
    fn constant_survives_with_dc_basis() {
        let plan = HadamardPlan::low_sequency(16, 8, 1).unwrap();
        let x = Tensor::filled(&[2, 32, 3], -0.75);
        let back = unproject_lowrank(&project_lowrank(&x, &plan).unwrap(), &plan, 32).unwrap();
        assert!(max_abs_diff(&back, &x).unwrap() < 1e-6);
    }

    #[test]
    fn projection_matches_dense_mask_oracle() {
        let plan = HadamardPlan::new(16, 0, vec![0, 1, 4, 7, 8, 11, 13, 15]).unwrap();
        let x = random(&[32, 5], 21);
        let back = unproject_lowrank(&project_lowrank(&x, &plan).unwrap(), &plan, 32).unwrap();
        let oracle = dense_mask_projection(&x, &plan);
        assert!(max_abs_diff(&back, &oracle).unwrap() < 1e-5);
    }

    #[test]
    fn projection_is_idempotent() {
        let plan = HadamardPlan::low_sequency(16, 8, 0).unwrap();
        let x = random(&[48, 4], 5);
        let once = unproject_lowrank(&project_lowrank(&x, &plan).unwrap(), &plan, 48).unwrap();
        let twice = unproject_lowrank(&project_lowrank(&once, &plan).unwrap(), &plan, 48).unwrap();
        assert!(max_abs_diff(&once, &twice).unwrap() < 1e-5);
    }

    #[test]
    fn block_coefficients_layout() {
        let t = Tensor::filled(&[16, 2], 1.0);
        let c = block_coefficients(&t, &HadamardPlan::full_rank(16, 0).unwrap()).unwrap();
        assert_eq!(c.shape(), &[2, 16]);
        assert_eq!(c.data()[0], 4.0);
        assert_eq!(c.data()[16], 4.0);
        assert!(c.data()[1..16].iter().all(|&v| v == 0.0));
    }

    proptest::proptest! {
        #[test]
        fn prop_projection_never_grows_norm(seed in 0u64..10_000, blocks in 1usize..4, cols in 1usize..5) {
            let plan = HadamardPlan::low_sequency(16, 8, 0).unwrap();
            let x = random(&[16 * blocks, cols], seed);
            let back = unproject_lowrank(&project_lowrank(&x, &plan).unwrap(), &plan, 16 * blocks).unwrap();
            proptest::prop_assert!(back.l2_norm() <= x.l2_norm() + 1e-6);
        }

        #[test]
        fn prop_full_rank_pair_recovers(seed in 0u64..10_000, blocks in 1usize..4) {
            let plan = HadamardPlan::full_rank(16, 0).unwrap();
            let x = random(&[16 * blocks, 3], seed);
            let back = block_ht(&block_ht(&x, &plan).unwrap(), &plan).unwrap();
            proptest::prop_assert!(max_abs_diff(&back, &x).unwrap() < 1e-5);
        }
    }
}
