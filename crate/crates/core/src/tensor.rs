//! Dense row-major `f32` tensor of rank at most four.
//!
//! Every matrix product accumulates each output element in increasing order of
//! the contraction index, so results are bit-reproducible across runs.

use serde::{Deserialize, Serialize};

use crate::error::{HlqError, Result};

pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor from external data, rejecting non-finite values.
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let t = Self::from_parts(shape, data)?;
        if let Some(pos) = t.data.iter().position(|v| !v.is_finite()) {
            return Err(HlqError::Value(format!(
                "non-finite value {} at flat index {pos}",
                t.data[pos]
            )));
        }
        Ok(t)
    }

    /// Like [`Tensor::new`] but skips the finiteness scan.
    pub(crate) fn from_parts(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        check_rank(shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(HlqError::dim(format!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        check_rank(shape).expect("rank at most 4");
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// `(product of leading extents, last extent)`; a scalar or vector is one row.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.split_last() {
            None => (1, 1),
            Some((&last, lead)) => (lead.iter().product(), last),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        check_rank(shape)?;
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(HlqError::dim(format!(
                "cannot reshape {:?} ({} elements) into {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn into_reshape(mut self, shape: &[usize]) -> Result<Tensor> {
        check_rank(shape)?;
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(HlqError::dim(format!(
                "cannot reshape {:?} ({} elements) into {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Matrix transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(HlqError::dim(format!(
                "transpose expects a matrix, got shape {:?}",
                self.shape
            )));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Splits the shape around `axis` into `(outer, extent, inner)`.
    pub fn axis_split(&self, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.rank() {
            return Err(HlqError::dim(format!(
                "axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        Ok((outer, self.shape[axis], inner))
    }

    /// Zero-pads `axis` up to the next multiple of `multiple`.
    pub fn pad_axis(&self, axis: usize, multiple: usize) -> Result<Tensor> {
        if multiple == 0 {
            return Err(HlqError::param("padding multiple must be positive"));
        }
        let (_, extent, _) = self.axis_split(axis)?;
        let target = extent.div_ceil(multiple) * multiple;
        self.resize_axis(axis, target)
    }

    /// Keeps the first `extent` entries of `axis`.
    pub fn crop_axis(&self, axis: usize, extent: usize) -> Result<Tensor> {
        let (_, current, _) = self.axis_split(axis)?;
        if extent > current {
            return Err(HlqError::dim(format!(
                "cannot crop axis {axis} of extent {current} to {extent}"
            )));
        }
        self.resize_axis(axis, extent)
    }

    fn resize_axis(&self, axis: usize, target: usize) -> Result<Tensor> {
        let (outer, extent, inner) = self.axis_split(axis)?;
        if target == extent {
            return Ok(self.clone());
        }
        let keep = extent.min(target);
        let mut out = vec![0.0; outer * target * inner];
        for o in 0..outer {
            let src = &self.data[o * extent * inner..o * extent * inner + keep * inner];
            out[o * target * inner..o * target * inner + keep * inner].copy_from_slice(src);
        }
        let mut shape = self.shape.clone();
        shape[axis] = target;
        Ok(Tensor { shape, data: out })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(HlqError::dim(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

fn check_rank(shape: &[usize]) -> Result<()> {
    if shape.len() > MAX_RANK {
        return Err(HlqError::dim(format!(
            "rank {} exceeds the maximum of {MAX_RANK}",
            shape.len()
        )));
    }
    Ok(())
}

/// `c = a · b` for rank-2 operands.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(HlqError::dim(format!(
            "matmul expects matrices, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.dim(0), a.dim(1));
    let (k2, n) = (b.dim(0), b.dim(1));
    if k != k2 {
        return Err(HlqError::dim(format!(
            "inner extents differ: {:?} · {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0f32; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (c, &bv) in row.iter_mut().zip(brow) {
                *c += av * bv;
            }
        }
    }
    Tensor::from_parts(&[m, n], out)
}

/// Largest element-wise absolute difference.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f32> {
    a.expect_same_shape(b)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .fold(0.0f32, |m, (x, y)| m.max((x - y).abs())))
}

/// `‖a − reference‖∞ / ‖reference‖∞`, or the absolute error when the reference is zero.
pub fn max_rel_err(a: &Tensor, reference: &Tensor) -> Result<f64> {
    let diff = max_abs_diff(a, reference)? as f64;
    let denom = reference.max_abs() as f64;
    Ok(if denom > 0.0 { diff / denom } else { diff })
}

/// Cosine similarity of two equally sized slices, accumulated in `f64`.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine of unequal lengths");
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Dimensions of a linear layer (or im2col-lowered convolution, with `seq = H·W`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerDims {
    pub batch: usize,
    pub seq: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl LayerDims {
    pub fn new(batch: usize, seq: usize, in_ch: usize, out_ch: usize) -> Result<Self> {
        if batch == 0 || seq == 0 || in_ch == 0 || out_ch == 0 {
            return Err(HlqError::param(format!(
                "layer dims must be positive, got B={batch} L={seq} I={in_ch} O={out_ch}"
            )));
        }
        Ok(Self {
            batch,
            seq,
            in_ch,
            out_ch,
        })
    }

    /// Infers dims from `x: [B, L, I]` and `w: [O, I]`.
    pub fn infer(x: &Tensor, w: &Tensor) -> Result<Self> {
        if x.rank() != 3 || w.rank() != 2 || x.dim(2) != w.dim(1) {
            return Err(HlqError::dim(format!(
                "expected x [B, L, I] and w [O, I], got {:?} and {:?}",
                x.shape(),
                w.shape()
            )));
        }
        Self::new(x.dim(0), x.dim(1), x.dim(2), w.dim(0))
    }

    /// Rows of the flattened `(B·L) × channels` matrices.
    pub fn tokens(&self) -> usize {
        self.batch * self.seq
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
    }

    #[test]
    fn identity_times_x_is_x() {
        let x = random(&[2, 5], 1);
        assert_eq!(matmul(&Tensor::identity(2), &x).unwrap(), x);
    }

    #[test]
    fn hand_arithmetic_product() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![5.0, 6.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(&[7, 5], 2);
        let b = random(&[5, 3], 3);
        let c = matmul(&a, &b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut s = 0.0f64;
                for k in 0..5 {
                    s += a.data()[i * 5 + k] as f64 * b.data()[k * 3 + j] as f64;
                }
                assert!((c.data()[i * 3 + j] as f64 - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        assert!(matches!(err, HlqError::Dimension(_)));
    }

    #[test]
    fn rejects_non_finite_and_bad_counts() {
        assert!(matches!(
            Tensor::new(&[2], vec![1.0, f32::NAN]),
            Err(HlqError::Value(_))
        ));
        assert!(matches!(
            Tensor::new(&[2], vec![f32::INFINITY, 0.0]),
            Err(HlqError::Value(_))
        ));
        assert!(matches!(
            Tensor::new(&[2, 2], vec![0.0; 3]),
            Err(HlqError::Dimension(_))
        ));
        assert!(matches!(
            Tensor::new(&[1, 1, 1, 1, 1], vec![0.0]),
            Err(HlqError::Dimension(_))
        ));
    }

    #[test]
    fn reshape_preserves_row_major_order() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f32);
        let r = t.reshape(&[6, 4]).unwrap();
        assert_eq!(r.data(), t.data());
        assert_eq!(r.shape(), &[6, 4]);
        assert!(t.reshape(&[5, 5]).is_err());
    }

    #[test]
    fn double_transpose_is_identity() {
        let t = random(&[4, 9], 4);
        assert_eq!(t.transpose().unwrap().transpose().unwrap(), t);
    }

    #[test]
    fn pad_to_multiple_and_crop_back() {
        let t = Tensor::from_fn(&[3, 20], |i| i as f32 + 1.0);
        let p = t.pad_axis(1, 16).unwrap();
        assert_eq!(p.shape(), &[3, 32]);
        for r in 0..3 {
            assert_eq!(&p.data()[r * 32..r * 32 + 20], &t.data()[r * 20..r * 20 + 20]);
            assert!(p.data()[r * 32 + 20..(r + 1) * 32].iter().all(|&v| v == 0.0));
        }
        assert_eq!(p.crop_axis(1, 20).unwrap(), t);
        // already a multiple: unchanged
        assert_eq!(p.pad_axis(1, 16).unwrap(), p);
    }

    #[test]
    fn transpose_reverses_products() {
        let a = random(&[6, 4], 5);
        let b = random(&[4, 3], 6);
        let lhs = matmul(&a, &b).unwrap().transpose().unwrap();
        let rhs = matmul(&b.transpose().unwrap(), &a.transpose().unwrap()).unwrap();
        assert!(max_abs_diff(&lhs, &rhs).unwrap() < 1e-6);
    }

    #[test]
    fn layer_dims_validation() {
        assert!(LayerDims::new(0, 1, 1, 1).is_err());
        let d = LayerDims::infer(&Tensor::zeros(&[2, 3, 4]), &Tensor::zeros(&[5, 4])).unwrap();
        assert_eq!(d, LayerDims::new(2, 3, 4, 5).unwrap());
        assert_eq!(d.tokens(), 6);
    }

    proptest::proptest! {
        #[test]
        fn prop_transpose_of_product(m in 1usize..8, k in 1usize..8, n in 1usize..8, seed in 0u64..1000) {
            let a = random(&[m, k], seed);
            let b = random(&[k, n], seed + 1);
            let lhs = matmul(&a, &b).unwrap().transpose().unwrap();
            let rhs = matmul(&b.transpose().unwrap(), &a.transpose().unwrap()).unwrap();
            proptest::prop_assert!(max_abs_diff(&lhs, &rhs).unwrap() < 1e-6);
        }

        #[test]
        fn prop_reshape_round_trip(a in 1usize..5, b in 1usize..5, c in 1usize..5, seed in 0u64..1000) {
            let t = random(&[a, b, c], seed);
            let back = t.reshape(&[a * b, c]).unwrap().reshape(&[a, b, c]).unwrap();
            proptest::prop_assert_eq!(back, t);
        }
    }
}
