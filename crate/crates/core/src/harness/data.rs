//! Datasets in NHWC layout.
//!
//! Binary format (little-endian): `"HLQD"` | version u32 (=1) | count u32 |
//! height u32 | width u32 | channels u32 | classes u32 | images f32 × count·H·W·C
//! | labels u8 × count.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{HlqError, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"HLQD";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, H, W, C]`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

/// Parameters of the built-in generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub train: usize,
    pub val: usize,
    pub size: usize,
    pub classes: usize,
    pub blobs: usize,
    pub max_shift: i32,
    pub noise: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            train: 4000,
            val: 2000,
            size: 16,
            classes: 10,
            blobs: 3,
            max_shift: 3,
            noise: 0.5,
            seed: 0,
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[H, W, C]` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        [self.images.dim(1), self.images.dim(2), self.images.dim(3)]
    }

    /// Gathers samples `idx` into a batch.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let [h, w, c] = self.sample_shape();
        let per = h * w * c;
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(&[idx.len(), h, w, c], data).expect("batch of finite samples"), labels)
    }

    /// Seeded permutation split into batches; the last partial batch is kept.
    pub fn epoch_batches(&self, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let [h, wd, c] = self.sample_shape();
        w.write_all(MAGIC)?;
        for v in [VERSION, self.len() as u32, h as u32, wd as u32, c as u32, self.classes as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in self.images.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        let labels: Vec<u8> = self.labels.iter().map(|&l| l as u8).collect();
        w.write_all(&labels)?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| HlqError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 28 || &bytes[..4] != MAGIC {
            return Err(HlqError::format(0, "not a dataset file (bad magic or truncated header)"));
        }
        let field = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
        if field(0) != VERSION as usize {
            return Err(HlqError::format(4, format!("unsupported dataset version {}", field(0))));
        }
        let (n, h, w, c, classes) = (field(1), field(2), field(3), field(4), field(5));
        if h == 0 || w == 0 || c == 0 || classes == 0 || classes > 256 {
            return Err(HlqError::format(12, "invalid sample shape or class count"));
        }
        let count = [n, h, w, c]
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| HlqError::format(8, "sample count overflows"))?;
        let expected = count
            .checked_mul(4)
            .and_then(|v| v.checked_add(28 + n))
            .ok_or_else(|| HlqError::format(8, "file size overflows"))?;
        if bytes.len() != expected {
            return Err(HlqError::format(28, format!("expected {expected} bytes, found {}", bytes.len())));
        }
        let images: Vec<f32> = bytes[28..28 + 4 * count]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let labels: Vec<usize> = bytes[28 + 4 * count..].iter().map(|&l| l as usize).collect();
        if let Some(p) = labels.iter().position(|&l| l >= classes) {
            return Err(HlqError::format(28 + 4 * count + p, format!("label {} >= {classes}", labels[p])));
        }
        Ok(Self {
            images: Tensor::new(&[n, h, w, c], images)?,
            labels,
            classes,
        })
    }
}

/// Class prototypes made of Gaussian blobs; samples are shifted, rescaled and noised copies.
pub fn synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    if spec.size == 0 || spec.classes < 2 || spec.blobs == 0 {
        return Err(HlqError::param("synthetic data needs size > 0, classes >= 2 and blobs > 0"));
    }
    let s = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut protos = Vec::with_capacity(spec.classes);
    for _ in 0..spec.classes {
        let mut img = vec![0.0f32; s * s];
        for _ in 0..spec.blobs {
            let cy = rng.random_range(2.0..(s as f32 - 2.0));
            let cx = rng.random_range(2.0..(s as f32 - 2.0));
            let sigma = rng.random_range(1.0..2.5f32);
            let amp = if rng.random_bool(0.75) { 1.0 } else { -0.6 };
            for y in 0..s {
                for x in 0..s {
                    let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                    img[y * s + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
        protos.push(img);
    }
    let noise = Normal::new(0.0f32, spec.noise.max(0.0)).map_err(|e| HlqError::param(e.to_string()))?;
    let mut make = |n: usize| -> Result<Dataset> {
        let mut data = Vec::with_capacity(n * s * s);
        let mut labels = Vec::with_capacity(n);
        for k in 0..n {
            let label = k % spec.classes;
            let dy = rng.random_range(-spec.max_shift..=spec.max_shift);
            let dx = rng.random_range(-spec.max_shift..=spec.max_shift);
            let gain = rng.random_range(0.7..1.3f32);
            let p = &protos[label];
            for y in 0..s as i32 {
                for x in 0..s as i32 {
                    let (sy, sx) = (y - dy, x - dx);
                    let v = if (0..s as i32).contains(&sy) && (0..s as i32).contains(&sx) {
                        p[sy as usize * s + sx as usize]
                    } else {
                        0.0
                    };
                    data.push(gain * v + noise.sample(&mut rng));
                }
            }
            labels.push(label);
        }
        Ok(Dataset {
            images: Tensor::new(&[n, s, s, 1], data)?,
            labels,
            classes: spec.classes,
        })
    };
    let train = make(spec.train)?;
    let val = make(spec.val)?;
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            train: 40,
            val: 10,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn synthetic_is_seeded() {
        let (a, _) = synthetic(&small()).unwrap();
        let (b, _) = synthetic(&small()).unwrap();
        assert_eq!(a, b);
        let (c, _) = synthetic(&SyntheticSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.images, c.images);
        assert_eq!(a.images.shape(), &[40, 16, 16, 1]);
        assert!(a.labels.iter().all(|&l| l < 10));
    }

    #[test]
    fn binary_roundtrip_and_errors() {
        let (a, _) = synthetic(&small()).unwrap();
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        assert_eq!(Dataset::read_from(&buf[..]).unwrap(), a);
        assert!(Dataset::from_bytes(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Dataset::from_bytes(&bad).is_err());
        let mut bad = buf.clone();
        *bad.last_mut().unwrap() = 200;
        assert!(Dataset::from_bytes(&bad).is_err());
    }

    #[test]
    fn batches_cover_every_sample_once() {
        let (a, _) = synthetic(&small()).unwrap();
        let batches = a.epoch_batches(16, 3);
        assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![16, 16, 8]);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
        let (x, y) = a.batch(&batches[0]);
        assert_eq!(x.shape(), &[16, 16, 16, 1]);
        assert_eq!(y.len(), 16);
    }
}
