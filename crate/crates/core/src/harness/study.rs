//! Verification drivers: finite-difference gradient checks, gradient
//! fidelity of each strategy, and the quantization-error study on
//! heavy-tailed gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::model::{softmax_cross_entropy, Layer, Model, ModelSpec};
use crate::backprop::{self, hq_gx, ActivationInput, BackwardStrategy};
use crate::error::{HlqError, Result};
use crate::hadamard;
use crate::quantize::{self, dequant, int_matmul, Granularity, RngState, Rounding};
use crate::tensor::{cosine_similarity, matmul, Tensor};

/// Mean cross-entropy of `model` evaluated with direct loops in f64.
///
/// `params` replaces the model's parameters (same order as [`Model::params`]).
pub fn reference_loss(model: &Model, params: &[Vec<f64>], x: &Tensor, labels: &[usize]) -> f64 {
    let [b, h0, w0, c0] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
    let mut cur: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let (mut h, mut w, mut c) = (h0, w0, c0);
    let mut p = 0;
    for layer in &model.layers {
        match layer {
            Layer::Conv { kernel, pad, b: bias, .. } => {
                let (k, pad) = (*kernel as isize, *pad as isize);
                let o = bias.len();
                let (wt, bs) = (&params[p], &params[p + 1]);
                p += 2;
                let (ho, wo) = ((h as isize + 2 * pad - k + 1) as usize, (w as isize + 2 * pad - k + 1) as usize);
                let mut out = vec![0.0f64; b * ho * wo * o];
                for bb in 0..b {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            for oc in 0..o {
                                let mut acc = bs[oc];
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = oy as isize + ky - pad;
                                        let ix = ox as isize + kx - pad;
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                            continue;
                                        }
                                        for ic in 0..c {
                                            let xv = cur[((bb * h + iy as usize) * w + ix as usize) * c + ic];
                                            let wv = wt[oc * (k * k) as usize * c + ((ky * k + kx) as usize) * c + ic];
                                            acc += xv * wv;
                                        }
                                    }
                                }
                                out[((bb * ho + oy) * wo + ox) * o + oc] = acc;
                            }
                        }
                    }
                }
                cur = out;
                (h, w, c) = (ho, wo, o);
            }
            Layer::Linear { b: bias, .. } => {
                let o = bias.len();
                let (wt, bs) = (&params[p], &params[p + 1]);
                p += 2;
                let tokens = b * h * w;
                let mut out = vec![0.0f64; tokens * o];
                for t in 0..tokens {
                    for oc in 0..o {
                        out[t * o + oc] = bs[oc] + (0..c).map(|ic| cur[t * c + ic] * wt[oc * c + ic]).sum::<f64>();
                    }
                }
                cur = out;
                c = o;
            }
            Layer::Relu => cur.iter_mut().for_each(|v| *v = v.max(0.0)),
            Layer::AvgPool(s) => {
                let (ho, wo) = (h / s, w / s);
                let mut out = vec![0.0f64; b * ho * wo * c];
                for bb in 0..b {
                    for y in 0..h {
                        for xx in 0..w {
                            for ch in 0..c {
                                out[((bb * ho + y / s) * wo + xx / s) * c + ch] +=
                                    cur[((bb * h + y) * w + xx) * c + ch] / (s * s) as f64;
                            }
                        }
                    }
                }
                cur = out;
                (h, w) = (ho, wo);
            }
            Layer::Flatten => {
                c *= h * w;
                (h, w) = (1, 1);
            }
            Layer::GlobalAvgPool => {
                let mut out = vec![0.0f64; b * c];
                for bb in 0..b {
                    for q in 0..h * w {
                        for ch in 0..c {
                            out[bb * c + ch] += cur[(bb * h * w + q) * c + ch] / (h * w) as f64;
                        }
                    }
                }
                cur = out;
                (h, w) = (1, 1);
            }
        }
    }
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &cur[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        loss += z.ln() + m - row[y];
    }
    loss / b as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    /// Samples in the finite-difference batch.
    pub fd_batch: usize,
    /// Entries checked per parameter tensor (all when the tensor is smaller).
    pub max_entries: usize,
    pub step: f64,
    /// Samples per batch for the strategy-fidelity comparison.
    pub batch: usize,
    /// One seeded batch per entry.
    pub seeds: Vec<u64>,
    /// Rounding seeds averaged for the bias estimate.
    pub bias_trials: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            fd_batch: 2,
            max_entries: 48,
            step: 1e-5,
            batch: 32,
            seeds: (0..20).collect(),
            bias_trials: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub index: usize,
    pub shape: Vec<usize>,
    pub checked: usize,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyFidelity {
    pub strategy: String,
    pub cosines: Vec<f64>,
    pub cosine_mean: f64,
    pub cosine_min: f64,
    /// `‖mean over rounding seeds − vanilla‖ / ‖vanilla‖` on the first batch.
    pub relative_bias: f64,
}

/// Each layer's `(g_x, g_w)` against the exact pair, given exact upstream operands.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerFidelity {
    pub strategy: String,
    /// Model layer index of each column.
    pub layers: Vec<usize>,
    /// `[batch][layer]`
    pub cosines: Vec<Vec<f64>>,
    pub cosine_mean: f64,
    pub cosine_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub param_count: usize,
    pub vanilla_max_rel_err: f64,
    pub tensors: Vec<TensorCheck>,
    /// Whole-model gradients, errors compounding through the network.
    pub strategies: Vec<StrategyFidelity>,
    pub layers: Vec<LayerFidelity>,
}

fn seeded_batch(data: &Dataset, n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_BA7C);
    let n = n.min(data.len());
    let idx = sample(&mut rng, data.len(), n).into_vec();
    data.batch(&idx)
}

/// Parameter gradients of one batch, flattened in parameter order.
pub fn model_grads(model: &Model, x: &Tensor, y: &[usize], strategy: &BackwardStrategy, rng: &RngState) -> Result<Vec<Tensor>> {
    let strategies = model.strategies(strategy)?;
    let (logits, tape) = model.forward(x, Some(&strategies), rng)?;
    let (_, g) = softmax_cross_entropy(&logits, y)?;
    model.backward(&tape.expect("tape recorded"), &g, &strategies, rng)
}

fn flatten(grads: &[Tensor]) -> Vec<f32> {
    grads.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn pair_cosine(a: &backprop::GradPair, b: &backprop::GradPair) -> f64 {
    let cat = |p: &backprop::GradPair| p.g_x.data().iter().chain(p.g_w.data()).copied().collect::<Vec<f32>>();
    cosine_similarity(&cat(a), &cat(b))
}

pub fn layer_fidelity(model: &Model, data: &Dataset, strategy: &BackwardStrategy, cfg: &GradCheckConfig) -> Result<LayerFidelity> {
    let strategies = model.strategies(strategy)?;
    let mut layers = Vec::new();
    let mut cosines = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let (xb, yb) = seeded_batch(data, cfg.batch, seed);
        let ops = model.layer_operands(&xb, &yb)?;
        layers = ops.iter().map(|o| o.layer).collect();
        let mut row = Vec::with_capacity(ops.len());
        for op in &ops {
            let exact = backprop::vanilla_backward(&op.x, &op.w, &op.g_y)?;
            let mut rng = RngState::new(seed).split(op.layer as u64 + 1);
            let approx = backprop::backward(ActivationInput::Raw(&op.x), &op.w, &op.g_y, &strategies[op.layer], &mut rng)?;
            row.push(pair_cosine(&approx, &exact));
        }
        cosines.push(row);
    }
    let all: Vec<f64> = cosines.iter().flatten().copied().collect();
    Ok(LayerFidelity {
        strategy: strategy.name(),
        layers,
        cosine_mean: all.iter().sum::<f64>() / all.len().max(1) as f64,
        cosine_min: all.iter().copied().fold(f64::INFINITY, f64::min),
        cosines,
    })
}

/// Finite-difference check of the vanilla path and per-strategy fidelity against it.
pub fn grad_check(
    spec: &ModelSpec,
    data: &Dataset,
    strategies: &[BackwardStrategy],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let model = Model::new(spec)?;
    if model.param_count() >= 10_000 {
        return Err(HlqError::param(format!(
            "finite differences need fewer than 10^4 parameters, model has {}",
            model.param_count()
        )));
    }
    if data.is_empty() || cfg.seeds.is_empty() {
        return Err(HlqError::param("grad check needs data and at least one seed"));
    }
    let (x, y) = seeded_batch(data, cfg.fd_batch, cfg.seeds[0]);
    let analytic = model_grads(&model, &x, &y, &BackwardStrategy::vanilla(), &RngState::new(0))?;
    let base: Vec<Vec<f64>> = model.params().iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();
    let mut tensors = Vec::new();
    let mut worst = 0.0f64;
    for (k, g) in analytic.iter().enumerate() {
        let n = g.len();
        let picks: Vec<usize> = if n <= cfg.max_entries {
            (0..n).collect()
        } else {
            (0..cfg.max_entries).map(|j| j * n / cfg.max_entries).collect()
        };
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for &e in &picks {
            let mut p = base.clone();
            p[k][e] += cfg.step;
            let up = reference_loss(&model, &p, &x, &y);
            p[k][e] -= 2.0 * cfg.step;
            let down = reference_loss(&model, &p, &x, &y);
            let fd = (up - down) / (2.0 * cfg.step);
            diff = diff.max((g.data()[e] as f64 - fd).abs());
            scale = scale.max(fd.abs());
        }
        let rel = if scale > 0.0 { diff / scale } else { diff };
        worst = worst.max(rel);
        tensors.push(TensorCheck {
            index: k,
            shape: g.shape().to_vec(),
            checked: picks.len(),
            rel_err: rel,
        });
    }
    let mut fidelity = Vec::new();
    for s in strategies {
        let mut cosines = Vec::with_capacity(cfg.seeds.len());
        for &seed in &cfg.seeds {
            let (xb, yb) = seeded_batch(data, cfg.batch, seed);
            let v = flatten(&model_grads(&model, &xb, &yb, &BackwardStrategy::vanilla(), &RngState::new(0))?);
            let q = flatten(&model_grads(&model, &xb, &yb, s, &RngState::new(seed))?);
            cosines.push(cosine_similarity(&q, &v));
        }
        let (xb, yb) = seeded_batch(data, cfg.batch, cfg.seeds[0]);
        let v = flatten(&model_grads(&model, &xb, &yb, &BackwardStrategy::vanilla(), &RngState::new(0))?);
        let mut mean = vec![0.0f64; v.len()];
        let trials = cfg.bias_trials.max(1);
        for t in 0..trials {
            let q = flatten(&model_grads(&model, &xb, &yb, s, &RngState::new(1000 + t as u64))?);
            for (m, &qv) in mean.iter_mut().zip(&q) {
                *m += qv as f64 / trials as f64;
            }
        }
        let num: f64 = mean.iter().zip(&v).map(|(m, &a)| (m - a as f64).powi(2)).sum::<f64>().sqrt();
        let den: f64 = v.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt().max(1e-30);
        fidelity.push(StrategyFidelity {
            strategy: s.name(),
            cosine_mean: cosines.iter().sum::<f64>() / cosines.len() as f64,
            cosine_min: cosines.iter().cloned().fold(f64::INFINITY, f64::min),
            cosines,
            relative_bias: num / den,
        });
    }
    let layers = strategies
        .iter()
        .map(|s| layer_fidelity(&model, data, s, cfg))
        .collect::<Result<_>>()?;
    Ok(GradCheckReport {
        param_count: model.param_count(),
        vanilla_max_rel_err: worst,
        tensors,
        strategies: fidelity,
        layers,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantErrorConfig {
    pub trials: usize,
    /// Rows of the gradient operand.
    pub tokens: usize,
    /// Contraction extent (transformed axis).
    pub out_ch: usize,
    pub in_ch: usize,
    /// Standard deviation of the log-magnitude.
    pub sigma: f64,
    pub bits: u8,
    pub block: usize,
    pub bins: usize,
    pub seed: u64,
}

impl Default for QuantErrorConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            tokens: 64,
            out_ch: 64,
            in_ch: 64,
            sigma: 1.5,
            bits: 4,
            block: 16,
            bins: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantErrorReport {
    pub trials: usize,
    pub bits: u8,
    /// Trials where the transformed product has lower MSE.
    pub product_wins: usize,
    /// Trials where quantizing the transformed tensor has lower MSE.
    pub tensor_wins: usize,
    /// Trials where the transformed product has higher cosine similarity.
    pub cosine_wins: usize,
    pub product_mse_naive: Vec<f64>,
    pub product_mse_ht: Vec<f64>,
    pub tensor_mse_naive: Vec<f64>,
    pub tensor_mse_ht: Vec<f64>,
    pub product_win_fraction: f64,
    pub tensor_win_fraction: f64,
    /// Values of the first trial's gradient before and after the transform.
    pub histogram_raw: Histogram,
    pub histogram_ht: Histogram,
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len().max(1) as f64
}

fn histogram(v: &[f32], bins: usize) -> Histogram {
    let bins = bins.max(1);
    let m = v.iter().fold(0.0f32, |a, &x| a.max(x.abs())).max(f32::MIN_POSITIVE) as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| -m + 2.0 * m * i as f64 / bins as f64).collect();
    let mut counts = vec![0u64; bins];
    for &x in v {
        let k = (((x as f64 + m) / (2.0 * m)) * bins as f64) as usize;
        counts[k.min(bins - 1)] += 1;
    }
    Histogram { edges, counts }
}

/// Log-normal-magnitude gradient with random signs.
pub fn lognormal_tensor(shape: &[usize], sigma: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    Tensor::from_fn(shape, |_| {
        let mag = n.sample(rng).exp() as f32;
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

/// Paired trials of naive vs transformed quantization on heavy-tailed gradients.
pub fn quant_error_study(cfg: &QuantErrorConfig) -> Result<QuantErrorReport> {
    quantize::check_bits(cfg.bits)?;
    if cfg.trials == 0 || cfg.tokens == 0 || cfg.out_ch == 0 || cfg.in_ch == 0 {
        return Err(HlqError::param("quant-error study needs positive sizes"));
    }
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let root = RngState::new(cfg.seed).split(0x0E77);
    let (t, o, i) = (cfg.tokens, cfg.out_ch, cfg.in_ch);
    let mut r = QuantErrorReport {
        trials: cfg.trials,
        bits: cfg.bits,
        product_wins: 0,
        tensor_wins: 0,
        cosine_wins: 0,
        product_mse_naive: Vec::new(),
        product_mse_ht: Vec::new(),
        tensor_mse_naive: Vec::new(),
        tensor_mse_ht: Vec::new(),
        product_win_fraction: 0.0,
        tensor_win_fraction: 0.0,
        histogram_raw: Histogram { edges: vec![], counts: vec![] },
        histogram_ht: Histogram { edges: vec![], counts: vec![] },
    };
    let wn = Normal::new(0.0f32, 1.0 / (o as f32).sqrt()).map_err(|e| HlqError::param(e.to_string()))?;
    for trial in 0..cfg.trials {
        let g = lognormal_tensor(&[t, o], cfg.sigma, &mut data_rng);
        let w = Tensor::from_fn(&[o, i], |_| wn.sample(&mut data_rng));
        let exact = matmul(&g, &w)?;
        let rng = root.split(trial as u64);
        let qg = quantize::quantize(&g, cfg.bits, Rounding::Stochastic, Granularity::Tensor, &mut rng.split(0))?;
        let qw = quantize::quantize(&w, cfg.bits, Rounding::Stochastic, Granularity::Tensor, &mut rng.split(1))?;
        let naive = int_matmul(&qg, &qw)?.dequantize(1.0);
        let ht = hq_gx(&g.reshape(&[1, t, o])?, &w, Some(cfg.bits), Rounding::Stochastic, &mut rng.split(2))?
            .into_reshape(&[t, i])?;
        let (mn, mh) = (mse(naive.data(), exact.data()), mse(ht.data(), exact.data()));
        if mh < mn {
            r.product_wins += 1;
        }
        if cosine_similarity(ht.data(), exact.data()) > cosine_similarity(naive.data(), exact.data()) {
            r.cosine_wins += 1;
        }
        r.product_mse_naive.push(mn);
        r.product_mse_ht.push(mh);

        let plan = hadamard::HadamardPlan::full_rank(cfg.block, 1)?;
        let gh = hadamard::block_ht(&g.pad_axis(1, cfg.block)?, &plan)?;
        let tn = mse(dequant(&qg).data(), g.data());
        let qh = quantize::quantize(&gh, cfg.bits, Rounding::Stochastic, Granularity::Tensor, &mut rng.split(3))?;
        let th = mse(dequant(&qh).data(), gh.data()) * gh.len() as f64 / g.len() as f64;
        if th < tn {
            r.tensor_wins += 1;
        }
        r.tensor_mse_naive.push(tn);
        r.tensor_mse_ht.push(th);
        if trial == 0 {
            r.histogram_raw = histogram(g.data(), cfg.bins);
            r.histogram_ht = histogram(gh.data(), cfg.bins);
        }
    }
    r.product_win_fraction = r.product_wins as f64 / cfg.trials as f64;
    r.tensor_win_fraction = r.tensor_wins as f64 / cfg.trials as f64;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::{synthetic, SyntheticSpec};

    #[test]
    fn reference_loss_matches_model_forward() {
        let (d, _) = synthetic(&SyntheticSpec { train: 8, val: 1, ..SyntheticSpec::default() }).unwrap();
        let m = Model::new(&ModelSpec::reference()).unwrap();
        let (x, y) = d.batch(&[0, 1, 2, 3]);
        let (logits, _) = m.forward(&x, None, &RngState::new(0)).unwrap();
        let (l32, _) = softmax_cross_entropy(&logits, &y).unwrap();
        let params: Vec<Vec<f64>> = m.params().iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();
        let l64 = reference_loss(&m, &params, &x, &y);
        assert!((l32 - l64).abs() < 1e-5, "{l32} vs {l64}");
    }

    #[test]
    fn small_grad_check() {
        let (d, _) = synthetic(&SyntheticSpec { train: 40, val: 1, ..SyntheticSpec::default() }).unwrap();
        let cfg = GradCheckConfig {
            max_entries: 8,
            seeds: vec![0, 1],
            batch: 16,
            bias_trials: 2,
            ..GradCheckConfig::default()
        };
        let r = grad_check(&ModelSpec::reference(), &d, &[BackwardStrategy::vanilla()], &cfg).unwrap();
        assert!(r.vanilla_max_rel_err < 1e-3, "{}", r.vanilla_max_rel_err);
        assert!(r.strategies[0].cosine_min > 0.999_999);
        assert!(r.strategies[0].relative_bias < 1e-6);
    }

    #[test]
    fn study_is_seeded_and_counts_pairs() {
        let cfg = QuantErrorConfig { trials: 5, tokens: 16, out_ch: 32, in_ch: 8, ..QuantErrorConfig::default() };
        let a = quant_error_study(&cfg).unwrap();
        let b = quant_error_study(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.product_mse_naive.len(), 5);
        assert_eq!(a.histogram_raw.counts.iter().sum::<u64>(), 16 * 32);
        assert_eq!(a.histogram_ht.edges.len(), 65);
    }
}
