//! Training stack and experiment drivers.

pub mod data;
pub mod model;
pub mod optim;
pub mod study;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backprop::{BackwardStrategy, GradWPath, GradXPath, GwTransform, GxTransform};
use crate::error::{HlqError, Result};
use crate::quantize::RngState;

pub use data::{synthetic, Dataset, SyntheticSpec};
pub use model::{softmax_cross_entropy, LayerOperands, LayerSpec, Model, ModelSpec};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind, Schedule};
pub use study::{grad_check, layer_fidelity, quant_error_study, GradCheckConfig, GradCheckReport, QuantErrorConfig, QuantErrorReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
    /// Epochs at the start that run every quantizer at `warmup_bits`; `None` means `epochs / 8`.
    pub warmup_epochs: Option<usize>,
    pub warmup_bits: u8,
    pub seed: u64,
    /// Adds per-epoch wall time to the history (makes reports run-dependent).
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 32,
            optimizer: OptimizerConfig::default(),
            schedule: Schedule::default(),
            warmup_epochs: None,
            warmup_bits: 8,
            seed: 0,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_epochs.unwrap_or(self.epochs / 8)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(HlqError::param("epochs and batch_size must be positive"));
        }
        if self.warmup() > self.epochs {
            return Err(HlqError::param(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup(),
                self.epochs
            )));
        }
        crate::quantize::check_bits(self.warmup_bits)?;
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f32,
    pub strategy: String,
    pub bits_gx: Option<u8>,
    pub bits_gw: Option<u8>,
    pub warmup: bool,
    /// Bytes of activations retained for weight gradients per training step.
    pub saved_activation_bytes: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsHistory {
    pub epochs: Vec<EpochMetrics>,
}

impl MetricsHistory {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.epochs {
            s.push_str(&serde_json::to_string(e).expect("metrics serialize"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let epochs = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| HlqError::Value(format!("bad metrics line: {e}"))))
            .collect::<Result<_>>()?;
        Ok(Self { epochs })
    }

    pub fn final_val_acc(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.val_acc)
    }
}

/// Loss and top-1 accuracy (percent) over a dataset.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let (x, y) = data.batch(chunk);
        let (logits, _) = model.forward(&x, None, &RngState::new(0))?;
        let (l, _) = softmax_cross_entropy(&logits, &y)?;
        loss += l * chunk.len() as f64;
        correct += model::argmax_rows(&logits).iter().zip(&y).filter(|(a, b)| a == b).count();
    }
    Ok((loss / data.len() as f64, 100.0 * correct as f64 / data.len() as f64))
}

/// Trained model and its per-epoch history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: MetricsHistory,
}

/// Trains `spec` from scratch; `(seed, config)` determine every number.
pub fn train(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    strategy: &BackwardStrategy,
    train_set: &Dataset,
    val_set: &Dataset,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    strategy.validate()?;
    let spec = ModelSpec {
        init_seed: spec.init_seed.wrapping_add(cfg.seed),
        ..spec.clone()
    };
    let mut model = Model::new(&spec)?;
    if train_set.sample_shape() != spec.input || val_set.sample_shape() != spec.input {
        return Err(HlqError::dim("dataset sample shape does not match the model input"));
    }
    let mut opt = Optimizer::new(&cfg.optimizer, &model.params());
    let root = RngState::new(cfg.seed).split(0x7EA1);
    let base = model.strategies(strategy)?;
    let warm: Vec<BackwardStrategy> = base.iter().map(|s| s.with_bits(cfg.warmup_bits)).collect();
    let mut history = MetricsHistory::default();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let in_warmup = epoch < cfg.warmup();
        let active = if in_warmup { &warm } else { &base };
        let lr = cfg.optimizer.lr * cfg.schedule.factor(epoch, cfg.epochs);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut saved = 0usize;
        let batches = train_set.epoch_batches(cfg.batch_size, cfg.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64));
        for (step, idx) in batches.iter().enumerate() {
            let (x, y) = train_set.batch(idx);
            let rng = root.split_path(&[epoch as u64, step as u64]);
            let (logits, tape) = model.forward(&x, Some(active), &rng)?;
            let tape = tape.expect("training forward records a tape");
            let (loss, g) = softmax_cross_entropy(&logits, &y)?;
            loss_sum += loss * idx.len() as f64;
            correct += model::argmax_rows(&logits).iter().zip(&y).filter(|(a, b)| a == b).count();
            saved = saved.max(tape.saved_bytes());
            let grads = model.backward(&tape, &g, active, &rng)?;
            opt.step(model.params_mut(), &grads, lr)?;
        }
        let (val_loss, val_acc) = evaluate(&model, val_set)?;
        let shown = &active[model.layers.iter().position(model::Layer::has_params).unwrap_or(0)];
        history.epochs.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / train_set.len().max(1) as f64,
            train_acc: 100.0 * correct as f64 / train_set.len().max(1) as f64,
            val_loss,
            val_acc,
            lr,
            strategy: strategy.name(),
            bits_gx: shown.gx.bits,
            bits_gw: shown.gw.bits,
            warmup: in_warmup,
            saved_activation_bytes: saved,
            wall_time_s: cfg.record_wall_time.then(|| started.elapsed().as_secs_f64()),
        });
    }
    Ok(TrainOutcome { model, history })
}

/// One row of the path-sensitivity grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub g_i: String,
    pub g_w: String,
    pub strategy: BackwardStrategy,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// `(g_i label, g_w label, strategy)` rows: the five quantization rows and the two low-rank rows.
pub fn ablation_grid(rank: usize) -> Vec<(String, String, BackwardStrategy)> {
    let q = |t: GxTransform| GradXPath { transform: t, bits: Some(4) };
    let qw = |t: GwTransform| GradWPath { transform: t, bits: Some(4) };
    let mut hla_w = BackwardStrategy::custom(GradXPath::FLOAT, GradWPath { transform: GwTransform::LowRank, bits: None });
    hla_w.rank = rank;
    let mut hla_x = BackwardStrategy::custom(GradXPath { transform: GxTransform::LowRank, bits: None }, GradWPath::FLOAT);
    hla_x.rank = rank;
    vec![
        ("FP".into(), "FP".into(), BackwardStrategy::vanilla()),
        ("FP".into(), "4-bit".into(), BackwardStrategy::custom(GradXPath::FLOAT, qw(GwTransform::None))),
        ("FP".into(), "4-bit + HT".into(), BackwardStrategy::custom(GradXPath::FLOAT, qw(GwTransform::Hadamard))),
        ("4-bit".into(), "FP".into(), BackwardStrategy::custom(q(GxTransform::None), GradWPath::FLOAT)),
        ("4-bit + HT".into(), "FP".into(), BackwardStrategy::custom(q(GxTransform::Hadamard), GradWPath::FLOAT)),
        ("FP".into(), "HLA".into(), hla_w),
        ("HLA".into(), "FP".into(), hla_x),
    ]
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

/// Runs `jobs` on up to `threads` workers, preserving order.
pub fn run_parallel<T: Send, R: Send>(jobs: Vec<T>, threads: usize, f: impl Fn(T) -> R + Sync) -> Vec<R> {
    let threads = threads.max(1);
    if threads == 1 || jobs.len() <= 1 {
        return jobs.into_iter().map(f).collect();
    }
    let n = jobs.len();
    let queue = std::sync::Mutex::new(jobs.into_iter().enumerate().collect::<Vec<_>>());
    let results = std::sync::Mutex::new((0..n).map(|_| None).collect::<Vec<Option<R>>>());
    std::thread::scope(|s| {
        for _ in 0..threads.min(n) {
            s.spawn(|| loop {
                let job = queue.lock().expect("job queue").pop();
                let Some((i, job)) = job else { break };
                let r = f(job);
                results.lock().expect("results")[i] = Some(r);
            });
        }
    });
    results.into_inner().expect("results").into_iter().map(|r| r.expect("every job ran")).collect()
}

/// Trains every grid row on every seed and reports final validation accuracy.
pub fn ablation(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    rows: &[(String, String, BackwardStrategy)],
    seeds: &[u64],
    train_set: &Dataset,
    val_set: &Dataset,
    threads: usize,
) -> Result<Vec<AblationRow>> {
    let jobs: Vec<(usize, u64)> = (0..rows.len()).flat_map(|r| seeds.iter().map(move |&s| (r, s))).collect();
    let results = run_parallel(jobs, threads, |(r, seed)| {
        let c = TrainConfig { seed, ..cfg.clone() };
        train(spec, &c, &rows[r].2, train_set, val_set).map(|o| o.history.final_val_acc())
    });
    let mut out = Vec::with_capacity(rows.len());
    let mut it = results.into_iter();
    for (g_i, g_w, s) in rows {
        let accs: Vec<f64> = it.by_ref().take(seeds.len()).collect::<Result<_>>()?;
        let (mean, std) = mean_std(&accs);
        out.push(AblationRow {
            g_i: g_i.clone(),
            g_w: g_w.clone(),
            strategy: s.clone(),
            seeds: seeds.to_vec(),
            accuracies: accs,
            mean,
            std,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (Dataset, Dataset) {
        synthetic(&SyntheticSpec {
            train: 64,
            val: 32,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 16,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn same_seed_same_history() {
        let (tr, va) = tiny();
        let s = BackwardStrategy::hlq();
        let a = train(&ModelSpec::reference(), &quick(), &s, &tr, &va).unwrap();
        let b = train(&ModelSpec::reference(), &quick(), &s, &tr, &va).unwrap();
        assert_eq!(a.history.to_jsonl(), b.history.to_jsonl());
        assert_eq!(MetricsHistory::from_jsonl(&a.history.to_jsonl()).unwrap(), a.history);
    }

    #[test]
    fn zero_lr_leaves_model_unchanged() {
        let (tr, va) = tiny();
        let mut cfg = quick();
        cfg.optimizer.lr = 0.0;
        let out = train(&ModelSpec::reference(), &cfg, &BackwardStrategy::vanilla(), &tr, &va).unwrap();
        let init = Model::new(&ModelSpec::reference()).unwrap();
        assert_eq!(out.model.params(), init.params());
        let h = &out.history.epochs;
        assert_eq!(h[0].val_loss, h[1].val_loss);
    }

    #[test]
    fn warmup_schedule_is_logged() {
        let (tr, va) = tiny();
        let cfg = TrainConfig {
            epochs: 8,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let h = train(&ModelSpec::reference(), &cfg, &BackwardStrategy::hlq(), &tr, &va).unwrap().history;
        assert!(h.epochs[0].warmup && h.epochs[0].bits_gx == Some(8));
        assert!(h.epochs[1..].iter().all(|e| !e.warmup && e.bits_gx == Some(4) && e.bits_gw == Some(8)));
        assert!(h.epochs.iter().all(|e| (0.0..=100.0).contains(&e.val_acc)));
        assert!(h.epochs.windows(2).all(|w| w[1].epoch == w[0].epoch + 1));
    }

    #[test]
    fn compressed_activations_are_smaller() {
        let (tr, va) = tiny();
        let v = train(&ModelSpec::reference(), &quick(), &BackwardStrategy::vanilla(), &tr, &va).unwrap();
        let h = train(&ModelSpec::reference(), &quick(), &BackwardStrategy::hlq(), &tr, &va).unwrap();
        let (bv, bh) = (v.history.epochs[0].saved_activation_bytes, h.history.epochs[0].saved_activation_bytes);
        assert!(bh * 6 < bv, "{bh} vs {bv}");
    }

    #[test]
    fn ablation_first_row_matches_train() {
        let (tr, va) = tiny();
        let grid = ablation_grid(8);
        assert_eq!(grid.len(), 7);
        let rows = ablation(&ModelSpec::reference(), &quick(), &grid[..1], &[3], &tr, &va, 2).unwrap();
        let direct = train(&ModelSpec::reference(), &TrainConfig { seed: 3, ..quick() }, &BackwardStrategy::vanilla(), &tr, &va).unwrap();
        assert_eq!(rows[0].accuracies[0], direct.history.final_val_acc());
    }

    #[test]
    fn parallel_preserves_order() {
        let out = run_parallel((0..20).collect(), 4, |x: u64| x * x);
        assert_eq!(out, (0..20).map(|x| x * x).collect::<Vec<_>>());
    }

    #[test]
    fn invalid_config_rejected() {
        let (tr, va) = tiny();
        let cfg = TrainConfig {
            warmup_epochs: Some(5),
            epochs: 2,
            ..TrainConfig::default()
        };
        assert!(train(&ModelSpec::reference(), &cfg, &BackwardStrategy::vanilla(), &tr, &va).is_err());
    }
}
