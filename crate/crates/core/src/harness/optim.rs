use serde::{Deserialize, Serialize};

use crate::error::{HlqError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(HlqError::param(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Learning-rate multiplier over epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    /// Multiply by `gamma` at each milestone, given as fractions of the run.
    Step { milestones: Vec<f64>, gamma: f32 },
    Cosine,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Step {
            milestones: vec![0.3, 0.6, 0.8],
            gamma: 0.1,
        }
    }
}

impl Schedule {
    pub fn factor(&self, epoch: usize, epochs: usize) -> f32 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::Step { milestones, gamma } => {
                let passed = milestones
                    .iter()
                    .filter(|&&m| epoch >= (m * epochs as f64).round() as usize)
                    .count();
                gamma.powi(passed as i32)
            }
            Schedule::Cosine => {
                let t = epoch as f32 / epochs.max(1) as f32;
                0.5 * (1.0 + (std::f32::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    steps: i32,
}

impl Optimizer {
    pub fn new(cfg: &OptimizerConfig, params: &[&Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect::<Vec<_>>();
        Self {
            cfg: cfg.clone(),
            first: zeros(),
            second: if cfg.kind == OptimizerKind::AdamW { zeros() } else { Vec::new() },
            steps: 0,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f32) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(HlqError::State("parameter and gradient lists differ".into()));
        }
        self.steps += 1;
        let c = &self.cfg;
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            p.expect_same_shape(g)?;
            let m = &mut self.first[k];
            match c.kind {
                OptimizerKind::Sgd => {
                    for ((w, &gv), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        *v = c.momentum * *v + gv + c.weight_decay * *w;
                        *w -= lr * *v;
                    }
                }
                OptimizerKind::AdamW => {
                    let s = &mut self.second[k];
                    let bc1 = 1.0 - c.beta1.powi(self.steps);
                    let bc2 = 1.0 - c.beta2.powi(self.steps);
                    for (((w, &gv), m1), m2) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(s.iter_mut()) {
                        *m1 = c.beta1 * *m1 + (1.0 - c.beta1) * gv;
                        *m2 = c.beta2 * *m2 + (1.0 - c.beta2) * gv * gv;
                        let update = (*m1 / bc1) / ((*m2 / bc2).sqrt() + c.eps) + c.weight_decay * *w;
                        *w -= lr * update;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_schedule_scaled_milestones() {
        let s = Schedule::default();
        let f: Vec<f32> = (0..10).map(|e| s.factor(e, 10)).collect();
        assert_eq!(f[2], 1.0);
        assert!((f[3] - 0.1).abs() < 1e-7);
        assert!((f[6] - 0.01).abs() < 1e-8);
        assert!((f[9] - 0.001).abs() < 1e-9);
        assert_eq!(Schedule::Cosine.factor(0, 10), 1.0);
        assert!(Schedule::Cosine.factor(5, 10).abs() - 0.5 < 1e-6);
    }

    #[test]
    fn sgd_and_adamw_descend_a_quadratic() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::AdamW] {
            let cfg = OptimizerConfig {
                kind,
                lr: 0.1,
                weight_decay: 0.0,
                ..OptimizerConfig::default()
            };
            let mut p = Tensor::new(&[2], vec![3.0, -2.0]).unwrap();
            let mut opt = Optimizer::new(&cfg, &[&p]);
            for _ in 0..200 {
                let g = p.clone();
                opt.step(vec![&mut p], &[g], cfg.lr).unwrap();
            }
            assert!(p.max_abs() < 0.05, "{kind:?}: {:?}", p.data());
        }
    }

    #[test]
    fn zero_lr_keeps_params() {
        let cfg = OptimizerConfig::default();
        let mut p = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let before = p.clone();
        let mut opt = Optimizer::new(&cfg, &[&p]);
        let g = Tensor::new(&[2], vec![5.0, -5.0]).unwrap();
        opt.step(vec![&mut p], &[g], 0.0).unwrap();
        assert_eq!(p, before);
    }
}
