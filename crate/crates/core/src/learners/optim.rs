//! Optimizers, global-norm clipping and learning-rate schedules.

use serde::{Deserialize, Serialize};

use super::network::Dense;
use super::TrainConfig;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `lr = base / (1 + decay_rate * epoch)`.
    #[default]
    PerEpoch,
    /// Constant for `warmup_iterations`, then
    /// `lr = base / (1 + decay_rate * (t - warmup) / decay_step)`.
    PerIterationAfterWarmup,
}

/// Learning rate at step `t`. `t` counts epochs for [`ScheduleKind::PerEpoch`]
/// and mini-batch iterations otherwise.
pub fn lr_at(cfg: &TrainConfig, t: usize) -> f64 {
    match cfg.schedule {
        ScheduleKind::PerEpoch => cfg.base_lr / (1.0 + cfg.decay_rate * t as f64),
        ScheduleKind::PerIterationAfterWarmup => {
            if t < cfg.warmup_iterations {
                cfg.base_lr
            } else {
                let steps = (t - cfg.warmup_iterations) as f64 / cfg.decay_step as f64;
                cfg.base_lr / (1.0 + cfg.decay_rate * steps)
            }
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

pub(crate) enum Optimizer {
    Sgd,
    Adam { m: Vec<Dense>, v: Vec<Dense>, t: i32 },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &[Dense]) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam {
                m: params.iter().map(Dense::zeros_like).collect(),
                v: params.iter().map(Dense::zeros_like).collect(),
                t: 0,
            },
        }
    }

    pub fn step(&mut self, params: &mut [Dense], grads: &[Dense], lr: f64) {
        match self {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    p.weight.scaled_add(-lr, &g.weight);
                    p.bias.scaled_add(-lr, &g.bias);
                }
            }
            Optimizer::Adam { m, v, t } => {
                *t += 1;
                let c1 = 1.0 - BETA1.powi(*t);
                let c2 = 1.0 - BETA2.powi(*t);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    let it = p.values_mut().zip(g.values()).zip(m.values_mut()).zip(v.values_mut());
                    for (((p, &g), m), v) in it {
                        *m = BETA1 * *m + (1.0 - BETA1) * g;
                        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                        let mh = *m / c1;
                        let vh = *v / c2;
                        *p -= lr * mh / (vh.sqrt() + EPSILON);
                    }
                }
            }
        }
    }
}

pub(crate) fn global_norm(grads: &[Dense]) -> f64 {
    grads.iter().flat_map(Dense::values).map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescale so the global L2 norm is at most `max_norm`. Returns the norm
/// before clipping.
pub fn clip_global_norm(grads: &mut [Dense], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.weight *= scale;
            g.bias *= scale;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    fn cfg(schedule: ScheduleKind, base_lr: f64, decay_rate: f64) -> TrainConfig {
        TrainConfig { schedule, base_lr, decay_rate, ..TrainConfig::default() }
    }

    #[test]
    fn per_epoch_examples() {
        let c = cfg(ScheduleKind::PerEpoch, 0.001, 0.05);
        assert_eq!(lr_at(&c, 0), 0.001);
        assert!((lr_at(&c, 20) - 0.0005).abs() < 1e-15);
    }

    #[test]
    fn warmup_holds_base_rate() {
        let c = TrainConfig {
            warmup_iterations: 5000,
            decay_step: 500,
            ..cfg(ScheduleKind::PerIterationAfterWarmup, 0.002, 0.05)
        };
        assert_eq!(lr_at(&c, 0), 0.002);
        assert_eq!(lr_at(&c, 4999), 0.002);
        assert_eq!(lr_at(&c, 5000), 0.002);
        // 500 iterations past warmup is one decay step.
        assert!((lr_at(&c, 5500) - 0.002 / 1.05).abs() < 1e-15);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Dense { weight: array![[3.0, 0.0]], bias: Array1::from(vec![4.0, 0.0]) }];
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!(global_norm(&g) <= 1.0 + 1e-12);
        let mut small = g.clone();
        clip_global_norm(&mut small, 10.0);
        assert_eq!(small, g);
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut p = vec![Dense { weight: array![[1.0]], bias: Array1::from(vec![1.0]) }];
        let g = vec![Dense { weight: array![[2.0]], bias: Array1::from(vec![-1.0]) }];
        Optimizer::new(OptimizerKind::Sgd, &p).step(&mut p, &g, 0.5);
        assert_eq!(p[0].weight[(0, 0)], 0.0);
        assert_eq!(p[0].bias[0], 1.5);
    }

    #[test]
    fn adam_first_step_has_lr_magnitude() {
        let mut p = vec![Dense { weight: array![[0.0]], bias: Array1::from(vec![0.0]) }];
        let g = vec![Dense { weight: array![[0.3]], bias: Array1::from(vec![-7.0]) }];
        Optimizer::new(OptimizerKind::Adam, &p).step(&mut p, &g, 0.01);
        assert!((p[0].weight[(0, 0)] + 0.01).abs() < 1e-9);
        assert!((p[0].bias[0] - 0.01).abs() < 1e-9);
    }
}
