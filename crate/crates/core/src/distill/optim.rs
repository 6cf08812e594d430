use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::encoder::tape::Mat;
use crate::encoder::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    /// Peak learning rate, reached after warmup.
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            min_lr: 1e-5,
            warmup_steps: 100,
            weight_decay: 0.04,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 3.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr >= 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return bad("learning rates must satisfy 0 <= min_lr <= lr");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("eps must be positive, weight decay and clip non-negative");
        }
        Ok(())
    }

    /// Linear warmup then cosine decay to `min_lr` at `total_steps`.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (PI * progress).cos())
    }
}

/// Cosine ramp of the EMA momentum from `base` to `final_` over `total_steps`.
pub fn momentum_at(base: f64, final_: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return base;
    }
    let progress = (step as f64 / total_steps as f64).min(1.0);
    final_ - (final_ - base) * 0.5 * (1.0 + (PI * progress).cos())
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Mat], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-12);
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

/// Decoupled-weight-decay Adam. Decay applies only to parameters flagged
/// with `decay`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub step: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.params.iter().map(|p| Mat::zeros(p.value.dim())).collect();
        AdamW {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &[Mat], lr: f64, cfg: &OptimConfig) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::shape(
                format!("{} gradient tensors", params.len()),
                grads.len().to_string(),
            ));
        }
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (i, p) in params.params.iter_mut().enumerate() {
            let g = &grads[i];
            if g.dim() != p.value.dim() {
                return Err(Error::shape(format!("{} {:?}", p.name, p.value.dim()), format!("{:?}", g.dim())));
            }
            let decay = if p.decay { cfg.weight_decay } else { 0.0 };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
                    *w -= lr * (update + decay * *w);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Param;

    fn store(values: &[f64], decay: bool) -> ParamStore {
        ParamStore {
            params: vec![Param {
                name: "w".into(),
                value: Mat::from_shape_vec((1, values.len()), values.to_vec()).unwrap(),
                decay,
            }],
        }
    }

    #[test]
    fn schedule_shape() {
        let cfg = OptimConfig {
            warmup_steps: 10,
            ..Default::default()
        };
        assert!((cfg.lr_at(9, 100) - 1e-3).abs() < 1e-15);
        assert!((cfg.lr_at(10, 100) - 1e-3).abs() < 1e-15);
        assert!((cfg.lr_at(100, 100) - 1e-5).abs() < 1e-15);
        assert!(cfg.lr_at(50, 100) < cfg.lr_at(20, 100));
        assert_eq!(momentum_at(0.996, 0.996, 5, 10), 0.996);
        assert!((momentum_at(0.996, 1.0, 10, 10) - 1.0).abs() < 1e-15);
        assert!((momentum_at(0.996, 1.0, 0, 10) - 0.996).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = store(&[1.0, -1.0], true);
        let mut opt = AdamW::new(&p);
        let g = vec![Mat::from_shape_vec((1, 2), vec![0.5, -2.0]).unwrap()];
        opt.update(&mut p, &g, 0.1, &cfg).unwrap();
        assert!((p.params[0].value[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p.params[0].value[[0, 1]] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_grad_without_decay_is_noop() {
        let cfg = OptimConfig::default();
        let mut p = store(&[0.3, 0.7], false);
        let before = p.clone();
        let mut opt = AdamW::new(&p);
        opt.update(&mut p, &[Mat::zeros((1, 2))], 0.1, &cfg).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn decay_shrinks_flagged_params() {
        let cfg = OptimConfig {
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut p = store(&[2.0], true);
        let mut opt = AdamW::new(&p);
        opt.update(&mut p, &[Mat::zeros((1, 1))], 0.1, &cfg).unwrap();
        assert!((p.params[0].value[[0, 0]] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Mat::from_elem((1, 2), 3.0), Mat::from_elem((1, 2), 4.0)];
        let n = clip_grad_norm(&mut g, 1.0);
        assert!((n - 50f64.sqrt()).abs() < 1e-12);
        let after: f64 = g.iter().flat_map(|m| m.iter()).map(|v| v * v).sum();
        assert!((after.sqrt() - 1.0).abs() < 1e-9);
    }
}
