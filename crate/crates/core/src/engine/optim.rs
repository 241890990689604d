//! AdamW with decoupled weight decay, and the warmup + cosine schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vit::{Model, ParamId};

pub const ADAM_EPS: f64 = 1e-8;

/// Linear ramp from 0 to `lr_peak` over `warmup_steps`, then cosine decay
/// to 0 at `total_steps`. Steps past the end return 0.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, lr_peak: f64) -> f64 {
    if step >= total_steps {
        return 0.0;
    }
    if step < warmup_steps {
        return lr_peak * step as f64 / warmup_steps as f64;
    }
    let decay = (total_steps - warmup_steps) as f64;
    let progress = (step - warmup_steps) as f64 / decay;
    lr_peak * 0.5 * (1.0 + (PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moment buffers of one tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One AdamW update of `param` in place. `t` is the 1-based step used for
/// bias correction.
pub fn adamw_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    moments: &mut Moments,
    t: u64,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if param.len() != grad.len() || moments.m.len() != param.len() || moments.v.len() != param.len() {
        return Err(Error::Shape(format!(
            "optimizer buffers: param {}, grad {}, moments {}/{}",
            param.len(),
            grad.len(),
            moments.m.len(),
            moments.v.len()
        )));
    }
    if t == 0 {
        return Err(Error::InvalidArgument("optimizer step count starts at 1".into()));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let decay = 1.0 - lr * cfg.weight_decay;
    for i in 0..param.len() {
        let g = grad[i].as_f64();
        let m = cfg.beta1 * moments.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * moments.v[i] + (1.0 - cfg.beta2) * g * g;
        moments.m[i] = m;
        moments.v[i] = v;
        let step = lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
        param[i] = T::of(param[i].as_f64() * decay - step);
    }
    Ok(())
}

/// AdamW state keyed by parameter. Frozen tensors never get an entry.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    state: BTreeMap<ParamId, Moments>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, id: ParamId) -> Option<&Moments> {
        self.state.get(&id)
    }

    /// Applies one update to every parameter in `grads`. Entries whose
    /// tensor does not require gradients are skipped.
    pub fn step<T: Scalar>(&mut self, model: &mut Model<T>, grads: &[(ParamId, Vec<T>)], lr: f64) -> Result<()> {
        self.t += 1;
        for (id, g) in grads {
            let Some(p) = model.param_mut(*id) else {
                return Err(Error::InvalidArgument(format!("no parameter {id:?}")));
            };
            if !p.requires_grad() {
                continue;
            }
            let n = p.len();
            let moments = self.state.entry(*id).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            adamw_update(p.data_mut(), g, moments, self.t, lr, &self.config)?;
        }
        Ok(())
    }

    /// Keeps the moments of the surviving neurons of adapter `slot`, whose
    /// pre-prune layout was `hidden × input_dim`. `keep` must be sorted.
    pub fn prune_adapter(&mut self, slot: usize, hidden: usize, input_dim: usize, keep: &[usize]) {
        if keep.is_empty() {
            self.state.remove(&ParamId::AdapterDown(slot));
            self.state.remove(&ParamId::AdapterUp(slot));
            return;
        }
        if let Some(s) = self.state.get_mut(&ParamId::AdapterDown(slot)) {
            let rows = |buf: &[f64]| {
                keep.iter()
                    .flat_map(|&j| buf[j * input_dim..(j + 1) * input_dim].iter().copied())
                    .collect::<Vec<_>>()
            };
            *s = Moments {
                m: rows(&s.m),
                v: rows(&s.v),
            };
        }
        if let Some(s) = self.state.get_mut(&ParamId::AdapterUp(slot)) {
            let cols = |buf: &[f64]| {
                (0..input_dim)
                    .flat_map(|l| keep.iter().map(move |&j| buf[l * hidden + j]))
                    .collect::<Vec<_>>()
            };
            *s = Moments {
                m: cols(&s.m),
                v: cols(&s.v),
            };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(wd: f64) -> AdamWConfig {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    fn fresh(n: usize) -> Moments {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    #[test]
    fn schedule_landmarks() {
        assert_eq!(lr_at(0, 100, 10, 1.0), 0.0);
        assert_eq!(lr_at(10, 100, 10, 1.0), 1.0);
        assert!((lr_at(55, 100, 10, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(lr_at(100, 100, 10, 1.0), 0.0);
        assert!((lr_at(5, 100, 10, 2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut p = vec![0.5f64, -2.0];
        let mut m = fresh(2);
        adamw_update(&mut p, &[0.0, 0.0], &mut m, 1, 0.1, &cfg(0.0)).unwrap();
        assert_eq!(p, vec![0.5, -2.0]);
    }

    #[test]
    fn single_step_hand_calculation() {
        // m = 0.05, v = 0.00025, m̂ = 0.5, v̂ = 0.25
        // p = 1·(1 − 0.1·0.01) − 0.1·0.5/(0.5 + 1e-8)
        let mut p = vec![1.0f64];
        let mut m = fresh(1);
        adamw_update(&mut p, &[0.5], &mut m, 1, 0.1, &cfg(0.01)).unwrap();
        assert!((p[0] - 0.899_000_001_999_999_96).abs() < 1e-12);
        assert!((m.m[0] - 0.05).abs() < 1e-15);
        assert!((m.v[0] - 0.00025).abs() < 1e-15);
    }

    #[test]
    fn decay_only_shrinks_by_factor() {
        let mut p = vec![3.0f64, -1.5];
        let mut m = fresh(2);
        adamw_update(&mut p, &[0.0, 0.0], &mut m, 1, 0.01, &cfg(0.5)).unwrap();
        assert_eq!(p, vec![3.0 * (1.0 - 0.005), -1.5 * (1.0 - 0.005)]);
    }

    #[test]
    fn prune_reindexes_moments() {
        let mut opt = AdamW::new(cfg(0.0));
        // hidden 3, input 2
        opt.state.insert(
            ParamId::AdapterDown(0),
            Moments {
                m: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
                v: vec![0.0; 6],
            },
        );
        opt.state.insert(
            ParamId::AdapterUp(0),
            Moments {
                m: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
                v: vec![0.0; 6],
            },
        );
        opt.prune_adapter(0, 3, 2, &[0, 2]);
        assert_eq!(opt.moments(ParamId::AdapterDown(0)).unwrap().m, vec![0.0, 1.0, 4.0, 5.0]);
        assert_eq!(opt.moments(ParamId::AdapterUp(0)).unwrap().m, vec![0.0, 2.0, 3.0, 5.0]);
        opt.prune_adapter(0, 2, 2, &[]);
        assert!(opt.moments(ParamId::AdapterDown(0)).is_none());
    }
}
