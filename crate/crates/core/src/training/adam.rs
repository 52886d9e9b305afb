//! Adam with decoupled weight decay.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter tensors, iterated in name order.
pub type ParamSet = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-6,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr > 0.0) || !unit(self.beta1) || !unit(self.beta2) || self.weight_decay < 0.0 || !(self.eps > 0.0) {
            return Err(Error::invalid(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub t: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
    no_decay: BTreeSet<String>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: AdamState {
                m: ParamSet::new(),
                v: ParamSet::new(),
                t: 0,
            },
            no_decay: BTreeSet::new(),
        }
    }

    /// Excludes a parameter from weight decay.
    pub fn exclude_from_decay(&mut self, name: impl Into<String>) {
        self.no_decay.insert(name.into());
    }

    /// One update of every parameter in `params`. Parameters without an entry
    /// in `grads` are treated as having zero gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        let c = self.config;
        self.state.t += 1;
        let t = self.state.t as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let m = self
                .state
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .state
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let decay = if self.no_decay.contains(name) { 0.0 } else { c.lr * c.weight_decay };
            let g = grads.get(name);
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                let mi = c.beta1 * m.data()[i] + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v.data()[i] + (1.0 - c.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let pv = &mut p.data_mut()[i];
                *pv -= decay * *pv;
                *pv -= c.lr * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: f64, g: f64) -> (ParamSet, ParamSet) {
        let mut ps = ParamSet::new();
        ps.insert("w".into(), Tensor::scalar(p));
        let mut gs = ParamSet::new();
        gs.insert("w".into(), Tensor::scalar(g));
        (ps, gs)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut ps, gs) = single(0.5, 1.0);
        let mut adam = Adam::new(AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        adam.step(&mut ps, &gs).unwrap();
        let delta = ps["w"].item().unwrap() - 0.5;
        assert!((delta + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let (mut ps, gs) = single(0.5, 0.0);
        let mut adam = Adam::new(AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..5 {
            adam.step(&mut ps, &gs).unwrap();
        }
        assert_eq!(ps["w"].item().unwrap(), 0.5);
    }

    #[test]
    fn decay_is_decoupled_and_skips_excluded() {
        let (mut ps, gs) = single(2.0, 0.0);
        ps.insert("mu".into(), Tensor::scalar(2.0));
        let mut adam = Adam::new(AdamConfig {
            weight_decay: 0.5,
            ..Default::default()
        });
        adam.exclude_from_decay("mu");
        adam.step(&mut ps, &gs).unwrap();
        assert_eq!(ps["w"].item().unwrap(), 2.0 - 1e-3 * 0.5 * 2.0);
        assert_eq!(ps["mu"].item().unwrap(), 2.0);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let (mut ps, gs) = single(1.0, f64::NAN);
        let err = Adam::new(AdamConfig::default()).step(&mut ps, &gs).unwrap_err();
        assert!(err.to_string().contains("`w`"));
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let (mut ps, _) = single(1.0, 0.0);
            let mut adam = Adam::new(AdamConfig::default());
            for k in 0..50 {
                let (_, gs) = single(0.0, ((k as f64) * 0.37).sin());
                adam.step(&mut ps, &gs).unwrap();
            }
            ps["w"].item().unwrap().to_bits()
        };
        assert_eq!(run(), run());
    }
}
