//! Adam with two learning-rate groups and a linear warmup schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// One bias-corrected update. Parameters without an entry in `grads`
    /// are left alone; `lr_for` maps a parameter name to its rate.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr_for: impl Fn(&str) -> f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = store.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Invalid(format!(
                    "gradient for {name} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let lr = lr_for(name);
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            for (((pi, mi), vi), gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub lr_start: f64,
    pub lr_base: f64,
    /// Peak rate of the expert and mixture group.
    pub lr_fast: f64,
    pub warmup_epochs: f64,
}

impl LrSchedule {
    /// Base-group rate at a possibly fractional epoch: linear from
    /// `lr_start` to `lr_base` during warmup, constant afterwards.
    pub fn base(&self, epoch: f64) -> f64 {
        if self.warmup_epochs <= 0.0 || epoch >= self.warmup_epochs {
            return self.lr_base;
        }
        let f = epoch.max(0.0) / self.warmup_epochs;
        self.lr_start + (self.lr_base - self.lr_start) * f
    }

    /// Fast-group rate: the base rate scaled by `lr_fast / lr_base`.
    pub fn fast(&self, epoch: f64) -> f64 {
        self.base(epoch) * self.lr_fast / self.lr_base
    }

    pub fn rate(&self, epoch: f64, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Base => self.base(epoch),
            ParamGroup::Fast => self.fast(epoch),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Weights standing in for pretrained ones.
    Base,
    /// Randomly initialized experts, mixture and classifier.
    Fast,
}

pub fn param_group(name: &str) -> ParamGroup {
    if name.contains(".expert.") || name.starts_with("fm.") || name.starts_with("cls.") {
        ParamGroup::Fast
    } else {
        ParamGroup::Base
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_scale() -> LrSchedule {
        LrSchedule {
            lr_start: 1e-6,
            lr_base: 1e-5,
            lr_fast: 5e-5,
            warmup_epochs: 5.0,
        }
    }

    #[test]
    fn warmup_endpoints() {
        let s = full_scale();
        assert!((s.base(0.0) - 1e-6).abs() < 1e-18);
        assert!((s.base(5.0) - 1e-5).abs() < 1e-18);
        assert!((s.base(2.5) - 5.5e-6).abs() < 1e-18);
        assert!((s.base(40.0) - 1e-5).abs() < 1e-18);
        assert!((s.fast(5.0) - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn groups() {
        assert_eq!(param_group("visual.blocks.0.attn.qkv.expert.I.up"), ParamGroup::Fast);
        assert_eq!(param_group("fm.lift.w"), ParamGroup::Fast);
        assert_eq!(param_group("cls.w"), ParamGroup::Fast);
        assert_eq!(param_group("visual.blocks.0.attn.qkv.w"), ParamGroup::Base);
        assert_eq!(param_group("tok.T.embed"), ParamGroup::Base);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::new();
        store.init_normal(3, "p", &[4], 1.0);
        let before = store.get("p").unwrap().clone();
        let mut adam = Adam::default();
        let grads = BTreeMap::from([("p".to_string(), Tensor::zeros(&[4]))]);
        for _ in 0..5 {
            adam.step(&mut store, &grads, |_| 1e-3).unwrap();
        }
        assert!(store.get("p").unwrap().bit_eq(&before));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut store = ParamStore::new();
        store.init_const("p", &[4], 0.0);
        let grads = BTreeMap::from([("p".to_string(), Tensor::zeros(&[3]))]);
        assert!(Adam::default().step(&mut store, &grads, |_| 1e-3).is_err());
    }
}
