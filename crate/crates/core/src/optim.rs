//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{GradMap, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer state: first/second moment buffers per parameter plus the step
/// count used for bias correction.
#[derive(Debug, Default)]
pub struct AdamW {
    moments: BTreeMap<String, (Tensor, Tensor)>,
    step_count: u64,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update. `lr` overrides the config learning rate so schedules
    /// stay outside the optimizer. Updates are skipped for parameters without
    /// gradients; a non-finite gradient aborts with the parameter name.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &GradMap,
        cfg: &AdamWConfig,
        lr: f64,
    ) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let Some(g) = grads.get(&p.name) else {
                continue;
            };
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {:?}", p.name)));
            }
            if g.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} vs parameter {:?} for {:?}",
                    g.shape(),
                    p.value.shape(),
                    p.name
                )));
            }
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let pv = p.value.data_mut();
            for i in 0..pv.len() {
                let gi = g.data()[i];
                let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * gi;
                let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                pv[i] -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * pv[i]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_zero_decay_leaves_params_unchanged() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::from_vec(&[2], vec![1.5, -0.25]).unwrap())
            .unwrap();
        let mut grads = GradMap::new();
        grads.insert("w".into(), Tensor::zeros(&[2]));
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new();
        opt.step(&mut ps, &grads, &cfg, cfg.lr).unwrap();
        assert_eq!(ps.get("w").unwrap().value.data(), &[1.5, -0.25]);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // p=1.0, g=0.5, lr=0.1, betas=(0.9, 0.999), eps=1e-8, wd=0.1, t=1
        let mut ps = ParamSet::new();
        ps.insert("p", Tensor::scalar(1.0)).unwrap();
        let mut grads = GradMap::new();
        grads.insert("p".into(), Tensor::scalar(0.5));
        let cfg = AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        };
        let mut opt = AdamW::new();
        opt.step(&mut ps, &grads, &cfg, cfg.lr).unwrap();

        // Hand calculation, written out factor by factor.
        let m = 0.1_f64 * 0.5;
        let v = 0.001_f64 * 0.25;
        let mhat = m / (1.0 - 0.9);
        let vhat = v / (1.0 - 0.999);
        let expect = 1.0 - 0.1 * (mhat / (vhat.sqrt() + 1e-8) + 0.1 * 1.0);
        let got = ps.get("p").unwrap().value.item();
        assert!((got - expect).abs() < 1e-12, "got {got}, expect {expect}");
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut ps = ParamSet::new();
        ps.insert("layer.w", Tensor::scalar(1.0)).unwrap();
        let mut grads = GradMap::new();
        grads.insert("layer.w".into(), Tensor::scalar(f64::NAN));
        let mut opt = AdamW::new();
        let err = opt
            .step(&mut ps, &grads, &AdamWConfig::default(), 1e-3)
            .unwrap_err();
        assert!(err.to_string().contains("layer.w"));
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut ps = ParamSet::new();
            ps.insert("w", Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap())
                .unwrap();
            let mut opt = AdamW::new();
            let cfg = AdamWConfig::default();
            for step in 0..10 {
                let mut grads = GradMap::new();
                let g = (step as f64 + 1.0) * 0.01;
                grads.insert("w".into(), Tensor::from_vec(&[3], vec![g, -g, g * 2.0]).unwrap());
                opt.step(&mut ps, &grads, &cfg, cfg.lr).unwrap();
            }
            ps.get("w").unwrap().value.data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
