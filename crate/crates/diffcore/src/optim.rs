//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use crate::array::Array;
use crate::error::{shape_err, Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Clone, Debug)]
struct Moments<T> {
    m: Array<T>,
    v: Array<T>,
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, state: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter in `params`. Frozen entries are
    /// never touched; every trainable entry must have a gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Array<T>>) -> Result<()> {
        let names = params.trainable_names();
        for name in &names {
            let g = grads.get(name).ok_or_else(|| Error::MissingGradient(name.clone()))?;
            if g.shape() != params.get(name)?.shape() {
                return shape_err("adamw", format!("gradient for `{name}` has shape {:?}", g.shape()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one, eps) = (T::one(), T::of(c.eps));
        let step_size = T::of(c.lr / bc1);
        let bc2_sqrt = T::of(bc2.sqrt());
        let decay = T::of(1.0 - c.lr * c.weight_decay);
        for name in names {
            let g = &grads[&name];
            let p = params.get_mut(&name)?;
            let st = self
                .state
                .entry(name)
                .or_insert_with(|| Moments { m: Array::zeros(g.shape()), v: Array::zeros(g.shape()) });
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(st.m.data_mut().iter_mut().zip(st.v.data_mut().iter_mut()));
            for ((pv, &gv), (mv, vv)) in iter {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let denom = vv.sqrt() / bc2_sqrt + eps;
                *pv = *pv * decay - step_size * *mv / denom;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Array::scalar(v)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = one_param(1.5);
        let mut opt = AdamW::new(AdamWConfig { lr: 1e-2, ..Default::default() });
        let grads = BTreeMap::from([("w".to_string(), Array::scalar(0.0))]);
        opt.step(&mut p, &grads).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 1.5);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // m = 0.1 g, v = 0.001 g^2, mhat = g, vhat = g^2, decay then step
        let (p0, g, lr, wd, eps) = (0.8f64, 0.3f64, 0.01, 0.1, 1e-8);
        let expected = p0 * (1.0 - lr * wd) - lr * g / (g.abs() + eps);
        let mut p = one_param(p0);
        let mut opt = AdamW::new(AdamWConfig { lr, weight_decay: wd, eps, ..Default::default() });
        opt.step(&mut p, &BTreeMap::from([("w".to_string(), Array::scalar(g))])).unwrap();
        assert!((p.get("w").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = one_param(0.0);
        let mut opt = AdamW::<f64>::new(AdamWConfig::default());
        assert!(matches!(opt.step(&mut p, &BTreeMap::new()), Err(Error::MissingGradient(_))));
    }

    #[test]
    fn frozen_params_are_skipped() {
        let mut p = one_param(2.0);
        p.set_trainable("w", false).unwrap();
        let mut opt = AdamW::<f64>::new(AdamWConfig::default());
        opt.step(&mut p, &BTreeMap::new()).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 2.0);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = one_param(0.25);
            let mut opt = AdamW::new(AdamWConfig { lr: 1e-3, weight_decay: 0.01, ..Default::default() });
            for i in 0..50 {
                let g = Array::scalar((i as f64 * 0.37).sin());
                opt.step(&mut p, &BTreeMap::from([("w".to_string(), g)])).unwrap();
            }
            p.get("w").unwrap().item().to_bits()
        };
        assert_eq!(run(), run());
    }
}
