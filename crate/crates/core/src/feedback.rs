//! Subject-fidelity feedback: a truncated rollout to a one-step `x̂0`, scored
//! by the frozen extension detector.

use diffcore::{softplus, Array, CounterRng, Graph, ParamStore, Var};
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::fgdetect::{detector_forward, DetectorBatch};
use crate::genmodel::{euler, guided_velocity, velocity, CondBatch, ModelConfig};
use crate::image::Mask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeedbackConfig {
    /// Largest rollout stop step `t′`.
    pub t1: usize,
    pub lambda: f64,
    pub skip_threshold: f64,
    /// Sampler steps `T′` of the rollout.
    pub t_prime: usize,
    /// Guidance used by the gradient-free prefix.
    pub cfg_scale: f64,
    /// Batch rows that receive a rollout.
    pub reward_batch: usize,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        Self { t1: 10, lambda: 0.0005, skip_threshold: 0.3, t_prime: 28, cfg_scale: 1.0, reward_batch: 2 }
    }
}

impl FeedbackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t1 == 0 || self.t1 > self.t_prime {
            return Err(Error::Config(format!("need 1 <= t1 <= T' (t1 {}, T' {})", self.t1, self.t_prime)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be a finite value >= 0, got {}", self.lambda)));
        }
        if self.reward_batch == 0 {
            return Err(Error::Config("reward_batch must be positive".into()));
        }
        Ok(())
    }

    pub fn enabled(&self) -> bool {
        self.lambda > 0.0
    }
}

/// `t′ ~ U{1..t1}`.
pub fn draw_stop_step(rng: &mut CounterRng, t1: usize) -> usize {
    1 + rng.below(t1)
}

/// Result of a rollout: differentiable `x̂0` and the stop step.
pub struct Rollout {
    pub x0: Var,
    pub stop_step: usize,
    /// `z_{t′}` reached by the gradient-free prefix.
    pub z_stop: Array<f32>,
}

/// Gradient-free Euler prefix from `T′` to `t′`, then one tracked step
/// `x̂0 = z_{t′} − (t′/T′) v̂(z_{t′})`, clamped.
pub fn refl_rollout(
    g: &mut Graph<f32>,
    ps: &ParamStore<f32>,
    cfg: &ModelConfig,
    cb: &CondBatch,
    glyph_table: &Array<f32>,
    glyph_feats: Option<Var>,
    fc: &FeedbackConfig,
    rng: &mut CounterRng,
) -> Result<Rollout> {
    fc.validate()?;
    let stop = draw_stop_step(rng, fc.t1);
    let shape = [cb.batch(), cfg.image_size, cfg.image_size, cfg.channels];
    let noise = Array::from_fn(&shape, |_| rng.normal() as f32);
    let z_stop = euler(noise, fc.t_prime, fc.t_prime, stop, |z, t| {
        guided_velocity(ps, cfg, z, &cb.with_time(t), glyph_table, fc.cfg_scale)
    })?;
    let x0 = one_step(g, ps, cfg, &z_stop, stop, fc.t_prime, cb, glyph_feats)?;
    Ok(Rollout { x0, stop_step: stop, z_stop })
}

/// Tracked one-step prediction of `x0` from `z` at `t = stop / steps`.
#[allow(clippy::too_many_arguments)]
pub fn one_step(
    g: &mut Graph<f32>,
    ps: &ParamStore<f32>,
    cfg: &ModelConfig,
    z: &Array<f32>,
    stop: usize,
    steps: usize,
    cb: &CondBatch,
    glyph_feats: Option<Var>,
) -> Result<Var> {
    let t = stop as f64 / steps as f64;
    let zv = g.constant(z.clone())?;
    let v = velocity(g, ps, cfg, zv, &cb.with_time(t), glyph_feats)?;
    let step = g.scale(v, -(t as f32))?;
    let x0 = g.add(zv, step)?;
    Ok(g.clamp(x0, -1.0, 1.0)?)
}

/// Scalar form of the reward: `−log σ(1 − S)` when `S ≥ threshold`, else 0.
pub fn reward_value(score: f64, threshold: f64) -> f64 {
    if score >= threshold {
        softplus(score - 1.0)
    } else {
        0.0
    }
}

/// Reward loss averaged over the batch, with per-row detector scores.
/// Skipped rows contribute an exact zero and no gradient.
pub fn reward_loss(
    g: &mut Graph<f32>,
    detector: &ParamStore<f32>,
    x0: Var,
    subject_masks: &[&Mask],
    threshold: f64,
) -> Result<(Var, Vec<f64>)> {
    if detector.trainable_names().iter().any(|n| n.starts_with("detector.")) {
        return input_err("detector must be frozen for feedback");
    }
    let batch = DetectorBatch::new(subject_masks)?;
    let out = detector_forward(g, detector, x0, &batch)?;
    let s = g.sigmoid(out.logit)?;
    let scores: Vec<f64> = g.value(s).data().iter().map(|&v| v as f64).collect();
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Runtime("non-finite detector score".into()));
    }
    let n = scores.len();
    let keep = Array::from_vec(&[n, 1], scores.iter().map(|&v| (v >= threshold) as u8 as f32 / n as f32).collect())?;
    let per = g.affine(s, 1.0, -1.0)?;
    let per = g.softplus(per)?;
    let w = g.constant(keep)?;
    let weighted = g.mul(per, w)?;
    Ok((g.sum_all(weighted)?, scores))
}

/// `L_denoise + λ L_reward`; with no reward term or `λ = 0` the denoise node is returned unchanged.
pub fn total_loss(g: &mut Graph<f32>, denoise: Var, reward: Option<Var>, lambda: f64) -> Result<Var> {
    match reward {
        Some(r) if lambda > 0.0 => {
            let r = g.scale(r, lambda as f32)?;
            Ok(g.add(denoise, r)?)
        }
        _ => Ok(denoise),
    }
}
