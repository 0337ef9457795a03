//! KL-penalized clipped PPO on the Euler–Maruyama transition kernel.
//!
//! Transitions are `N(x_k + f(t_k, x_k) dt, sigma^2(t_k) dt I)`. The per-step
//! advantage is `(R - mean R) - alpha |u_old(t_k, x_k)|^2 dt / (2 sigma^2(t_k))`,
//! where `u_old` is the trainable residual under the behaviour parameters.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{adam_step, AdamState, Direction, ParamVector, Tape};
use crate::sde::{DriftStack, LoadedResidual, Residual, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    #[serde(default = "default_eps")]
    pub eps_clip: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_inner")]
    pub inner_steps: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
}

fn default_eps() -> f64 {
    0.1
}
fn default_batch() -> usize {
    128
}
fn default_inner() -> usize {
    4
}
fn default_lr() -> f64 {
    1e-3
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            eps_clip: default_eps(),
            batch_size: default_batch(),
            inner_steps: default_inner(),
            learning_rate: default_lr(),
        }
    }
}

/// Trajectories collected under the behaviour parameters, with their rewards.
#[derive(Clone, Debug)]
pub struct PpoBatch {
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    /// Parameters of the trainable (last) residual that generated the batch.
    pub behaviour: ParamVector,
}

#[derive(Clone, Debug)]
pub struct PpoStep {
    pub surrogate: f64,
    pub gradient: ParamVector,
    /// Fraction of (path, step) terms whose gradient was clipped to zero.
    pub clip_fraction: f64,
    pub mean_ratio: f64,
}

struct PathTerms {
    surrogate: f64,
    grad: Vec<f64>,
    clipped: usize,
    ratio_sum: f64,
}

/// Clipped surrogate `mean_i sum_k min(rho A, clip(rho) A)` and its gradient
/// with respect to the last residual of `stack`.
pub fn ppo_gradient(stack: &DriftStack, batch: &PpoBatch, eps_clip: f64, alpha_kl: f64) -> Result<PpoStep> {
    let n = batch.trajectories.len();
    if n == 0 || batch.rewards.len() != n {
        return Err(Error::Shape("batch needs one reward per trajectory".into()));
    }
    let current = stack
        .residuals()
        .last()
        .ok_or_else(|| Error::Config("PPO needs a trainable residual".into()))?;
    current.params().require_same_layout(&batch.behaviour)?;
    let mut old = current.clone();
    old.set_params(batch.behaviour.clone())?;
    let rest = stack.previous();
    let mean_r = batch.rewards.iter().sum::<f64>() / n as f64;
    let sch = *stack.schedule();
    let d = stack.dim();
    let dt = sch.dt();

    let per_path: Vec<PathTerms> = batch
        .trajectories
        .par_iter()
        .zip(&batch.rewards)
        .map(|(tr, &reward)| {
            if tr.n_states() != sch.n_steps + 1 {
                return Err(Error::Shape("PPO needs fully recorded trajectories".into()));
            }
            let mut tape = Tape::new();
            let net = LoadedResidual::load(&mut tape, current, true);
            let mut acc = None;
            let (mut clipped, mut ratio_sum) = (0, 0.0);
            let mut surrogate = 0.0;
            for k in 0..sch.n_steps {
                let t = sch.time(k);
                let s2 = sch.sigma2(t);
                let x = tr.state(k);
                let xn = tr.state(k + 1);
                let f_rest = rest.drift_at_step(k, x);
                let u_old = old.eval(t, x);
                // Residual of the step after removing everything but the trainable drift.
                let c: Vec<f64> = (0..d).map(|i| xn[i] - x[i] - f_rest[i] * dt).collect();
                let old_sq: f64 = (0..d).map(|i| (c[i] - u_old[i] * dt).powi(2)).sum();
                let adv = (reward - mean_r) - alpha_kl * u_old.iter().map(|v| v * v).sum::<f64>() * dt / (2.0 * s2);
                let xv = tape.constant(x.to_vec());
                let u = net.forward(&mut tape, t, xv);
                let cv = tape.constant(c);
                let us = tape.scale(u, dt);
                let e = tape.sub(cv, us);
                let sq = tape.sum_sq(e);
                let lr = tape.scale(sq, -1.0 / (2.0 * s2 * dt));
                let shift = tape.constant(vec![old_sq / (2.0 * s2 * dt)]);
                let lr = tape.add(lr, shift);
                let ratio = tape.exp(lr);
                let rho = tape.scalar(ratio);
                if !rho.is_finite() {
                    return Err(Error::Numeric { node: ratio.index(), op: "ratio" });
                }
                ratio_sum += rho;
                let inactive = (adv >= 0.0 && rho > 1.0 + eps_clip) || (adv < 0.0 && rho < 1.0 - eps_clip);
                if inactive {
                    clipped += 1;
                    surrogate += rho.clamp(1.0 - eps_clip, 1.0 + eps_clip) * adv;
                    continue;
                }
                surrogate += rho * adv;
                let term = tape.scale(ratio, adv);
                acc = Some(match acc {
                    Some(a) => tape.add(a, term),
                    None => term,
                });
            }
            let mut grad = vec![0.0; current.params().len()];
            if let Some(a) = acc {
                let g = tape.backward(a);
                let mut off = 0;
                for v in net.leaves() {
                    let gv = g.of(v);
                    grad[off..off + gv.len()].copy_from_slice(&gv);
                    off += gv.len();
                }
            }
            Ok(PathTerms {
                surrogate,
                grad,
                clipped,
                ratio_sum,
            })
        })
        .collect::<Result<_>>()?;

    let mut gradient = current.params().zeros_like();
    let (mut sur, mut clipped, mut rsum) = (0.0, 0, 0.0);
    for p in &per_path {
        sur += p.surrogate;
        clipped += p.clipped;
        rsum += p.ratio_sum;
        for (g, v) in gradient.values_mut().iter_mut().zip(&p.grad) {
            *g += v;
        }
    }
    let inv = 1.0 / n as f64;
    gradient.scale(inv);
    let terms = (n * sch.n_steps) as f64;
    Ok(PpoStep {
        surrogate: sur * inv,
        gradient,
        clip_fraction: clipped as f64 / terms,
        mean_ratio: rsum / terms,
    })
}

/// One Adam ascent step on the clipped surrogate.
pub fn ppo_update(
    stack: &mut DriftStack,
    batch: &PpoBatch,
    cfg: &PpoConfig,
    alpha_kl: f64,
    adam: &mut AdamState,
) -> Result<PpoStep> {
    let step = ppo_gradient(stack, batch, cfg.eps_clip, alpha_kl)?;
    let res: &mut Residual = stack.last_residual_mut().expect("checked by ppo_gradient");
    let mut p = res.params().clone();
    adam_step(&mut p, &step.gradient, adam, Direction::Ascent)?;
    res.set_params(p)?;
    Ok(step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::NoiseSchedule;
    use crate::sde::{self};

    fn setup() -> (DriftStack, PpoBatch) {
        let sch = NoiseSchedule::constant(1.0, 1.0, 10);
        let mut r = Residual::affine_zero(1);
        r.params_mut().values_mut().copy_from_slice(&[0.2, 0.1, -0.3]);
        let stack = DriftStack::ornstein_uhlenbeck(0.5, 1, sch).unwrap().with_residual(r).unwrap();
        let trajectories = sde::simulate(&stack, 16, 3).unwrap();
        let rewards = trajectories.iter().map(|t| t.terminal()[0]).collect();
        let behaviour = stack.residuals()[0].params().clone();
        (
            stack,
            PpoBatch {
                trajectories,
                rewards,
                behaviour,
            },
        )
    }

    #[test]
    fn unchanged_parameters_give_unit_ratios() {
        let (stack, batch) = setup();
        let s = ppo_gradient(&stack, &batch, 0.1, 0.05).unwrap();
        assert!((s.mean_ratio - 1.0).abs() < 1e-12);
        assert_eq!(s.clip_fraction, 0.0);
        // With rho = 1 no term is clipped, so eps has no effect on the gradient.
        let wide = ppo_gradient(&stack, &batch, 10.0, 0.05).unwrap();
        assert_eq!(s.gradient, wide.gradient);
    }

    #[test]
    fn gradient_matches_finite_differences_inside_the_trust_region() {
        let (stack, batch) = setup();
        let g = ppo_gradient(&stack, &batch, 1e9, 0.05).unwrap();
        for i in 0..3 {
            let h = 1e-6;
            let mut sp = stack.clone();
            sp.last_residual_mut().unwrap().params_mut().values_mut()[i] += h;
            let mut sm = stack.clone();
            sm.last_residual_mut().unwrap().params_mut().values_mut()[i] -= h;
            let fd = (ppo_gradient(&sp, &batch, 1e9, 0.05).unwrap().surrogate
                - ppo_gradient(&sm, &batch, 1e9, 0.05).unwrap().surrogate)
                / (2.0 * h);
            assert!((fd - g.gradient.values()[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} {}", g.gradient.values()[i]);
        }
    }

    #[test]
    fn clipped_terms_have_no_gradient() {
        let (mut stack, batch) = setup();
        // Large move: most ratios leave [0.9, 1.1].
        stack.last_residual_mut().unwrap().params_mut().values_mut()[1] += 3.0;
        let s = ppo_gradient(&stack, &batch, 1e-6, 0.0).unwrap();
        assert!(s.clip_fraction > 0.0);
        let all = ppo_gradient(&stack, &batch, 1e9, 0.0).unwrap();
        assert_ne!(s.gradient, all.gradient);
    }
}
