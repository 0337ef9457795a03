//! Drift updates: direct backpropagation through the discretized SDE, plus
//! the guidance sampler.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffusion::PretrainedModel;
use crate::error::{Error, Result};
use crate::grad::{adam_step, Activation, AdamHyper, AdamState, Direction, MlpSpec};
use crate::rng;
use crate::sde::{self, DriftStack, Estimate, Guidance, Residual, SampleSet, TerminalFn};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerConfig {
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default = "default_opt_steps")]
    pub n_opt_steps: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Cosine decay of the step size down to this fraction of `learning_rate`.
    #[serde(default = "default_final_lr")]
    pub final_lr_fraction: f64,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_emb")]
    pub time_embedding_dim: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_paths() -> usize {
    64
}
fn default_opt_steps() -> usize {
    100
}
fn default_lr() -> f64 {
    1e-3
}
fn default_final_lr() -> f64 {
    1.0
}
fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_activation() -> Activation {
    Activation::Tanh
}
fn default_emb() -> usize {
    8
}
fn default_log_every() -> usize {
    1
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            n_paths: default_paths(),
            n_opt_steps: default_opt_steps(),
            learning_rate: default_lr(),
            final_lr_fraction: default_final_lr(),
            hidden: default_hidden(),
            activation: default_activation(),
            time_embedding_dim: default_emb(),
            log_every: default_log_every(),
            seed: 0,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_paths == 0 || self.log_every == 0 {
            return Err(Error::Config("planner counts must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("planner learning rate must be positive".into()));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::Config("final_lr_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn step_size(&self, step: usize) -> f64 {
        let f = self.final_lr_fraction;
        let u = step as f64 / self.n_opt_steps.max(1) as f64;
        self.learning_rate * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * u).cos()))
    }

    pub fn residual_spec(&self, d: usize) -> MlpSpec {
        MlpSpec::drift(d, &self.hidden, self.activation, self.time_embedding_dim)
    }
}

/// Maximize `E[terminal(x_T)] - alpha KL(. || base) - beta KL(. || reference)`
/// over one new residual appended to `reference`.
#[derive(Clone)]
pub struct ControlProblem {
    pub terminal: Arc<dyn TerminalFn>,
    pub alpha: f64,
    pub beta: f64,
    pub reference: DriftStack,
    /// Allows `alpha + beta = 0`.
    pub greedy: bool,
}

impl ControlProblem {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("KL weights must be nonnegative".into()));
        }
        if self.alpha + self.beta <= 0.0 && !self.greedy {
            return Err(Error::Config("alpha + beta must be positive outside greedy mode".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRow {
    pub step: usize,
    pub b: f64,
    pub a1: f64,
    pub a2: f64,
    pub objective: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingCurve {
    pub rows: Vec<CurveRow>,
}

impl TrainingCurve {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        w.write_record(["step", "B", "A1", "A2", "objective"])?;
        for r in &self.rows {
            w.write_record([
                r.step.to_string(),
                r.b.to_string(),
                r.a1.to_string(),
                r.a2.to_string(),
                r.objective.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Trailing moving average of the objective.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let v: Vec<f64> = self.rows.iter().map(|r| r.objective).collect();
        (0..v.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(window);
                v[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
            })
            .collect()
    }
}

/// Result of [`optimize_control`]. On a numeric failure `stack` holds the
/// last finite parameters and `failure` the error.
#[derive(Debug)]
pub struct PlanOutcome {
    pub stack: DriftStack,
    pub curve: TrainingCurve,
    pub failure: Option<Error>,
}

impl PlanOutcome {
    pub fn into_result(self) -> Result<(DriftStack, TrainingCurve)> {
        match self.failure {
            None => Ok((self.stack, self.curve)),
            Some(e) => Err(e),
        }
    }
}

pub fn optimize_control_with(problem: &ControlProblem, cfg: &PlannerConfig, residual: Residual) -> Result<PlanOutcome> {
    problem.validate()?;
    cfg.validate()?;
    let mut stack = problem.reference.clone().with_residual(residual)?;
    let n_params = stack.residuals().last().expect("pushed").params().len();
    let mut adam = AdamState::new(n_params, AdamHyper::with_lr(cfg.learning_rate));
    let mut curve = TrainingCurve::default();
    for step in 0..cfg.n_opt_steps {
        let seed = rng::derive_seed(rng::stream_seed(cfg.seed, "planner-noise"), step as u64);
        let r = match sde::differentiable_rollout(&stack, cfg.n_paths, seed, problem.terminal.as_ref(), problem.alpha, problem.beta) {
            Ok(r) => r,
            Err(e) => return Ok(failed(stack, curve, step, e)),
        };
        if step % cfg.log_every == 0 {
            curve.rows.push(CurveRow {
                step,
                b: r.terminal,
                a1: r.z_pre,
                a2: r.z_prev,
                objective: r.objective,
            });
        }
        if !r.gradient.is_finite() {
            return Ok(failed(stack, curve, step, Error::Numeric { node: 0, op: "gradient" }));
        }
        let res = stack.last_residual_mut().expect("pushed");
        let mut p = res.params().clone();
        adam.hyper.learning_rate = cfg.step_size(step);
        adam_step(&mut p, &r.gradient, &mut adam, Direction::Ascent)?;
        if !p.is_finite() {
            return Ok(failed(stack, curve, step, Error::Numeric { node: 0, op: "adam" }));
        }
        res.set_params(p)?;
    }
    Ok(PlanOutcome {
        stack,
        curve,
        failure: None,
    })
}

fn failed(stack: DriftStack, curve: TrainingCurve, step: usize, e: Error) -> PlanOutcome {
    PlanOutcome {
        stack,
        curve,
        failure: Some(Error::Planner {
            step,
            reason: e.to_string(),
        }),
    }
}

/// Appends a zero-output MLP residual and Adam-ascends the objective.
pub fn optimize_control(problem: &ControlProblem, cfg: &PlannerConfig) -> Result<PlanOutcome> {
    let spec = cfg.residual_spec(problem.reference.dim());
    let residual = Residual::mlp(spec, rng::stream_seed(cfg.seed, "planner-init"))?;
    optimize_control_with(problem, cfg, residual)
}

/// Separate Monte Carlo estimates of `E terminal(x_T)`, `E z_pre`, `E z_prev`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveTerms {
    pub b: Estimate,
    pub a1: Estimate,
    pub a2: Estimate,
}

impl ObjectiveTerms {
    pub fn objective(&self, alpha: f64, beta: f64) -> f64 {
        self.b.mean - alpha * self.a1.mean - beta * self.a2.mean
    }
}

pub fn objective_estimate(stack: &DriftStack, terminal: &dyn TerminalFn, n: usize, seed: u64) -> Result<ObjectiveTerms> {
    let s = sde::sample(stack, n, seed)?;
    let vals: Vec<f64> = s.iter().map(|x| terminal.value(x)).collect();
    let kl = sde::sample_kl(&s);
    Ok(ObjectiveTerms {
        b: Estimate::from_values(&vals),
        a1: kl.a1,
        a2: kl.a2,
    })
}

/// Pretrained sampling with drift `f_pre + gamma sigma^2(t) grad mean(x)`.
pub fn guidance_sampler(
    model: Arc<PretrainedModel>,
    mean: Arc<dyn TerminalFn>,
    gamma: f64,
    n: usize,
    seed: u64,
) -> Result<SampleSet> {
    if !(gamma >= 0.0) {
        return Err(Error::Config("guidance level must be nonnegative".into()));
    }
    let stack = DriftStack::pretrained(model).with_guidance(Guidance { field: mean, gamma });
    sde::sample(&stack, n, seed)
}
