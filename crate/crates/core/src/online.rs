//! The online loop and its baselines under a hard feedback budget.
//!
//! Iteration `i` samples `M_i` points from `p^(i-1)`, queries them, refits the
//! surrogate on every entry tagged `<= i`, then fine-tunes against
//! `(alpha, beta_i)` with `p^(i-1)` as the trust-region reference. Planning
//! never touches the channel.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMap, FeatureSpec};
use crate::grad::{Activation, AdamHyper, AdamState, MlpSpec};
use crate::planner::{self, ControlProblem, PlannerConfig, TrainingCurve};
use crate::ppo::{self, PpoBatch, PpoConfig};
use crate::reward_model::{self, BootstrapTrain, MeanPrediction, Optimistic, RewardSurrogate};
use crate::rng;
use crate::sde::{self, DriftStack, Guidance, Residual, SampleSet, TerminalFn};
use crate::world::{FeedbackChannel, FeedbackDataset, World};

/// KL weight used by the greedy baseline in place of zero.
pub const GREEDY_ALPHA_FLOOR: f64 = 1e-6;

/// `beta_i = alpha (i - 1)`, so that `alpha + beta_i = alpha i`.
pub fn beta_schedule(alpha: f64, i: usize) -> f64 {
    assert!(i >= 1, "iterations are 1-based");
    alpha * (i - 1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum BetaRule {
    Theory,
    Constant { beta: f64 },
    /// One value per iteration.
    Custom { values: Vec<f64> },
}

impl BetaRule {
    /// Trust-region weight used while fine-tuning at iteration `i`.
    pub fn beta(&self, alpha: f64, i: usize) -> f64 {
        match self {
            BetaRule::Theory => beta_schedule(alpha, i),
            BetaRule::Constant { beta } => *beta,
            BetaRule::Custom { values } => values[i - 1],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    /// Ridge regression on features plus the elliptical bonus.
    Ucb,
    /// Max over bootstrap heads.
    Bootstrap,
    /// Ridge point prediction only.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateConfig {
    #[serde(default)]
    pub features: FeatureSpec,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Fixed bonus scale. When absent it follows from `delta`.
    #[serde(default)]
    pub c1: Option<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_head_hidden")]
    pub head_hidden: Vec<usize>,
    #[serde(default = "default_head_activation")]
    pub head_activation: Activation,
    #[serde(default)]
    pub bootstrap: BootstrapTrain,
}

fn default_lambda() -> f64 {
    1.0
}
fn default_delta() -> f64 {
    0.05
}
fn default_heads() -> usize {
    4
}
fn default_head_hidden() -> Vec<usize> {
    vec![32, 32]
}
fn default_head_activation() -> Activation {
    Activation::Tanh
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            features: FeatureSpec::default(),
            lambda: default_lambda(),
            c1: None,
            delta: default_delta(),
            n_heads: default_heads(),
            head_hidden: default_head_hidden(),
            head_activation: default_head_activation(),
            bootstrap: BootstrapTrain::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeikoConfig {
    pub batch_sizes: Vec<usize>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta_rule")]
    pub beta_rule: BetaRule,
    #[serde(default = "default_oracle")]
    pub oracle: OracleKind,
    #[serde(default)]
    pub surrogate: SurrogateConfig,
    #[serde(default)]
    pub planner: PlannerConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_alpha() -> f64 {
    0.01
}
fn default_beta_rule() -> BetaRule {
    BetaRule::Theory
}
fn default_oracle() -> OracleKind {
    OracleKind::Ucb
}

impl SeikoConfig {
    pub fn iterations(&self) -> usize {
        self.batch_sizes.len()
    }

    pub fn total_budget(&self) -> usize {
        self.batch_sizes.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_sizes.is_empty() {
            return Err(Error::Config("at least one iteration is required".into()));
        }
        if self.batch_sizes.contains(&0) {
            return Err(Error::Config("every batch size must be positive".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config("alpha must be nonnegative".into()));
        }
        match &self.beta_rule {
            BetaRule::Constant { beta } if !(*beta >= 0.0) => {
                return Err(Error::Config("beta must be nonnegative".into()));
            }
            BetaRule::Custom { values } => {
                if values.len() != self.iterations() {
                    return Err(Error::Config(format!(
                        "custom beta list has {} values for {} iterations",
                        values.len(),
                        self.iterations()
                    )));
                }
                if values.iter().any(|b| !(*b >= 0.0)) {
                    return Err(Error::Config("beta must be nonnegative".into()));
                }
            }
            _ => {}
        }
        let s = &self.surrogate;
        if !(s.lambda > 0.0) || !(s.delta > 0.0 && s.delta < 1.0) {
            return Err(Error::Config("surrogate needs lambda > 0 and delta in (0, 1)".into()));
        }
        if s.c1.is_some_and(|c| !(c >= 0.0)) {
            return Err(Error::Config("c1 must be nonnegative".into()));
        }
        self.planner.validate()
    }

    /// Budget check against a channel.
    pub fn check_budget(&self, channel: &FeedbackChannel) -> Result<()> {
        if self.total_budget() != channel.remaining_budget() {
            return Err(Error::Config(format!(
                "batch sizes sum to {} but the budget is {}",
                self.total_budget(),
                channel.remaining_budget()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct IterationRecord {
    /// 1-based.
    pub iteration: usize,
    /// `|D^(i)|` after this iteration's queries.
    pub dataset_size: usize,
    /// The `M_i` points queried at this iteration, drawn from `p^(i-1)`.
    pub queried: SampleSet,
    pub surrogate: Option<Arc<RewardSurrogate>>,
    /// Drift of `p^(i)`.
    pub stack: DriftStack,
    pub curve: TrainingCurve,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug)]
pub struct RunRecord {
    pub method: String,
    pub iterations: Vec<IterationRecord>,
    pub dataset: FeedbackDataset,
    pub queries_used: usize,
    /// Runtime failure after which the loop stopped; completed iterations are kept.
    pub failure: Option<Error>,
}

impl RunRecord {
    fn new(method: &str) -> Self {
        Self {
            method: method.into(),
            iterations: Vec::new(),
            dataset: FeedbackDataset::new(),
            queries_used: 0,
            failure: None,
        }
    }

    pub fn final_stack(&self) -> Option<&DriftStack> {
        self.iterations.last().map(|r| &r.stack)
    }
}

fn seed_for(master: u64, stream: &str, i: usize) -> u64 {
    rng::derive_seed(rng::stream_seed(master, stream), i as u64)
}

fn fit_surrogate(cfg: &SeikoConfig, world: &World, data: &FeedbackDataset, i: usize) -> Result<RewardSurrogate> {
    let entries = data.up_to(i);
    let s = &cfg.surrogate;
    match cfg.oracle {
        OracleKind::Ucb | OracleKind::None => {
            let fm = FeatureMap::new(s.features.clone(), world.dim())?;
            let (c1, delta) = match (cfg.oracle, s.c1) {
                (OracleKind::None, _) => (0.0, None),
                (_, Some(c)) => (c, None),
                (_, None) => (
                    reward_model::c1_of_delta(s.delta, fm.norm_bound(), s.lambda, world.noise_std, fm.dim(), entries.len()),
                    Some(s.delta),
                ),
            };
            Ok(RewardSurrogate::Linear(reward_model::fit_ridge(
                entries.iter().copied(),
                &fm,
                s.lambda,
                c1,
                delta,
            )?))
        }
        OracleKind::Bootstrap => {
            let spec = MlpSpec::regressor(world.dim(), &s.head_hidden, s.head_activation);
            Ok(RewardSurrogate::Bootstrap(reward_model::fit_bootstrap(
                &entries,
                &spec,
                s.n_heads,
                &s.bootstrap,
                seed_for(cfg.seed, "bootstrap", i),
            )?))
        }
    }
}

fn query(
    channel: &mut FeedbackChannel,
    world: &World,
    record: &mut RunRecord,
    stack: &DriftStack,
    n: usize,
    seed: u64,
    i: usize,
) -> Result<SampleSet> {
    if n > channel.remaining_budget() {
        return Err(Error::Budget {
            requested: n,
            remaining: channel.remaining_budget(),
        });
    }
    let s = sde::sample(stack, n, seed)?;
    let ys = channel.query_feedback(world, s.points.chunks_exact(s.dim))?;
    for (x, y) in s.iter().zip(ys) {
        record.dataset.push(x.to_vec(), y, i);
    }
    record.queries_used = channel.queries_used();
    Ok(s)
}

/// Runs the loop with `cfg`. `greedy` allows `alpha + beta = 0`.
fn run_loop(method: &str, cfg: &SeikoConfig, world: &World, channel: &mut FeedbackChannel, greedy: bool) -> Result<RunRecord> {
    cfg.validate()?;
    cfg.check_budget(channel)?;
    let mut record = RunRecord::new(method);
    let mut stack = DriftStack::pretrained(world.model.clone());
    for (idx, &m) in cfg.batch_sizes.iter().enumerate() {
        let i = idx + 1;
        let step = (|| -> Result<IterationRecord> {
            let queried = query(channel, world, &mut record, &stack, m, seed_for(cfg.seed, "sampling", i), i)?;
            let surrogate = Arc::new(fit_surrogate(cfg, world, &record.dataset, i)?);
            let terminal: Arc<dyn TerminalFn> = match cfg.oracle {
                OracleKind::None => Arc::new(MeanPrediction(surrogate.clone())),
                _ => Arc::new(Optimistic(surrogate.clone())),
            };
            let beta = cfg.beta_rule.beta(cfg.alpha, i);
            let problem = ControlProblem {
                terminal,
                alpha: cfg.alpha,
                beta,
                reference: stack.clone(),
                greedy,
            };
            let pc = PlannerConfig {
                seed: seed_for(cfg.seed, "planner", i),
                ..cfg.planner.clone()
            };
            let (next, curve) = planner::optimize_control(&problem, &pc)?.into_result()?;
            Ok(IterationRecord {
                iteration: i,
                dataset_size: record.dataset.len(),
                queried,
                surrogate: Some(surrogate),
                stack: next,
                curve,
                alpha: cfg.alpha,
                beta,
            })
        })();
        match step {
            Ok(it) => {
                log::info!("{method}: iteration {i} done, |D| = {}", it.dataset_size);
                stack = it.stack.clone();
                record.iterations.push(it);
            }
            Err(e @ Error::Config(_)) => return Err(e),
            Err(e) => {
                record.failure = Some(e);
                break;
            }
        }
    }
    Ok(record)
}

pub fn run_seiko(cfg: &SeikoConfig, world: &World, channel: &mut FeedbackChannel) -> Result<RunRecord> {
    let tag = match cfg.oracle {
        OracleKind::Ucb => "seiko-ucb",
        OracleKind::Bootstrap => "seiko-bootstrap",
        OracleKind::None => "seiko-none",
    };
    run_loop(tag, cfg, world, channel, cfg.alpha == 0.0)
}

/// All `M` queries from `p^pre`, one point-prediction fit, one fine-tune.
pub fn run_nonadaptive(cfg: &SeikoConfig, world: &World, channel: &mut FeedbackChannel) -> Result<RunRecord> {
    let one = SeikoConfig {
        batch_sizes: vec![cfg.total_budget()],
        beta_rule: BetaRule::Theory,
        oracle: OracleKind::None,
        ..cfg.clone()
    };
    run_loop("nonadaptive", &one, world, channel, false)
}

/// Same schedule as the online loop with no bonus, no trust region and the
/// pretrained penalty reduced to [`GREEDY_ALPHA_FLOOR`].
pub fn run_greedy(cfg: &SeikoConfig, world: &World, channel: &mut FeedbackChannel) -> Result<RunRecord> {
    let g = SeikoConfig {
        alpha: GREEDY_ALPHA_FLOOR,
        beta_rule: BetaRule::Constant { beta: 0.0 },
        oracle: OracleKind::None,
        ..cfg.clone()
    };
    run_loop("greedy", &g, world, channel, false)
}

/// The online loop with `alpha = beta = 0` (optimism kept).
pub fn run_unregularized(cfg: &SeikoConfig, world: &World, channel: &mut FeedbackChannel) -> Result<RunRecord> {
    let g = SeikoConfig {
        alpha: 0.0,
        beta_rule: BetaRule::Constant { beta: 0.0 },
        ..cfg.clone()
    };
    run_loop("unregularized", &g, world, channel, true)
}

/// All `M` queries from `p^pre`, one point-prediction fit, then sampling with
/// drift `f_pre + gamma sigma^2 grad r_hat`.
pub fn run_guidance(cfg: &SeikoConfig, gamma: f64, world: &World, channel: &mut FeedbackChannel) -> Result<RunRecord> {
    if !(gamma >= 0.0) {
        return Err(Error::Config("guidance level must be nonnegative".into()));
    }
    let one = SeikoConfig {
        batch_sizes: vec![cfg.total_budget()],
        oracle: OracleKind::None,
        ..cfg.clone()
    };
    one.validate()?;
    one.check_budget(channel)?;
    let mut record = RunRecord::new("guidance");
    let pre = DriftStack::pretrained(world.model.clone());
    let result = (|| -> Result<IterationRecord> {
        let queried = query(channel, world, &mut record, &pre, one.batch_sizes[0], seed_for(cfg.seed, "sampling", 1), 1)?;
        let surrogate = Arc::new(fit_surrogate(&one, world, &record.dataset, 1)?);
        let stack = pre.clone().with_guidance(Guidance {
            field: Arc::new(MeanPrediction(surrogate.clone())),
            gamma,
        });
        Ok(IterationRecord {
            iteration: 1,
            dataset_size: record.dataset.len(),
            queried,
            surrogate: Some(surrogate),
            stack,
            curve: TrainingCurve::default(),
            alpha: 0.0,
            beta: 0.0,
        })
    })();
    match result {
        Ok(it) => record.iterations.push(it),
        Err(e @ Error::Config(_)) => return Err(e),
        Err(e) => record.failure = Some(e),
    }
    Ok(record)
}

/// KL-penalized PPO on queried rewards. Iteration `i` spends `M_i` queries in
/// epochs of `ppo.batch_size` trajectories.
pub fn run_ppo(cfg: &SeikoConfig, ppo_cfg: &PpoConfig, world: &World, channel: &mut FeedbackChannel) -> Result<RunRecord> {
    cfg.validate()?;
    cfg.check_budget(channel)?;
    if ppo_cfg.batch_size == 0 || ppo_cfg.inner_steps == 0 || !(ppo_cfg.eps_clip > 0.0) {
        return Err(Error::Config("PPO needs positive batch, inner steps and clip range".into()));
    }
    let mut record = RunRecord::new("ppo");
    let spec = cfg.planner.residual_spec(world.dim());
    let mut stack = DriftStack::pretrained(world.model.clone())
        .with_residual(Residual::mlp(spec, rng::stream_seed(cfg.seed, "ppo-init"))?)?;
    let n_params = stack.residuals()[0].params().len();
    let mut adam = AdamState::new(n_params, AdamHyper::with_lr(ppo_cfg.learning_rate));
    let mut epoch = 0usize;
    for (idx, &m) in cfg.batch_sizes.iter().enumerate() {
        let i = idx + 1;
        let step = (|| -> Result<IterationRecord> {
            let mut left = m;
            let mut points = Vec::new();
            let mut curve = TrainingCurve::default();
            while left > 0 {
                let n = left.min(ppo_cfg.batch_size);
                left -= n;
                if n > channel.remaining_budget() {
                    return Err(Error::Budget {
                        requested: n,
                        remaining: channel.remaining_budget(),
                    });
                }
                let trajectories = sde::simulate(&stack, n, seed_for(cfg.seed, "ppo-sampling", epoch))?;
                let rewards = channel.query_feedback(world, trajectories.iter().map(|t| t.terminal()))?;
                for (t, y) in trajectories.iter().zip(&rewards) {
                    record.dataset.push(t.terminal().to_vec(), *y, i);
                    points.extend_from_slice(t.terminal());
                }
                record.queries_used = channel.queries_used();
                let mean_r = rewards.iter().sum::<f64>() / n as f64;
                let kl = sde::pathwise_kl(&trajectories)?;
                let batch = PpoBatch {
                    behaviour: stack.residuals()[0].params().clone(),
                    trajectories,
                    rewards,
                };
                for _ in 0..ppo_cfg.inner_steps {
                    ppo::ppo_update(&mut stack, &batch, ppo_cfg, cfg.alpha, &mut adam)?;
                }
                if !stack.residuals()[0].params().is_finite() {
                    return Err(Error::Planner {
                        step: epoch,
                        reason: "non-finite PPO parameters".into(),
                    });
                }
                curve.rows.push(planner::CurveRow {
                    step: epoch,
                    b: mean_r,
                    a1: kl.a1.mean,
                    a2: kl.a2.mean,
                    objective: mean_r - cfg.alpha * kl.a1.mean,
                });
                epoch += 1;
            }
            Ok(IterationRecord {
                iteration: i,
                dataset_size: record.dataset.len(),
                queried: SampleSet::from_points(world.dim(), points),
                surrogate: None,
                stack: stack.clone(),
                curve,
                alpha: cfg.alpha,
                beta: 0.0,
            })
        })();
        match step {
            Ok(it) => record.iterations.push(it),
            Err(e) => {
                record.failure = Some(e);
                break;
            }
        }
    }
    Ok(record)
}

/// Convenience: a channel sized for `cfg` with the world's noise.
pub fn channel_for(cfg: &SeikoConfig, world: &World) -> FeedbackChannel {
    FeedbackChannel::new(world.noise_std, cfg.total_budget(), rng::stream_seed(cfg.seed, "feedback"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{GmmSpec, NoiseSchedule, PretrainedModel};
    use crate::world::{Bump, RewardKind};

    fn world() -> World {
        let model = Arc::new(PretrainedModel::new(GmmSpec::standard_normal(1), NoiseSchedule::default().with_steps(10)).unwrap());
        World::new(
            model,
            RewardKind::GaussianBump(Bump {
                center: vec![1.0],
                width: 0.5,
                height: 1.0,
            }),
            1e-3,
            0.1,
        )
        .unwrap()
    }

    fn cfg() -> SeikoConfig {
        SeikoConfig {
            batch_sizes: vec![8, 8, 8],
            alpha: 0.01,
            beta_rule: BetaRule::Theory,
            oracle: OracleKind::Ucb,
            surrogate: SurrogateConfig {
                features: FeatureSpec {
                    kind: crate::features::FeatureKind::RandomFourier {
                        n_features: 8,
                        bandwidth: 1.0,
                        seed: 0,
                    },
                    norm_bound: 1.0,
                },
                ..Default::default()
            },
            planner: PlannerConfig {
                n_paths: 4,
                n_opt_steps: 2,
                hidden: vec![4],
                ..Default::default()
            },
            seed: 5,
        }
    }

    #[test]
    fn beta_schedule_examples() {
        assert_eq!(beta_schedule(0.01, 1), 0.0);
        assert!((beta_schedule(0.01, 4) - 0.03).abs() < 1e-15);
        for i in 1..10 {
            assert!(beta_schedule(0.2, i + 1) >= beta_schedule(0.2, i));
            assert!((0.2 + beta_schedule(0.2, i) - 0.2 * i as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn budget_and_dataset_monotonicity() {
        let w = world();
        let c = cfg();
        let mut ch = channel_for(&c, &w);
        let r = run_seiko(&c, &w, &mut ch).unwrap();
        assert!(r.failure.is_none());
        assert_eq!(r.queries_used, 24);
        assert_eq!(ch.remaining_budget(), 0);
        let sizes: Vec<usize> = r.iterations.iter().map(|it| it.dataset_size).collect();
        assert_eq!(sizes, vec![8, 16, 24]);
        for it in &r.iterations {
            assert_eq!(it.stack.residuals().len(), it.iteration);
            assert!((it.beta - 0.01 * (it.iteration - 1) as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn mismatched_budget_is_a_config_error() {
        let w = world();
        let c = cfg();
        let mut ch = FeedbackChannel::new(0.1, 23, 0);
        assert!(matches!(run_seiko(&c, &w, &mut ch), Err(Error::Config(_))));
        assert_eq!(ch.queries_used(), 0);
    }

    #[test]
    fn nonadaptive_is_the_single_iteration_loop() {
        let w = world();
        let c = cfg();
        let a = run_nonadaptive(&c, &w, &mut channel_for(&c, &w)).unwrap();
        let one = SeikoConfig {
            batch_sizes: vec![24],
            oracle: OracleKind::None,
            ..c.clone()
        };
        let b = run_seiko(&one, &w, &mut channel_for(&one, &w)).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(
            a.iterations[0].stack.residuals()[0].params(),
            b.iterations[0].stack.residuals()[0].params()
        );
    }

    #[test]
    fn greedy_has_zero_bonus() {
        let w = world();
        let c = cfg();
        let r = run_greedy(&c, &w, &mut channel_for(&c, &w)).unwrap();
        assert_eq!(r.queries_used, 24);
        for it in &r.iterations {
            let s = it.surrogate.as_ref().unwrap();
            assert_eq!(s.bonus(&[0.3]), 0.0);
            assert_eq!(it.beta, 0.0);
        }
    }

    #[test]
    fn ppo_and_guidance_spend_the_budget() {
        let w = world();
        let c = cfg();
        let p = PpoConfig {
            batch_size: 5,
            inner_steps: 1,
            ..Default::default()
        };
        let r = run_ppo(&c, &p, &w, &mut channel_for(&c, &w)).unwrap();
        assert!(r.failure.is_none());
        assert_eq!(r.queries_used, 24);
        assert_eq!(r.iterations.len(), 3);
        let g = run_guidance(&c, 0.5, &w, &mut channel_for(&c, &w)).unwrap();
        assert_eq!(g.queries_used, 24);
        assert_eq!(g.iterations.len(), 1);
    }
}
