//! Experiment configuration: a TOML document validated before any work starts.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffusion::{GmmSpec, NoiseSchedule, PretrainedModel};
use crate::error::{Error, Result};
use crate::eval::GridSpec;
use crate::online::{BetaRule, SeikoConfig, SurrogateConfig};
use crate::planner::PlannerConfig;
use crate::ppo::PpoConfig;
use crate::world::{RewardKind, World};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmConfig {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Shared isotropic variance. Exclusive with `covariances`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariances: Option<Vec<Vec<Vec<f64>>>>,
}

impl GmmConfig {
    pub fn to_spec(&self) -> Result<GmmSpec> {
        match (&self.variance, &self.covariances) {
            (Some(v), None) => Ok(GmmSpec::isotropic(self.weights.clone(), self.means.clone(), *v)),
            (None, Some(c)) => Ok(GmmSpec {
                weights: self.weights.clone(),
                means: self.means.clone(),
                covariances: c.clone(),
            }),
            _ => Err(Error::Config("gmm needs exactly one of `variance` or `covariances`".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub gmm: GmmConfig,
    #[serde(default)]
    pub schedule: NoiseSchedule,
    pub reward: RewardKind,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    pub budget: usize,
    /// Feasible set: density at least this fraction of the density maximum.
    #[serde(default = "default_feasibility")]
    pub feasibility_threshold: f64,
}

fn default_noise() -> f64 {
    0.1
}
fn default_feasibility() -> f64 {
    1e-3
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "seiko-ucb")]
    SeikoUcb,
    #[serde(rename = "seiko-bootstrap")]
    SeikoBootstrap,
    #[serde(rename = "greedy")]
    Greedy,
    #[serde(rename = "nonadaptive")]
    Nonadaptive,
    #[serde(rename = "guidance")]
    Guidance,
    #[serde(rename = "ppo")]
    Ppo,
    /// SEIKO-UCB with `alpha = beta = 0`.
    #[serde(rename = "unregularized")]
    Unregularized,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::SeikoUcb => "seiko-ucb",
            Method::SeikoBootstrap => "seiko-bootstrap",
            Method::Greedy => "greedy",
            Method::Nonadaptive => "nonadaptive",
            Method::Guidance => "guidance",
            Method::Ppo => "ppo",
            Method::Unregularized => "unregularized",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub name: Method,
    pub batch_sizes: Vec<usize>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta_rule")]
    pub beta_rule: BetaRule,
    #[serde(default)]
    pub surrogate: SurrogateConfig,
    /// Guidance level.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub ppo: PpoConfig,
}

fn default_alpha() -> f64 {
    0.01
}
fn default_beta_rule() -> BetaRule {
    BetaRule::Theory
}
fn default_gamma() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Defaults to `[-5, 5]^d` with 512 cells in 1D and 256 per axis in 2D.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default = "default_alpha_eval")]
    pub alpha_eval: f64,
    #[serde(default = "default_eval_samples")]
    pub n_samples: usize,
}

fn default_alpha_eval() -> f64 {
    1e-5
}
fn default_eval_samples() -> usize {
    10_000
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            grid: None,
            alpha_eval: default_alpha_eval(),
            n_samples: default_eval_samples(),
        }
    }
}

impl EvaluationConfig {
    pub fn grid_for(&self, d: usize) -> Result<GridSpec> {
        let g = match (&self.grid, d) {
            (Some(g), _) => g.clone(),
            (None, 1) => GridSpec::line(-5.0, 5.0, 512),
            (None, 2) => GridSpec {
                lo: vec![-5.0; 2],
                hi: vec![5.0; 2],
                cells: vec![256; 2],
            },
            (None, _) => return Err(Error::Config("grid evaluation supports d <= 2".into())),
        };
        g.validate()?;
        if g.dim() != d {
            return Err(Error::Config(format!("evaluation grid is {}-dimensional, world is {d}-dimensional", g.dim())));
        }
        Ok(g)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    #[serde(default)]
    pub master: u64,
    /// Evaluation sampling stream; derived from `master` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub method: MethodConfig,
    #[serde(default)]
    pub planner: PlannerConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub seeds: Seeds,
}

/// 1-based line of the first `key =` assignment or `[key]` header.
fn line_of(src: &str, key: &str) -> Option<usize> {
    src.lines().position(|l| {
        let t = l.trim_start();
        t.strip_prefix(key).is_some_and(|r| r.trim_start().starts_with('=')) || t == format!("[{key}]")
    })
    .map(|i| i + 1)
}

fn anchored(src: &str, key: &str, msg: String) -> Error {
    match line_of(src, key) {
        Some(l) => Error::Config(format!("line {l}: {msg}")),
        None => Error::Config(msg),
    }
}

impl ExperimentConfig {
    /// Parses and validates; errors name the offending line where possible.
    pub fn parse(src: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(src).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        cfg.validate_with(src)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::parse(&src).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        Ok((cfg, src))
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with("")
    }

    fn validate_with(&self, src: &str) -> Result<()> {
        let m = &self.method;
        let total: usize = m.batch_sizes.iter().sum();
        if total != self.world.budget {
            return Err(anchored(
                src,
                "batch_sizes",
                format!("batch sizes sum to {total} but world.budget is {}", self.world.budget),
            ));
        }
        if m.name == Method::Ppo && m.ppo.batch_size == 0 {
            return Err(anchored(src, "batch_size", "PPO batch size must be positive".into()));
        }
        if !(m.gamma >= 0.0) {
            return Err(anchored(src, "gamma", "guidance level must be nonnegative".into()));
        }
        if !(self.evaluation.alpha_eval >= 0.0) || self.evaluation.n_samples < 2 {
            return Err(anchored(src, "alpha_eval", "evaluation needs alpha_eval >= 0 and n_samples >= 2".into()));
        }
        let gmm = self.world.gmm.to_spec().map_err(|e| anchored(src, "gmm", e.to_string()))?;
        gmm.validate().map_err(|e| anchored(src, "gmm", e.to_string()))?;
        self.world.schedule.validate().map_err(|e| anchored(src, "schedule", e.to_string()))?;
        self.evaluation
            .grid_for(gmm.dim())
            .map_err(|e| anchored(src, "grid", e.to_string()))?;
        self.seiko_config()
            .validate()
            .map_err(|e| anchored(src, "method", e.to_string()))?;
        Ok(())
    }

    pub fn seiko_config(&self) -> SeikoConfig {
        let m = &self.method;
        SeikoConfig {
            batch_sizes: m.batch_sizes.clone(),
            alpha: m.alpha,
            beta_rule: m.beta_rule.clone(),
            oracle: match m.name {
                Method::SeikoBootstrap => crate::online::OracleKind::Bootstrap,
                Method::SeikoUcb | Method::Unregularized => crate::online::OracleKind::Ucb,
                _ => crate::online::OracleKind::None,
            },
            surrogate: m.surrogate.clone(),
            planner: self.planner.clone(),
            seed: self.seeds.master,
        }
    }

    pub fn build_world(&self) -> Result<World> {
        let model = Arc::new(PretrainedModel::new(self.world.gmm.to_spec()?, self.world.schedule)?);
        World::new(model, self.world.reward.clone(), self.world.feasibility_threshold, self.world.noise_std)
    }

    pub fn evaluation_seed(&self) -> u64 {
        self.seeds
            .evaluation
            .unwrap_or_else(|| crate::rng::stream_seed(self.seeds.master, "evaluation"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
[world]
budget = 20
gmm = { weights = [1.0], means = [[0.0]], variance = 1.0 }
reward = { kind = "gaussian_bump", center = [1.0], width = 0.5 }

[method]
name = "seiko-ucb"
batch_sizes = [10, 10]
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c = ExperimentConfig::parse(SMALL).unwrap();
        assert_eq!(c.method.alpha, 0.01);
        assert_eq!(c.world.schedule, NoiseSchedule::default());
        assert_eq!(c.evaluation.alpha_eval, 1e-5);
        assert_eq!(c.evaluation.grid_for(1).unwrap().n_cells(), 512);
        let back = toml::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::parse(&back).unwrap(), c);
    }

    #[test]
    fn budget_mismatch_names_the_line() {
        let bad = SMALL.replace("[10, 10]", "[10, 11]");
        let e = ExperimentConfig::parse(&bad).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("line 9"), "{e}");
    }

    #[test]
    fn unknown_keys_are_rejected_everywhere() {
        for (anchor, extra) in [
            ("[method]\n", "colour = 1\n"),
            ("[world]\n", "schedule = { kind = \"variance_preserving\", b_min = 0.1, b_max = 20.0, bogus = 2 }\n"),
            ("[world]\n", "foo = 3\n"),
        ] {
            let bad = SMALL.replacen(anchor, &format!("{anchor}{extra}"), 1);
            let e = ExperimentConfig::parse(&bad).unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{e}");
            assert!(e.to_string().contains("line"), "{e}");
        }
        let bad = format!("{SMALL}\n[planner]\nwidth = 3\n");
        assert!(ExperimentConfig::parse(&bad).is_err());
    }

    #[test]
    fn unknown_feature_and_method_names_are_rejected() {
        let bad = SMALL.replace("seiko-ucb", "seiko-magic");
        assert!(ExperimentConfig::parse(&bad).is_err());
        let bad = format!("{SMALL}\n[method.surrogate]\nfeatures = {{ kind = \"rbf\", lo = -3.0, hi = 3.0, per_axis = 4, width = 1.0, extra = 1 }}\n");
        assert!(ExperimentConfig::parse(&bad).is_err());
        let good = format!("{SMALL}\n[method.surrogate]\nfeatures = {{ kind = \"rbf\", lo = -3.0, hi = 3.0, per_axis = 4, width = 1.0 }}\n");
        assert!(ExperimentConfig::parse(&good).is_ok());
    }
}
