//! Ground-truth rewards, feasibility and the budgeted feedback channel.
//!
//! The channel is the only place where queries are counted.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffusion::{Feasibility, PretrainedModel};
use crate::error::{Error, Result};
use crate::features::{FeatureMap, FeatureSpec};
use crate::rng::{self, Rng};
use crate::sde::BumpTerminal;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bump {
    pub center: Vec<f64>,
    pub width: f64,
    #[serde(default = "default_height")]
    pub height: f64,
}

fn default_height() -> f64 {
    1.0
}

impl Bump {
    pub fn terminal(&self) -> BumpTerminal {
        BumpTerminal {
            center: self.center.clone(),
            width: self.width,
            height: self.height,
        }
    }

    fn eval(&self, x: &[f64]) -> f64 {
        let q: f64 = x.iter().zip(&self.center).map(|(a, c)| (a - c) * (a - c)).sum();
        self.height * (-q / (2.0 * self.width * self.width)).exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardKind {
    /// `theta^T phi(x)`.
    LinearInFeatures { features: FeatureSpec, theta: Vec<f64> },
    GaussianBump(Bump),
    /// Pointwise maximum over bumps.
    MultiBump { bumps: Vec<Bump> },
}

/// Reward landscape on top of a pretrained model. Values are clamped to
/// `[0, 1]` and are exactly 0 outside the feasible set.
#[derive(Clone, Debug)]
pub struct World {
    pub model: Arc<PretrainedModel>,
    pub kind: RewardKind,
    pub feasibility: Feasibility,
    pub noise_std: f64,
    features: Option<FeatureMap>,
}

impl World {
    pub fn new(model: Arc<PretrainedModel>, kind: RewardKind, feasibility_threshold: f64, noise_std: f64) -> Result<Self> {
        if !(noise_std >= 0.0) {
            return Err(Error::Config("feedback noise must be nonnegative".into()));
        }
        let d = model.dim();
        let features = match &kind {
            RewardKind::LinearInFeatures { features, theta } => {
                let f = FeatureMap::new(features.clone(), d)?;
                if f.dim() != theta.len() {
                    return Err(Error::Config(format!(
                        "theta has {} entries but the feature map has {}",
                        theta.len(),
                        f.dim()
                    )));
                }
                Some(f)
            }
            RewardKind::GaussianBump(b) => {
                check_bump(b, d)?;
                None
            }
            RewardKind::MultiBump { bumps } => {
                if bumps.is_empty() {
                    return Err(Error::Config("multi_bump needs at least one bump".into()));
                }
                for b in bumps {
                    check_bump(b, d)?;
                }
                None
            }
        };
        let feasibility = Feasibility::new(&model, feasibility_threshold)?;
        Ok(Self {
            model,
            kind,
            feasibility,
            noise_std,
            features,
        })
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn is_feasible(&self, x: &[f64]) -> bool {
        self.feasibility.contains(self.model.data(), x)
    }

    /// Reward before clamping and feasibility masking.
    pub fn raw_reward(&self, x: &[f64]) -> f64 {
        match &self.kind {
            RewardKind::LinearInFeatures { theta, .. } => {
                let phi = self.features.as_ref().expect("built with kind").eval(x);
                theta.iter().zip(&phi).map(|(a, b)| a * b).sum()
            }
            RewardKind::GaussianBump(b) => b.eval(x),
            RewardKind::MultiBump { bumps } => bumps.iter().map(|b| b.eval(x)).fold(f64::NEG_INFINITY, f64::max),
        }
    }

    pub fn true_reward(&self, x: &[f64]) -> f64 {
        if !self.is_feasible(x) {
            return 0.0;
        }
        self.raw_reward(x).clamp(0.0, 1.0)
    }

    pub fn feature_map(&self) -> Option<&FeatureMap> {
        self.features.as_ref()
    }
}

fn check_bump(b: &Bump, d: usize) -> Result<()> {
    if b.center.len() != d {
        return Err(Error::Config(format!("bump center has dimension {}, world has {d}", b.center.len())));
    }
    if !(b.width > 0.0) {
        return Err(Error::Config("bump width must be positive".into()));
    }
    Ok(())
}

/// Noisy reward oracle with a hard query budget.
#[derive(Debug)]
pub struct FeedbackChannel {
    noise_std: f64,
    rng: Rng,
    budget: usize,
    used: usize,
}

impl FeedbackChannel {
    pub fn new(noise_std: f64, budget: usize, seed: u64) -> Self {
        Self {
            noise_std,
            rng: rng::rng_from(seed),
            budget,
            used: 0,
        }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn queries_used(&self) -> usize {
        self.used
    }

    pub fn remaining_budget(&self) -> usize {
        self.budget - self.used
    }

    /// `y_j = r(x_j) + eps_j`. Rejects the whole batch if it would overdraw.
    pub fn query_feedback<'a, I>(&mut self, world: &World, xs: I) -> Result<Vec<f64>>
    where
        I: IntoIterator<Item = &'a [f64]>,
        I::IntoIter: ExactSizeIterator,
    {
        let it = xs.into_iter();
        let n = it.len();
        if n > self.remaining_budget() {
            return Err(Error::Budget {
                requested: n,
                remaining: self.remaining_budget(),
            });
        }
        let ys = it
            .map(|x| world.true_reward(x) + self.noise_std * rng::normal(&mut self.rng))
            .collect();
        self.used += n;
        Ok(ys)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub x: Vec<f64>,
    pub y: f64,
    pub iteration: usize,
}

/// Append-only feedback log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeedbackDataset {
    entries: Vec<Entry>,
}

impl FeedbackDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: Vec<f64>, y: f64, iteration: usize) {
        self.entries.push(Entry { x, y, iteration });
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries tagged at or before `iteration`.
    pub fn up_to(&self, iteration: usize) -> Vec<&Entry> {
        self.entries.iter().filter(|e| e.iteration <= iteration).collect()
    }

    pub fn write_csv(&self, path: &Path, dim: usize) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let mut header = vec!["iteration".to_string()];
        header.extend((0..dim).map(|i| format!("x{i}")));
        header.push("y".into());
        w.write_record(&header)?;
        for e in &self.entries {
            let mut row = vec![e.iteration.to_string()];
            row.extend(e.x.iter().map(|v| v.to_string()));
            row.push(e.y.to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{GmmSpec, NoiseSchedule};

    fn world(noise: f64) -> World {
        let m = PretrainedModel::new(GmmSpec::standard_normal(1), NoiseSchedule::default()).unwrap();
        let kind = RewardKind::GaussianBump(Bump {
            center: vec![1.0],
            width: 0.5,
            height: 0.8,
        });
        World::new(Arc::new(m), kind, 1e-4, noise).unwrap()
    }

    #[test]
    fn bump_peak_and_feasibility_clamp() {
        let w = world(0.0);
        assert_eq!(w.true_reward(&[1.0]), 0.8);
        // exp(-x^2 / 2) < 1e-4 beyond |x| = sqrt(2 ln 1e4).
        assert_eq!(w.true_reward(&[4.4]), 0.0);
        assert!(!w.is_feasible(&[-4.4]));
        assert!(w.is_feasible(&[4.2]));
    }

    #[test]
    fn budget_accounting() {
        let w = world(0.0);
        let mut ch = FeedbackChannel::new(0.0, 2000, 1);
        assert_eq!(ch.remaining_budget(), 2000);
        let xs = vec![vec![0.5]; 500];
        let ys = ch.query_feedback(&w, xs.iter().map(Vec::as_slice)).unwrap();
        assert_eq!(ys[0], w.true_reward(&[0.5]));
        assert_eq!(ch.remaining_budget(), 1500);
        for _ in 0..3 {
            ch.query_feedback(&w, xs.iter().map(Vec::as_slice)).unwrap();
        }
        assert_eq!(ch.remaining_budget(), 0);
        let e = ch.query_feedback(&w, xs[..1].iter().map(Vec::as_slice)).unwrap_err();
        assert!(matches!(e, Error::Budget { requested: 1, remaining: 0 }));
        assert_eq!(ch.queries_used(), 2000);
    }

    #[test]
    fn infeasible_feedback_is_zero_without_noise() {
        let w = world(0.0);
        let mut ch = FeedbackChannel::new(0.0, 1, 1);
        assert_eq!(ch.query_feedback(&w, [&[9.0][..]]).unwrap(), vec![0.0]);
    }

    #[test]
    fn noisy_feedback_statistics() {
        let w = world(0.1);
        let mut ch = FeedbackChannel::new(0.1, 10_000, 7);
        let xs = vec![vec![0.5]; 10_000];
        let ys = ch.query_feedback(&w, xs.iter().map(Vec::as_slice)).unwrap();
        let r = w.true_reward(&[0.5]);
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean - r).abs() < 3.0 * 0.1 / 100.0);
        assert!((var.sqrt() - 0.1).abs() < 0.005);
        let lag: f64 = ys.windows(2).map(|p| (p[0] - mean) * (p[1] - mean)).sum::<f64>() / ((n - 1.0) * var);
        assert!(lag.abs() < 0.05, "{lag}");
    }
}
