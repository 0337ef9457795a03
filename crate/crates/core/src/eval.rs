//! Ground-truth evaluation on grids: densities, the regularized value
//! `J_alpha(p) = E_p r - alpha KL(p || p_pre)`, the product-form target,
//! regret and diversity.

use serde::{Deserialize, Serialize};

use crate::diffusion::{log_sum_exp, CompiledGmm};
use crate::error::{Error, Result};
use crate::rng;
use crate::sde::{DriftStack, SampleSet, TerminalFn};
use crate::world::World;

/// Axis-aligned cell grid in one or two dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub cells: Vec<usize>,
}

impl GridSpec {
    pub fn line(lo: f64, hi: f64, cells: usize) -> Self {
        Self {
            lo: vec![lo],
            hi: vec![hi],
            cells: vec![cells],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.lo.len();
        if !(1..=2).contains(&d) || self.hi.len() != d || self.cells.len() != d {
            return Err(Error::Config("grids are one- or two-dimensional".into()));
        }
        for i in 0..d {
            if !(self.hi[i] > self.lo[i]) || self.cells[i] == 0 {
                return Err(Error::Config("grid axes need lo < hi and at least one cell".into()));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn n_cells(&self) -> usize {
        self.cells.iter().product()
    }

    fn width(&self, i: usize) -> f64 {
        (self.hi[i] - self.lo[i]) / self.cells[i] as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|i| self.width(i)).product()
    }

    /// Center of flat cell `c` (first axis fastest).
    pub fn center(&self, c: usize) -> Vec<f64> {
        let mut rem = c;
        (0..self.dim())
            .map(|i| {
                let j = rem % self.cells[i];
                rem /= self.cells[i];
                self.lo[i] + (j as f64 + 0.5) * self.width(i)
            })
            .collect()
    }

    pub fn centers(&self) -> Vec<Vec<f64>> {
        (0..self.n_cells()).map(|c| self.center(c)).collect()
    }

    /// Flat cell containing `x`, if inside.
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        let mut idx = 0;
        let mut stride = 1;
        for i in 0..self.dim() {
            let u = (x[i] - self.lo[i]) / self.width(i);
            if !(u >= 0.0) || u >= self.cells[i] as f64 {
                return None;
            }
            idx += (u as usize).min(self.cells[i] - 1) * stride;
            stride *= self.cells[i];
        }
        Some(idx)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridDensity {
    pub grid: GridSpec,
    pub probs: Vec<f64>,
}

impl GridDensity {
    /// Normalizes cellwise log weights.
    pub fn from_log_weights(grid: GridSpec, logw: &[f64]) -> Result<Self> {
        let lse = log_sum_exp(logw);
        if !lse.is_finite() {
            return Err(Error::Degenerate("density has no mass on the grid".into()));
        }
        let probs = logw.iter().map(|l| (l - lse).exp()).collect();
        Ok(Self { grid, probs })
    }

    /// Midpoint-rule discretization of an analytic density.
    pub fn analytic(grid: &GridSpec, gmm: &CompiledGmm) -> Result<Self> {
        grid.validate()?;
        let logw: Vec<f64> = grid.centers().iter().map(|c| gmm.log_density(c)).collect();
        Self::from_log_weights(grid.clone(), &logw)
    }

    fn aligned(&self, other: &Self) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::Shape("grid densities are not aligned".into()));
        }
        Ok(())
    }

    pub fn mean(&self) -> Vec<f64> {
        let d = self.grid.dim();
        let mut m = vec![0.0; d];
        for (c, p) in self.probs.iter().enumerate() {
            for (mi, xi) in m.iter_mut().zip(self.grid.center(c)) {
                *mi += p * xi;
            }
        }
        m
    }
}

/// `p ∝ exp(tilt / (alpha + beta)) prev^(beta / (alpha + beta)) pre^(alpha / (alpha + beta))`.
pub fn grid_target_density(tilt: &[f64], prev: &GridDensity, pre: &GridDensity, alpha: f64, beta: f64) -> Result<GridDensity> {
    prev.aligned(pre)?;
    if tilt.len() != pre.probs.len() {
        return Err(Error::Shape("tilt must have one value per cell".into()));
    }
    let gamma = alpha + beta;
    if !(gamma > 0.0) || alpha < 0.0 || beta < 0.0 {
        return Err(Error::Domain("need alpha, beta >= 0 with alpha + beta > 0".into()));
    }
    let logw: Vec<f64> = (0..tilt.len())
        .map(|c| {
            let lp = |p: f64, w: f64| if w == 0.0 { 0.0 } else { w * p.ln() };
            tilt[c] / gamma + lp(prev.probs[c], beta / gamma) + lp(pre.probs[c], alpha / gamma)
        })
        .collect();
    GridDensity::from_log_weights(pre.grid.clone(), &logw)
}

/// Histogram over in-range samples, and the out-of-range fraction.
pub fn empirical_density<'a, I>(samples: I, grid: &GridSpec) -> Result<(GridDensity, f64)>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    grid.validate()?;
    let mut counts = vec![0u64; grid.n_cells()];
    let (mut inside, mut total) = (0u64, 0u64);
    for x in samples {
        total += 1;
        if let Some(c) = grid.locate(x) {
            counts[c] += 1;
            inside += 1;
        }
    }
    if inside == 0 {
        return Err(Error::Degenerate("no samples inside the grid".into()));
    }
    let probs = counts.iter().map(|&c| c as f64 / inside as f64).collect();
    Ok((
        GridDensity {
            grid: grid.clone(),
            probs,
        },
        (total - inside) as f64 / total as f64,
    ))
}

pub fn tv_distance(p: &GridDensity, q: &GridDensity) -> Result<f64> {
    p.aligned(q)?;
    Ok(0.5 * p.probs.iter().zip(&q.probs).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Smoothing added to empirical cell probabilities inside logarithms.
pub const KL_SMOOTHING: f64 = 1e-12;

/// `KL(p || q)` with `p` empirical.
pub fn kl_divergence(p: &GridDensity, q: &GridDensity) -> Result<f64> {
    p.aligned(q)?;
    Ok(p.probs
        .iter()
        .zip(&q.probs)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * ((a + KL_SMOOTHING).ln() - b.max(f64::MIN_POSITIVE).ln()))
        .sum())
}

/// True reward at every cell center.
pub fn reward_on_grid(world: &World, grid: &GridSpec) -> Vec<f64> {
    grid.centers().iter().map(|c| world.true_reward(c)).collect()
}

/// `J_alpha(q) = E_q r - alpha KL(q || pre)` for a grid density.
pub fn grid_value(q: &GridDensity, reward: &[f64], pre: &GridDensity, alpha: f64) -> Result<f64> {
    let er: f64 = q.probs.iter().zip(reward).map(|(a, b)| a * b).sum();
    Ok(er - alpha * kl_divergence(q, pre)?)
}

/// `pi* ∝ exp(r / alpha) pre` and `J_alpha(pi*) = alpha ln E_pre exp(r / alpha)`.
pub fn comparator_optimum(reward: &[f64], pre: &GridDensity, alpha: f64) -> Result<(GridDensity, f64)> {
    if !(alpha > 0.0) {
        return Err(Error::Domain("the comparator needs alpha > 0".into()));
    }
    let logw: Vec<f64> = pre
        .probs
        .iter()
        .zip(reward)
        .map(|(p, r)| r / alpha + p.max(f64::MIN_POSITIVE).ln())
        .collect();
    let value = alpha * log_sum_exp(&logw);
    Ok((GridDensity::from_log_weights(pre.grid.clone(), &logw)?, value))
}

/// Mean pairwise Euclidean distance over distinct pairs. Exact in 1D;
/// in higher dimension uses the first `max_n` samples.
pub fn diversity(samples: &SampleSet, max_n: usize) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Domain("diversity needs at least two samples".into()));
    }
    if samples.dim == 1 {
        let mut v = samples.points.clone();
        v.sort_by(f64::total_cmp);
        let nf = n as f64;
        let s: f64 = v.iter().enumerate().map(|(i, x)| (2.0 * i as f64 - nf + 1.0) * x).sum();
        return Ok(s / (nf * (nf - 1.0) / 2.0));
    }
    let m = n.min(max_n.max(2));
    let mut total = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            let a = samples.point(i);
            let b = samples.point(j);
            total += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        }
    }
    Ok(total / (m * (m - 1) / 2) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValueReport {
    pub mean_reward: f64,
    pub kl_grid: f64,
    pub kl_pathwise: Option<f64>,
    pub j_alpha: f64,
    pub diversity: f64,
    pub frac_infeasible: f64,
    pub out_of_grid: f64,
    pub alpha: f64,
}

/// Samples are scored with the true reward; KL is against `pre` on its grid.
pub fn estimate_value(samples: &SampleSet, world: &World, pre: &GridDensity, alpha: f64, pathwise: bool) -> Result<ValueReport> {
    if !(alpha >= 0.0) {
        return Err(Error::Domain("alpha must be nonnegative".into()));
    }
    let n = samples.len() as f64;
    let mut reward = 0.0;
    let mut infeasible = 0usize;
    for x in samples.iter() {
        if world.is_feasible(x) {
            reward += world.raw_reward(x).clamp(0.0, 1.0);
        } else {
            infeasible += 1;
        }
    }
    let mean_reward = reward / n;
    let (emp, out) = empirical_density(samples.iter(), &pre.grid)?;
    let kl_grid = kl_divergence(&emp, pre)?;
    let kl_pathwise = pathwise.then(|| samples.z_pre.iter().sum::<f64>() / n);
    Ok(ValueReport {
        mean_reward,
        kl_grid,
        kl_pathwise,
        j_alpha: mean_reward - alpha * kl_grid,
        diversity: diversity(samples, 2000)?,
        frac_infeasible: infeasible as f64 / n,
        out_of_grid: out,
        alpha,
    })
}

/// A query point `(t_k, x)` for the value function of one fine-tuning stage.
#[derive(Clone, Debug)]
pub struct FeynmanKacProbe {
    /// Grid index of `t`; `n_steps` is the horizon.
    pub step: usize,
    pub x: Vec<f64>,
    pub n_paths: usize,
    pub seed: u64,
}

/// Monte Carlo estimate of `w = exp(v*_t(x) / (alpha + beta))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeynmanKacEstimate {
    pub log_value: f64,
    /// Standard error of `w` relative to `w`.
    pub rel_std_err: f64,
    pub effective_sample_size: f64,
}

/// Paths run under the blended drift `(beta f_prev + alpha f_pre) / (alpha + beta)`
/// from `(t_k, x)` and are weighted by
/// `exp(tilt(x_T) / gamma - alpha beta / gamma^2 int |f_prev - f_pre|^2 / (2 sigma^2) dt)`,
/// `gamma = alpha + beta`. Path `j` uses the same noise for every probe with
/// the same seed, so differences across `x` are common-random-number differences.
pub fn feynman_kac_value(
    probe: &FeynmanKacProbe,
    tilt: &dyn TerminalFn,
    prev: &DriftStack,
    pre: &DriftStack,
    alpha: f64,
    beta: f64,
) -> Result<FeynmanKacEstimate> {
    let gamma = alpha + beta;
    if !(alpha >= 0.0 && beta >= 0.0 && gamma > 0.0) {
        return Err(Error::Domain("need alpha, beta >= 0 with alpha + beta > 0".into()));
    }
    let sch = prev.schedule();
    if prev.dim() != pre.dim() || probe.x.len() != pre.dim() || sch != pre.schedule() {
        return Err(Error::Config("probe, stacks and schedules must agree".into()));
    }
    if probe.step > sch.n_steps || probe.n_paths == 0 {
        return Err(Error::Config("probe step beyond the horizon or no paths".into()));
    }
    if probe.step == sch.n_steps {
        return Ok(FeynmanKacEstimate {
            log_value: tilt.value(&probe.x) / gamma,
            rel_std_err: 0.0,
            effective_sample_size: probe.n_paths as f64,
        });
    }
    let d = pre.dim();
    let dt = sch.dt();
    let penalty = alpha * beta / (gamma * gamma);
    let mut logw = Vec::with_capacity(probe.n_paths);
    let mut noise = vec![0.0; d];
    for j in 0..probe.n_paths {
        let mut r = rng::rng_from(rng::derive_seed(probe.seed, j as u64));
        let mut x = probe.x.clone();
        let mut acc = 0.0;
        for k in probe.step..sch.n_steps {
            let s2 = sch.sigma2(sch.time(k));
            let fp = prev.drift_at_step(k, &x);
            let f0 = pre.drift_at_step(k, &x);
            acc += dt / (2.0 * s2) * fp.iter().zip(&f0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            rng::fill_normal(&mut r, &mut noise);
            let s = (s2 * dt).sqrt();
            for i in 0..d {
                x[i] += (beta * fp[i] + alpha * f0[i]) / gamma * dt + s * noise[i];
            }
        }
        logw.push(tilt.value(&x) / gamma - penalty * acc);
    }
    let n = logw.len() as f64;
    let lse = log_sum_exp(&logw);
    let log_value = lse - n.ln();
    // Normalized weights give both the relative error and the ESS.
    let w: Vec<f64> = logw.iter().map(|l| (l - lse).exp()).collect();
    let sum_sq: f64 = w.iter().map(|v| v * v).sum();
    let ess = 1.0 / sum_sq;
    let rel_var = if probe.n_paths > 1 {
        (n * sum_sq - 1.0) / (n - 1.0)
    } else {
        0.0
    };
    if ess < 10.0 && probe.n_paths >= 10 {
        log::debug!("Feynman-Kac estimate at step {} has effective sample size {ess:.1}", probe.step);
    }
    Ok(FeynmanKacEstimate {
        log_value,
        rel_std_err: rel_var.max(0.0).sqrt(),
        effective_sample_size: ess,
    })
}

/// `u*(t, x) = sigma^2(t) grad log w + f_bar(t, x)` with the gradient taken by
/// central differences of step `h` under common random numbers. Also returns
/// the smallest effective sample size among the estimates used.
pub fn feynman_kac_drift(
    probe: &FeynmanKacProbe,
    h: f64,
    tilt: &dyn TerminalFn,
    prev: &DriftStack,
    pre: &DriftStack,
    alpha: f64,
    beta: f64,
) -> Result<(Vec<f64>, f64)> {
    let gamma = alpha + beta;
    let sch = pre.schedule();
    let s2 = sch.sigma2(sch.time(probe.step.min(sch.n_steps)));
    let fp = prev.drift_at_step(probe.step.min(sch.n_steps - 1), &probe.x);
    let f0 = pre.drift_at_step(probe.step.min(sch.n_steps - 1), &probe.x);
    let mut out = Vec::with_capacity(probe.x.len());
    let mut ess = f64::INFINITY;
    for i in 0..probe.x.len() {
        let mut hi = probe.clone();
        hi.x[i] += h;
        let mut lo = probe.clone();
        lo.x[i] -= h;
        let vp = feynman_kac_value(&hi, tilt, prev, pre, alpha, beta)?;
        let vm = feynman_kac_value(&lo, tilt, prev, pre, alpha, beta)?;
        ess = ess.min(vp.effective_sample_size).min(vm.effective_sample_size);
        let fbar = (beta * fp[i] + alpha * f0[i]) / gamma;
        out.push(s2 * (vp.log_value - vm.log_value) / (2.0 * h) + fbar);
    }
    Ok((out, ess))
}

/// `(i, J* - mean_{k <= i} J_k)` for `i = 1..`.
pub fn regret_curve(values: &[f64], comparator: f64) -> Vec<(usize, f64)> {
    let mut sum = 0.0;
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            sum += v;
            (i + 1, comparator - sum / (i + 1) as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_cell(p: [f64; 2]) -> GridDensity {
        GridDensity {
            grid: GridSpec::line(0.0, 2.0, 2),
            probs: p.to_vec(),
        }
    }

    #[test]
    fn feynman_kac_boundary_and_constant_tilt() {
        use crate::diffusion::{GmmSpec, NoiseSchedule, PretrainedModel};
        use crate::sde::{BumpTerminal, LinearTerminal};
        use std::sync::Arc;
        let model = PretrainedModel::new(GmmSpec::standard_normal(1), NoiseSchedule::default()).unwrap();
        let pre = DriftStack::pretrained(Arc::new(model));
        let bump = BumpTerminal {
            center: vec![1.0],
            width: 0.5,
            height: 1.0,
        };
        let n = pre.schedule().n_steps;
        let probe = FeynmanKacProbe {
            step: n,
            x: vec![0.7],
            n_paths: 16,
            seed: 3,
        };
        let e = feynman_kac_value(&probe, &bump, &pre, &pre, 0.01, 0.01).unwrap();
        assert_eq!(e.log_value, bump.value(&[0.7]) / 0.02);
        assert_eq!(e.rel_std_err, 0.0);
        let flat = LinearTerminal(vec![0.0]);
        let probe = FeynmanKacProbe { step: 10, ..probe };
        let e = feynman_kac_value(&probe, &flat, &pre, &pre, 0.5, 0.5).unwrap();
        assert!(e.log_value.abs() < 1e-12 && e.rel_std_err < 1e-12);
    }

    #[test]
    fn two_cell_target_and_tv() {
        let half = two_cell([0.5, 0.5]);
        let t = grid_target_density(&[0.0, 2.0], &half, &half, 1.0, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((t.probs[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((t.probs[1] - 0.731).abs() < 1e-3);
        assert!((tv_distance(&t, &half).unwrap() - 0.231).abs() < 1e-3);
        assert_eq!(tv_distance(&half, &half).unwrap(), 0.0);
        assert_eq!(tv_distance(&two_cell([1.0, 0.0]), &two_cell([0.0, 1.0])).unwrap(), 1.0);
    }

    #[test]
    fn constant_tilt_and_beta_zero() {
        let pre = two_cell([0.3, 0.7]);
        let prev = two_cell([0.9, 0.1]);
        let t = grid_target_density(&[5.0, 5.0], &prev, &pre, 0.2, 0.0).unwrap();
        assert!((t.probs[0] - 0.3).abs() < 1e-12);
        let t = grid_target_density(&[0.0, 0.1], &prev, &pre, 0.1, 0.0).unwrap();
        let w = [0.3, 0.7 * 1f64.exp()];
        assert!((t.probs[1] - w[1] / (w[0] + w[1])).abs() < 1e-12);
    }

    #[test]
    fn histogram_basics() {
        let g = GridSpec::line(0.0, 1.0, 4);
        let s = SampleSet::from_points(1, vec![0.3, 0.3, 0.3, 5.0]);
        let (d, out) = empirical_density(s.iter(), &g).unwrap();
        assert_eq!(d.probs, vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(out, 0.25);
        let s = SampleSet::from_points(1, vec![7.0]);
        assert!(matches!(empirical_density(s.iter(), &g), Err(Error::Degenerate(_))));
    }

    #[test]
    fn diversity_examples() {
        assert_eq!(diversity(&SampleSet::from_points(1, vec![2.0; 5]), 10).unwrap(), 0.0);
        assert_eq!(diversity(&SampleSet::from_points(1, vec![0.0, 3.0]), 10).unwrap(), 3.0);
        assert_eq!(diversity(&SampleSet::from_points(2, vec![0.0, 0.0, 3.0, 4.0]), 10).unwrap(), 5.0);
        let pts = vec![0.0, 1.0, 3.0, 7.0];
        let brute = (1.0 + 3.0 + 7.0 + 2.0 + 6.0 + 4.0) / 6.0;
        assert!((diversity(&SampleSet::from_points(1, pts), 10).unwrap() - brute).abs() < 1e-12);
        assert!(diversity(&SampleSet::from_points(1, vec![1.0]), 10).is_err());
    }

    #[test]
    fn comparator_is_optimal_and_constant_reward_is_pre() {
        let g = GridSpec::line(-1.0, 1.0, 5);
        let pre = GridDensity::from_log_weights(g.clone(), &[0.0, 0.5, 1.0, 0.5, 0.1]).unwrap();
        let (pi, _) = comparator_optimum(&[0.3; 5], &pre, 0.1).unwrap();
        for (a, b) in pi.probs.iter().zip(&pre.probs) {
            assert!((a - b).abs() < 1e-12);
        }
        let r = [0.0, 0.2, 0.9, 0.1, 0.0];
        let (pi, v) = comparator_optimum(&r, &pre, 0.1).unwrap();
        assert!((grid_value(&pi, &r, &pre, 0.1).unwrap() - v).abs() < 1e-9);
        assert!(comparator_optimum(&r, &pre, 0.0).is_err());
    }

    #[test]
    fn regret_of_single_self_comparison_is_zero() {
        assert_eq!(regret_curve(&[0.4], 0.4), vec![(1, 0.0)]);
        let r = regret_curve(&[0.1, 0.3], 0.5);
        assert!((r[1].1 - 0.3).abs() < 1e-15);
    }
}
