//! Closed-form pretrained diffusion: a Gaussian mixture under a
//! variance-preserving forward process, with its exact score.
//!
//! Generative time `t` runs from 0 (noise) to `T` (data). Forward time is
//! `s = T - t`; the flip happens only inside this module.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// One `d x d` matrix per component, as rows.
    pub covariances: Vec<Vec<Vec<f64>>>,
}

impl GmmSpec {
    pub fn isotropic(weights: Vec<f64>, means: Vec<Vec<f64>>, variance: f64) -> Self {
        let d = means.first().map_or(0, Vec::len);
        let cov = (0..d)
            .map(|i| (0..d).map(|j| if i == j { variance } else { 0.0 }).collect())
            .collect::<Vec<Vec<f64>>>();
        let covariances = vec![cov; means.len()];
        Self {
            weights,
            means,
            covariances,
        }
    }

    pub fn standard_normal(d: usize) -> Self {
        Self::isotropic(vec![1.0], vec![vec![0.0; d]], 1.0)
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.weights.len();
        if m == 0 {
            return Err(Error::Config("mixture has no components".into()));
        }
        if self.means.len() != m || self.covariances.len() != m {
            return Err(Error::Config(format!(
                "mixture has {m} weights, {} means and {} covariances",
                self.means.len(),
                self.covariances.len()
            )));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Config("mixture weights must be nonnegative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
        }
        let d = self.dim();
        if d == 0 {
            return Err(Error::Config("mixture dimension must be positive".into()));
        }
        for (k, (mu, cov)) in self.means.iter().zip(&self.covariances).enumerate() {
            if mu.len() != d || cov.len() != d || cov.iter().any(|r| r.len() != d) {
                return Err(Error::Config(format!("component {k} does not have dimension {d}")));
            }
            for i in 0..d {
                for j in 0..i {
                    if (cov[i][j] - cov[j][i]).abs() > 1e-12 * (1.0 + cov[i][j].abs()) {
                        return Err(Error::Config(format!("covariance {k} is not symmetric")));
                    }
                }
            }
            if matrix(cov).cholesky().is_none() {
                return Err(Error::Config(format!("covariance {k} is not positive definite")));
            }
        }
        Ok(())
    }
}

fn matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows.len();
    DMatrix::from_fn(d, d, |i, j| rows[i][j])
}

/// Precomputed component precisions and normalizers for fast evaluation.
#[derive(Clone, Debug)]
pub struct CompiledGmm {
    d: usize,
    log_coef: Vec<f64>,
    means: Vec<f64>,
    precisions: Vec<f64>,
}

/// Mixture log density, its score and (optionally) the Hessian of the log density.
pub struct ScoreEval {
    pub log_density: f64,
    pub score: Vec<f64>,
    pub hessian: Option<Vec<f64>>,
}

impl CompiledGmm {
    pub fn new(gmm: &GmmSpec) -> Result<Self> {
        gmm.validate()?;
        let d = gmm.dim();
        let mut log_coef = Vec::new();
        let mut means = Vec::new();
        let mut precisions = Vec::new();
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        for k in 0..gmm.n_components() {
            let chol = matrix(&gmm.covariances[k])
                .cholesky()
                .ok_or_else(|| Error::Config(format!("covariance {k} is not positive definite")))?;
            let logdet: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let prec = chol.inverse();
            log_coef.push(gmm.weights[k].ln() - 0.5 * (d as f64 * ln2pi + logdet));
            means.extend_from_slice(&gmm.means[k]);
            for i in 0..d {
                for j in 0..d {
                    precisions.push(prec[(i, j)]);
                }
            }
        }
        Ok(Self {
            d,
            log_coef,
            means,
            precisions,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() == self.d {
            Ok(())
        } else {
            Err(Error::Shape(format!("point has dimension {} but the mixture has {}", x.len(), self.d)))
        }
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.d;
        // Streaming log-sum-exp over components.
        let (mut top, mut acc) = (f64::NEG_INFINITY, 0.0);
        for (k, c) in self.log_coef.iter().enumerate() {
            let p = &self.precisions[k * d * d..(k + 1) * d * d];
            let mu = &self.means[k * d..(k + 1) * d];
            let mut q = 0.0;
            for i in 0..d {
                let mut row = 0.0;
                for j in 0..d {
                    row += p[i * d + j] * (x[j] - mu[j]);
                }
                q += (x[i] - mu[i]) * row;
            }
            let t = c - 0.5 * q;
            if t > top {
                acc = acc * (top - t).exp() + 1.0;
                top = t;
            } else {
                acc += (t - top).exp();
            }
        }
        top + acc.ln()
    }

    /// Score and optionally `d^2 log p / dx^2` (row-major):
    /// `H = sum_k r_k (s_k s_k^T - P_k) - s s^T`.
    pub fn score_eval(&self, x: &[f64], with_hessian: bool) -> ScoreEval {
        let d = self.d;
        let m = self.log_coef.len();
        let mut logt = vec![0.0; m];
        let mut sk = vec![0.0; m * d];
        for k in 0..m {
            let p = &self.precisions[k * d * d..(k + 1) * d * d];
            let mu = &self.means[k * d..(k + 1) * d];
            let mut q = 0.0;
            for i in 0..d {
                let mut row = 0.0;
                for j in 0..d {
                    row += p[i * d + j] * (x[j] - mu[j]);
                }
                sk[k * d + i] = -row;
                q += (x[i] - mu[i]) * row;
            }
            logt[k] = self.log_coef[k] - 0.5 * q;
        }
        let lse = log_sum_exp(&logt);
        let mut score = vec![0.0; d];
        let resp: Vec<f64> = logt.iter().map(|l| (l - lse).exp()).collect();
        for k in 0..m {
            for i in 0..d {
                score[i] += resp[k] * sk[k * d + i];
            }
        }
        let hessian = with_hessian.then(|| {
            let mut h = vec![0.0; d * d];
            for k in 0..m {
                let p = &self.precisions[k * d * d..(k + 1) * d * d];
                for i in 0..d {
                    for j in 0..d {
                        h[i * d + j] += resp[k] * (sk[k * d + i] * sk[k * d + j] - p[i * d + j]);
                    }
                }
            }
            for i in 0..d {
                for j in 0..d {
                    h[i * d + j] -= score[i] * score[j];
                }
            }
            h
        });
        ScoreEval {
            log_density: lse,
            score,
            hessian,
        }
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn gmm_log_density(gmm: &GmmSpec, x: &[f64]) -> Result<f64> {
    let c = CompiledGmm::new(gmm)?;
    c.check(x)?;
    Ok(c.log_density(x))
}

pub fn gmm_score(gmm: &GmmSpec, x: &[f64]) -> Result<Vec<f64>> {
    let c = CompiledGmm::new(gmm)?;
    c.check(x)?;
    Ok(c.score_eval(x, false).score)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseKind {
    /// Linear noise rate `b(s) = b_min + s (b_max - b_min) / T`.
    VariancePreserving { b_min: f64, b_max: f64 },
    /// `sigma(t) = sigma` for every t. Used with an analytic base drift.
    Constant { sigma: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
// Unknown keys are rejected by the flattened, tagged `kind`.
pub struct NoiseSchedule {
    #[serde(flatten)]
    pub kind: NoiseKind,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_steps")]
    pub n_steps: usize,
}

fn default_horizon() -> f64 {
    1.0
}
fn default_steps() -> usize {
    50
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            kind: NoiseKind::VariancePreserving { b_min: 0.1, b_max: 20.0 },
            horizon: 1.0,
            n_steps: 50,
        }
    }
}

impl NoiseSchedule {
    pub fn constant(sigma: f64, horizon: f64, n_steps: usize) -> Self {
        Self {
            kind: NoiseKind::Constant { sigma },
            horizon,
            n_steps,
        }
    }

    pub fn with_steps(mut self, n_steps: usize) -> Self {
        self.n_steps = n_steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) {
            return Err(Error::Config("schedule horizon must be positive".into()));
        }
        if self.n_steps < 2 {
            return Err(Error::Config("schedule needs at least 2 steps".into()));
        }
        match self.kind {
            NoiseKind::VariancePreserving { b_min, b_max } => {
                if !(b_min > 0.0) || !(b_max >= b_min) {
                    return Err(Error::Config("need 0 < b_min <= b_max".into()));
                }
            }
            NoiseKind::Constant { sigma } => {
                if !(sigma > 0.0) {
                    return Err(Error::Config("constant sigma must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Generative time of grid point `k`.
    pub fn time(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.n_steps as f64
    }

    /// Noise rate in forward time.
    pub fn rate(&self, s: f64) -> f64 {
        match self.kind {
            NoiseKind::VariancePreserving { b_min, b_max } => b_min + s * (b_max - b_min) / self.horizon,
            NoiseKind::Constant { sigma } => sigma * sigma,
        }
    }

    /// `sigma^2(t)` in generative time.
    pub fn sigma2(&self, t: f64) -> f64 {
        self.rate(self.horizon - t)
    }

    /// `exp(-int_0^s b)`; 1 for the constant kind.
    pub fn alpha_bar(&self, s: f64) -> f64 {
        match self.kind {
            NoiseKind::VariancePreserving { b_min, b_max } => {
                (-(b_min * s + 0.5 * (b_max - b_min) * s * s / self.horizon)).exp()
            }
            NoiseKind::Constant { .. } => 1.0,
        }
    }
}

/// Forward-noised marginal at forward time `s`.
pub fn diffused_gmm(gmm: &GmmSpec, schedule: &NoiseSchedule, s: f64) -> Result<GmmSpec> {
    if !(0.0..=schedule.horizon).contains(&s) {
        return Err(Error::Domain(format!("forward time {s} outside [0, {}]", schedule.horizon)));
    }
    let a = schedule.alpha_bar(s);
    let ra = a.sqrt();
    let means = gmm.means.iter().map(|m| m.iter().map(|v| ra * v).collect()).collect();
    let covariances = gmm
        .covariances
        .iter()
        .map(|c| {
            c.iter()
                .enumerate()
                .map(|(i, row)| {
                    row.iter()
                        .enumerate()
                        .map(|(j, v)| a * v + if i == j { 1.0 - a } else { 0.0 })
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(GmmSpec {
        weights: gmm.weights.clone(),
        means,
        covariances,
    })
}

/// Pretrained model with the diffused mixture compiled at every grid time.
#[derive(Clone, Debug)]
pub struct PretrainedModel {
    pub gmm: GmmSpec,
    pub schedule: NoiseSchedule,
    data: CompiledGmm,
    grid: Vec<CompiledGmm>,
}

impl PretrainedModel {
    pub fn new(gmm: GmmSpec, schedule: NoiseSchedule) -> Result<Self> {
        schedule.validate()?;
        if !matches!(schedule.kind, NoiseKind::VariancePreserving { .. }) {
            return Err(Error::Config("the pretrained model needs a variance-preserving schedule".into()));
        }
        let data = CompiledGmm::new(&gmm)?;
        let grid = (0..=schedule.n_steps)
            .map(|k| CompiledGmm::new(&diffused_gmm(&gmm, &schedule, schedule.horizon - schedule.time(k))?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            gmm,
            schedule,
            data,
            grid,
        })
    }

    pub fn dim(&self) -> usize {
        self.gmm.dim()
    }

    /// Analytic density of the data mixture.
    pub fn data(&self) -> &CompiledGmm {
        &self.data
    }

    /// Drift at grid point `k`, optionally with its Jacobian (row-major).
    pub fn drift_at_step(&self, k: usize, x: &[f64], out: &mut [f64], jac: Option<&mut [f64]>) {
        let b = self.schedule.sigma2(self.schedule.time(k));
        let ev = self.grid[k].score_eval(x, jac.is_some());
        for i in 0..x.len() {
            out[i] = 0.5 * b * x[i] + b * ev.score[i];
        }
        if let (Some(j), Some(h)) = (jac, ev.hessian) {
            let d = x.len();
            for r in 0..d {
                for c in 0..d {
                    j[r * d + c] = b * h[r * d + c] + if r == c { 0.5 * b } else { 0.0 };
                }
            }
        }
    }
}

/// `f^pre(t, x) = b(s) x / 2 + b(s) grad log p_s(x)` with `s = T - t`.
pub fn pretrained_drift(model: &PretrainedModel, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    let sch = &model.schedule;
    if !(0.0..=sch.horizon).contains(&t) {
        return Err(Error::Domain(format!("generative time {t} outside [0, {}]", sch.horizon)));
    }
    model.data.check(x)?;
    let s = sch.horizon - t;
    let p = CompiledGmm::new(&diffused_gmm(&model.gmm, sch, s)?)?;
    let b = sch.rate(s);
    let score = p.score_eval(x, false).score;
    Ok(x.iter().zip(score).map(|(xi, si)| 0.5 * b * xi + b * si).collect())
}

/// Feasible set `{x : p(x) >= eps * max p}` of the data mixture.
#[derive(Clone, Debug)]
pub struct Feasibility {
    pub rel_threshold: f64,
    log_cut: f64,
}

impl Feasibility {
    pub fn new(model: &PretrainedModel, rel_threshold: f64) -> Result<Self> {
        if !(rel_threshold > 0.0 && rel_threshold < 1.0) {
            return Err(Error::Config("feasibility threshold must lie in (0, 1)".into()));
        }
        let log_max = max_log_density(model.data(), &model.gmm);
        Ok(Self {
            rel_threshold,
            log_cut: log_max + rel_threshold.ln(),
        })
    }

    pub fn contains(&self, data: &CompiledGmm, x: &[f64]) -> bool {
        data.log_density(x) >= self.log_cut
    }

    pub fn log_cut(&self) -> f64 {
        self.log_cut
    }
}

/// Maximum of the mixture log density: fixed-point ascent from every mean.
fn max_log_density(c: &CompiledGmm, gmm: &GmmSpec) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for mu in &gmm.means {
        let mut x = mu.clone();
        for _ in 0..200 {
            let ev = c.score_eval(&x, true);
            let h = ev.hessian.expect("requested");
            let d = x.len();
            let hm = DMatrix::from_row_slice(d, d, &h);
            let step = match (-hm).cholesky() {
                Some(ch) => ch.solve(&DVector::from_vec(ev.score.clone())),
                None => DVector::from_vec(ev.score.iter().map(|s| 0.01 * s).collect()),
            };
            let cand: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            if c.log_density(&cand) >= c.log_density(&x) {
                x = cand;
            } else {
                break;
            }
            if step.norm() < 1e-12 {
                break;
            }
        }
        best = best.max(c.log_density(&x));
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_mode() -> GmmSpec {
        GmmSpec::isotropic(vec![0.6, 0.4], vec![vec![-1.5], vec![1.5]], 0.25)
    }

    fn normal_pdf(x: f64, m: f64, v: f64) -> f64 {
        (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
    }

    #[test]
    fn standard_normal_at_origin() {
        let g = GmmSpec::standard_normal(1);
        let v = gmm_log_density(&g, &[0.0]).unwrap();
        assert!((v + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
        assert!((v + 0.9189).abs() < 1e-4);
    }

    #[test]
    fn density_matches_direct_summation_and_permutation() {
        let g = two_mode();
        let swapped = GmmSpec {
            weights: vec![0.4, 0.6],
            means: vec![vec![1.5], vec![-1.5]],
            covariances: g.covariances.clone(),
        };
        for &x in &[-3.0, -1.5, -0.2, 0.0, 0.7, 2.9] {
            let direct = 0.6 * normal_pdf(x, -1.5, 0.25) + 0.4 * normal_pdf(x, 1.5, 0.25);
            let a = gmm_log_density(&g, &[x]).unwrap();
            assert!((a - direct.ln()).abs() < 1e-12);
            assert!((a - gmm_log_density(&swapped, &[x]).unwrap()).abs() < 1e-13);
        }
    }

    #[test]
    fn score_examples() {
        assert_eq!(gmm_score(&GmmSpec::standard_normal(1), &[2.0]).unwrap(), vec![-2.0]);
        let sym = GmmSpec::isotropic(vec![0.5, 0.5], vec![vec![-1.0], vec![1.0]], 0.3);
        assert!(gmm_score(&sym, &[0.0]).unwrap()[0].abs() < 1e-15);
    }

    #[test]
    fn rejects_non_spd_and_bad_weights() {
        let mut g = GmmSpec::isotropic(vec![1.0], vec![vec![0.0, 0.0]], 1.0);
        g.covariances[0] = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        assert!(matches!(gmm_log_density(&g, &[0.0, 0.0]), Err(Error::Config(_))));
        let w = GmmSpec::isotropic(vec![0.5, 0.4], vec![vec![0.0], vec![1.0]], 1.0);
        assert!(matches!(w.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn diffusion_examples() {
        let sch = NoiseSchedule::default();
        let g = two_mode();
        assert_eq!(diffused_gmm(&g, &sch, 0.0).unwrap(), g);
        let n = GmmSpec::standard_normal(2);
        for s in [0.1, 0.5, 1.0] {
            let c = &diffused_gmm(&n, &sch, s).unwrap().covariances[0];
            assert!((c[0][0] - 1.0).abs() < 1e-15 && c[0][1] == 0.0);
        }
        let a = sch.alpha_bar(1.0);
        assert!((a - (-10.05f64).exp()).abs() < 1e-18);
        let end = diffused_gmm(&g, &sch, 1.0).unwrap();
        for k in 0..2 {
            assert!(end.means[k][0].abs() < 1e-2);
            assert!((end.covariances[k][0][0] - 1.0).abs() < 1e-4);
        }
        assert!(matches!(diffused_gmm(&g, &sch, 1.5), Err(Error::Domain(_))));
    }

    #[test]
    fn gaussian_drift_is_ornstein_uhlenbeck() {
        let sch = NoiseSchedule::default();
        let m = PretrainedModel::new(GmmSpec::standard_normal(1), sch).unwrap();
        for &t in &[0.0, 0.3, 1.0] {
            let f = pretrained_drift(&m, t, &[1.7]).unwrap()[0];
            let b = sch.sigma2(t);
            assert!((f + 0.5 * b * 1.7).abs() < 1e-12);
        }
        let mut out = [0.0];
        m.drift_at_step(10, &[1.7], &mut out, None);
        assert!((out[0] - pretrained_drift(&m, sch.time(10), &[1.7]).unwrap()[0]).abs() < 1e-13);
    }

    #[test]
    fn boundary_drift_uses_data_score() {
        let g = two_mode();
        let sch = NoiseSchedule::default();
        let m = PretrainedModel::new(g.clone(), sch).unwrap();
        let x = [0.4];
        let f = pretrained_drift(&m, 1.0, &x).unwrap()[0];
        let b = sch.rate(0.0);
        assert!((f - (0.5 * b * x[0] + b * gmm_score(&g, &x).unwrap()[0])).abs() < 1e-13);
    }

    #[test]
    fn drift_jacobian_matches_finite_differences() {
        let g = GmmSpec {
            weights: vec![0.3, 0.7],
            means: vec![vec![-1.0, 0.5], vec![1.2, -0.3]],
            covariances: vec![
                vec![vec![0.5, 0.1], vec![0.1, 0.3]],
                vec![vec![0.2, -0.05], vec![-0.05, 0.4]],
            ],
        };
        let m = PretrainedModel::new(g, NoiseSchedule::default()).unwrap();
        let x = [0.3, -0.2];
        let mut jac = [0.0; 4];
        let mut f = [0.0; 2];
        for k in [0, 25, 49, 50] {
            m.drift_at_step(k, &x, &mut f, Some(&mut jac));
            for c in 0..2 {
                let h = 1e-6;
                let (mut xp, mut xm) = (x, x);
                xp[c] += h;
                xm[c] -= h;
                let (mut fp, mut fm) = ([0.0; 2], [0.0; 2]);
                m.drift_at_step(k, &xp, &mut fp, None);
                m.drift_at_step(k, &xm, &mut fm, None);
                for r in 0..2 {
                    let fd = (fp[r] - fm[r]) / (2.0 * h);
                    assert!((fd - jac[r * 2 + c]).abs() < 1e-5 * (1.0 + fd.abs()), "k={k} {fd} {}", jac[r * 2 + c]);
                }
            }
        }
    }

    #[test]
    fn feasibility_threshold() {
        let m = PretrainedModel::new(two_mode(), NoiseSchedule::default()).unwrap();
        let f = Feasibility::new(&m, 1e-4).unwrap();
        assert!(f.contains(m.data(), &[-1.5]));
        assert!(f.contains(m.data(), &[1.5]));
        assert!(!f.contains(m.data(), &[5.0]));
        let peak = m.data().log_density(&[-1.5]);
        assert!((f.log_cut() - (peak + 1e-4f64.ln())).abs() < 1e-6);
    }
}
