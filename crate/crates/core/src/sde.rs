//! Euler–Maruyama simulation of drift stacks with pathwise KL accumulators.
//!
//! Grid: `t_k = k T / n`. Each step uses left-point drift and left-point
//! `sigma(t_k)`, with `dw ~ N(0, dt)`. Along every path
//!
//! * `z_pre  += |f - f_pre|^2 / (2 sigma^2) dt` (all residuals plus guidance),
//! * `z_prev += |last residual|^2 / (2 sigma^2) dt`,
//!
//! so `z_prev` measures the distance to the stack with its last residual removed.

use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseSchedule, PretrainedModel};
use crate::error::{Error, Result};
use crate::grad::{mlp_init, MlpScratch, MlpSpec, ParamVector, Tape, TapeMlp, Var};
use crate::rng::{self, Rng};

/// Differentiable scalar function of a state (surrogate rewards, test probes).
pub trait TerminalFn: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;
    fn value_grad(&self, x: &[f64]) -> (f64, Vec<f64>);
}

/// `w . x`.
#[derive(Clone, Debug)]
pub struct LinearTerminal(pub Vec<f64>);

impl TerminalFn for LinearTerminal {
    fn value(&self, x: &[f64]) -> f64 {
        self.0.iter().zip(x).map(|(a, b)| a * b).sum()
    }
    fn value_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        (self.value(x), self.0.clone())
    }
}

/// `height * exp(-|x - center|^2 / (2 width^2))`, unclamped.
#[derive(Clone, Debug)]
pub struct BumpTerminal {
    pub center: Vec<f64>,
    pub width: f64,
    pub height: f64,
}

impl TerminalFn for BumpTerminal {
    fn value(&self, x: &[f64]) -> f64 {
        let q: f64 = x.iter().zip(&self.center).map(|(a, c)| (a - c) * (a - c)).sum();
        self.height * (-q / (2.0 * self.width * self.width)).exp()
    }
    fn value_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let v = self.value(x);
        let w2 = self.width * self.width;
        (v, x.iter().zip(&self.center).map(|(a, c)| -v * (a - c) / w2).collect())
    }
}

#[derive(Clone, Debug)]
pub enum BaseDrift {
    Pretrained(Arc<PretrainedModel>),
    /// `f(t, x) = -rate x`.
    OrnsteinUhlenbeck { rate: f64 },
}

impl BaseDrift {
    fn eval(&self, k: usize, x: &[f64], out: &mut [f64], jac: Option<&mut [f64]>) {
        match self {
            BaseDrift::Pretrained(m) => m.drift_at_step(k, x, out, jac),
            BaseDrift::OrnsteinUhlenbeck { rate } => {
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = -rate * xi;
                }
                if let Some(j) = jac {
                    let d = x.len();
                    j.fill(0.0);
                    for i in 0..d {
                        j[i * d + i] = -rate;
                    }
                }
            }
        }
    }
}

/// One learned correction to the drift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Residual {
    Mlp { spec: MlpSpec, params: ParamVector },
    /// `u(t, x) = A x + c + t e`; segments `a` `[d, d]`, `c` `[d]`, `e` `[d]`.
    Affine { params: ParamVector },
}

impl Residual {
    pub fn mlp(spec: MlpSpec, seed: u64) -> Result<Self> {
        let params = mlp_init(&spec, seed)?;
        Ok(Residual::Mlp { spec, params })
    }

    pub fn affine_zero(d: usize) -> Self {
        Residual::Affine {
            params: ParamVector::zeros(&[("a", vec![d, d]), ("c", vec![d]), ("e", vec![d])]),
        }
    }

    /// Constant residual `u = c`.
    pub fn constant(c: &[f64]) -> Self {
        let mut r = Self::affine_zero(c.len());
        r.params_mut().segment_mut(1).copy_from_slice(c);
        r
    }

    pub fn params(&self) -> &ParamVector {
        match self {
            Residual::Mlp { params, .. } | Residual::Affine { params } => params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        match self {
            Residual::Mlp { params, .. } | Residual::Affine { params } => params,
        }
    }

    pub fn set_params(&mut self, p: ParamVector) -> Result<()> {
        self.params().require_same_layout(&p)?;
        *self.params_mut() = p;
        Ok(())
    }

    fn state_dim(&self) -> usize {
        match self {
            Residual::Mlp { spec, .. } => spec.input_dim(),
            Residual::Affine { params } => params.layout()[1].len(),
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        if let Residual::Mlp { spec, params } = self {
            spec.validate()?;
            params.require_same_layout(&spec.zero_params())?;
            if spec.output_dim() != d {
                return Err(Error::Shape(format!(
                    "residual output width {} differs from state dimension {d}",
                    spec.output_dim()
                )));
            }
        }
        if self.state_dim() != d {
            return Err(Error::Shape(format!("residual expects dimension {}, stack has {d}", self.state_dim())));
        }
        Ok(())
    }

    /// Adds `u(t, x)` into `out`.
    fn add_into(&self, t: f64, x: &[f64], out: &mut [f64], tmp: &mut [f64], scratch: &mut MlpScratch) {
        match self {
            Residual::Mlp { spec, params } => {
                spec.eval_into(params, t, x, tmp, scratch);
            }
            Residual::Affine { params } => {
                let d = x.len();
                let (a, c, e) = (params.segment(0), params.segment(1), params.segment(2));
                for i in 0..d {
                    let mut v = c[i] + t * e[i];
                    for j in 0..d {
                        v += a[i * d + j] * x[j];
                    }
                    tmp[i] = v;
                }
            }
        }
        for (o, v) in out.iter_mut().zip(tmp.iter()) {
            *o += v;
        }
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        let mut tmp = vec![0.0; x.len()];
        self.add_into(t, x, &mut out, &mut tmp, &mut MlpScratch::default());
        out
    }
}

pub(crate) enum LoadedResidual {
    Mlp(TapeMlp),
    Affine([Var; 3]),
}

impl LoadedResidual {
    pub(crate) fn load(tape: &mut Tape, r: &Residual, trainable: bool) -> Self {
        match r {
            Residual::Mlp { spec, params } => LoadedResidual::Mlp(TapeMlp::load(tape, spec, params, trainable)),
            Residual::Affine { params } => {
                let mut leaf = |i: usize| {
                    let v = params.segment(i).to_vec();
                    if trainable {
                        tape.param(v)
                    } else {
                        tape.constant(v)
                    }
                };
                LoadedResidual::Affine([leaf(0), leaf(1), leaf(2)])
            }
        }
    }

    pub(crate) fn forward(&self, tape: &mut Tape, t: f64, x: Var) -> Var {
        match self {
            LoadedResidual::Mlp(m) => m.forward(tape, t, x),
            LoadedResidual::Affine([a, c, e]) => {
                let ax = tape.affine(*a, *c, x);
                let te = tape.scale(*e, t);
                tape.add(ax, te)
            }
        }
    }

    pub(crate) fn leaves(&self) -> Vec<Var> {
        match self {
            LoadedResidual::Mlp(m) => m.leaves().to_vec(),
            LoadedResidual::Affine(v) => v.to_vec(),
        }
    }
}

/// Inference-time drift term `gamma sigma^2(t) grad mu(x)`.
#[derive(Clone)]
pub struct Guidance {
    pub field: Arc<dyn TerminalFn>,
    pub gamma: f64,
}

impl std::fmt::Debug for Guidance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Guidance").field("gamma", &self.gamma).finish_non_exhaustive()
    }
}

/// `f = base + sum of residuals (+ guidance)`.
#[derive(Clone, Debug)]
pub struct DriftStack {
    base: BaseDrift,
    schedule: NoiseSchedule,
    dim: usize,
    residuals: Vec<Residual>,
    guidance: Option<Guidance>,
}

impl DriftStack {
    pub fn pretrained(model: Arc<PretrainedModel>) -> Self {
        Self {
            schedule: model.schedule,
            dim: model.dim(),
            base: BaseDrift::Pretrained(model),
            residuals: Vec::new(),
            guidance: None,
        }
    }

    pub fn ornstein_uhlenbeck(rate: f64, dim: usize, schedule: NoiseSchedule) -> Result<Self> {
        schedule.validate()?;
        Ok(Self {
            base: BaseDrift::OrnsteinUhlenbeck { rate },
            schedule,
            dim,
            residuals: Vec::new(),
            guidance: None,
        })
    }

    pub fn base(&self) -> &BaseDrift {
        &self.base
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn residuals(&self) -> &[Residual] {
        &self.residuals
    }

    pub fn last_residual_mut(&mut self) -> Option<&mut Residual> {
        self.residuals.last_mut()
    }

    pub fn push(&mut self, r: Residual) -> Result<()> {
        r.validate(self.dim)?;
        self.residuals.push(r);
        Ok(())
    }

    pub fn with_residual(mut self, r: Residual) -> Result<Self> {
        self.push(r)?;
        Ok(self)
    }

    /// The stack with its last residual removed.
    pub fn previous(&self) -> Self {
        let mut s = self.clone();
        s.residuals.pop();
        s
    }

    pub fn with_guidance(mut self, g: Guidance) -> Self {
        self.guidance = Some(g);
        self
    }

    /// Drift at grid point `k`.
    pub fn drift_at_step(&self, k: usize, x: &[f64]) -> Vec<f64> {
        let mut ws = Workspace::new(self.dim);
        self.eval_step(k, x, &mut ws);
        ws.total.clone()
    }

    fn eval_step(&self, k: usize, x: &[f64], ws: &mut Workspace) {
        let t = self.schedule.time(k);
        self.base.eval(k, x, &mut ws.total, None);
        ws.dev.fill(0.0);
        ws.last.fill(0.0);
        let n = self.residuals.len();
        for (j, r) in self.residuals.iter().enumerate() {
            if j + 1 == n {
                r.add_into(t, x, &mut ws.last, &mut ws.tmp, &mut ws.scratch);
            } else {
                r.add_into(t, x, &mut ws.dev, &mut ws.tmp, &mut ws.scratch);
            }
        }
        for i in 0..self.dim {
            ws.dev[i] += ws.last[i];
        }
        if let Some(g) = &self.guidance {
            let s2 = self.schedule.sigma2(t);
            let (_, grad) = g.field.value_grad(x);
            for i in 0..self.dim {
                ws.dev[i] += g.gamma * s2 * grad[i];
            }
        }
        for i in 0..self.dim {
            ws.total[i] += ws.dev[i];
        }
    }
}

struct Workspace {
    total: Vec<f64>,
    dev: Vec<f64>,
    last: Vec<f64>,
    tmp: Vec<f64>,
    scratch: MlpScratch,
}

impl Workspace {
    fn new(d: usize) -> Self {
        Self {
            total: vec![0.0; d],
            dev: vec![0.0; d],
            last: vec![0.0; d],
            tmp: vec![0.0; d],
            scratch: MlpScratch::default(),
        }
    }
}

/// A simulated path. `states` holds `n_steps + 1` points when recorded,
/// otherwise only the terminal point.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub dim: usize,
    pub states: Vec<f64>,
    /// Running `z_pre` at each recorded grid point.
    pub z_pre_path: Vec<f64>,
    /// Running `z_prev` at each recorded grid point.
    pub z_prev_path: Vec<f64>,
    pub noise_seed: u64,
}

impl Trajectory {
    pub fn terminal(&self) -> &[f64] {
        &self.states[self.states.len() - self.dim..]
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn n_states(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn z_pre(&self) -> f64 {
        *self.z_pre_path.last().expect("nonempty")
    }

    pub fn z_prev(&self) -> f64 {
        *self.z_prev_path.last().expect("nonempty")
    }
}

/// Seed of path `index` under `master`.
pub fn path_seed(master: u64, index: usize) -> u64 {
    rng::derive_seed(master, index as u64)
}

fn initial_state(rng: &mut Rng, d: usize) -> Vec<f64> {
    let mut x = vec![0.0; d];
    rng::fill_normal(rng, &mut x);
    x
}

fn simulate_path(stack: &DriftStack, index: usize, master: u64, record: bool) -> Result<Trajectory> {
    let sch = &stack.schedule;
    let d = stack.dim;
    let n = sch.n_steps;
    let dt = sch.dt();
    let sq = dt.sqrt();
    let seed = path_seed(master, index);
    let mut rng = rng::rng_from(seed);
    let mut x = initial_state(&mut rng, d);
    let mut ws = Workspace::new(d);
    let mut noise = vec![0.0; d];
    let (mut z, mut zz) = (0.0, 0.0);
    let cap = if record { n + 1 } else { 1 };
    let mut states = Vec::with_capacity(cap * d);
    let mut zp = Vec::with_capacity(cap);
    let mut zq = Vec::with_capacity(cap);
    if record {
        states.extend_from_slice(&x);
        zp.push(0.0);
        zq.push(0.0);
    }
    for k in 0..n {
        let s2 = sch.sigma2(sch.time(k));
        stack.eval_step(k, &x, &mut ws);
        let w = dt / (2.0 * s2);
        z += w * ws.dev.iter().map(|v| v * v).sum::<f64>();
        zz += w * ws.last.iter().map(|v| v * v).sum::<f64>();
        rng::fill_normal(&mut rng, &mut noise);
        let s = s2.sqrt() * sq;
        for i in 0..d {
            x[i] += ws.total[i] * dt + s * noise[i];
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Simulation {
                step: k + 1,
                trajectory: index,
            });
        }
        if record {
            states.extend_from_slice(&x);
            zp.push(z);
            zq.push(zz);
        }
    }
    if !record {
        states = x;
        zp.push(z);
        zq.push(zz);
    }
    Ok(Trajectory {
        dim: d,
        states,
        z_pre_path: zp,
        z_prev_path: zq,
        noise_seed: seed,
    })
}

/// `n` paths with every grid state recorded.
pub fn simulate(stack: &DriftStack, n: usize, master_seed: u64) -> Result<Vec<Trajectory>> {
    run_paths(stack, n, master_seed, true)
}

fn run_paths(stack: &DriftStack, n: usize, master_seed: u64, record: bool) -> Result<Vec<Trajectory>> {
    if n == 0 {
        return Err(Error::Config("need at least one trajectory".into()));
    }
    (0..n)
        .into_par_iter()
        .map(|i| simulate_path(stack, i, master_seed, record))
        .collect()
}

/// Terminal samples and accumulators, without intermediate states.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub dim: usize,
    pub points: Vec<f64>,
    pub z_pre: Vec<f64>,
    pub z_prev: Vec<f64>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.z_pre.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z_pre.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }

    pub fn from_points(dim: usize, points: Vec<f64>) -> Self {
        let n = points.len() / dim;
        Self {
            dim,
            points,
            z_pre: vec![0.0; n],
            z_prev: vec![0.0; n],
        }
    }
}

pub fn sample(stack: &DriftStack, n: usize, master_seed: u64) -> Result<SampleSet> {
    let paths = run_paths(stack, n, master_seed, false)?;
    let mut s = SampleSet {
        dim: stack.dim,
        points: Vec::with_capacity(n * stack.dim),
        z_pre: Vec::with_capacity(n),
        z_prev: Vec::with_capacity(n),
    };
    for p in paths {
        s.points.extend_from_slice(&p.states);
        s.z_pre.push(p.z_pre());
        s.z_prev.push(p.z_prev());
    }
    Ok(s)
}

/// Monte Carlo mean with standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
}

impl Estimate {
    pub fn from_values(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = if v.len() > 1 {
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            std_err: (var / n).sqrt(),
        }
    }
}

/// Estimates of the two KL terms: against the base drift and against the
/// stack without its last residual.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathKl {
    pub a1: Estimate,
    pub a2: Estimate,
}

pub fn pathwise_kl(trajectories: &[Trajectory]) -> Result<PathKl> {
    if trajectories.is_empty() {
        return Err(Error::Config("no trajectories".into()));
    }
    let z: Vec<f64> = trajectories.iter().map(Trajectory::z_pre).collect();
    let zz: Vec<f64> = trajectories.iter().map(Trajectory::z_prev).collect();
    Ok(PathKl {
        a1: Estimate::from_values(&z),
        a2: Estimate::from_values(&zz),
    })
}

/// `pathwise_kl` over a [`SampleSet`].
pub fn sample_kl(s: &SampleSet) -> PathKl {
    PathKl {
        a1: Estimate::from_values(&s.z_pre),
        a2: Estimate::from_values(&s.z_prev),
    }
}

/// Output of [`differentiable_rollout`]. Means are over paths.
#[derive(Clone, Debug)]
pub struct RolloutGrad {
    pub objective: f64,
    pub terminal: f64,
    pub z_pre: f64,
    pub z_prev: f64,
    pub gradient: ParamVector,
}

struct PathGrad {
    objective: f64,
    terminal: f64,
    z_pre: f64,
    z_prev: f64,
    grad: Vec<f64>,
}

fn rollout_path(
    stack: &DriftStack,
    index: usize,
    master: u64,
    terminal: &dyn TerminalFn,
    alpha: f64,
    beta: f64,
) -> Result<PathGrad> {
    let sch = &stack.schedule;
    let d = stack.dim;
    let dt = sch.dt();
    let seed = path_seed(master, index);
    let mut rng = rng::rng_from(seed);
    let mut tape = Tape::new();
    let last = stack.residuals.len() - 1;
    let loaded: Vec<LoadedResidual> = stack
        .residuals
        .iter()
        .enumerate()
        .map(|(j, r)| LoadedResidual::load(&mut tape, r, j == last))
        .collect();
    let mut x = tape.constant(initial_state(&mut rng, d));
    let mut noise = vec![0.0; d];
    let mut f = vec![0.0; d];
    let mut jac = vec![0.0; d * d];
    let mut z_acc: Option<Var> = None;
    let mut zz_acc: Option<Var> = None;
    let accumulate = |tape: &mut Tape, acc: &mut Option<Var>, v: Var| {
        *acc = Some(match *acc {
            Some(a) => tape.add(a, v),
            None => v,
        });
    };
    for k in 0..sch.n_steps {
        let t = sch.time(k);
        let s2 = sch.sigma2(t);
        stack.base.eval(k, tape.value(x), &mut f, Some(&mut jac));
        let fb = tape.linearized(x, f.clone(), jac.clone());
        let mut dev: Option<Var> = None;
        let mut u_last = None;
        for (j, l) in loaded.iter().enumerate() {
            let u = l.forward(&mut tape, t, x);
            if j == last {
                u_last = Some(u);
            }
            accumulate(&mut tape, &mut dev, u);
        }
        let dev = dev.expect("at least one residual");
        let u_last = u_last.expect("last residual");
        let w = dt / (2.0 * s2);
        let zd = tape.sum_sq(dev);
        let zd = tape.scale(zd, w);
        accumulate(&mut tape, &mut z_acc, zd);
        let zl = tape.sum_sq(u_last);
        let zl = tape.scale(zl, w);
        accumulate(&mut tape, &mut zz_acc, zl);
        let drift = tape.add(fb, dev);
        let step = tape.scale(drift, dt);
        rng::fill_normal(&mut rng, &mut noise);
        let s = (s2 * dt).sqrt();
        let dw = tape.constant(noise.iter().map(|e| s * e).collect());
        let moved = tape.add(x, step);
        x = tape.add(moved, dw);
        if tape.value(x).iter().any(|v| !v.is_finite()) {
            return Err(Error::Simulation {
                step: k + 1,
                trajectory: index,
            });
        }
    }
    let (rv, rg) = terminal.value_grad(tape.value(x));
    let r = tape.linearized(x, vec![rv], rg);
    let z = z_acc.expect("n_steps >= 2");
    let zz = zz_acc.expect("n_steps >= 2");
    let za = tape.scale(z, alpha);
    let zb = tape.scale(zz, beta);
    let o = tape.sub(r, za);
    let obj = tape.sub(o, zb);
    tape.check_finite()?;
    let grads = tape.backward(obj);
    let leaves = loaded[last].leaves();
    let n_params = stack.residuals[last].params().len();
    let mut grad = Vec::with_capacity(n_params);
    for v in leaves {
        grad.extend(grads.of(v));
    }
    Ok(PathGrad {
        objective: tape.scalar(obj),
        terminal: rv,
        z_pre: tape.scalar(z),
        z_prev: tape.scalar(zz),
        grad,
    })
}

/// Mean over `n` paths of `terminal(x_T) - alpha z_pre - beta z_prev`, and its
/// gradient with respect to the last residual's parameters. Noise is fixed
/// per path, so the gradient is pathwise.
pub fn differentiable_rollout(
    stack: &DriftStack,
    n: usize,
    master_seed: u64,
    terminal: &dyn TerminalFn,
    alpha: f64,
    beta: f64,
) -> Result<RolloutGrad> {
    if stack.residuals.is_empty() {
        return Err(Error::Config("differentiable rollout needs a trainable residual".into()));
    }
    if stack.guidance.is_some() {
        return Err(Error::Config("guided stacks are not differentiable".into()));
    }
    if n == 0 {
        return Err(Error::Config("need at least one trajectory".into()));
    }
    let paths: Vec<PathGrad> = (0..n)
        .into_par_iter()
        .map(|i| rollout_path(stack, i, master_seed, terminal, alpha, beta))
        .collect::<Result<_>>()?;
    let like = stack.residuals.last().expect("checked").params();
    let mut gradient = like.zeros_like();
    let (mut obj, mut term, mut z, mut zz) = (0.0, 0.0, 0.0, 0.0);
    let inv = 1.0 / n as f64;
    for p in &paths {
        obj += p.objective;
        term += p.terminal;
        z += p.z_pre;
        zz += p.z_prev;
        for (g, v) in gradient.values_mut().iter_mut().zip(&p.grad) {
            *g += v;
        }
    }
    gradient.scale(inv);
    let out = RolloutGrad {
        objective: obj * inv,
        terminal: term * inv,
        z_pre: z * inv,
        z_prev: zz * inv,
        gradient,
    };
    if !out.objective.is_finite() {
        return Err(Error::Numeric {
            node: 0,
            op: "objective",
        });
    }
    Ok(out)
}

/// Rows `(traj_id, step, t, x0.., z, Z)`.
pub fn write_trajectories_csv(path: &Path, trajectories: &[Trajectory], schedule: &NoiseSchedule) -> Result<()> {
    let mut out = String::new();
    let d = trajectories.first().map_or(0, |t| t.dim);
    out.push_str("traj_id,step,t");
    for i in 0..d {
        out.push_str(&format!(",x{i}"));
    }
    out.push_str(",z,Z\n");
    for (id, tr) in trajectories.iter().enumerate() {
        for k in 0..tr.n_states() {
            out.push_str(&format!("{id},{k},{}", schedule.time(k)));
            for v in tr.state(k) {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{},{}\n", tr.z_pre_path[k], tr.z_prev_path[k]));
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::GmmSpec;

    fn gaussian_stack() -> DriftStack {
        let m = PretrainedModel::new(GmmSpec::standard_normal(1), NoiseSchedule::default()).unwrap();
        DriftStack::pretrained(Arc::new(m))
    }

    #[test]
    fn no_residual_means_zero_kl() {
        let tr = simulate(&gaussian_stack(), 20, 3).unwrap();
        assert!(tr.iter().all(|t| t.z_pre() == 0.0 && t.z_prev() == 0.0));
        let kl = pathwise_kl(&tr).unwrap();
        assert_eq!((kl.a1.mean, kl.a2.mean), (0.0, 0.0));
    }

    #[test]
    fn constant_shift_kl_is_exact() {
        let sch = NoiseSchedule::constant(1.0, 1.0, 50);
        let s = DriftStack::ornstein_uhlenbeck(0.0, 1, sch)
            .unwrap()
            .with_residual(Residual::constant(&[1.0]))
            .unwrap();
        let tr = simulate(&s, 8, 1).unwrap();
        for t in &tr {
            assert!((t.z_pre() - 0.5).abs() < 1e-12);
            assert!((t.z_prev() - 0.5).abs() < 1e-12);
        }
        assert!((pathwise_kl(&tr).unwrap().a1.mean - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_reproducible_and_matches_recorded_paths() {
        let s = gaussian_stack();
        let a = simulate(&s, 16, 9).unwrap();
        let b = simulate(&s, 16, 9).unwrap();
        assert_eq!(a, b);
        let c = sample(&s, 16, 9).unwrap();
        for (i, t) in a.iter().enumerate() {
            assert_eq!(t.terminal(), c.point(i));
            assert_eq!(t.n_states(), 51);
        }
    }

    #[test]
    fn constant_residual_gradient_is_horizon() {
        for horizon in [1.0, 0.5] {
            let sch = NoiseSchedule::constant(1.0, horizon, 20);
            let s = DriftStack::ornstein_uhlenbeck(0.0, 1, sch)
                .unwrap()
                .with_residual(Residual::constant(&[0.3]))
                .unwrap();
            let g = differentiable_rollout(&s, 4, 5, &LinearTerminal(vec![1.0]), 0.0, 0.0).unwrap();
            assert!((g.gradient.segment(1)[0] - horizon).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_residual_contributes_nothing() {
        let spec = MlpSpec::drift(1, &[8], crate::grad::Activation::Tanh, 4);
        let s = gaussian_stack().with_residual(Residual::mlp(spec, 1).unwrap()).unwrap();
        let g = differentiable_rollout(&s, 8, 2, &LinearTerminal(vec![1.0]), 0.3, 0.7).unwrap();
        assert_eq!(g.z_prev, 0.0);
        assert_eq!(g.z_pre, 0.0);
        assert!(g.gradient.norm() > 0.0);
    }

    #[test]
    fn blow_up_names_the_step() {
        let sch = NoiseSchedule::constant(1.0, 1.0, 50);
        let s = DriftStack::ornstein_uhlenbeck(-1e300, 1, sch).unwrap();
        match simulate(&s, 2, 0) {
            Err(Error::Simulation { step, .. }) => assert!(step >= 1),
            other => panic!("{other:?}"),
        }
    }
}
