//! Numerical verification suites. Each suite checks one property against an
//! independent oracle and reports a single [`Criterion`].

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng as _;

use crate::config::{ExperimentConfig, Method};
use crate::diffusion::{GmmSpec, NoiseSchedule, PretrainedModel};
use crate::error::{Error, Result};
use crate::eval::{self, FeynmanKacProbe, GridDensity, GridSpec};
use crate::experiment::{self, evaluate_record, run_method, EvalContext, EvalRow};
use crate::grad::{self, mlp_init, Activation, MlpSpec, ParamVector, TapeMlp};
use crate::planner::{optimize_control, ControlProblem, PlannerConfig};
use crate::rng::{self, Rng};
use crate::sde::{self, BumpTerminal, DriftStack, LinearTerminal, Residual, TerminalFn};
use crate::world::{Bump, RewardKind, World};

/// Outcome of one suite. Ungated criteria are diagnostics and never fail a run.
#[derive(Clone, Debug)]
pub struct Criterion {
    pub id: u32,
    pub name: &'static str,
    pub passed: bool,
    pub gated: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match (self.gated, self.passed) {
            (false, _) => "REPORT",
            (true, true) => "PASS",
            (true, false) => "FAIL",
        };
        write!(f, "{tag:<6} {:>2} {}: {} [{:.1} s]", self.id, self.name, self.detail, self.seconds)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Grad,
    Diffusion,
    PathKl,
    ProductForm,
    Calibration,
    Regret,
    Exploration,
    Support,
    Determinism,
    FeynmanKac,
}

impl Suite {
    pub const ALL: [Suite; 10] = [
        Suite::Grad,
        Suite::Diffusion,
        Suite::PathKl,
        Suite::ProductForm,
        Suite::Calibration,
        Suite::Regret,
        Suite::Exploration,
        Suite::Support,
        Suite::Determinism,
        Suite::FeynmanKac,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Grad => "grad",
            Suite::Diffusion => "diffusion",
            Suite::PathKl => "pathkl",
            Suite::ProductForm => "product_form",
            Suite::Calibration => "calibration",
            Suite::Regret => "regret",
            Suite::Exploration => "exploration",
            Suite::Support => "support",
            Suite::Determinism => "determinism",
            Suite::FeynmanKac => "feynman_kac",
        }
    }

    fn limit(self) -> Duration {
        let min = match self {
            Suite::Grad | Suite::Diffusion | Suite::PathKl => 1,
            Suite::Calibration => 5,
            Suite::ProductForm | Suite::Support | Suite::Determinism | Suite::FeynmanKac => 10,
            Suite::Regret => 30,
            Suite::Exploration => 120,
        };
        Duration::from_secs(60 * min)
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite `{s}`")))
    }
}

/// Where suites find bundled configs and may write scratch output.
#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub configs: PathBuf,
    pub scratch: PathBuf,
    /// Overrides the number of seeds of the multi-seed suites.
    pub seeds: Option<u64>,
}

struct Check {
    passed: bool,
    detail: String,
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<Criterion> {
    let t = Instant::now();
    let c = match suite {
        Suite::Grad => grad_fidelity()?,
        Suite::Diffusion => diffusion_fidelity()?,
        Suite::PathKl => pathwise_kl_oracle()?,
        Suite::ProductForm => product_form_oracle()?,
        Suite::Calibration => ucb_calibration(opts)?,
        Suite::Regret => regret_decay(opts)?,
        Suite::Exploration => exploration(opts)?,
        Suite::Support => support_preservation(opts)?,
        Suite::Determinism => determinism(opts)?,
        Suite::FeynmanKac => feynman_kac(opts)?,
    };
    let elapsed = t.elapsed();
    let in_time = elapsed <= suite.limit();
    let mut detail = c.detail;
    if !in_time {
        detail.push_str(&format!("; over the {} s limit", suite.limit().as_secs()));
    }
    Ok(Criterion {
        id: Suite::ALL.iter().position(|&s| s == suite).expect("listed") as u32 + 1,
        name: suite.name(),
        passed: c.passed && in_time,
        gated: suite != Suite::FeynmanKac,
        detail,
        seconds: elapsed.as_secs_f64(),
    })
}

fn load(opts: &VerifyOptions, file: &str) -> Result<ExperimentConfig> {
    Ok(ExperimentConfig::load(&opts.configs.join(file))?.0)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_err(g: &[f64], fd: &[f64]) -> f64 {
    let diff: Vec<f64> = g.iter().zip(fd).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(fd).max(norm(g)).max(1e-8)
}

fn perturbed_mlp(spec: &MlpSpec, r: &mut Rng, scale: f64) -> Result<ParamVector> {
    let mut p = mlp_init(spec, r.random())?;
    for v in p.values_mut() {
        *v += scale * rng::normal(r);
    }
    Ok(p)
}

fn central_differences(p: &ParamVector, h: f64, mut f: impl FnMut(&ParamVector) -> Result<f64>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(p.len());
    let mut q = p.clone();
    for i in 0..p.len() {
        let v = p.values()[i];
        q.values_mut()[i] = v + h;
        let fp = f(&q)?;
        q.values_mut()[i] = v - h;
        let fm = f(&q)?;
        q.values_mut()[i] = v;
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

fn mlp_loss_value(spec: &MlpSpec, p: &ParamVector, xs: &[Vec<f64>], ys: &[Vec<f64>], ts: &[f64]) -> Result<f64> {
    let mut s = 0.0;
    for ((x, y), &t) in xs.iter().zip(ys).zip(ts) {
        let out = grad::mlp_eval(spec, p, t, x)?;
        s += out.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(s / xs.len() as f64)
}

fn grad_fidelity() -> Result<Check> {
    let mut r = rng::rng_from(rng::stream_seed(0, "verify-grad"));
    let acts = [Activation::Tanh, Activation::Silu, Activation::Relu];
    let mut worst_mlp: f64 = 0.0;
    for c in 0..50 {
        let d_in = r.random_range(1..=3);
        let emb = if c % 2 == 0 { 0 } else { 4 };
        let mut widths = vec![d_in + emb];
        for _ in 0..r.random_range(1..=2) {
            widths.push(r.random_range(2..=8));
        }
        widths.push(r.random_range(1..=2));
        let spec = MlpSpec {
            layer_widths: widths,
            activation: acts[c % 3],
            time_embedding_dim: emb,
        };
        let p = perturbed_mlp(&spec, &mut r, 0.5)?;
        let n = 5;
        let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..d_in).map(|_| rng::normal(&mut r)).collect()).collect();
        let ys: Vec<Vec<f64>> = (0..n).map(|_| (0..spec.output_dim()).map(|_| rng::normal(&mut r)).collect()).collect();
        let ts: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let (_, g) = grad::gradient(&p, |tape, leaves| {
            let net = TapeMlp::from_leaves(&spec, leaves);
            let mut acc = None;
            for ((x, y), &t) in xs.iter().zip(&ys).zip(&ts) {
                let xv = tape.constant(x.clone());
                let out = net.forward(tape, t, xv);
                let yv = tape.constant(y.clone());
                let e = tape.sub(out, yv);
                let e = tape.sum_sq(e);
                acc = Some(match acc {
                    Some(a) => tape.add(a, e),
                    None => e,
                });
            }
            let total = acc.expect("nonempty batch");
            tape.scale(total, 1.0 / n as f64)
        })?;
        let fd = central_differences(&p, 1e-6, |q| mlp_loss_value(&spec, q, &xs, &ys, &ts))?;
        worst_mlp = worst_mlp.max(rel_err(g.values(), &fd));
    }

    let mut worst_roll: f64 = 0.0;
    for c in 0..50 {
        let d = 1 + c % 2;
        let k = r.random_range(1..=2);
        let means: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| 2.0 * rng::normal(&mut r)).collect()).collect();
        let gmm = GmmSpec::isotropic(vec![1.0 / k as f64; k], means, r.random_range(0.2..1.0));
        let model = Arc::new(PretrainedModel::new(gmm, NoiseSchedule::default().with_steps(10))?);
        let spec = MlpSpec::drift(d, &[6], Activation::Tanh, 4);
        let mut stack = DriftStack::pretrained(model);
        if c % 3 == 0 {
            let prev = perturbed_mlp(&spec, &mut r, 0.3)?;
            stack.push(Residual::Mlp {
                spec: spec.clone(),
                params: prev,
            })?;
        }
        let p = perturbed_mlp(&spec, &mut r, 0.3)?;
        stack.push(Residual::Mlp {
            spec: spec.clone(),
            params: p.clone(),
        })?;
        let terminal = BumpTerminal {
            center: (0..d).map(|_| rng::normal(&mut r)).collect(),
            width: r.random_range(0.5..2.0),
            height: 1.0,
        };
        let (alpha, beta) = (r.random_range(0.0..0.5), r.random_range(0.0..0.5));
        let seed = r.random();
        let n = 4;
        let g = sde::differentiable_rollout(&stack, n, seed, &terminal, alpha, beta)?.gradient;
        let mut probe = stack.clone();
        let fd = central_differences(&p, 1e-6, |q| {
            probe.last_residual_mut().expect("pushed").set_params(q.clone())?;
            Ok(sde::differentiable_rollout(&probe, n, seed, &terminal, alpha, beta)?.objective)
        })?;
        worst_roll = worst_roll.max(rel_err(g.values(), &fd));
    }
    Ok(Check {
        passed: worst_mlp <= 1e-4 && worst_roll <= 1e-3,
        detail: format!(
            "max relative error over 50 configurations: MLP loss {worst_mlp:.2e} (tol 1e-4), rollout objective {worst_roll:.2e} (tol 1e-3)"
        ),
    })
}

fn diffusion_fidelity() -> Result<Check> {
    let gmm = GmmSpec::isotropic(vec![0.4, 0.6], vec![vec![-2.0], vec![1.5]], 0.36);
    let model = Arc::new(PretrainedModel::new(gmm, NoiseSchedule::default())?);
    let grid = GridSpec::line(-5.0, 5.0, 256);
    let truth = GridDensity::analytic(&grid, model.data())?;
    let s = sde::sample(&DriftStack::pretrained(model), 100_000, rng::stream_seed(0, "verify-diffusion"))?;
    let (emp, out) = eval::empirical_density(s.iter(), &grid)?;
    let kl = eval::kl_divergence(&emp, &truth)?;
    Ok(Check {
        passed: kl < 0.02,
        detail: format!("two-component GMM, 1e5 samples, 50 steps: grid KL {kl:.4} (tol 0.02), out of grid {out:.1e}"),
    })
}

fn pathwise_kl_oracle() -> Result<Check> {
    let sigma0: f64 = 0.7;
    let sch = NoiseSchedule::constant(sigma0, 1.0, 50);
    let c = [0.3, -0.5];
    let stack = DriftStack::ornstein_uhlenbeck(1.0, 2, sch)?.with_residual(Residual::constant(&c))?;
    let kl = sde::sample_kl(&sde::sample(&stack, 2000, 11)?).a1;
    let exact = (c[0] * c[0] + c[1] * c[1]) * 1.0 / (2.0 * sigma0 * sigma0);
    let shift_ok = (kl.mean - exact).abs() <= 3.0 * kl.std_err + 1e-12 * exact;

    // P: dX = -b X dt + s dW, reference -a X. Same discrete recursion as the simulator.
    let (a, b, s) = (1.0, 2.0, 1.0);
    let n = 50;
    let sch = NoiseSchedule::constant(s, 1.0, n);
    let mut resid = Residual::affine_zero(1);
    resid.params_mut().segment_mut(0)[0] = -(b - a);
    let ou = DriftStack::ornstein_uhlenbeck(a, 1, sch)?.with_residual(resid)?;
    let est = sde::sample_kl(&sde::sample(&ou, 20_000, 12)?).a1;
    let dt = 1.0 / n as f64;
    let (mut m2, mut analytic) = (1.0, 0.0);
    for _ in 0..n {
        analytic += dt / (2.0 * s * s) * (b - a) * (b - a) * m2;
        m2 = (1.0 - b * dt) * (1.0 - b * dt) * m2 + s * s * dt;
    }
    let ou_ok = (est.mean - analytic).abs() <= 3.0 * est.std_err;
    Ok(Check {
        passed: shift_ok && ou_ok,
        detail: format!(
            "constant shift {:.6} vs {exact:.6} (SE {:.1e}); OU vs OU {:.5} vs {analytic:.5} (SE {:.1e})",
            kl.mean, kl.std_err, est.mean, est.std_err
        ),
    })
}

/// The single-stage planner used by the product-form and Feynman-Kac suites.
fn benchmark_planner() -> PlannerConfig {
    PlannerConfig {
        n_paths: 64,
        n_opt_steps: 600,
        learning_rate: 1e-2,
        final_lr_fraction: 0.05,
        hidden: vec![64, 64],
        ..Default::default()
    }
}

fn bump_benchmark() -> (GmmSpec, BumpTerminal) {
    (
        GmmSpec::isotropic(vec![0.6, 0.4], vec![vec![-1.5], vec![1.5]], 0.25),
        BumpTerminal {
            center: vec![1.5],
            width: 2.0,
            height: 1.0,
        },
    )
}

/// Returns `(model, pretrained stack, fine-tuned stack)`.
fn fine_tune_once(
    gmm: GmmSpec,
    terminal: Arc<dyn TerminalFn>,
    alpha: f64,
    beta: f64,
    cfg: &PlannerConfig,
) -> Result<(Arc<PretrainedModel>, DriftStack, DriftStack)> {
    let model = Arc::new(PretrainedModel::new(gmm, NoiseSchedule::default())?);
    let pre = DriftStack::pretrained(model.clone());
    let problem = ControlProblem {
        terminal,
        alpha,
        beta,
        reference: pre.clone(),
        greedy: false,
    };
    let (stack, _) = optimize_control(&problem, cfg)?.into_result()?;
    Ok((model, pre, stack))
}

/// TV between `10^5` fine-tuned samples and the grid target, with `p_prev = p_pre`.
pub fn single_stage_tv(gmm: GmmSpec, terminal: Arc<dyn TerminalFn>, cfg: &PlannerConfig) -> Result<f64> {
    let (alpha, beta) = (0.01, 0.01);
    let (model, _, stack) = fine_tune_once(gmm, terminal.clone(), alpha, beta, cfg)?;
    let grid = GridSpec::line(-5.0, 5.0, 512);
    let pre = GridDensity::analytic(&grid, model.data())?;
    let tilt: Vec<f64> = grid.centers().iter().map(|c| terminal.value(c)).collect();
    let target = eval::grid_target_density(&tilt, &pre, &pre, alpha, beta)?;
    let samples = sde::sample(&stack, 100_000, rng::stream_seed(cfg.seed, "evaluation"))?;
    let (emp, _) = eval::empirical_density(samples.iter(), &grid)?;
    eval::tv_distance(&emp, &target)
}

fn product_form_oracle() -> Result<Check> {
    let cfg = benchmark_planner();
    let (gmm, bump) = bump_benchmark();
    let tv_bump = single_stage_tv(gmm, Arc::new(bump), &cfg)?;
    let half = PlannerConfig {
        n_opt_steps: cfg.n_opt_steps / 2,
        ..cfg
    };
    let tv_gauss = single_stage_tv(GmmSpec::standard_normal(1), Arc::new(LinearTerminal(vec![0.02])), &half)?;
    Ok(Check {
        passed: tv_bump <= 0.10 && tv_gauss <= 0.05,
        detail: format!("alpha = beta = 0.01, 1e5 samples: TV bump {tv_bump:.4} (tol 0.10), Gaussian + linear {tv_gauss:.4} (tol 0.05)"),
    })
}

/// Uniform draws from the evaluation grid's box, restricted to the feasible set.
fn feasible_test_points(world: &World, grid: &GridSpec, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::rng_from(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let x: Vec<f64> = grid.lo.iter().zip(&grid.hi).map(|(l, h)| r.random_range(*l..*h)).collect();
        if world.is_feasible(&x) {
            out.push(x);
        }
    }
    out
}

fn ucb_calibration(opts: &VerifyOptions) -> Result<Check> {
    let cfg = load(opts, "calibration_linear.toml")?;
    let world = cfg.build_world()?;
    let record = run_method(&cfg, &world)?;
    if let Some(e) = record.failure {
        return Err(e);
    }
    let grid = cfg.evaluation.grid_for(world.dim())?;
    let pts = feasible_test_points(&world, &grid, 1000, rng::stream_seed(cfg.seeds.master, "calibration"));
    let mut fracs = Vec::new();
    for it in &record.iterations {
        let s = it.surrogate.as_ref().ok_or_else(|| Error::Config("UCB run without a surrogate".into()))?;
        let miss = pts.iter().filter(|x| (s.mean(x) - world.true_reward(x)).abs() > s.bonus(x)).count();
        fracs.push(miss as f64 / pts.len() as f64);
    }
    let shown: Vec<String> = fracs.iter().map(|f| format!("{f:.3}")).collect();
    Ok(Check {
        passed: fracs.len() == 4 && fracs.iter().all(|&f| f <= 0.07),
        detail: format!("miscoverage per iteration over 1000 feasible points: [{}] (tol 0.07)", shown.join(" ")),
    })
}

fn seeds_or(opts: &VerifyOptions, n: u64) -> u64 {
    opts.seeds.unwrap_or(n)
}

fn run_rows(cfg: &ExperimentConfig, world: &World, ctx: &EvalContext, seed: u64) -> Result<(Vec<EvalRow>, Vec<sde::SampleSet>)> {
    let mut c = cfg.clone();
    c.seeds.master = seed;
    let record = run_method(&c, world)?;
    if let Some(e) = record.failure {
        return Err(e);
    }
    evaluate_record(&record, world, ctx, seed)
}

fn regret_decay(opts: &VerifyOptions) -> Result<Check> {
    let cfg = load(opts, "regret_linear.toml")?;
    let world = cfg.build_world()?;
    let ctx = EvalContext::from_config(&cfg, &world)?;
    let jstar = ctx.comparator()?;
    let n = seeds_or(opts, 10);
    let (mut r4, mut r16) = (0.0, 0.0);
    for seed in 0..n {
        let (rows, _) = run_rows(&cfg, &world, &ctx, seed)?;
        let js: Vec<f64> = rows.iter().map(|r| r.j_alpha).collect();
        if js.len() < 16 {
            return Err(Error::Config("the regret config needs K = 16 iterations".into()));
        }
        let curve = eval::regret_curve(&js, jstar);
        r4 += curve[3].1 / n as f64;
        r16 += curve[15].1 / n as f64;
    }
    Ok(Check {
        passed: r16 < r4 && r16 < 0.6 * r4,
        detail: format!("{n} seeds: mean regret K=4 {r4:.4}, K=16 {r16:.4}, ratio {:.3} (tol < 0.6)", r16 / r4),
    })
}

/// The tallest bump and a radius of 1.6 widths around it.
fn high_bump(world: &World) -> Result<(Vec<f64>, f64)> {
    match &world.kind {
        RewardKind::MultiBump { bumps } => {
            let b: &Bump = bumps
                .iter()
                .max_by(|a, b| a.height.total_cmp(&b.height))
                .expect("validated nonempty");
            Ok((b.center.clone(), 1.6 * b.width))
        }
        _ => Err(Error::Config("the exploration suite needs a multi_bump world".into())),
    }
}

fn near(x: &[f64], c: &[f64], radius: f64) -> bool {
    x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() < radius
}

fn grid_mass_near(q: &GridDensity, c: &[f64], radius: f64) -> f64 {
    q.probs
        .iter()
        .enumerate()
        .filter(|(i, _)| near(&q.grid.center(*i), c, radius))
        .map(|(_, p)| p)
        .sum()
}

fn exploration(opts: &VerifyOptions) -> Result<Check> {
    let base = load(opts, "multi_bump.toml")?;
    let world = base.build_world()?;
    let ctx = EvalContext::from_config(&base, &world)?;
    let (center, radius) = high_bump(&world)?;
    // Brute-force oracle: the comparator must put its mass on the high bump.
    let (opt, _) = eval::comparator_optimum(&ctx.reward, &ctx.pre, ctx.alpha_eval)?;
    let (opt_train, _) = eval::comparator_optimum(&ctx.reward, &ctx.pre, base.method.alpha)?;
    let reachable = grid_mass_near(&opt, &center, radius).min(grid_mass_near(&opt_train, &center, radius));
    let methods = [
        Method::SeikoUcb,
        Method::SeikoBootstrap,
        Method::Greedy,
        Method::Nonadaptive,
        Method::Guidance,
    ];
    let n = seeds_or(opts, 10);
    let mut final_j = Vec::new();
    let mut found = Vec::new();
    for m in methods {
        let mut cfg = base.clone();
        cfg.method.name = m;
        let (mut j, mut hits) = (0.0, 0u64);
        for seed in 0..n {
            let (rows, sets) = run_rows(&cfg, &world, &ctx, seed)?;
            j += rows.last().expect("one iteration").j_alpha / n as f64;
            let last = sets.last().expect("one iteration");
            let frac = last.iter().filter(|x| near(x, &center, radius)).count() as f64 / last.len() as f64;
            hits += u64::from(frac >= 0.5);
        }
        final_j.push(j);
        found.push(hits);
    }
    let best_baseline = final_j[2..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ordering = final_j[0] > best_baseline && final_j[1] > best_baseline;
    // Discovery thresholds apply only once the oracle confirms the bump is optimal.
    let lo = (7 * n).div_ceil(10);
    let hi = (3 * n) / 10;
    let discovery = reachable >= 0.5 && found[..2].iter().all(|&h| h >= lo) && found[2..].iter().all(|&h| h <= hi);
    let parts: Vec<String> = methods
        .iter()
        .zip(final_j.iter().zip(&found))
        .map(|(m, (j, h))| format!("{} J {j:.3} found {h}/{n}", m.tag()))
        .collect();
    Ok(Check {
        passed: ordering && discovery,
        detail: format!(
            "{}; optimum mass on high bump {reachable:.3}; discovery >= {lo}/{n} vs <= {hi}/{n}",
            parts.join(", ")
        ),
    })
}

fn support_preservation(opts: &VerifyOptions) -> Result<Check> {
    let base = load(opts, "multi_bump.toml")?;
    let world = base.build_world()?;
    let ctx = EvalContext::from_config(&base, &world)?;
    let n = seeds_or(opts, 2);
    let frac = |m: Method| -> Result<Vec<f64>> {
        let mut cfg = base.clone();
        cfg.method.name = m;
        let mut out = Vec::new();
        for seed in 0..n {
            out.extend(run_rows(&cfg, &world, &ctx, seed)?.0.iter().map(|r| r.frac_infeasible));
        }
        Ok(out)
    };
    let reg = frac(Method::SeikoUcb)?;
    let abl = frac(Method::Unregularized)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let worst = reg.iter().cloned().fold(0.0, f64::max);
    let abl_worst = abl.iter().cloned().fold(0.0, f64::max);
    Ok(Check {
        passed: worst <= 0.01 && mean(&abl) > mean(&reg),
        detail: format!(
            "{n} seeds: alpha = {} worst iteration {worst:.4} (tol 0.01), mean {:.4}; alpha = 0 mean {:.4}, worst {abl_worst:.4}",
            base.method.alpha,
            mean(&reg),
            mean(&abl)
        ),
    })
}

fn read(p: &Path) -> Result<Vec<u8>> {
    std::fs::read(p).map_err(|e| Error::io(p, e))
}

fn determinism(opts: &VerifyOptions) -> Result<Check> {
    let path = opts.configs.join("benchmark_1d_bump.toml");
    let (cfg, src) = ExperimentConfig::load(&path)?;
    let a = opts.scratch.join("determinism_a");
    let b = opts.scratch.join("determinism_b");
    for dir in [&a, &b] {
        if dir.exists() {
            std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        experiment::cmd_run(&cfg, &src, dir)?;
    }
    let same_eval = read(&a.join("evaluation.csv"))? == read(&b.join("evaluation.csv"))?;
    let same_manifest = read(&a.join("manifest.json"))? == read(&b.join("manifest.json"))?;
    Ok(Check {
        passed: same_eval && same_manifest,
        detail: format!("evaluation.csv identical: {same_eval}; manifest hashes identical: {same_manifest}"),
    })
}

fn feynman_kac(opts: &VerifyOptions) -> Result<Check> {
    let _ = opts;
    let (alpha, beta) = (0.01, 0.01);
    let (gmm, bump) = bump_benchmark();
    let tilt: Arc<dyn TerminalFn> = Arc::new(bump);
    let (_, pre, tuned) = fine_tune_once(gmm, tilt.clone(), alpha, beta, &benchmark_planner())?;
    let n_steps = pre.schedule().n_steps;
    let seed = rng::stream_seed(0, "feynman-kac");

    let x_end = [0.3];
    let end = eval::feynman_kac_value(
        &FeynmanKacProbe {
            step: n_steps,
            x: x_end.to_vec(),
            n_paths: 64,
            seed,
        },
        tilt.as_ref(),
        &pre,
        &pre,
        alpha,
        beta,
    )?;
    let boundary = end.log_value == tilt.value(&x_end) / (alpha + beta) && end.rel_std_err == 0.0;

    // Probes whose weights degenerate are reported separately.
    let (mut dev, mut signal, mut kept, mut total) = (0.0, 0.0, 0, 0);
    for k in [10, 20, 30, 40] {
        for x in [-2.0, -1.0, 0.0, 1.0, 2.0] {
            let probe = FeynmanKacProbe {
                step: k,
                x: vec![x],
                n_paths: 10_000,
                seed,
            };
            let (u_star, ess) = eval::feynman_kac_drift(&probe, 0.05, tilt.as_ref(), &pre, &pre, alpha, beta)?;
            total += 1;
            if ess < 10.0 {
                continue;
            }
            let u = tuned.drift_at_step(k, &[x]);
            let f = pre.drift_at_step(k, &[x]);
            dev += (u[0] - u_star[0]).abs();
            signal += (u_star[0] - f[0]).abs();
            kept += 1;
        }
    }
    Ok(Check {
        passed: boundary,
        detail: format!(
            "t = T exact: {boundary}; {kept} of {total} probes with ESS >= 10: mean |u - u*| {:.4}, mean |u* - f_pre| {:.4}, ratio {:.3}",
            dev / kept.max(1) as f64,
            signal / kept.max(1) as f64,
            dev / signal
        ),
    })
}
