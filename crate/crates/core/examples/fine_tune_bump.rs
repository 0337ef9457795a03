//! Single-stage fine-tuning against a known terminal reward, compared with the
//! product-form target on a grid.

use std::sync::Arc;
use std::time::Instant;

use seiko::diffusion::{GmmSpec, NoiseSchedule, PretrainedModel};
use seiko::eval::{self, GridDensity, GridSpec};
use seiko::planner::{optimize_control, ControlProblem, PlannerConfig};
use seiko::sde::{self, BumpTerminal, DriftStack, LinearTerminal, TerminalFn};

fn run(name: &str, gmm: GmmSpec, terminal: Arc<dyn TerminalFn>, cfg: &PlannerConfig) -> seiko::Result<()> {
    let (alpha, beta) = (0.01, 0.01);
    let model = Arc::new(PretrainedModel::new(gmm, NoiseSchedule::default())?);
    let problem = ControlProblem {
        terminal: terminal.clone(),
        alpha,
        beta,
        reference: DriftStack::pretrained(model.clone()),
        greedy: false,
    };
    let t0 = Instant::now();
    let (stack, curve) = optimize_control(&problem, cfg)?.into_result()?;
    let train = t0.elapsed();
    let grid = GridSpec::line(-5.0, 5.0, 512);
    let pre = GridDensity::analytic(&grid, model.data())?;
    let tilt: Vec<f64> = grid.centers().iter().map(|c| terminal.value(c)).collect();
    let target = eval::grid_target_density(&tilt, &pre, &pre, alpha, beta)?;
    let samples = sde::sample(&stack, 100_000, 99)?;
    let (emp, out) = eval::empirical_density(samples.iter(), &grid)?;
    let last = curve.rows.last().map(|r| r.objective).unwrap_or(f64::NAN);
    println!(
        "{name}: TV = {:.4}, out of grid = {out:.1e}, final objective = {last:.4}, train {:.1?}, total {:.1?}",
        eval::tv_distance(&emp, &target)?,
        train,
        t0.elapsed()
    );
    println!("  target mean {:?}, empirical mean {:?}", target.mean(), emp.mean());
    Ok(())
}

fn main() -> seiko::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let lr: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1e-2);
    let cfg = PlannerConfig {
        n_paths: 64,
        n_opt_steps: steps,
        learning_rate: lr,
        final_lr_fraction: std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(1.0),
        hidden: vec![64, 64],
        ..Default::default()
    };
    run(
        "gaussian + linear",
        GmmSpec::standard_normal(1),
        Arc::new(LinearTerminal(vec![0.02])),
        &PlannerConfig { n_opt_steps: steps / 2, ..cfg.clone() },
    )?;
    run(
        "bump",
        GmmSpec::isotropic(vec![0.6, 0.4], vec![vec![-1.5], vec![1.5]], 0.25),
        Arc::new(BumpTerminal {
            center: vec![1.5],
            width: 2.0,
            height: 1.0,
        }),
        &cfg,
    )
}
