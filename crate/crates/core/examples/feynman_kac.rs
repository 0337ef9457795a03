//! Compares a fine-tuned drift with the drift implied by the value function
//! `w(t, x) = E[exp(r(x_T) / (alpha + beta)) | x_t = x]`, estimated by Monte
//! Carlo under the pretrained dynamics.
//!
//! Usage: `feynman_kac [n_paths]`

use std::sync::Arc;

use seiko::diffusion::{GmmSpec, NoiseSchedule, PretrainedModel};
use seiko::eval::{feynman_kac_drift, FeynmanKacProbe};
use seiko::planner::{optimize_control, ControlProblem, PlannerConfig};
use seiko::sde::{BumpTerminal, DriftStack, TerminalFn};

fn main() -> seiko::Result<()> {
    let n_paths: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10_000);
    let (alpha, beta) = (0.01, 0.01);
    let gmm = GmmSpec::isotropic(vec![0.6, 0.4], vec![vec![-1.5], vec![1.5]], 0.25);
    let tilt: Arc<dyn TerminalFn> = Arc::new(BumpTerminal {
        center: vec![1.5],
        width: 2.0,
        height: 1.0,
    });
    let pre = DriftStack::pretrained(Arc::new(PretrainedModel::new(gmm, NoiseSchedule::default())?));
    let problem = ControlProblem {
        terminal: tilt.clone(),
        alpha,
        beta,
        reference: pre.clone(),
        greedy: false,
    };
    let cfg = PlannerConfig {
        n_paths: 64,
        n_opt_steps: 600,
        learning_rate: 1e-2,
        final_lr_fraction: 0.05,
        hidden: vec![64, 64],
        ..Default::default()
    };
    let (tuned, _) = optimize_control(&problem, &cfg)?.into_result()?;
    println!("{:>5} {:>6} {:>10} {:>10} {:>10} {:>8}", "step", "x", "f_pre", "u*", "u", "ESS");
    for k in [5, 10, 20, 30, 40, 45] {
        for x in [-2.0, -1.0, 0.0, 1.0, 2.0] {
            let probe = FeynmanKacProbe {
                step: k,
                x: vec![x],
                n_paths,
                seed: 1,
            };
            let (u_star, ess) = feynman_kac_drift(&probe, 0.05, tilt.as_ref(), &pre, &pre, alpha, beta)?;
            let f = pre.drift_at_step(k, &[x]);
            let u = tuned.drift_at_step(k, &[x]);
            println!("{k:>5} {x:>6.1} {:>10.4} {:>10.4} {:>10.4} {ess:>8.1}", f[0], u_star[0], u[0]);
        }
    }
    Ok(())
}
