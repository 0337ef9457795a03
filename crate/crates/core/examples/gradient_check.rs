//! Pathwise gradient of the control objective against central differences
//! along random parameter directions.

use std::sync::Arc;

use seiko::diffusion::{GmmSpec, NoiseSchedule, PretrainedModel};
use seiko::grad::{mlp_init, Activation, MlpSpec};
use seiko::rng;
use seiko::sde::{self, BumpTerminal, DriftStack, Residual};

fn main() -> seiko::Result<()> {
    let model = Arc::new(PretrainedModel::new(
        GmmSpec::isotropic(vec![0.6, 0.4], vec![vec![-1.5], vec![1.5]], 0.25),
        NoiseSchedule::default(),
    )?);
    let spec = MlpSpec::drift(1, &[16, 16], Activation::Tanh, 8);
    let mut params = mlp_init(&spec, 1)?;
    let mut r = rng::rng_from(2);
    for v in params.values_mut() {
        *v += 0.1 * rng::normal(&mut r);
    }
    let stack = DriftStack::pretrained(model).with_residual(Residual::Mlp {
        spec: spec.clone(),
        params: params.clone(),
    })?;
    let terminal = BumpTerminal {
        center: vec![1.5],
        width: 1.0,
        height: 1.0,
    };
    let (alpha, beta, n, seed) = (0.05, 0.02, 16, 3);
    let g = sde::differentiable_rollout(&stack, n, seed, &terminal, alpha, beta)?;
    println!("objective {:.6} = terminal {:.6} - alpha z_pre {:.6} - beta z_prev {:.6}", g.objective, g.terminal, g.z_pre, g.z_prev);
    for k in 0..5 {
        let dir: Vec<f64> = (0..params.len()).map(|_| rng::normal(&mut r)).collect();
        let at = |h: f64| -> seiko::Result<f64> {
            let mut p = params.clone();
            for (v, d) in p.values_mut().iter_mut().zip(&dir) {
                *v += h * d;
            }
            let mut s = stack.clone();
            s.last_residual_mut().expect("one residual").set_params(p)?;
            Ok(sde::differentiable_rollout(&s, n, seed, &terminal, alpha, beta)?.objective)
        };
        let h = 1e-5;
        let fd = (at(h)? - at(-h)?) / (2.0 * h);
        let an: f64 = g.gradient.values().iter().zip(&dir).map(|(a, b)| a * b).sum();
        println!("direction {k}: analytic {an:+.8e}, finite difference {fd:+.8e}, relative error {:.1e}", (an - fd).abs() / fd.abs());
    }
    Ok(())
}
