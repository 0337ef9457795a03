//! Girsanov path KL accumulated during simulation, against closed forms: a
//! constant drift shift and two Ornstein-Uhlenbeck processes.

use seiko::diffusion::NoiseSchedule;
use seiko::sde::{self, DriftStack, Residual};

fn main() -> seiko::Result<()> {
    let sigma = 0.5;
    let sch = NoiseSchedule::constant(sigma, 1.0, 50);
    for c in [0.1, 0.5, 1.0] {
        let stack = DriftStack::ornstein_uhlenbeck(1.0, 1, sch)?.with_residual(Residual::constant(&[c]))?;
        let kl = sde::sample_kl(&sde::sample(&stack, 1000, 1)?).a1;
        println!("shift {c}: {:.6} (exact {:.6})", kl.mean, c * c / (2.0 * sigma * sigma));
    }

    // dX = -b X dt + dW against the reference -a X.
    let (a, n) = (1.0, 50);
    let sch = NoiseSchedule::constant(1.0, 1.0, n);
    for b in [0.5, 2.0, 4.0] {
        let mut r = Residual::affine_zero(1);
        r.params_mut().segment_mut(0)[0] = a - b;
        let stack = DriftStack::ornstein_uhlenbeck(a, 1, sch)?.with_residual(r)?;
        let kl = sde::sample_kl(&sde::sample(&stack, 20_000, 2)?).a1;
        let dt = 1.0 / n as f64;
        let (mut m2, mut exact) = (1.0, 0.0);
        for _ in 0..n {
            exact += dt / 2.0 * (b - a) * (b - a) * m2;
            m2 = (1.0 - b * dt) * (1.0 - b * dt) * m2 + dt;
        }
        println!("OU rate {b} vs {a}: {:.5} +- {:.5} (recursion {exact:.5})", kl.mean, kl.std_err);
    }
    Ok(())
}
