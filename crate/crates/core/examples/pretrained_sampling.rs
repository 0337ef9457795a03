//! Samples a two-dimensional Gaussian mixture with the analytic pretrained
//! drift and compares the histogram with the exact density.
//!
//! Usage: `pretrained_sampling [n_samples] [trajectory_csv]`

use std::sync::Arc;

use seiko::diffusion::{GmmSpec, NoiseSchedule, PretrainedModel};
use seiko::eval::{self, GridDensity, GridSpec};
use seiko::sde::{self, DriftStack};

fn main() -> seiko::Result<()> {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(50_000);
    let gmm = GmmSpec::isotropic(
        vec![0.5, 0.3, 0.2],
        vec![vec![-1.5, 0.0], vec![1.5, 1.0], vec![0.5, -1.5]],
        0.2,
    );
    let model = Arc::new(PretrainedModel::new(gmm, NoiseSchedule::default())?);
    let stack = DriftStack::pretrained(model.clone());
    let samples = sde::sample(&stack, n, 1)?;
    let grid = GridSpec {
        lo: vec![-4.0, -4.0],
        hi: vec![4.0, 4.0],
        cells: vec![64, 64],
    };
    let truth = GridDensity::analytic(&grid, model.data())?;
    let (emp, out) = eval::empirical_density(samples.iter(), &grid)?;
    println!("{n} samples: grid KL {:.4}, TV {:.4}, out of grid {out:.1e}", eval::kl_divergence(&emp, &truth)?, eval::tv_distance(&emp, &truth)?);
    println!("mean: empirical {:?}, exact {:?}", emp.mean(), truth.mean());
    if let Some(path) = std::env::args().nth(2) {
        let paths = sde::simulate(&stack, 16, 2)?;
        sde::write_trajectories_csv(path.as_ref(), &paths, stack.schedule())?;
        println!("wrote 16 trajectories to {path}");
    }
    Ok(())
}
