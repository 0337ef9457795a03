//! Ridge regression on features with the elliptical confidence bonus, fitted
//! on noisy feedback from pretrained samples.

use std::sync::Arc;

use seiko::diffusion::{GmmSpec, NoiseSchedule, PretrainedModel};
use seiko::features::{FeatureKind, FeatureSpec};
use seiko::reward_model::{c1_of_delta, fit_ridge};
use seiko::sde::{self, DriftStack};
use seiko::world::{FeedbackChannel, FeedbackDataset, RewardKind, World};

fn main() -> seiko::Result<()> {
    let features = FeatureSpec {
        kind: FeatureKind::Rbf {
            lo: -2.5,
            hi: 3.5,
            per_axis: 8,
            width: 0.5,
        },
        norm_bound: 1.0,
    };
    let theta = vec![0.0, 0.0, 0.0, 0.3155, 0.0, 0.9464, 0.0, 0.0];
    let model = Arc::new(PretrainedModel::new(GmmSpec::standard_normal(1), NoiseSchedule::default())?);
    let world = World::new(model.clone(), RewardKind::LinearInFeatures { features, theta }, 1e-3, 0.1)?;
    let map = world.feature_map().expect("linear world has features");
    let mut channel = FeedbackChannel::new(0.1, 200, 1);
    let mut data = FeedbackDataset::new();
    let xs = sde::sample(&DriftStack::pretrained(model), 200, 2)?;
    let ys = channel.query_feedback(&world, xs.points.chunks_exact(1))?;
    for (x, y) in xs.iter().zip(ys) {
        data.push(x.to_vec(), y, 1);
    }
    let c1 = c1_of_delta(0.05, 1.0, 1.0, 0.1, map.dim(), data.len());
    let m = fit_ridge(data.entries(), map, 1.0, c1, Some(0.05))?;
    println!("C1 = {c1:.3}, {} observations", data.len());
    println!("{:>6} {:>8} {:>8} {:>8}", "x", "r", "r_hat", "bonus");
    for i in 0..=12 {
        let x = [-3.0 + 0.5 * i as f64];
        println!("{:>6.2} {:>8.4} {:>8.4} {:>8.4}", x[0], world.true_reward(&x), m.predict(&x), m.ucb_bonus(&x));
    }
    Ok(())
}
