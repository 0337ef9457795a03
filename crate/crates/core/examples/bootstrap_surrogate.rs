//! Bootstrap ensemble of small regressors: the spread between heads grows
//! away from the data, which is what the optimistic maximum exploits.

use std::sync::Arc;

use seiko::diffusion::{GmmSpec, NoiseSchedule, PretrainedModel};
use seiko::grad::{Activation, MlpSpec};
use seiko::reward_model::{fit_bootstrap, BootstrapTrain};
use seiko::sde::{self, DriftStack};
use seiko::world::{Bump, FeedbackChannel, FeedbackDataset, RewardKind, World};

fn main() -> seiko::Result<()> {
    let model = Arc::new(PretrainedModel::new(GmmSpec::isotropic(vec![1.0], vec![vec![0.0]], 0.25), NoiseSchedule::default())?);
    let bumps = vec![
        Bump {
            center: vec![1.0],
            width: 0.6,
            height: 0.5,
        },
        Bump {
            center: vec![2.2],
            width: 0.25,
            height: 1.0,
        },
    ];
    let world = World::new(model.clone(), RewardKind::MultiBump { bumps }, 1e-6, 0.1)?;
    let mut channel = FeedbackChannel::new(0.1, 500, 1);
    let xs = sde::sample(&DriftStack::pretrained(model), 500, 2)?;
    let ys = channel.query_feedback(&world, xs.points.chunks_exact(1))?;
    let mut data = FeedbackDataset::new();
    for (x, y) in xs.iter().zip(ys) {
        data.push(x.to_vec(), y, 1);
    }
    let train = BootstrapTrain {
        prior_scale: 1.0,
        output_range: Some([0.0, 1.0]),
        ..Default::default()
    };
    let spec = MlpSpec::regressor(1, &[32, 32], Activation::Relu);
    let ens = fit_bootstrap(&data.up_to(1), &spec, 8, &train, 3)?;
    println!("{:>6} {:>8} {:>8} {:>8}", "x", "r", "mean", "max");
    for i in 0..=14 {
        let x = [-1.0 + 0.25 * i as f64];
        println!("{:>6.2} {:>8.4} {:>8.4} {:>8.4}", x[0], world.true_reward(&x), ens.mean(&x), ens.max(&x));
    }
    Ok(())
}
