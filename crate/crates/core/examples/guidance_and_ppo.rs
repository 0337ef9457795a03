//! The two non-SEIKO baselines on the bundled 1D benchmark: reward guidance
//! at several levels, and KL-penalized clipped PPO.
//!
//! Usage: `guidance_and_ppo [config]`

use seiko::config::{ExperimentConfig, Method};
use seiko::experiment::{evaluate_record, run_method, EvalContext};

fn main() -> seiko::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "configs/benchmark_1d_bump.toml".into());
    let (base, _) = ExperimentConfig::load(path.as_ref())?;
    let world = base.build_world()?;
    let ctx = EvalContext::from_config(&base, &world)?;
    for gamma in [0.0, 0.5, 1.0, 2.0] {
        let mut cfg = base.clone();
        cfg.method.name = Method::Guidance;
        cfg.method.gamma = gamma;
        let (rows, _) = evaluate_record(&run_method(&cfg, &world)?, &world, &ctx, 0)?;
        let r = &rows[0];
        println!("guidance gamma {gamma}: mean reward {:.4}, KL {:.4}", r.mean_reward, r.kl_grid);
    }
    let mut cfg = base.clone();
    cfg.method.name = Method::Ppo;
    cfg.method.ppo.batch_size = 32;
    let record = run_method(&cfg, &world)?;
    let (rows, _) = evaluate_record(&record, &world, &ctx, 0)?;
    for r in &rows {
        println!("ppo iteration {}: mean reward {:.4}, KL {:.4}", r.iteration, r.mean_reward, r.kl_grid);
    }
    Ok(())
}
