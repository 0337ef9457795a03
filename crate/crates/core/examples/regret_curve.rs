//! Cesaro regret of SEIKO-UCB on a linear-realizable landscape, averaged over
//! seeds.
//!
//! Usage: `regret_curve [config] [n_seeds]`

use std::time::Instant;

use seiko::config::ExperimentConfig;
use seiko::eval::regret_curve;
use seiko::experiment::{evaluate_record, run_method, EvalContext};

fn main() -> seiko::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let path = args.get(1).map_or("configs/regret_linear.toml", String::as_str);
    let n_seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    let (base, _) = ExperimentConfig::load(path.as_ref())?;
    let world = base.build_world()?;
    let ctx = EvalContext::from_config(&base, &world)?;
    let jstar = ctx.comparator()?;
    println!("J*(alpha = {}) = {jstar:.4}", ctx.alpha_eval);
    let mut mean: Vec<f64> = Vec::new();
    for seed in 0..n_seeds {
        let mut cfg = base.clone();
        cfg.seeds.master = seed;
        let t = Instant::now();
        let record = run_method(&cfg, &world)?;
        let (rows, _) = evaluate_record(&record, &world, &ctx, seed)?;
        let js: Vec<f64> = rows.iter().map(|r| r.j_alpha).collect();
        let curve = regret_curve(&js, jstar);
        if mean.is_empty() {
            mean = vec![0.0; curve.len()];
        }
        for (m, (_, r)) in mean.iter_mut().zip(&curve) {
            *m += r / n_seeds as f64;
        }
        let s: Vec<String> = js.iter().map(|j| format!("{j:.3}")).collect();
        println!("seed {seed}: J = [{}] ({:.0?})", s.join(" "), t.elapsed());
    }
    for (k, r) in mean.iter().enumerate() {
        println!("K = {:>2}: mean regret {r:.4}", k + 1);
    }
    if mean.len() >= 16 {
        println!("R(16) / R(4) = {:.3}", mean[15] / mean[3]);
    }
    Ok(())
}
