//! Runs several methods on one configured world and prints the final value
//! per method and seed.
//!
//! Usage: `seiko_online <config> [n_seeds] [methods,...]`

use std::time::Instant;

use seiko::config::{ExperimentConfig, Method};
use seiko::experiment::{evaluate_record, run_method, EvalContext};

fn parse_method(s: &str) -> Method {
    toml::Value::String(s.into()).try_into().expect("known method name")
}

fn main() -> seiko::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let path = args.get(1).map_or("configs/multi_bump.toml", String::as_str);
    let n_seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2);
    let methods: Vec<Method> = args
        .get(3)
        .map_or("seiko-ucb,seiko-bootstrap,greedy,nonadaptive,guidance", String::as_str)
        .split(',')
        .map(parse_method)
        .collect();
    let (base, _) = ExperimentConfig::load(path.as_ref())?;
    let world = base.build_world()?;
    for m in methods {
        for seed in 0..n_seeds {
            let mut cfg = base.clone();
            cfg.method.name = m;
            cfg.seeds.master = seed;
            let ctx = EvalContext::from_config(&cfg, &world)?;
            let t = Instant::now();
            let record = run_method(&cfg, &world)?;
            let (rows, sets) = evaluate_record(&record, &world, &ctx, seed)?;
            let last = sets.last().expect("at least one iteration");
            let high = last.iter().filter(|x| (x[0] - 2.2).abs() < 0.4).count() as f64 / last.len() as f64;
            let js: Vec<String> = rows.iter().map(|r| format!("{:.3}", r.j_alpha)).collect();
            let inf: Vec<String> = rows.iter().map(|r| format!("{:.3}", r.frac_infeasible)).collect();
            println!(
                "{:>16} seed {seed}: J = [{}] infeasible = [{}] near high bump {high:.3} ({:.0?})",
                m.tag(),
                js.join(" "),
                inf.join(" "),
                t.elapsed()
            );
            if let Some(e) = &record.failure {
                println!("    failure: {e}");
            }
        }
    }
    Ok(())
}
