//! Command-line runner. Exit codes: 0 success, 2 invalid input, 3 runtime
//! failure (including failed verification gates).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use seiko::config::ExperimentConfig;
use seiko::verify::{self, Suite, VerifyOptions};
use seiko::{experiment, Error};

#[derive(Parser)]
#[command(name = "seiko", version, about = "Online fine-tuning of diffusion models with optimistic reward surrogates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured method and write its run directory.
    Run {
        config: PathBuf,
        /// Output directory; defaults to $SEIKO_OUTPUT_DIR/<config stem>, else runs/<config stem>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run verification suites: grad, diffusion, pathkl, product_form, calibration,
    /// regret, exploration, support, determinism, feynman_kac, or all.
    Verify {
        #[arg(default_value = "all")]
        suites: Vec<String>,
        /// Directory holding the bundled configs.
        #[arg(long, default_value = "configs")]
        configs: PathBuf,
        /// Scratch directory for suites that write runs.
        #[arg(long)]
        scratch: Option<PathBuf>,
        /// Seed count for the multi-seed suites.
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// Emit plot-ready CSVs for a run directory.
    Plot { run: PathBuf },
}

fn output_root() -> PathBuf {
    std::env::var_os("SEIKO_OUTPUT_DIR").map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = std::env::var("SEIKO_THREADS").ok().and_then(|s| s.parse().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: SEIKO_THREADS: {e}");
            return ExitCode::from(2);
        }
    }
    match Cli::parse().command {
        Command::Run { config, out } => {
            let (cfg, src) = match ExperimentConfig::load(&config) {
                Ok(v) => v,
                Err(e) => return fail(&e),
            };
            let stem = config.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
            let out = out.unwrap_or_else(|| output_root().join(stem));
            match experiment::cmd_run(&cfg, &src, &out) {
                Ok(rows) => {
                    for r in &rows {
                        println!(
                            "iteration {}: J_alpha {:.4}, mean reward {:.4}, KL {:.4}, infeasible {:.4}",
                            r.iteration, r.j_alpha, r.mean_reward, r.kl_grid, r.frac_infeasible
                        );
                    }
                    println!("wrote {}", out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Command::Verify {
            suites,
            configs,
            scratch,
            seeds,
        } => {
            let mut selected = Vec::new();
            for s in &suites {
                if s == "all" {
                    selected.extend(Suite::ALL);
                    continue;
                }
                match s.parse::<Suite>() {
                    Ok(x) => selected.push(x),
                    Err(e) => return fail(&e),
                }
            }
            let opts = VerifyOptions {
                configs,
                scratch: scratch.unwrap_or_else(|| output_root().join("verify")),
                seeds,
            };
            let mut ok = true;
            for s in selected {
                match verify::run_suite(s, &opts) {
                    Ok(c) => {
                        println!("{c}");
                        ok &= c.passed || !c.gated;
                    }
                    Err(e) => {
                        println!("FAIL      {}: {e}", s.name());
                        ok = false;
                    }
                }
            }
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(3)
            }
        }
        Command::Plot { run } => match experiment::cmd_plot(&run) {
            Ok(files) => {
                for f in files {
                    println!("wrote {}", f.display());
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
    }
}
