//! Running a configured method end to end, evaluating every iterate and
//! persisting the run directory.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.toml          verbatim copy of the input
//! evaluation.csv       one row per iteration
//! feedback.csv         every queried point and its noisy reward
//! iter_001/samples.csv          evaluation samples from p^(1)
//! iter_001/training_curve.csv
//! iter_001/surrogate.bin        when the method fits one
//! manifest.json        seeds, version and SHA-256 of every file above
//! ```
//!
//! [`cmd_plot`] adds `training_curves.csv`, `regret_curve.csv` and
//! `density_overlay.csv` next to these.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Method};
use crate::error::{Error, Result};
use crate::eval::{self, GridDensity, GridSpec};
use crate::online::{self, RunRecord};
use crate::reward_model::RewardSurrogate;
use crate::rng;
use crate::sde::{self, SampleSet};
use crate::world::World;

/// Ground truth shared by every evaluated iterate of one world.
#[derive(Clone, Debug)]
pub struct EvalContext {
    pub grid: GridSpec,
    pub pre: GridDensity,
    pub reward: Vec<f64>,
    pub alpha_eval: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl EvalContext {
    pub fn new(world: &World, grid: GridSpec, alpha_eval: f64, n_samples: usize, seed: u64) -> Result<Self> {
        let pre = GridDensity::analytic(&grid, world.model.data())?;
        let reward = eval::reward_on_grid(world, &grid);
        Ok(Self {
            grid,
            pre,
            reward,
            alpha_eval,
            n_samples,
            seed,
        })
    }

    pub fn from_config(cfg: &ExperimentConfig, world: &World) -> Result<Self> {
        let grid = cfg.evaluation.grid_for(world.dim())?;
        Self::new(world, grid, cfg.evaluation.alpha_eval, cfg.evaluation.n_samples, cfg.evaluation_seed())
    }

    /// `J_alpha_eval(pi*)`.
    pub fn comparator(&self) -> Result<f64> {
        Ok(eval::comparator_optimum(&self.reward, &self.pre, self.alpha_eval)?.1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub seed: u64,
    pub iteration: usize,
    pub mean_reward: f64,
    pub kl_grid: f64,
    pub kl_pathwise: f64,
    #[serde(rename = "J_alpha")]
    pub j_alpha: f64,
    pub diversity: f64,
    pub frac_infeasible: f64,
    /// Penalty weights the planner used at this iteration.
    pub alpha: f64,
    pub beta: f64,
    /// Empty when the method has no product-form target.
    #[serde(rename = "tv_to_target")]
    pub tv_target: Option<f64>,
}

/// Terminal tilt the planner optimized at one iteration.
fn tilt_on_grid(s: &RewardSurrogate, optimistic: bool, grid: &GridSpec) -> Vec<f64> {
    grid.centers()
        .iter()
        .map(|c| if optimistic { s.optimistic_reward(c) } else { s.mean(c) })
        .collect()
}

/// Evaluates `p^(i)` for every completed iteration. Samples are returned for persistence.
fn tilts_optimistically(method: &str) -> bool {
    matches!(method, "seiko-ucb" | "seiko-bootstrap" | "unregularized")
}

/// Whether the method's iterates have a product-form target on the grid.
fn has_target(method: &str) -> bool {
    !matches!(method, "guidance" | "ppo" | "unregularized")
}

pub fn evaluate_record(record: &RunRecord, world: &World, ctx: &EvalContext, seed: u64) -> Result<(Vec<EvalRow>, Vec<SampleSet>)> {
    let (rows, sets, failure) = evaluate_partial(record, world, ctx, seed);
    match failure {
        Some(e) => Err(e),
        None => Ok((rows, sets)),
    }
}

/// Like [`evaluate_record`], but keeps the iterations evaluated before the
/// first failure.
pub fn evaluate_partial(record: &RunRecord, world: &World, ctx: &EvalContext, seed: u64) -> (Vec<EvalRow>, Vec<SampleSet>, Option<Error>) {
    let mut rows = Vec::new();
    let mut sets = Vec::new();
    let failure = evaluate_into(record, world, ctx, seed, &mut rows, &mut sets).err();
    (rows, sets, failure)
}

fn evaluate_into(
    record: &RunRecord,
    world: &World,
    ctx: &EvalContext,
    seed: u64,
    rows: &mut Vec<EvalRow>,
    sets: &mut Vec<SampleSet>,
) -> Result<()> {
    let optimistic = tilts_optimistically(&record.method);
    let has_target = has_target(&record.method);
    let mut target = ctx.pre.clone();
    for it in &record.iterations {
        let samples = sde::sample(&it.stack, ctx.n_samples, rng::derive_seed(ctx.seed, it.iteration as u64))?;
        let v = eval::estimate_value(&samples, world, &ctx.pre, ctx.alpha_eval, true)?;
        let tv_target = match (&it.surrogate, has_target) {
            (Some(s), true) => {
                let tilt = tilt_on_grid(s, optimistic, &ctx.grid);
                target = eval::grid_target_density(&tilt, &target, &ctx.pre, it.alpha, it.beta)?;
                let (emp, _) = eval::empirical_density(samples.iter(), &ctx.grid)?;
                Some(eval::tv_distance(&emp, &target)?)
            }
            _ => None,
        };
        rows.push(EvalRow {
            method: record.method.clone(),
            seed,
            iteration: it.iteration,
            mean_reward: v.mean_reward,
            kl_grid: v.kl_grid,
            kl_pathwise: v.kl_pathwise.unwrap_or(f64::NAN),
            j_alpha: v.j_alpha,
            diversity: v.diversity,
            frac_infeasible: v.frac_infeasible,
            alpha: it.alpha,
            beta: it.beta,
            tv_target,
        });
        sets.push(samples);
    }
    Ok(())
}

/// Dispatches on the configured method. The channel is created here and
/// nowhere else.
pub fn run_method(cfg: &ExperimentConfig, world: &World) -> Result<RunRecord> {
    let sc = cfg.seiko_config();
    let mut channel = online::channel_for(&sc, world);
    match cfg.method.name {
        Method::SeikoUcb | Method::SeikoBootstrap => online::run_seiko(&sc, world, &mut channel),
        Method::Greedy => online::run_greedy(&sc, world, &mut channel),
        Method::Nonadaptive => online::run_nonadaptive(&sc, world, &mut channel),
        Method::Guidance => online::run_guidance(&sc, cfg.method.gamma, world, &mut channel),
        Method::Ppo => online::run_ppo(&sc, &cfg.method.ppo, world, &mut channel),
        Method::Unregularized => online::run_unregularized(&sc, world, &mut channel),
    }
}

pub fn write_evaluation_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_samples_csv(path: &Path, s: &SampleSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut header: Vec<String> = (0..s.dim).map(|i| format!("x{i}")).collect();
    header.push("z_pre".into());
    w.write_record(&header)?;
    for (i, x) in s.iter().enumerate() {
        let mut row: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        row.push(s.z_pre[i].to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Serialize)]
struct Manifest<'a> {
    artifact: &'static str,
    version: &'static str,
    method: &'a str,
    seeds: Seeds,
    config_sha256: String,
    queries_used: usize,
    iterations_completed: usize,
    iterations_evaluated: usize,
    failure: Option<String>,
    files: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct Seeds {
    master: u64,
    evaluation: u64,
}

fn relative(root: &Path, p: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

/// Executes `cfg` (whose text is `src`) and writes the run directory under
/// `out`. A runtime failure still writes everything completed and is then
/// returned as the error.
pub fn cmd_run(cfg: &ExperimentConfig, src: &str, out: &Path) -> Result<Vec<EvalRow>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let world = cfg.build_world()?;
    let ctx = EvalContext::from_config(cfg, &world)?;
    let mut record = run_method(cfg, &world)?;
    let (rows, sets, eval_failure) = evaluate_partial(&record, &world, &ctx, cfg.seeds.master);
    if record.failure.is_none() {
        record.failure = eval_failure;
    }

    let mut files: Vec<PathBuf> = Vec::new();
    let config_path = out.join("config.toml");
    fs::write(&config_path, src).map_err(|e| Error::io(&config_path, e))?;
    files.push(config_path);
    let eval_path = out.join("evaluation.csv");
    write_evaluation_csv(&eval_path, &rows)?;
    files.push(eval_path);
    let fb_path = out.join("feedback.csv");
    record.dataset.write_csv(&fb_path, world.dim())?;
    files.push(fb_path);
    for (idx, it) in record.iterations.iter().enumerate() {
        let dir = out.join(format!("iter_{:03}", it.iteration));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        if let Some(samples) = sets.get(idx) {
            let p = dir.join("samples.csv");
            write_samples_csv(&p, samples)?;
            files.push(p);
        }
        let p = dir.join("training_curve.csv");
        it.curve.write_csv(&p)?;
        files.push(p);
        if let Some(s) = &it.surrogate {
            let p = dir.join("surrogate.bin");
            s.save(&p)?;
            files.push(p);
        }
    }
    let mut hashes = BTreeMap::new();
    for f in &files {
        hashes.insert(relative(out, f), sha256_file(f)?);
    }
    let manifest = Manifest {
        artifact: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        method: &record.method,
        seeds: Seeds {
            master: cfg.seeds.master,
            evaluation: cfg.evaluation_seed(),
        },
        config_sha256: hex::encode(Sha256::digest(src.as_bytes())),
        queries_used: record.queries_used,
        iterations_completed: record.iterations.len(),
        iterations_evaluated: rows.len(),
        failure: record.failure.as_ref().map(|e| e.to_string()),
        files: hashes,
    };
    let mpath = out.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&mpath, json + "\n").map_err(|e| Error::io(&mpath, e))?;
    match record.failure {
        Some(e) => Err(e),
        None => Ok(rows),
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<fs::File>> {
    if !path.is_file() {
        return Err(Error::Config(format!("{}: missing", path.display())));
    }
    csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn read_samples(path: &Path, dim: usize) -> Result<SampleSet> {
    let mut r = open_csv(path)?;
    let mut points = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        for i in 0..dim {
            let v: f64 = rec
                .get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format(format!("{}: bad coordinate in row {}", path.display(), points.len() / dim + 1)))?;
            points.push(v);
        }
    }
    Ok(SampleSet::from_points(dim, points))
}

/// Writes tidy plot data next to a run directory's outputs. Only files under
/// `run` are read, so repeated calls produce identical bytes.
pub fn cmd_plot(run: &Path) -> Result<Vec<PathBuf>> {
    let (cfg, _) = ExperimentConfig::load(&run.join("config.toml"))?;
    let mut rows: Vec<EvalRow> = Vec::new();
    for r in open_csv(&run.join("evaluation.csv"))?.deserialize() {
        rows.push(r?);
    }
    if rows.is_empty() {
        return Err(Error::Config(format!("{}: no evaluated iterations", run.display())));
    }
    let world = cfg.build_world()?;
    let ctx = EvalContext::from_config(&cfg, &world)?;
    let d = world.dim();
    let mut out = Vec::new();

    let p = run.join("training_curves.csv");
    let mut w = csv_writer(&p)?;
    w.write_record(["iteration", "step", "metric", "value"])?;
    for row in &rows {
        let mut r = open_csv(&run.join(format!("iter_{:03}", row.iteration)).join("training_curve.csv"))?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        for rec in r.records() {
            let rec = rec?;
            let step = rec.get(0).unwrap_or_default();
            for (name, v) in header.iter().zip(rec.iter()).skip(1) {
                w.write_record([row.iteration.to_string().as_str(), step, name, v])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&p, e))?;
    out.push(p);

    let p = run.join("regret_curve.csv");
    let jstar = ctx.comparator()?;
    let js: Vec<f64> = rows.iter().map(|r| r.j_alpha).collect();
    let mut w = csv_writer(&p)?;
    w.write_record(["iteration", "J_alpha", "J_star", "cesaro_regret"])?;
    for ((i, reg), j) in eval::regret_curve(&js, jstar).into_iter().zip(&js) {
        w.write_record([i.to_string(), j.to_string(), jstar.to_string(), reg.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;
    out.push(p);

    let p = run.join("density_overlay.csv");
    let mut w = csv_writer(&p)?;
    let mut header = vec!["iteration".to_string(), "density".into(), "cell".into()];
    header.extend((0..d).map(|i| format!("x{i}")));
    header.push("probability".into());
    w.write_record(&header)?;
    let centers = ctx.grid.centers();
    let emit = |w: &mut csv::Writer<fs::File>, it: usize, name: &str, q: &GridDensity| -> Result<()> {
        for (c, p) in q.probs.iter().enumerate() {
            let mut rec = vec![it.to_string(), name.to_string(), c.to_string()];
            rec.extend(centers[c].iter().map(|v| v.to_string()));
            rec.push(p.to_string());
            w.write_record(&rec)?;
        }
        Ok(())
    };
    emit(&mut w, 0, "pretrained", &ctx.pre)?;
    let method = rows[0].method.clone();
    let mut target = ctx.pre.clone();
    for row in &rows {
        let dir = run.join(format!("iter_{:03}", row.iteration));
        let sur = dir.join("surrogate.bin");
        if has_target(&method) && sur.is_file() {
            let s = RewardSurrogate::load(&sur)?;
            let tilt = tilt_on_grid(&s, tilts_optimistically(&method), &ctx.grid);
            target = eval::grid_target_density(&tilt, &target, &ctx.pre, row.alpha, row.beta)?;
            emit(&mut w, row.iteration, "target", &target)?;
        }
        let samples = read_samples(&dir.join("samples.csv"), d)?;
        let (emp, _) = eval::empirical_density(samples.iter(), &ctx.grid)?;
        emit(&mut w, row.iteration, "empirical", &emp)?;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;
    out.push(p);
    Ok(out)
}
