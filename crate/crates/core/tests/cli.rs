use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn seiko(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seiko")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn bench() -> String {
    fs::read_to_string(root().join("configs/benchmark_1d_bump.toml")).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn benchmark_run_is_deterministic_and_plots_idempotently() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = root().join("configs/benchmark_1d_bump.toml");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = seiko(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let eval = fs::read_to_string(a.join("evaluation.csv")).unwrap();
    assert_eq!(eval.lines().count(), 1 + 2, "header plus K rows");
    assert_eq!(eval, fs::read_to_string(b.join("evaluation.csv")).unwrap());
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    for (file, hash) in manifest["files"].as_object().unwrap() {
        assert_eq!(seiko::experiment::sha256_file(&a.join(file)).unwrap(), hash.as_str().unwrap());
    }
    assert_eq!(manifest["queries_used"], 128);

    let plot = |dir: &Path| {
        let o = seiko(&["plot", dir.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        ["training_curves.csv", "regret_curve.csv", "density_overlay.csv"].map(|f| fs::read(dir.join(f)).unwrap())
    };
    let first = plot(&a);
    assert_eq!(first, plot(&a));
    let regret = String::from_utf8(first[1].clone()).unwrap();
    assert_eq!(regret.lines().count(), 1 + 2);
    let overlay = String::from_utf8(first[2].clone()).unwrap();
    // pretrained once, then target and empirical per iteration, 512 cells each.
    assert_eq!(overlay.lines().count(), 1 + 512 * (1 + 2 * 2));
}

#[test]
fn budget_mismatch_is_rejected_before_sampling() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = bench().replace("batch_sizes = [64, 64]", "batch_sizes = [64, 60]");
    let cfg = write(tmp.path(), "bad.toml", &bad);
    let out = tmp.path().join("out");
    let o = seiko(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line") && err.contains("124"), "{err}");
    assert!(!out.exists());
}

#[test]
fn unknown_key_names_its_line() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = bench().replace("noise_std = 0.1", "noise_std = 0.1\nnoise_sd = 0.2");
    let cfg = write(tmp.path(), "bad.toml", &bad);
    let o = seiko(&["run", &cfg, "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("noise_sd") && err.contains("line"), "{err}");
}

#[test]
fn runtime_failure_exits_3_and_keeps_the_partial_record() {
    let tmp = tempfile::tempdir().unwrap();
    let wild = bench().replace("learning_rate = 1e-2", "learning_rate = 1e6");
    let cfg = write(tmp.path(), "wild.toml", &wild);
    let out = tmp.path().join("out");
    let o = seiko(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["failure"].is_string());
    assert!(out.join("feedback.csv").is_file());
}

#[test]
fn output_dir_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bench_env.toml", &bench());
    let o = Command::new(env!("CARGO_BIN_EXE_seiko"))
        .args(["run", &cfg])
        .env("SEIKO_OUTPUT_DIR", tmp.path().join("runs"))
        .env("SEIKO_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("runs/bench_env/evaluation.csv").is_file());
}

#[test]
fn plot_without_a_run_is_an_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&seiko(&["plot", tmp.path().to_str().unwrap()])), 2);
}

#[test]
fn verify_selects_suites_and_rejects_unknown_ones() {
    assert_eq!(code(&seiko(&["verify", "nonsense"])), 2);
    let o = seiko(&["verify", "grad", "pathkl"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 2, "{text}");
}
