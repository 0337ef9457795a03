use std::sync::Arc;

use proptest::prelude::*;
use seiko::diffusion::{gmm_log_density, gmm_score, GmmSpec, NoiseSchedule, PretrainedModel};
use seiko::sde::{self, DriftStack};

fn gmm_strategy() -> impl Strategy<Value = GmmSpec> {
    (1usize..3, 1usize..4).prop_flat_map(|(d, k)| {
        (
            prop::collection::vec(0.1f64..1.0, k),
            prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), k),
            0.2f64..2.0,
        )
            .prop_map(|(w, m, v)| {
                let s: f64 = w.iter().sum();
                GmmSpec::isotropic(w.iter().map(|x| x / s).collect(), m, v)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn score_is_the_gradient_of_the_log_density(g in gmm_strategy(), x in prop::collection::vec(-4.0f64..4.0, 2)) {
        let x = &x[..g.dim()];
        let s = gmm_score(&g, x).unwrap();
        let h = 1e-5;
        for i in 0..x.len() {
            let mut p = x.to_vec();
            p[i] += h;
            let mut m = x.to_vec();
            m[i] -= h;
            let fd = (gmm_log_density(&g, &p).unwrap() - gmm_log_density(&g, &m).unwrap()) / (2.0 * h);
            prop_assert!((fd - s[i]).abs() <= 1e-6 * fd.abs().max(1.0), "{fd} vs {}", s[i]);
        }
    }
}

/// Exact variance of the Euler-Maruyama chain for Gaussian data `N(0, v0)`,
/// where the pretrained drift is linear.
fn em_variance(v0: f64, sch: &NoiseSchedule) -> f64 {
    let dt = sch.dt();
    let mut var = 1.0;
    for k in 0..sch.n_steps {
        let t = sch.time(k);
        let b = sch.sigma2(t);
        let a = sch.alpha_bar(sch.horizon - t);
        let vs = a * v0 + 1.0 - a;
        let c = 1.0 + (0.5 * b - b / vs) * dt;
        var = c * c * var + b * dt;
    }
    var
}

fn sample_variance(v0: f64, n_steps: usize, n: usize, seed: u64) -> (f64, f64) {
    let sch = NoiseSchedule::default().with_steps(n_steps);
    let model = PretrainedModel::new(GmmSpec::isotropic(vec![1.0], vec![vec![0.0]], v0), sch).unwrap();
    let s = sde::sample(&DriftStack::pretrained(Arc::new(model)), n, seed).unwrap();
    let m = s.points.iter().sum::<f64>() / n as f64;
    let var = s.points.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    (var, em_variance(v0, &sch))
}

#[test]
fn gaussian_sampling_follows_the_variance_recursion() {
    let n = 50_000;
    for (v0, steps) in [(0.25, 50), (0.25, 200), (2.0, 50)] {
        let (emp, exact) = sample_variance(v0, steps, n, 5);
        let se = exact * (2.0 / n as f64).sqrt();
        assert!((emp - exact).abs() < 4.0 * se, "v0 {v0}, {steps} steps: {emp} vs {exact}");
    }
}

#[test]
fn doubling_the_steps_reduces_discretization_error() {
    let sch = NoiseSchedule::default();
    let mut prev = f64::INFINITY;
    for steps in [25, 50, 100, 200, 400] {
        let err = (em_variance(0.25, &sch.with_steps(steps)) - 0.25).abs();
        assert!(err < prev, "{steps} steps: {err}");
        prev = err;
    }
    assert!(prev < 0.01);
}
