use proptest::prelude::*;
use seiko::diffusion::{CompiledGmm, GmmSpec};
use seiko::eval::{self, GridDensity, GridSpec};
use seiko::rng;
use seiko::sde::SampleSet;

fn density(logw: &[f64]) -> GridDensity {
    GridDensity::from_log_weights(GridSpec::line(-1.0, 1.0, logw.len()), logw).unwrap()
}

fn cells() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (2usize..24).prop_flat_map(|n| {
        (
            prop::collection::vec(-2.0f64..2.0, n),
            prop::collection::vec(-3.0f64..3.0, n),
            prop::collection::vec(-3.0f64..3.0, n),
        )
    })
}

proptest! {
    #[test]
    fn target_is_invariant_to_constant_tilt_shifts(
        (tilt, lp, lq) in cells(),
        c in -5.0f64..5.0,
        alpha in 0.01f64..2.0,
        beta in 0.0f64..2.0,
    ) {
        let (prev, pre) = (density(&lp), density(&lq));
        let a = eval::grid_target_density(&tilt, &prev, &pre, alpha, beta).unwrap();
        let shifted: Vec<f64> = tilt.iter().map(|t| t + c).collect();
        let b = eval::grid_target_density(&shifted, &prev, &pre, alpha, beta).unwrap();
        for (x, y) in a.probs.iter().zip(&b.probs) {
            prop_assert!((x - y).abs() <= 1e-12 * x.max(1e-300).max(*y) + 1e-15);
        }
        prop_assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn comparator_beats_every_grid_density((reward, lq, _) in cells(), alpha in 0.05f64..2.0, seed in any::<u64>()) {
        let pre = density(&lq);
        let (opt, value) = eval::comparator_optimum(&reward, &pre, alpha).unwrap();
        let j_opt = eval::grid_value(&opt, &reward, &pre, alpha).unwrap();
        prop_assert!((j_opt - value).abs() < 1e-9);
        let mut r = rng::rng_from(seed);
        for _ in 0..100 {
            let lw: Vec<f64> = (0..reward.len()).map(|_| 3.0 * rng::normal(&mut r)).collect();
            let q = density(&lw);
            prop_assert!(eval::grid_value(&q, &reward, &pre, alpha).unwrap() <= value + 1e-9);
        }
    }

    #[test]
    fn tv_is_a_bounded_symmetric_distance((_, lp, lq) in cells()) {
        let (p, q) = (density(&lp), density(&lq));
        let d = eval::tv_distance(&p, &q).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, eval::tv_distance(&q, &p).unwrap());
        prop_assert_eq!(eval::tv_distance(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn empirical_density_ignores_sample_order(mut xs in prop::collection::vec(-1.5f64..1.5, 1..200), seed in any::<u64>()) {
        prop_assume!(xs.iter().any(|x| x.abs() < 1.0));
        let grid = GridSpec::line(-1.0, 1.0, 16);
        let (a, oa) = eval::empirical_density(xs.chunks(1), &grid).unwrap();
        let mut r = rng::rng_from(seed);
        for i in (1..xs.len()).rev() {
            xs.swap(i, r.random_range(0..=i));
        }
        let (b, ob) = eval::empirical_density(xs.chunks(1), &grid).unwrap();
        prop_assert_eq!(a.probs, b.probs);
        prop_assert_eq!(oa, ob);
    }
}

fn normal_samples(n: usize, seed: u64) -> SampleSet {
    let mut r = rng::rng_from(seed);
    SampleSet::from_points(1, (0..n).map(|_| rng::normal(&mut r)).collect())
}

#[test]
fn histogram_of_a_million_normals_is_close_to_the_analytic_density() {
    let grid = GridSpec::line(-5.0, 5.0, 512);
    let truth = GridDensity::analytic(&grid, &CompiledGmm::new(&GmmSpec::standard_normal(1)).unwrap()).unwrap();
    let s = normal_samples(1_000_000, 1);
    let (emp, _) = eval::empirical_density(s.iter(), &grid).unwrap();
    let kl = eval::kl_divergence(&emp, &truth).unwrap();
    assert!(kl < 0.005, "{kl}");
}

#[test]
fn diversity_of_normals_is_two_over_root_pi() {
    let d = eval::diversity(&normal_samples(10_000, 2), usize::MAX).unwrap();
    let exact = 2.0 / std::f64::consts::PI.sqrt();
    assert!((d - exact).abs() < 0.02 * exact, "{d}");
}

#[test]
fn one_dimensional_diversity_matches_brute_force() {
    let s = normal_samples(300, 3);
    let n = s.len();
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += (s.points[i] - s.points[j]).abs();
        }
    }
    let brute = sum / (n * (n - 1) / 2) as f64;
    assert!((eval::diversity(&s, usize::MAX).unwrap() - brute).abs() < 1e-9);
}
