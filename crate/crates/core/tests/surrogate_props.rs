use proptest::prelude::*;
use seiko::features::{FeatureKind, FeatureMap, FeatureSpec};
use seiko::reward_model::{c1_of_delta, fit_ridge};
use seiko::world::Entry;

fn rbf() -> FeatureMap {
    let spec = FeatureSpec {
        kind: FeatureKind::Rbf {
            lo: -2.0,
            hi: 2.0,
            per_axis: 6,
            width: 0.6,
        },
        norm_bound: 1.0,
    };
    FeatureMap::new(spec, 1).unwrap()
}

fn entries(xs: &[f64], ys: &[f64]) -> Vec<Entry> {
    xs.iter()
        .zip(ys)
        .map(|(&x, &y)| Entry {
            x: vec![x],
            y,
            iteration: 1,
        })
        .collect()
}

proptest! {
    #[test]
    fn bonus_is_capped_and_shrinks_with_data(
        xs in prop::collection::vec(-2.5f64..2.5, 1..40),
        extra in prop::collection::vec(-2.5f64..2.5, 1..40),
        probe in -3.0f64..3.0,
        c1 in 0.1f64..3.0,
    ) {
        let f = rbf();
        let ys = vec![0.5; xs.len() + extra.len()];
        let small = fit_ridge(&entries(&xs, &ys), &f, 1.0, c1, None).unwrap();
        let all: Vec<f64> = xs.iter().chain(&extra).cloned().collect();
        let big = fit_ridge(&entries(&all, &ys), &f, 1.0, c1, None).unwrap();
        let (b0, b1) = (small.ucb_bonus(&[probe]), big.ucb_bonus(&[probe]));
        prop_assert!((0.0..=c1 + 1e-12).contains(&b0));
        prop_assert!(b1 <= b0 + 1e-12);
    }

    #[test]
    fn ridge_recovers_a_noiseless_realizable_reward(theta in prop::collection::vec(-0.5f64..0.5, 6)) {
        let f = rbf();
        let xs: Vec<f64> = (0..400).map(|i| -2.5 + 5.0 * i as f64 / 399.0).collect();
        let dot = |x: f64| f.eval(&[x]).iter().zip(&theta).map(|(a, b)| a * b).sum::<f64>();
        let ys: Vec<f64> = xs.iter().map(|&x| dot(x)).collect();
        let m = fit_ridge(&entries(&xs, &ys), &f, 1e-6, 1.0, None).unwrap();
        for x in [-1.7, -0.3, 0.4, 1.9] {
            prop_assert!((m.predict(&[x]) - dot(x)).abs() < 1e-4);
        }
    }

    #[test]
    fn confidence_scale_grows_as_delta_shrinks(d1 in 1e-4f64..0.5, ratio in 0.01f64..0.99, n in 0usize..5000) {
        let a = c1_of_delta(d1, 1.0, 1.0, 0.1, 8, n);
        let b = c1_of_delta(d1 * ratio, 1.0, 1.0, 0.1, 8, n);
        prop_assert!(b > a);
        prop_assert!(a >= 1.0);
    }
}
