use proptest::prelude::*;
use seiko::grad::{self, adam_step, mlp_eval, mlp_init, Activation, AdamHyper, AdamState, Direction, MlpSpec, ParamVector, TapeMlp};

fn spec(d_in: usize, hidden: usize, d_out: usize, act: u8, emb: usize) -> MlpSpec {
    MlpSpec {
        layer_widths: vec![d_in + emb, hidden, d_out],
        activation: [Activation::Tanh, Activation::Silu, Activation::Relu][act as usize % 3],
        time_embedding_dim: emb,
    }
}

fn jitter(p: &mut ParamVector, noise: &[f64]) {
    for (v, n) in p.values_mut().iter_mut().zip(noise.iter().cycle()) {
        *v += n;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mlp_output_gradient_matches_central_differences(
        d_in in 1usize..4,
        hidden in 1usize..7,
        d_out in 1usize..3,
        act in 0u8..3,
        emb in prop::sample::select(vec![0usize, 2, 4]),
        seed in any::<u64>(),
        noise in prop::collection::vec(-0.8f64..0.8, 7),
        x in prop::collection::vec(-2.0f64..2.0, 3),
        t in 0.0f64..1.0,
    ) {
        let s = spec(d_in, hidden, d_out, act, emb);
        let mut p = mlp_init(&s, seed).unwrap();
        jitter(&mut p, &noise);
        let x = &x[..d_in];
        let (_, g) = grad::gradient(&p, |tape, leaves| {
            let net = TapeMlp::from_leaves(&s, leaves);
            let xv = tape.constant(x.to_vec());
            let y = net.forward(tape, t, xv);
            tape.sum(y)
        }).unwrap();
        let h = 1e-6;
        let mut q = p.clone();
        for i in 0..p.len() {
            let v = p.values()[i];
            q.values_mut()[i] = v + h;
            let fp: f64 = mlp_eval(&s, &q, t, x).unwrap().iter().sum();
            q.values_mut()[i] = v - h;
            let fm: f64 = mlp_eval(&s, &q, t, x).unwrap().iter().sum();
            q.values_mut()[i] = v;
            let fd = (fp - fm) / (2.0 * h);
            prop_assert!((fd - g.values()[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "coordinate {i}: {fd} vs {}", g.values()[i]);
        }
    }

    #[test]
    fn adam_never_moves_against_a_constant_gradient(
        grads in prop::collection::vec(-3.0f64..3.0, 1..8),
        lr in 1e-4f64..1e-1,
        steps in 1usize..20,
    ) {
        let shape = vec![("w", vec![grads.len()])];
        let mut p = ParamVector::zeros(&shape);
        let mut g = ParamVector::zeros(&shape);
        g.values_mut().copy_from_slice(&grads);
        let mut st = AdamState::new(p.len(), AdamHyper::with_lr(lr));
        for _ in 0..steps {
            adam_step(&mut p, &g, &mut st, Direction::Descent).unwrap();
        }
        for (v, gi) in p.values().iter().zip(&grads) {
            prop_assert!(v * gi <= 0.0);
            // Bias correction keeps each step at most about lr in size.
            prop_assert!(v.abs() <= lr * steps as f64 * (1.0 + 1e-9));
        }
    }

    #[test]
    fn param_layout_length_is_sum_of_segments(dims in prop::collection::vec(prop::collection::vec(1usize..5, 1..3), 1..5)) {
        let names: Vec<String> = (0..dims.len()).map(|i| format!("s{i}")).collect();
        let shapes: Vec<(&str, Vec<usize>)> = names.iter().map(String::as_str).zip(dims.iter().cloned()).collect();
        let p = ParamVector::zeros(&shapes);
        let total: usize = dims.iter().map(|d| d.iter().product::<usize>()).sum();
        prop_assert_eq!(p.len(), total);
        prop_assert_eq!(p.layout().iter().map(|s| s.len()).sum::<usize>(), total);
    }
}
