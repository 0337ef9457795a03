use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::ParamVector;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHyper {
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamHyper {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Descent,
    Ascent,
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(n: usize, hyper: AdamHyper) -> Self {
        Self {
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step_count: 0,
            hyper,
        }
    }
}

/// Bias-corrected Adam update, in place.
pub fn adam_step(params: &mut ParamVector, grad: &ParamVector, state: &mut AdamState, dir: Direction) -> Result<()> {
    if params.len() != grad.len() || state.first_moment.len() != params.len() {
        return Err(Error::Shape(format!(
            "adam: params {} / grad {} / state {}",
            params.len(),
            grad.len(),
            state.first_moment.len()
        )));
    }
    let h = state.hyper;
    state.step_count += 1;
    let k = state.step_count as i32;
    let c1 = 1.0 - h.beta1.powi(k);
    let c2 = 1.0 - h.beta2.powi(k);
    let sign = match dir {
        Direction::Descent => -1.0,
        Direction::Ascent => 1.0,
    };
    let (m, v) = (&mut state.first_moment, &mut state.second_moment);
    for (i, (p, &g)) in params.values_mut().iter_mut().zip(grad.values()).enumerate() {
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        *p += sign * h.learning_rate * mh / (vh.sqrt() + h.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> ParamVector {
        ParamVector::from_parts(vec![v], ParamVector::zeros(&[("p", vec![1])]).layout().to_vec()).unwrap()
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = scalar(1.5);
        let g = scalar(0.0);
        let mut s = AdamState::new(1, AdamHyper::with_lr(0.1));
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut s, Direction::Descent).unwrap();
        }
        assert_eq!(p.values(), &[1.5]);
        assert_eq!(s.first_moment, vec![0.0]);
        assert_eq!(s.second_moment, vec![0.0]);
    }

    #[test]
    fn first_step_is_learning_rate_sized() {
        let mut p = scalar(0.0);
        let mut s = AdamState::new(1, AdamHyper::with_lr(0.1));
        adam_step(&mut p, &scalar(1.0), &mut s, Direction::Descent).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.values()[0] - expected).abs() < 1e-12);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut p = scalar(1.0);
        let mut s = AdamState::new(1, AdamHyper::with_lr(0.05));
        for _ in 0..200 {
            let g = scalar(2.0 * p.values()[0]);
            adam_step(&mut p, &g, &mut s, Direction::Descent).unwrap();
        }
        assert!(p.values()[0].abs() < 0.05, "{}", p.values()[0]);
    }

    #[test]
    fn ascent_flips_the_sign() {
        let mut p = scalar(0.0);
        let mut s = AdamState::new(1, AdamHyper::with_lr(0.1));
        adam_step(&mut p, &scalar(1.0), &mut s, Direction::Ascent).unwrap();
        assert!(p.values()[0] > 0.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = scalar(0.0);
        let g = ParamVector::zeros(&[("p", vec![2])]);
        let mut s = AdamState::new(1, AdamHyper::with_lr(0.1));
        assert!(matches!(adam_step(&mut p, &g, &mut s, Direction::Descent), Err(Error::Shape(_))));
    }
}
