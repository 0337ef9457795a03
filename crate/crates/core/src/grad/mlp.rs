//! Small dense networks: residual drifts and reward heads.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

use super::params::ParamVector;
use super::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Silu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }

    /// dy/dx given the input `x` and the output `y`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

/// Network shape. `layer_widths[0]` is the full input width, i.e. the state
/// dimension plus `time_embedding_dim`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub time_embedding_dim: usize,
}

/// Sinusoidal features `sin(2^k pi t), cos(2^k pi t)` for `k < dim / 2`.
pub fn time_embedding(t: f64, dim: usize, out: &mut Vec<f64>) {
    let half = dim / 2;
    let start = out.len();
    out.resize(start + dim, 0.0);
    for k in 0..half {
        let w = f64::from(1u32 << k) * std::f64::consts::PI;
        out[start + k] = (w * t).sin();
        out[start + half + k] = (w * t).cos();
    }
}

impl MlpSpec {
    /// Residual drift network: `[d + emb, hidden..., d]`.
    pub fn drift(state_dim: usize, hidden: &[usize], activation: Activation, emb: usize) -> Self {
        let mut w = vec![state_dim + emb];
        w.extend_from_slice(hidden);
        w.push(state_dim);
        Self {
            layer_widths: w,
            activation,
            time_embedding_dim: emb,
        }
    }

    /// Scalar regressor without time input.
    pub fn regressor(input_dim: usize, hidden: &[usize], activation: Activation) -> Self {
        let mut w = vec![input_dim];
        w.extend_from_slice(hidden);
        w.push(1);
        Self {
            layer_widths: w,
            activation,
            time_embedding_dim: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 3 {
            return Err(Error::Config("an MLP needs at least one hidden layer".into()));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::Config("MLP layer widths must be positive".into()));
        }
        if self.time_embedding_dim % 2 != 0 {
            return Err(Error::Config("time embedding dimension must be even".into()));
        }
        if self.time_embedding_dim >= self.layer_widths[0] {
            return Err(Error::Config(
                "input width must exceed the time embedding dimension".into(),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0] - self.time_embedding_dim
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().expect("validated")
    }

    pub fn n_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn zero_params(&self) -> ParamVector {
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        for l in 0..self.n_layers() {
            let (i, o) = (self.layer_widths[l], self.layer_widths[l + 1]);
            shapes.push((format!("w{l}"), vec![o, i]));
            shapes.push((format!("b{l}"), vec![o]));
        }
        let refs: Vec<(&str, Vec<usize>)> = shapes.iter().map(|(n, s)| (n.as_str(), s.clone())).collect();
        ParamVector::zeros(&refs)
    }

    fn input(&self, t: f64, x: &[f64], buf: &mut Vec<f64>) {
        buf.clear();
        buf.extend_from_slice(x);
        time_embedding(t, self.time_embedding_dim, buf);
    }

    /// Forward pass into `out`, reusing `scratch` between calls.
    pub fn eval_into(&self, params: &ParamVector, t: f64, x: &[f64], out: &mut [f64], scratch: &mut MlpScratch) {
        let MlpScratch { a, b } = scratch;
        self.input(t, x, a);
        let last = self.n_layers() - 1;
        for l in 0..=last {
            let w = params.segment(2 * l);
            let bias = params.segment(2 * l + 1);
            let cols = a.len();
            b.clear();
            b.extend_from_slice(bias);
            for (r, y) in b.iter_mut().enumerate() {
                let row = &w[r * cols..(r + 1) * cols];
                let mut acc = 0.0;
                for (wi, xi) in row.iter().zip(a.iter()) {
                    acc += wi * xi;
                }
                *y += acc;
            }
            if l < last {
                for y in b.iter_mut() {
                    *y = self.activation.apply(*y);
                }
            }
            std::mem::swap(a, b);
        }
        out.copy_from_slice(a);
    }
}

#[derive(Debug, Default, Clone)]
pub struct MlpScratch {
    a: Vec<f64>,
    b: Vec<f64>,
}

/// Fan-in scaled uniform weights for hidden layers; the output layer is
/// exactly zero so a fresh residual drift is the zero function.
pub fn mlp_init(spec: &MlpSpec, seed: u64) -> Result<ParamVector> {
    spec.validate()?;
    let mut p = spec.zero_params();
    let mut rng = rng::rng_from(seed);
    for l in 0..spec.n_layers() - 1 {
        let bound = 1.0 / (spec.layer_widths[l] as f64).sqrt();
        for v in p.segment_mut(2 * l) {
            *v = rng.random_range(-bound..bound);
        }
        for v in p.segment_mut(2 * l + 1) {
            *v = rng.random_range(-bound..bound);
        }
    }
    Ok(p)
}

pub fn mlp_eval(spec: &MlpSpec, params: &ParamVector, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    spec.validate()?;
    if x.len() != spec.input_dim() {
        return Err(Error::Shape(format!(
            "state has dimension {} but the network expects {}",
            x.len(),
            spec.input_dim()
        )));
    }
    let expected = spec.zero_params();
    if !expected.same_layout(params) {
        return Err(Error::Shape("parameters do not match the network layout".into()));
    }
    let mut out = vec![0.0; spec.output_dim()];
    spec.eval_into(params, t, x, &mut out, &mut MlpScratch::default());
    Ok(out)
}

/// Network weights loaded onto a tape, one leaf per segment.
#[derive(Clone, Debug)]
pub struct TapeMlp {
    leaves: Vec<Var>,
    activation: Activation,
    emb: usize,
}

impl TapeMlp {
    /// `trainable` leaves receive gradients; frozen ones only pass them to inputs.
    pub fn load(tape: &mut Tape, spec: &MlpSpec, params: &ParamVector, trainable: bool) -> Self {
        let leaves = (0..params.layout().len())
            .map(|i| {
                let v = params.segment(i).to_vec();
                if trainable {
                    tape.param(v)
                } else {
                    tape.constant(v)
                }
            })
            .collect();
        Self {
            leaves,
            activation: spec.activation,
            emb: spec.time_embedding_dim,
        }
    }

    /// Wraps leaves already on a tape, e.g. those created by [`super::gradient`].
    pub fn from_leaves(spec: &MlpSpec, leaves: &[Var]) -> Self {
        Self {
            leaves: leaves.to_vec(),
            activation: spec.activation,
            emb: spec.time_embedding_dim,
        }
    }

    pub fn leaves(&self) -> &[Var] {
        &self.leaves
    }

    pub fn forward(&self, tape: &mut Tape, t: f64, x: Var) -> Var {
        let mut h = if self.emb > 0 {
            let mut e = Vec::with_capacity(self.emb);
            time_embedding(t, self.emb, &mut e);
            let ev = tape.constant(e);
            tape.concat(x, ev)
        } else {
            x
        };
        let n = self.leaves.len() / 2;
        for l in 0..n {
            h = tape.affine(self.leaves[2 * l], self.leaves[2 * l + 1], h);
            if l + 1 < n {
                h = tape.activation(h, self.activation);
            }
        }
        h
    }

    /// Collects leaf adjoints back into the flat layout of `like`.
    pub fn gradient(&self, grads: &super::tape::Gradients, like: &ParamVector, out: &mut ParamVector) {
        debug_assert!(like.same_layout(out));
        for (i, v) in self.leaves.iter().enumerate() {
            grads.accumulate_into(*v, out.segment_mut(i));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_282() -> MlpSpec {
        MlpSpec {
            layer_widths: vec![2, 8, 2],
            activation: Activation::Tanh,
            time_embedding_dim: 0,
        }
    }

    #[test]
    fn fresh_network_is_zero_everywhere() {
        let spec = spec_282();
        let p = mlp_init(&spec, 7).unwrap();
        assert!(p.segment(2).iter().all(|&w| w == 0.0));
        assert!(p.segment(3).iter().all(|&w| w == 0.0));
        let mut r = rng::rng_from(1);
        for _ in 0..100 {
            let x = [rng::normal(&mut r) * 3.0, rng::normal(&mut r) * 3.0];
            let t: f64 = r.random_range(0.0..1.0);
            assert_eq!(mlp_eval(&spec, &p, t, &x).unwrap(), vec![0.0, 0.0]);
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let spec = spec_282();
        assert_eq!(mlp_init(&spec, 7).unwrap(), mlp_init(&spec, 7).unwrap());
        assert_ne!(
            mlp_init(&spec, 7).unwrap().segment(0),
            mlp_init(&spec, 8).unwrap().segment(0)
        );
    }

    #[test]
    fn eval_is_pure() {
        let spec = MlpSpec::drift(2, &[16, 16], Activation::Silu, 8);
        let mut p = mlp_init(&spec, 3).unwrap();
        for (i, v) in p.segment_mut(4).iter_mut().enumerate() {
            *v = 0.1 * i as f64 - 0.3;
        }
        let a = mlp_eval(&spec, &p, 0.5, &[1.0, 0.0]).unwrap();
        let b = mlp_eval(&spec, &p, 0.5, &[1.0, 0.0]).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_bad_shapes() {
        let spec = spec_282();
        let p = mlp_init(&spec, 1).unwrap();
        assert!(matches!(mlp_eval(&spec, &p, 0.0, &[1.0]), Err(Error::Shape(_))));
        let bad = MlpSpec {
            layer_widths: vec![2, 0, 2],
            ..spec.clone()
        };
        assert!(matches!(mlp_init(&bad, 1), Err(Error::Config(_))));
        let shallow = MlpSpec {
            layer_widths: vec![2, 2],
            ..spec
        };
        assert!(matches!(mlp_init(&shallow, 1), Err(Error::Config(_))));
    }

    #[test]
    fn time_embedding_layout() {
        let mut e = Vec::new();
        time_embedding(0.25, 8, &mut e);
        let pi = std::f64::consts::PI;
        assert!((e[0] - (pi * 0.25).sin()).abs() < 1e-15);
        assert!((e[3] - (8.0 * pi * 0.25).sin()).abs() < 1e-12);
        assert!((e[4] - (pi * 0.25).cos()).abs() < 1e-15);
    }
}
