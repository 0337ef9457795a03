//! Bounded feature maps `phi: R^d -> R^p` with `|phi(x)| <= B` everywhere.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureKind {
    /// `B cos(w_j . x + b_j) / sqrt(p)`, `w_j ~ N(0, I / bandwidth^2)`.
    RandomFourier {
        n_features: usize,
        #[serde(default = "one")]
        bandwidth: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Monomials of `tanh(x_i)` up to total degree `degree`, constant included.
    Polynomial { degree: usize },
    /// Gaussian bumps on a regular lattice over `[lo, hi]^d`.
    Rbf {
        lo: f64,
        hi: f64,
        per_axis: usize,
        width: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
// Unknown keys are rejected by the flattened, tagged `kind`.
pub struct FeatureSpec {
    #[serde(flatten)]
    pub kind: FeatureKind,
    #[serde(default = "one")]
    pub norm_bound: f64,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            kind: FeatureKind::RandomFourier {
                n_features: 64,
                bandwidth: 1.0,
                seed: 0,
            },
            norm_bound: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Materialized {
    Fourier { omega: Vec<f64>, phase: Vec<f64> },
    Poly { exponents: Vec<Vec<u32>> },
    Rbf { centers: Vec<f64>, inv_2h2: f64, scale: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    spec: FeatureSpec,
    input_dim: usize,
    dim: usize,
    inner: Materialized,
}

fn monomials(d: usize, degree: usize) -> Vec<Vec<u32>> {
    fn rec(d: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if cur.len() == d {
            out.push(cur.clone());
            return;
        }
        for e in 0..=left {
            cur.push(e);
            rec(d, left - e, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(d, degree as u32, &mut Vec::new(), &mut out);
    out.sort_by_key(|e| (e.iter().sum::<u32>(), std::cmp::Reverse(e.clone())));
    out
}

impl FeatureMap {
    pub fn new(spec: FeatureSpec, input_dim: usize) -> Result<Self> {
        if !(spec.norm_bound > 0.0) {
            return Err(Error::Config("feature norm bound must be positive".into()));
        }
        if input_dim == 0 {
            return Err(Error::Config("feature input dimension must be positive".into()));
        }
        let (dim, inner) = match &spec.kind {
            FeatureKind::RandomFourier {
                n_features,
                bandwidth,
                seed,
            } => {
                if *n_features == 0 || !(*bandwidth > 0.0) {
                    return Err(Error::Config("random Fourier features need p > 0 and bandwidth > 0".into()));
                }
                let mut r = rng::rng_from(rng::stream_seed(*seed, "fourier"));
                let mut omega = vec![0.0; n_features * input_dim];
                for w in omega.iter_mut() {
                    *w = rng::normal(&mut r) / bandwidth;
                }
                let phase = (0..*n_features)
                    .map(|_| r.random_range(0.0..std::f64::consts::TAU))
                    .collect();
                (*n_features, Materialized::Fourier { omega, phase })
            }
            FeatureKind::Polynomial { degree } => {
                let exponents = monomials(input_dim, *degree);
                (exponents.len(), Materialized::Poly { exponents })
            }
            FeatureKind::Rbf {
                lo,
                hi,
                per_axis,
                width,
            } => {
                if !(hi > lo) || *per_axis == 0 || !(*width > 0.0) {
                    return Err(Error::Config("rbf features need lo < hi, per_axis > 0, width > 0".into()));
                }
                let n = per_axis.pow(input_dim as u32);
                let step = if *per_axis > 1 {
                    (hi - lo) / (*per_axis - 1) as f64
                } else {
                    0.0
                };
                let axis: Vec<f64> = (0..*per_axis)
                    .map(|i| if *per_axis > 1 { lo + step * i as f64 } else { 0.5 * (lo + hi) })
                    .collect();
                let mut centers = Vec::with_capacity(n * input_dim);
                for j in 0..n {
                    let mut rem = j;
                    for _ in 0..input_dim {
                        centers.push(axis[rem % per_axis]);
                        rem /= per_axis;
                    }
                }
                // Sum over the lattice of exp(-|x - c|^2 / h^2) peaks at a lattice
                // point and is below the infinite-lattice theta sum.
                let per = if *per_axis > 1 {
                    let mut s = 1.0;
                    for m in 1..=200 {
                        let v = (-((m as f64 * step) / width).powi(2)).exp();
                        s += 2.0 * v;
                        if v < 1e-18 {
                            break;
                        }
                    }
                    s
                } else {
                    1.0
                };
                let s2 = per.powi(input_dim as i32);
                (
                    n,
                    Materialized::Rbf {
                        centers,
                        inv_2h2: 1.0 / (2.0 * width * width),
                        scale: spec.norm_bound / s2.sqrt(),
                    },
                )
            }
        };
        Ok(Self {
            spec,
            input_dim,
            dim,
            inner,
        })
    }

    pub fn spec(&self) -> &FeatureSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn norm_bound(&self) -> f64 {
        self.spec.norm_bound
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(x, &mut out, None);
        out
    }

    /// `phi(x)` and `d phi / dx` (row-major, `p x d`).
    pub fn eval_jac(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut out = vec![0.0; self.dim];
        let mut jac = vec![0.0; self.dim * self.input_dim];
        self.eval_into(x, &mut out, Some(&mut jac));
        (out, jac)
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64], mut jac: Option<&mut [f64]>) {
        let d = self.input_dim;
        let b = self.spec.norm_bound;
        match &self.inner {
            Materialized::Fourier { omega, phase } => {
                let c = b / (self.dim as f64).sqrt();
                for j in 0..self.dim {
                    let w = &omega[j * d..(j + 1) * d];
                    let a: f64 = w.iter().zip(x).map(|(p, q)| p * q).sum::<f64>() + phase[j];
                    out[j] = c * a.cos();
                    if let Some(jm) = jac.as_deref_mut() {
                        let s = -c * a.sin();
                        for i in 0..d {
                            jm[j * d + i] = s * w[i];
                        }
                    }
                }
            }
            Materialized::Poly { exponents } => {
                let c = b / (self.dim as f64).sqrt();
                let u: Vec<f64> = x.iter().map(|v| v.tanh()).collect();
                for (j, e) in exponents.iter().enumerate() {
                    let mut v = c;
                    for i in 0..d {
                        v *= u[i].powi(e[i] as i32);
                    }
                    out[j] = v;
                    if let Some(jm) = jac.as_deref_mut() {
                        for i in 0..d {
                            if e[i] == 0 {
                                jm[j * d + i] = 0.0;
                                continue;
                            }
                            let mut g = c * f64::from(e[i]) * u[i].powi(e[i] as i32 - 1) * (1.0 - u[i] * u[i]);
                            for k in 0..d {
                                if k != i {
                                    g *= u[k].powi(e[k] as i32);
                                }
                            }
                            jm[j * d + i] = g;
                        }
                    }
                }
            }
            Materialized::Rbf {
                centers,
                inv_2h2,
                scale,
            } => {
                for j in 0..self.dim {
                    let c = &centers[j * d..(j + 1) * d];
                    let q: f64 = x.iter().zip(c).map(|(a, m)| (a - m) * (a - m)).sum();
                    let v = scale * (-q * inv_2h2).exp();
                    out[j] = v;
                    if let Some(jm) = jac.as_deref_mut() {
                        for i in 0..d {
                            jm[j * d + i] = -2.0 * inv_2h2 * (x[i] - c[i]) * v;
                        }
                    }
                }
            }
        }
    }

    /// Flat numeric description for checkpoints.
    pub(crate) fn materialized_values(&self) -> Vec<f64> {
        match &self.inner {
            Materialized::Fourier { omega, phase } => omega.iter().chain(phase).copied().collect(),
            Materialized::Poly { exponents } => exponents.iter().flatten().map(|&e| f64::from(e)).collect(),
            Materialized::Rbf {
                centers,
                inv_2h2,
                scale,
            } => centers.iter().copied().chain([*inv_2h2, *scale]).collect(),
        }
    }
}
