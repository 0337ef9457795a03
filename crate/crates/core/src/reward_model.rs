//! Reward surrogates with uncertainty oracles: ridge regression with an
//! elliptical UCB bonus, and a bootstrap ensemble of small regressors.

use std::io::{Read as _, Write as _};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMap, FeatureSpec};
use crate::grad::{adam_step, gradient, AdamHyper, AdamState, Activation, Direction, MlpSpec, ParamVector, Tape, TapeMlp};
use crate::rng;
use crate::sde::TerminalFn;
use crate::world::Entry;

/// `C1 = B sqrt(lambda) + sqrt(sigma^2 (ln(1/delta^2) + d ln(1 + K B^2 / (d lambda))))`.
pub fn c1_of_delta(delta: f64, norm_bound: f64, lambda: f64, noise_std: f64, d: usize, k: usize) -> f64 {
    let df = d as f64;
    let info = (1.0 / (delta * delta)).ln() + df * (1.0 + k as f64 * norm_bound * norm_bound / (df * lambda)).ln();
    norm_bound * lambda.sqrt() + (noise_std * noise_std * info).sqrt()
}

/// Ridge estimate `theta = Sigma^-1 sum phi y` with `Sigma = lambda I + sum phi phi^T`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearRewardModel {
    pub features: FeatureMap,
    pub theta_hat: Vec<f64>,
    /// `Sigma`, row-major.
    pub gram: Vec<f64>,
    gram_inv: Vec<f64>,
    pub lambda: f64,
    pub c1: f64,
    pub delta: Option<f64>,
    pub n_obs: usize,
}

pub fn fit_ridge<'a, I>(data: I, features: &FeatureMap, lambda: f64, c1: f64, delta: Option<f64>) -> Result<LinearRewardModel>
where
    I: IntoIterator<Item = &'a Entry>,
{
    if !(lambda > 0.0) {
        return Err(Error::Config("ridge weight must be positive".into()));
    }
    if !(c1 >= 0.0) {
        return Err(Error::Config("confidence scale must be nonnegative".into()));
    }
    let p = features.dim();
    let mut gram = DMatrix::<f64>::identity(p, p) * lambda;
    let mut rhs = DVector::<f64>::zeros(p);
    let mut n_obs = 0;
    for e in data {
        let phi = DVector::from_vec(features.eval(&e.x));
        gram.ger(1.0, &phi, &phi, 1.0);
        rhs.axpy(e.y, &phi, 1.0);
        n_obs += 1;
    }
    let chol = gram
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric { node: 0, op: "cholesky" })?;
    let theta = chol.solve(&rhs);
    let inv = chol.inverse();
    Ok(LinearRewardModel {
        features: features.clone(),
        theta_hat: theta.iter().copied().collect(),
        gram: row_major(&gram),
        gram_inv: row_major(&inv),
        lambda,
        c1,
        delta,
        n_obs,
    })
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut v = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            v.push(m[(i, j)]);
        }
    }
    v
}

impl LinearRewardModel {
    fn quad(&self, phi: &[f64]) -> (f64, Vec<f64>) {
        let p = phi.len();
        let mut sp = vec![0.0; p];
        for i in 0..p {
            let row = &self.gram_inv[i * p..(i + 1) * p];
            sp[i] = row.iter().zip(phi).map(|(a, b)| a * b).sum();
        }
        let q = phi.iter().zip(&sp).map(|(a, b)| a * b).sum::<f64>().max(0.0);
        (q, sp)
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        dot(&self.theta_hat, &self.features.eval(x))
    }

    /// `C1 min(1, sqrt(phi^T Sigma^-1 phi))`.
    pub fn ucb_bonus(&self, x: &[f64]) -> f64 {
        let (q, _) = self.quad(&self.features.eval(x));
        self.c1 * q.sqrt().min(1.0)
    }

    pub fn log_det_gram(&self) -> f64 {
        let p = self.features.dim();
        let m = DMatrix::from_row_slice(p, p, &self.gram);
        let ch = m.cholesky().expect("gram is SPD");
        2.0 * ch.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    pub fn gram_inverse(&self) -> &[f64] {
        &self.gram_inv
    }

    /// Value and x-gradient of `r_hat + scale * g_hat`. The bonus has
    /// subgradient 0 where the `min(1, .)` is active.
    fn value_grad_scaled(&self, x: &[f64], bonus_scale: f64) -> (f64, Vec<f64>) {
        let d = self.features.input_dim();
        let p = self.features.dim();
        let (phi, jac) = self.features.eval_jac(x);
        let mut coef: Vec<f64> = self.theta_hat.clone();
        let mut value = dot(&self.theta_hat, &phi);
        if bonus_scale > 0.0 && self.c1 > 0.0 {
            let (q, sp) = self.quad(&phi);
            let root = q.sqrt();
            if root < 1.0 {
                value += bonus_scale * self.c1 * root;
                if root > 0.0 {
                    let c = bonus_scale * self.c1 / root;
                    for j in 0..p {
                        coef[j] += c * sp[j];
                    }
                }
            } else {
                value += bonus_scale * self.c1;
            }
        }
        let mut g = vec![0.0; d];
        for j in 0..p {
            for i in 0..d {
                g[i] += coef[j] * jac[j * d + i];
            }
        }
        (value, g)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapTrain {
    #[serde(default = "default_boot_steps")]
    pub steps: usize,
    #[serde(default = "default_boot_batch")]
    pub batch_size: usize,
    #[serde(default = "default_boot_lr")]
    pub learning_rate: f64,
    /// Scale of a fixed random function added to each head; 0 disables it.
    #[serde(default)]
    pub prior_scale: f64,
    /// Known reward range; head predictions are clamped to it.
    #[serde(default)]
    pub output_range: Option<[f64; 2]>,
}

fn default_boot_steps() -> usize {
    400
}
fn default_boot_batch() -> usize {
    64
}
fn default_boot_lr() -> f64 {
    1e-2
}

impl Default for BootstrapTrain {
    fn default() -> Self {
        Self {
            steps: default_boot_steps(),
            batch_size: default_boot_batch(),
            learning_rate: default_boot_lr(),
            prior_scale: 0.0,
            output_range: None,
        }
    }
}

/// `M` regressors, each fitted on its own with-replacement resample. Head
/// `h` predicts `net(heads[h]) + prior_scale * net(priors[h])`, clamped to
/// `output_range`; priors stay fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapEnsemble {
    pub spec: MlpSpec,
    pub heads: Vec<ParamVector>,
    pub priors: Vec<ParamVector>,
    pub prior_scale: f64,
    pub output_range: Option<[f64; 2]>,
}

/// Default regressor shape: `[d, 32, 32, 1]`, tanh.
pub fn default_head_spec(d: usize) -> MlpSpec {
    MlpSpec::regressor(d, &[32, 32], Activation::Tanh)
}

pub fn fit_bootstrap(data: &[&Entry], spec: &MlpSpec, n_heads: usize, train: &BootstrapTrain, seed: u64) -> Result<BootstrapEnsemble> {
    if data.is_empty() {
        return Err(Error::Config("bootstrap needs at least one observation".into()));
    }
    if n_heads < 2 {
        return Err(Error::Config("bootstrap needs at least two heads".into()));
    }
    if spec.time_embedding_dim != 0 || spec.output_dim() != 1 {
        return Err(Error::Config("bootstrap heads are scalar regressors without time input".into()));
    }
    spec.validate()?;
    if train.steps > 0 && train.batch_size == 0 {
        return Err(Error::Config("bootstrap batch size must be positive".into()));
    }
    if !(train.prior_scale >= 0.0) {
        return Err(Error::Config("bootstrap prior scale must be nonnegative".into()));
    }
    if train.output_range.is_some_and(|[lo, hi]| !(lo < hi)) {
        return Err(Error::Config("bootstrap output range needs lo < hi".into()));
    }
    let n = data.len();
    let mut scratch = crate::grad::MlpScratch::default();
    let fitted = (0..n_heads)
        .map(|h| {
            let hs = rng::derive_seed(seed, h as u64);
            let prior = init_head(spec, rng::stream_seed(hs, "prior"))?;
            let mut out = [0.0];
            let mut r = rng::rng_from(rng::stream_seed(hs, "resample"));
            let sample: Vec<(&Entry, f64)> = (0..n)
                .map(|_| {
                    let e = data[r.random_range(0..n)];
                    spec.eval_into(&prior, 0.0, &e.x, &mut out, &mut scratch);
                    (e, e.y - train.prior_scale * out[0])
                })
                .collect();
            let mut params = init_head(spec, rng::stream_seed(hs, "init"))?;
            let mut state = AdamState::new(params.len(), AdamHyper::with_lr(train.learning_rate));
            for _ in 0..train.steps {
                let batch: Vec<&(&Entry, f64)> = (0..train.batch_size.min(n)).map(|_| &sample[r.random_range(0..n)]).collect();
                let (_, g) = gradient(&params, |tape, leaves| {
                    let net = TapeMlp::from_leaves(spec, leaves);
                    let mut acc = None;
                    for (e, target) in &batch {
                        let x = tape.constant(e.x.clone());
                        let out = net.forward(tape, 0.0, x);
                        let y = tape.constant(vec![*target]);
                        let r = tape.sub(out, y);
                        let s = tape.square(r);
                        acc = Some(match acc {
                            Some(a) => tape.add(a, s),
                            None => s,
                        });
                    }
                    let total = tape.sum(acc.expect("nonempty batch"));
                    tape.scale(total, 1.0 / batch.len() as f64)
                })?;
                adam_step(&mut params, &g, &mut state, Direction::Descent)?;
            }
            Ok((params, prior))
        })
        .collect::<Result<Vec<_>>>()?;
    let (heads, priors) = fitted.into_iter().unzip();
    Ok(BootstrapEnsemble {
        spec: spec.clone(),
        heads,
        priors,
        prior_scale: train.prior_scale,
        output_range: train.output_range,
    })
}

/// Every layer random; unlike drift residuals, a regressor head must not start at zero.
fn init_head(spec: &MlpSpec, seed: u64) -> Result<ParamVector> {
    let mut p = crate::grad::mlp_init(spec, seed)?;
    let last = spec.n_layers() - 1;
    let bound = 1.0 / (spec.layer_widths[last] as f64).sqrt();
    let mut r = rng::rng_from(rng::stream_seed(seed, "last"));
    for v in p.segment_mut(2 * last) {
        *v = r.random_range(-bound..bound);
    }
    Ok(p)
}

impl BootstrapEnsemble {
    pub fn head_values(&self, x: &[f64]) -> Vec<f64> {
        let mut out = [0.0];
        let mut scratch = crate::grad::MlpScratch::default();
        self.heads
            .iter()
            .zip(&self.priors)
            .map(|(h, p)| {
                self.spec.eval_into(h, 0.0, x, &mut out, &mut scratch);
                let mut v = out[0];
                if self.prior_scale != 0.0 {
                    self.spec.eval_into(p, 0.0, x, &mut out, &mut scratch);
                    v += self.prior_scale * out[0];
                }
                self.clamp(v)
            })
            .collect()
    }

    fn clamp(&self, v: f64) -> f64 {
        match self.output_range {
            Some([lo, hi]) => v.clamp(lo, hi),
            None => v,
        }
    }

    fn head_grad(&self, head: usize, x: &[f64]) -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let net = TapeMlp::load(&mut tape, &self.spec, &self.heads[head], false);
        let prior = TapeMlp::load(&mut tape, &self.spec, &self.priors[head], false);
        let xv = tape.param(x.to_vec());
        let mut out = net.forward(&mut tape, 0.0, xv);
        if self.prior_scale != 0.0 {
            let p = prior.forward(&mut tape, 0.0, xv);
            let p = tape.scale(p, self.prior_scale);
            out = tape.add(out, p);
        }
        let v = tape.scalar(out);
        if self.clamp(v) != v {
            return (self.clamp(v), vec![0.0; x.len()]);
        }
        let g = tape.backward(out);
        (v, g.of(xv))
    }

    pub fn mean(&self, x: &[f64]) -> f64 {
        let v = self.head_values(x);
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn max(&self, x: &[f64]) -> f64 {
        self.head_values(x).into_iter().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RewardSurrogate {
    Linear(LinearRewardModel),
    Bootstrap(BootstrapEnsemble),
}

impl RewardSurrogate {
    /// Point prediction `r_hat(x)` (ensemble mean for bootstrap).
    pub fn mean(&self, x: &[f64]) -> f64 {
        match self {
            RewardSurrogate::Linear(m) => m.predict(x),
            RewardSurrogate::Bootstrap(b) => b.mean(x),
        }
    }

    pub fn optimistic_reward(&self, x: &[f64]) -> f64 {
        match self {
            RewardSurrogate::Linear(m) => m.predict(x) + m.ucb_bonus(x),
            RewardSurrogate::Bootstrap(b) => b.max(x),
        }
    }

    /// `optimistic - mean`.
    pub fn bonus(&self, x: &[f64]) -> f64 {
        match self {
            RewardSurrogate::Linear(m) => m.ucb_bonus(x),
            RewardSurrogate::Bootstrap(b) => b.max(x) - b.mean(x),
        }
    }

    pub fn optimistic_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        match self {
            RewardSurrogate::Linear(m) => m.value_grad_scaled(x, 1.0),
            RewardSurrogate::Bootstrap(b) => {
                let v = b.head_values(x);
                let best = v
                    .iter()
                    .enumerate()
                    .fold(0, |bi, (i, &val)| if val > v[bi] { i } else { bi });
                b.head_grad(best, x)
            }
        }
    }

    pub fn mean_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        match self {
            RewardSurrogate::Linear(m) => m.value_grad_scaled(x, 0.0),
            RewardSurrogate::Bootstrap(b) => {
                let mut val = 0.0;
                let mut g = vec![0.0; x.len()];
                let k = b.heads.len() as f64;
                for h in 0..b.heads.len() {
                    let (v, gh) = b.head_grad(h, x);
                    val += v / k;
                    for (a, c) in g.iter_mut().zip(gh) {
                        *a += c / k;
                    }
                }
                (val, g)
            }
        }
    }
}

/// The optimistic reward `r_hat + g_hat` as a planner terminal.
#[derive(Clone, Debug)]
pub struct Optimistic(pub Arc<RewardSurrogate>);

impl TerminalFn for Optimistic {
    fn value(&self, x: &[f64]) -> f64 {
        self.0.optimistic_reward(x)
    }
    fn value_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        self.0.optimistic_grad(x)
    }
}

/// The point prediction `r_hat`, used by guidance.
#[derive(Clone, Debug)]
pub struct MeanPrediction(pub Arc<RewardSurrogate>);

impl TerminalFn for MeanPrediction {
    fn value(&self, x: &[f64]) -> f64 {
        self.0.mean(x)
    }
    fn value_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        self.0.mean_grad(x)
    }
}

const MAGIC: &[u8; 8] = b"SEIKOSUR";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Header {
    Linear {
        features: FeatureSpec,
        input_dim: usize,
        feature_dim: usize,
        lambda: f64,
        c1: f64,
        delta: Option<f64>,
        n_obs: usize,
        materialized_len: usize,
    },
    Bootstrap {
        spec: MlpSpec,
        n_heads: usize,
        params_per_head: usize,
        prior_scale: f64,
        output_range: Option<[f64; 2]>,
    },
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn take_f64s(buf: &[u8], pos: &mut usize, n: usize) -> Result<Vec<f64>> {
    let end = *pos + 8 * n;
    if end > buf.len() {
        return Err(Error::Format("checkpoint is truncated".into()));
    }
    let v = buf[*pos..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    *pos = end;
    Ok(v)
}

impl RewardSurrogate {
    /// Magic, format version, JSON header length and header, then raw
    /// little-endian `f64` payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (header, payload) = match self {
            RewardSurrogate::Linear(m) => {
                let mat = m.features.materialized_values();
                let h = Header::Linear {
                    features: m.features.spec().clone(),
                    input_dim: m.features.input_dim(),
                    feature_dim: m.features.dim(),
                    lambda: m.lambda,
                    c1: m.c1,
                    delta: m.delta,
                    n_obs: m.n_obs,
                    materialized_len: mat.len(),
                };
                let mut p = Vec::new();
                put_f64s(&mut p, &m.theta_hat);
                put_f64s(&mut p, &m.gram);
                put_f64s(&mut p, &m.gram_inv);
                put_f64s(&mut p, &mat);
                (h, p)
            }
            RewardSurrogate::Bootstrap(b) => {
                let h = Header::Bootstrap {
                    spec: b.spec.clone(),
                    n_heads: b.heads.len(),
                    params_per_head: b.heads[0].len(),
                    prior_scale: b.prior_scale,
                    output_range: b.output_range,
                };
                let mut p = Vec::new();
                for head in b.heads.iter().chain(&b.priors) {
                    put_f64s(&mut p, head.values());
                }
                (h, p)
            }
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 16 || &buf[..8] != MAGIC {
            return Err(Error::Format("not a surrogate checkpoint".into()));
        }
        let version = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32::from_le_bytes(buf[12..16].try_into().expect("4 bytes")) as usize;
        let hend = 16 + hlen;
        if hend > buf.len() {
            return Err(Error::Format("checkpoint header is truncated".into()));
        }
        let header: Header =
            serde_json::from_slice(&buf[16..hend]).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let mut pos = hend;
        let s = match header {
            Header::Linear {
                features,
                input_dim,
                feature_dim,
                lambda,
                c1,
                delta,
                n_obs,
                materialized_len,
            } => {
                let map = FeatureMap::new(features, input_dim)?;
                if map.dim() != feature_dim {
                    return Err(Error::Format("feature dimension mismatch".into()));
                }
                let theta_hat = take_f64s(buf, &mut pos, feature_dim)?;
                let gram = take_f64s(buf, &mut pos, feature_dim * feature_dim)?;
                let gram_inv = take_f64s(buf, &mut pos, feature_dim * feature_dim)?;
                let mat = take_f64s(buf, &mut pos, materialized_len)?;
                let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                if bits(&mat) != bits(&map.materialized_values()) {
                    return Err(Error::Format("stored feature map differs from its spec".into()));
                }
                RewardSurrogate::Linear(LinearRewardModel {
                    features: map,
                    theta_hat,
                    gram,
                    gram_inv,
                    lambda,
                    c1,
                    delta,
                    n_obs,
                })
            }
            Header::Bootstrap {
                spec,
                n_heads,
                params_per_head,
                prior_scale,
                output_range,
            } => {
                spec.validate()?;
                let like = spec.zero_params();
                if like.len() != params_per_head {
                    return Err(Error::Format("head size mismatch".into()));
                }
                let mut read = || {
                    (0..n_heads)
                        .map(|_| ParamVector::from_parts(take_f64s(buf, &mut pos, params_per_head)?, like.layout().to_vec()))
                        .collect::<Result<Vec<_>>>()
                };
                let heads = read()?;
                let priors = read()?;
                RewardSurrogate::Bootstrap(BootstrapEnsemble {
                    spec,
                    heads,
                    priors,
                    prior_scale,
                    output_range,
                })
            }
        };
        if pos != buf.len() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureKind;

    fn poly1() -> FeatureMap {
        FeatureMap::new(
            FeatureSpec {
                kind: FeatureKind::Polynomial { degree: 2 },
                norm_bound: 1.0,
            },
            1,
        )
        .unwrap()
    }

    fn entry(x: f64, y: f64) -> Entry {
        Entry {
            x: vec![x],
            y,
            iteration: 1,
        }
    }

    #[test]
    fn c1_examples() {
        assert_eq!(c1_of_delta(0.5, 1.0, 1.0, 0.0, 8, 64), 1.0);
        let v = c1_of_delta(1.0 / 4096.0, 1.0, 1.0, 0.1, 8, 64);
        let expected = 1.0 + (0.01 * (4.0 * 64f64.ln() + 8.0 * 9f64.ln())).sqrt();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 1.585).abs() < 1e-3);
        assert!(c1_of_delta(0.05, 1.0, 1.0, 0.1, 8, 128) > c1_of_delta(0.05, 1.0, 1.0, 0.1, 8, 64));
        assert!(c1_of_delta(0.01, 1.0, 1.0, 0.1, 8, 64) > c1_of_delta(0.05, 1.0, 1.0, 0.1, 8, 64));
    }

    #[test]
    fn empty_fit_is_zero_with_full_bonus() {
        let m = fit_ridge(std::iter::empty(), &poly1(), 1.0, 0.7, None).unwrap();
        assert!(m.theta_hat.iter().all(|&v| v == 0.0));
        // |phi(x)| = 1 needs all mass on one monomial; the bonus is at most C1.
        for x in [-2.0, 0.0, 1.0] {
            assert!(m.ucb_bonus(&[x]) <= 0.7 + 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let data: Vec<Entry> = (0..20).map(|i| entry(i as f64 * 0.1 - 1.0, (i as f64).sin())).collect();
        let s = RewardSurrogate::Linear(fit_ridge(&data, &poly1(), 0.5, 0.3, Some(0.05)).unwrap());
        let bytes = s.to_bytes();
        let back = RewardSurrogate::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back, s);
        let refs: Vec<&Entry> = data.iter().collect();
        let train = BootstrapTrain {
            steps: 5,
            prior_scale: 0.3,
            output_range: Some([0.0, 1.0]),
            ..Default::default()
        };
        let b = RewardSurrogate::Bootstrap(fit_bootstrap(&refs, &default_head_spec(1), 3, &train, 1).unwrap());
        let bytes = b.to_bytes();
        assert_eq!(RewardSurrogate::from_bytes(&bytes).unwrap().to_bytes(), bytes);
        assert!(RewardSurrogate::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn surrogate_gradients_match_finite_differences() {
        let data: Vec<Entry> = (0..7).map(|i| entry(i as f64 * 0.3 - 1.0, 0.2 * i as f64)).collect();
        let lin = RewardSurrogate::Linear(fit_ridge(&data, &poly1(), 1.0, 0.5, None).unwrap());
        let refs: Vec<&Entry> = data.iter().collect();
        let train = BootstrapTrain {
            steps: 20,
            prior_scale: 0.5,
            ..Default::default()
        };
        let boot = RewardSurrogate::Bootstrap(fit_bootstrap(&refs, &default_head_spec(1), 3, &train, 2).unwrap());
        for s in [&lin, &boot] {
            for &x in &[-0.7, 0.1, 0.9] {
                let h = 1e-6;
                let (_, g) = s.optimistic_grad(&[x]);
                let fd = (s.optimistic_reward(&[x + h]) - s.optimistic_reward(&[x - h])) / (2.0 * h);
                assert!((fd - g[0]).abs() < 1e-5, "{fd} vs {}", g[0]);
                let (_, g) = s.mean_grad(&[x]);
                let fd = (s.mean(&[x + h]) - s.mean(&[x - h])) / (2.0 * h);
                assert!((fd - g[0]).abs() < 1e-5);
            }
        }
    }
}
