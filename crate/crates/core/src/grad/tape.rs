//! Vector-valued reverse-mode tape.
//!
//! Nodes hold dense `Vec<f64>` values. The primitive set is exactly what the
//! planner and the reward heads need: affine maps, pointwise activations,
//! elementwise arithmetic, reductions, and a `linearized` node that splices
//! in an externally supplied value and Jacobian (used for the analytic
//! pretrained drift and for surrogate rewards).

use crate::error::{Error, Result};

use super::mlp::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// y = W x + b, W stored row-major with `rows = len(b)`.
    Affine { w: usize, b: usize, x: usize },
    Act { x: usize, kind: Activation },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Square(usize),
    Log(usize),
    Exp(usize),
    Concat(usize, usize),
    /// y = f(x) with Jacobian dy/dx (row-major, len(y) x len(x)).
    Linearized { x: usize, jac: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Affine { .. } => "affine",
            Op::Act { .. } => "activation",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Square(_) => "square",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Concat(..) => "concat",
            Op::Linearized { .. } => "linearized",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    first_nonfinite: Option<usize>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Vec<f64>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Adjoint of `v`; zeros if nothing flowed into it.
    pub fn of(&self, v: Var) -> Vec<f64> {
        let a = &self.adjoints[v.0];
        if a.is_empty() {
            vec![0.0; self.lens[v.0]]
        } else {
            a.clone()
        }
    }

    pub fn accumulate_into(&self, v: Var, out: &mut [f64]) {
        let a = &self.adjoints[v.0];
        if !a.is_empty() {
            for (o, g) in out.iter_mut().zip(a) {
                *o += g;
            }
        }
    }
}

fn add_into(dst: &mut Vec<f64>, len: usize, src: impl Iterator<Item = f64>) {
    if dst.is_empty() {
        dst.resize(len, 0.0);
    }
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        let id = self.nodes.len();
        if self.first_nonfinite.is_none() && value.iter().any(|v| !v.is_finite()) {
            self.first_nonfinite = Some(id);
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(id)
    }

    fn grad_of(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Errors with the first node whose value was not finite.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_nonfinite {
            Some(node) => Err(Error::Numeric {
                node,
                op: self.nodes[node].op.name(),
            }),
            None => Ok(()),
        }
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn affine(&mut self, w: Var, b: Var, x: Var) -> Var {
        let (wv, bv, xv) = (self.value(w), self.value(b), self.value(x));
        let rows = bv.len();
        let cols = xv.len();
        assert_eq!(wv.len(), rows * cols, "affine weight shape");
        let mut y = bv.to_vec();
        for (r, yr) in y.iter_mut().enumerate() {
            let row = &wv[r * cols..(r + 1) * cols];
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(xv) {
                acc += a * b;
            }
            *yr += acc;
        }
        let g = self.grad_of(w.0) || self.grad_of(b.0) || self.grad_of(x.0);
        self.push(
            y,
            Op::Affine {
                w: w.0,
                b: b.0,
                x: x.0,
            },
            g,
        )
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let y = self.value(x).iter().map(|&v| kind.apply(v)).collect();
        let g = self.grad_of(x.0);
        self.push(y, Op::Act { x: x.0, kind }, g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "add shape");
        let y = av.iter().zip(bv).map(|(x, y)| x + y).collect();
        let g = self.grad_of(a.0) || self.grad_of(b.0);
        self.push(y, Op::Add(a.0, b.0), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "sub shape");
        let y = av.iter().zip(bv).map(|(x, y)| x - y).collect();
        let g = self.grad_of(a.0) || self.grad_of(b.0);
        self.push(y, Op::Sub(a.0, b.0), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "mul shape");
        let y = av.iter().zip(bv).map(|(x, y)| x * y).collect();
        let g = self.grad_of(a.0) || self.grad_of(b.0);
        self.push(y, Op::Mul(a.0, b.0), g)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let y = self.value(a).iter().map(|x| x * c).collect();
        let g = self.grad_of(a.0);
        self.push(y, Op::Scale(a.0, c), g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let y = vec![self.value(a).iter().sum()];
        let g = self.grad_of(a.0);
        self.push(y, Op::Sum(a.0), g)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let y = self.value(a).iter().map(|x| x * x).collect();
        let g = self.grad_of(a.0);
        self.push(y, Op::Square(a.0), g)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let y = self.value(a).iter().map(|x| x.ln()).collect();
        let g = self.grad_of(a.0);
        self.push(y, Op::Log(a.0), g)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let y = self.value(a).iter().map(|x| x.exp()).collect();
        let g = self.grad_of(a.0);
        self.push(y, Op::Exp(a.0), g)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let mut y = self.value(a).to_vec();
        y.extend_from_slice(self.value(b));
        let g = self.grad_of(a.0) || self.grad_of(b.0);
        self.push(y, Op::Concat(a.0, b.0), g)
    }

    /// Inserts `value = f(x)` with its Jacobian `jac` (row-major).
    pub fn linearized(&mut self, x: Var, value: Vec<f64>, jac: Vec<f64>) -> Var {
        assert_eq!(jac.len(), value.len() * self.value(x).len(), "jacobian shape");
        let g = self.grad_of(x.0);
        self.push(value, Op::Linearized { x: x.0, jac }, g)
    }

    /// Sum of squares, a common reduction.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let s = self.square(a);
        self.sum(s)
    }

    pub fn backward(&self, loss: Var) -> Gradients {
        let n = self.nodes.len();
        let lens: Vec<usize> = self.nodes.iter().map(|nd| nd.value.len()).collect();
        let mut adj: Vec<Vec<f64>> = vec![Vec::new(); n];
        adj[loss.0] = vec![1.0; lens[loss.0]];

        for i in (0..=loss.0).rev() {
            if adj[i].is_empty() || !self.nodes[i].needs_grad {
                continue;
            }
            let gy = std::mem::take(&mut adj[i]);
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    adj[i] = gy;
                    continue;
                }
                Op::Affine { w, b, x } => {
                    let (w, b, x) = (*w, *b, *x);
                    let cols = lens[x];
                    let rows = lens[b];
                    if self.grad_of(x) {
                        let wv = &self.nodes[w].value;
                        let mut gx = vec![0.0; cols];
                        for r in 0..rows {
                            let g = gy[r];
                            if g == 0.0 {
                                continue;
                            }
                            let row = &wv[r * cols..(r + 1) * cols];
                            for (o, a) in gx.iter_mut().zip(row) {
                                *o += g * a;
                            }
                        }
                        add_into(&mut adj[x], cols, gx.into_iter());
                    }
                    if self.grad_of(w) {
                        let xv = &self.nodes[x].value;
                        let dst = &mut adj[w];
                        if dst.is_empty() {
                            dst.resize(rows * cols, 0.0);
                        }
                        for r in 0..rows {
                            let g = gy[r];
                            if g == 0.0 {
                                continue;
                            }
                            let row = &mut dst[r * cols..(r + 1) * cols];
                            for (o, a) in row.iter_mut().zip(xv) {
                                *o += g * a;
                            }
                        }
                    }
                    if self.grad_of(b) {
                        add_into(&mut adj[b], rows, gy.iter().copied());
                    }
                }
                Op::Act { x, kind } => {
                    let x = *x;
                    let xv = &self.nodes[x].value;
                    let yv = &node.value;
                    let it = gy
                        .iter()
                        .zip(xv.iter().zip(yv))
                        .map(|(g, (xi, yi))| g * kind.derivative(*xi, *yi));
                    add_into(&mut adj[x], lens[x], it);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.grad_of(a) {
                        add_into(&mut adj[a], lens[a], gy.iter().copied());
                    }
                    if self.grad_of(b) {
                        add_into(&mut adj[b], lens[b], gy.iter().copied());
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.grad_of(a) {
                        add_into(&mut adj[a], lens[a], gy.iter().copied());
                    }
                    if self.grad_of(b) {
                        add_into(&mut adj[b], lens[b], gy.iter().map(|g| -g));
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.grad_of(a) {
                        let bv = &self.nodes[b].value;
                        add_into(&mut adj[a], lens[a], gy.iter().zip(bv).map(|(g, v)| g * v));
                    }
                    if self.grad_of(b) {
                        let av = &self.nodes[a].value;
                        add_into(&mut adj[b], lens[b], gy.iter().zip(av).map(|(g, v)| g * v));
                    }
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    add_into(&mut adj[a], lens[a], gy.iter().map(|g| g * c));
                }
                Op::Sum(a) => {
                    let a = *a;
                    let g = gy[0];
                    add_into(&mut adj[a], lens[a], std::iter::repeat_n(g, lens[a]));
                }
                Op::Square(a) => {
                    let a = *a;
                    let av = &self.nodes[a].value;
                    add_into(&mut adj[a], lens[a], gy.iter().zip(av).map(|(g, v)| 2.0 * g * v));
                }
                Op::Log(a) => {
                    let a = *a;
                    let av = &self.nodes[a].value;
                    add_into(&mut adj[a], lens[a], gy.iter().zip(av).map(|(g, v)| g / v));
                }
                Op::Exp(a) => {
                    let a = *a;
                    let yv = &node.value;
                    add_into(&mut adj[a], lens[a], gy.iter().zip(yv).map(|(g, v)| g * v));
                }
                Op::Concat(a, b) => {
                    let (a, b) = (*a, *b);
                    let la = lens[a];
                    if self.grad_of(a) {
                        add_into(&mut adj[a], la, gy[..la].iter().copied());
                    }
                    if self.grad_of(b) {
                        add_into(&mut adj[b], lens[b], gy[la..].iter().copied());
                    }
                }
                Op::Linearized { x, jac } => {
                    let x = *x;
                    let cols = lens[x];
                    let mut gx = vec![0.0; cols];
                    for (r, g) in gy.iter().enumerate() {
                        let row = &jac[r * cols..(r + 1) * cols];
                        for (o, a) in gx.iter_mut().zip(row) {
                            *o += g * a;
                        }
                    }
                    add_into(&mut adj[x], cols, gx.into_iter());
                }
            }
        }
        Gradients { adjoints: adj, lens }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_diff(f: impl Fn(&[f64]) -> f64, p: &[f64]) -> Vec<f64> {
        (0..p.len())
            .map(|i| {
                let h = 1e-5 * p[i].abs().max(1.0);
                let mut a = p.to_vec();
                let mut b = p.to_vec();
                a[i] += h;
                b[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn square_of_three_has_gradient_six() {
        let mut t = Tape::new();
        let p = t.param(vec![3.0]);
        let l = t.mul(p, p);
        let g = t.backward(l);
        assert_eq!(g.of(p), vec![6.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let mut t = Tape::new();
        let p = t.param(vec![1.0, 2.0]);
        let c = t.constant(vec![5.0]);
        let l = t.sum(c);
        let g = t.backward(l);
        assert_eq!(g.of(p), vec![0.0, 0.0]);
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let program = |t: &mut Tape, p: Var| -> Var {
            let w = t.constant(vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4]);
            let b = t.constant(vec![0.05, -0.1]);
            let x3 = t.scale(p, 0.5);
            let y = t.affine(w, b, x3);
            let a = t.activation(y, Activation::Tanh);
            let s = t.activation(y, Activation::Silu);
            let r = t.activation(y, Activation::Relu);
            let m = t.mul(a, s);
            let e = t.exp(m);
            let sq = t.square(r);
            let lg = t.log(e);
            let c = t.concat(lg, sq);
            let d = t.add(c, c);
            let q = t.sub(d, c);
            t.sum(q)
        };
        let p0 = vec![0.9, -1.3, 0.4];
        let mut t = Tape::new();
        let p = t.param(p0.clone());
        let l = program(&mut t, p);
        let g = t.backward(l).of(p);
        let f = |q: &[f64]| {
            let mut t = Tape::new();
            let v = t.param(q.to_vec());
            let l = program(&mut t, v);
            t.scalar(l)
        };
        let fd = central_diff(f, &p0);
        for (a, b) in g.iter().zip(&fd) {
            assert!(rel_err(*a, *b) < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn affine_weight_gradients_match_finite_differences() {
        let w0 = vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4];
        let x = vec![0.2, -0.6, 1.1];
        let eval = |wv: &[f64], grad: bool| {
            let mut t = Tape::new();
            let w = if grad { t.param(wv.to_vec()) } else { t.constant(wv.to_vec()) };
            let b = t.constant(vec![0.0, 0.0]);
            let xv = t.constant(x.clone());
            let y = t.affine(w, b, xv);
            let a = t.activation(y, Activation::Tanh);
            let l = t.sum_sq(a);
            (t.scalar(l), if grad { t.backward(l).of(w) } else { vec![] })
        };
        let (_, g) = eval(&w0, true);
        let fd = central_diff(|q| eval(q, false).0, &w0);
        for (a, b) in g.iter().zip(&fd) {
            assert!(rel_err(*a, *b) < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn linearized_node_chains_jacobian() {
        let mut t = Tape::new();
        let x = t.param(vec![1.0, 2.0]);
        // y = (x0 * x1, x0 + x1)
        let xv = t.value(x).to_vec();
        let y = t.linearized(x, vec![xv[0] * xv[1], xv[0] + xv[1]], vec![xv[1], xv[0], 1.0, 1.0]);
        let l = t.sum(y);
        assert_eq!(t.backward(l).of(x), vec![3.0, 2.0]);
    }

    #[test]
    fn nonfinite_node_is_reported() {
        let mut t = Tape::new();
        let p = t.param(vec![-1.0]);
        let l = t.log(p);
        let _ = t.sum(l);
        match t.check_finite() {
            Err(Error::Numeric { node, op }) => {
                assert_eq!(node, 1);
                assert_eq!(op, "log");
            }
            other => panic!("expected numeric error, got {other:?}"),
        }
    }
}
