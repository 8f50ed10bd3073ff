//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! Every node holds its forward value as a `[rows, cols]` matrix. Nodes are
//! appended in evaluation order, so a reverse sweep over the tape is a valid
//! topological order for the backward pass.

use super::tensor::gemm;
use super::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;
/// Floor applied to log-probabilities in [`Graph::cross_entropy`].
pub const LOG_PROB_FLOOR: f64 = -30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How [`Graph::expand_rows`] maps output rows to source rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Expand {
    /// Output row `i` copies source row `i % r`.
    Tile,
    /// Output row `i` copies source row `i / (m / r)`.
    Repeat,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Expand(Var, Expand),
    LayerNorm(Var, Vec<f64>),
    Gelu(Var),
    Softmax(Var),
    MeanSq(Var),
    Sum(Var),
    Slice(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    CrossEntropy(Var, Vec<usize>, Vec<bool>),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn as_matrix(t: Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    t.reshape(&[r, c]).expect("same element count")
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    std_normal_cdf(x) + x * std_normal_pdf(x)
}

/// Row-wise normalization over the last axis; returns `(y, 1/std)`.
pub fn layer_norm_rows(x: &[f64], cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; x.len()];
    let mut inv = Vec::with_capacity(x.len() / cols.max(1));
    for (row, out) in x.chunks_exact(cols).zip(y.chunks_exact_mut(cols)) {
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
        let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (o, v) in out.iter_mut().zip(row) {
            *o = (v - mean) * s;
        }
        inv.push(s);
    }
    (y, inv)
}

pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (row, out) in x.chunks_exact(cols).zip(y.chunks_exact_mut(cols)) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for (o, v) in out.iter_mut().zip(row) {
            *o = (v - m).exp();
            z += *o;
        }
        for o in out.iter_mut() {
            *o /= z;
        }
    }
    y
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// A leaf whose gradient is recorded.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(as_matrix(value), Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(as_matrix(value), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        dims(&self.nodes[v.0].value)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::contract(op, format!("shapes {:?} and {:?}", self.shape(a), self.shape(b)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            0.0,
            &mut out,
        );
        let t = self.tracked(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), t))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(self.mismatch("matmul_t", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (1, k as isize),
            0.0,
            &mut out,
        );
        let t = self.tracked(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulT(a, b), t))
    }

    fn elementwise(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(name, a, b));
        }
        let v = self.value(a).zip_map(self.value(b), name, f)?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(v, op, t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let t = self.tracked(&[a]);
        self.push(v, Op::Scale(a, s), t)
    }

    /// Broadcast a `[r, c]` matrix to `[rows, c]`; `rows` must be a multiple of `r`.
    pub fn expand_rows(&mut self, a: Var, rows: usize, mode: Expand) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r == 0 || !rows.is_multiple_of(r) {
            return Err(Error::contract(
                "expand_rows",
                format!("cannot expand {:?} to {rows} rows", (r, c)),
            ));
        }
        let times = rows / r;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows * c);
        for i in 0..rows {
            let s = match mode {
                Expand::Tile => i % r,
                Expand::Repeat => i / times,
            };
            out.extend_from_slice(&src[s * c..(s + 1) * c]);
        }
        let t = self.tracked(&[a]);
        Ok(self.push(Tensor::new(&[rows, c], out)?, Op::Expand(a, mode), t))
    }

    /// Normalization over the last axis without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let (y, inv) = layer_norm_rows(self.value(a).data(), c);
        let t = self.tracked(&[a]);
        self.push(
            Tensor::new(&[r, c], y).expect("shape preserved"),
            Op::LayerNorm(a, inv),
            t,
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let t = self.tracked(&[a]);
        self.push(v, Op::Gelu(a), t)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let y = softmax_rows(self.value(a).data(), c);
        let t = self.tracked(&[a]);
        self.push(Tensor::new(&[r, c], y).expect("shape preserved"), Op::Softmax(a), t)
    }

    /// Mean of squared entries, as a scalar.
    pub fn mean_sq(&mut self, a: Var) -> Var {
        let d = self.value(a).data();
        let v = d.iter().map(|x| x * x).sum::<f64>() / d.len() as f64;
        let t = self.tracked(&[a]);
        self.push(Tensor::scalar(v), Op::MeanSq(a), t)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).data().iter().sum::<f64>();
        let t = self.tracked(&[a]);
        self.push(Tensor::scalar(v), Op::Sum(a), t)
    }

    /// Rectangular block `[r0.., c0..]` of extent `rows × cols`.
    pub fn slice(&mut self, a: Var, r0: usize, rows: usize, c0: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r0 + rows > r || c0 + cols > c {
            return Err(Error::contract(
                "slice",
                format!("block at ({r0},{c0}) of {rows}x{cols} exceeds {r}x{c}"),
            ));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows * cols);
        for i in r0..r0 + rows {
            out.extend_from_slice(&src[i * c + c0..i * c + c0 + cols]);
        }
        let t = self.tracked(&[a]);
        Ok(self.push(Tensor::new(&[rows, cols], out)?, Op::Slice(a, r0, c0), t))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.shape(parts[0]).0;
        if parts.iter().any(|&p| self.shape(p).0 != r) {
            return Err(Error::contract("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = self.tracked(parts);
        Ok(self.push(Tensor::new(&[r, total], out)?, Op::ConcatCols(parts.to_vec()), t))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.shape(parts[0]).1;
        if parts.iter().any(|&p| self.shape(p).1 != c) {
            return Err(Error::contract("concat_rows", "column counts differ"));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let r = out.len() / c.max(1);
        let t = self.tracked(parts);
        Ok(self.push(Tensor::new(&[r, c], out)?, Op::ConcatRows(parts.to_vec()), t))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits`, with each log-probability floored at [`LOG_PROB_FLOOR`].
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.shape(logits);
        if labels.len() != b {
            return Err(Error::contract(
                "cross_entropy",
                format!("{b} rows but {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::contract("cross_entropy", format!("label {bad} outside 0..{k}")));
        }
        let x = self.value(logits).data();
        let mut total = 0.0;
        let mut clamped = Vec::with_capacity(b);
        for (row, &y) in x.chunks_exact(k).zip(labels) {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            let lp = row[y] - lse;
            clamped.push(lp < LOG_PROB_FLOOR);
            total -= lp.max(LOG_PROB_FLOOR);
        }
        let t = self.tracked(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / b as f64),
            Op::CrossEntropy(logits, labels.to_vec(), clamped),
            t,
        ))
    }

    /// Reverse sweep from a scalar root. Gradients of earlier sweeps are discarded.
    pub fn backward(&mut self, root: Var) {
        let n = self.nodes.len();
        self.grads = vec![None; n];
        self.grads[root.0] = Some(vec![1.0; self.nodes[root.0].value.len()]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].tracked {
                self.propagate(i, &g);
            }
            self.grads[i] = Some(g);
        }
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        let shape = self.nodes[v.0].value.shape().to_vec();
        Some(Tensor::new(&shape, g.clone()).expect("grad mirrors value"))
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Temporarily detach the op so child buffers can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                let bv = self.nodes[b.0].value.data().to_vec();
                if let Some(da) = self.acc(*a) {
                    gemm(m, n, k, g, (n as isize, 1), &bv, (1, n as isize), 1.0, da);
                }
                let av = self.nodes[a.0].value.data().to_vec();
                if let Some(db) = self.acc(*b) {
                    gemm(k, m, n, &av, (1, k as isize), g, (n as isize, 1), 1.0, db);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).0;
                let bv = self.nodes[b.0].value.data().to_vec();
                if let Some(da) = self.acc(*a) {
                    gemm(m, n, k, g, (n as isize, 1), &bv, (k as isize, 1), 1.0, da);
                }
                let av = self.nodes[a.0].value.data().to_vec();
                if let Some(db) = self.acc(*b) {
                    gemm(n, m, k, g, (1, n as isize), &av, (k as isize, 1), 1.0, db);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.acc(v) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.acc(*a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(d) = self.acc(*b) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let bv = self.nodes[b.0].value.data().to_vec();
                if let Some(d) = self.acc(*a) {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(&bv) {
                        *d += g * y;
                    }
                }
                let av = self.nodes[a.0].value.data().to_vec();
                if let Some(d) = self.acc(*b) {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(&av) {
                        *d += g * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(d) = self.acc(*a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g);
                }
            }
            Op::Expand(a, mode) => {
                let (r, c) = self.shape(*a);
                let rows = g.len() / c.max(1);
                let times = rows / r;
                if let Some(d) = self.acc(*a) {
                    for (i, grow) in g.chunks_exact(c).enumerate() {
                        let s = match mode {
                            Expand::Tile => i % r,
                            Expand::Repeat => i / times,
                        };
                        for (d, g) in d[s * c..(s + 1) * c].iter_mut().zip(grow) {
                            *d += g;
                        }
                    }
                }
            }
            Op::LayerNorm(a, inv) => {
                let c = self.shape(*a).1;
                let y = self.nodes[i].value.data().to_vec();
                if let Some(d) = self.acc(*a) {
                    for (r, s) in inv.iter().enumerate() {
                        let gy = &g[r * c..(r + 1) * c];
                        let yy = &y[r * c..(r + 1) * c];
                        let mg = gy.iter().sum::<f64>() / c as f64;
                        let mgy = gy.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            d[r * c + j] += s * (gy[j] - mg - yy[j] * mgy);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let x = self.nodes[a.0].value.data().to_vec();
                if let Some(d) = self.acc(*a) {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(&x) {
                        *d += g * gelu_grad(*x);
                    }
                }
            }
            Op::Softmax(a) => {
                let c = self.shape(*a).1;
                let y = self.nodes[i].value.data().to_vec();
                if let Some(d) = self.acc(*a) {
                    for ((d, gy), yy) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(y.chunks_exact(c)) {
                        let dot: f64 = gy.iter().zip(yy).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            d[j] += yy[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::MeanSq(a) => {
                let x = self.nodes[a.0].value.data().to_vec();
                let k = 2.0 * g[0] / x.len() as f64;
                if let Some(d) = self.acc(*a) {
                    d.iter_mut().zip(&x).for_each(|(d, x)| *d += k * x);
                }
            }
            Op::Sum(a) => {
                if let Some(d) = self.acc(*a) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Slice(a, r0, c0) => {
                let c = self.shape(*a).1;
                let (_, cols) = dims(&self.nodes[i].value);
                if let Some(d) = self.acc(*a) {
                    for (k, grow) in g.chunks_exact(cols).enumerate() {
                        let base = (r0 + k) * c + c0;
                        for (d, g) in d[base..base + cols].iter_mut().zip(grow) {
                            *d += g;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[i].value.cols();
                let mut off = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    if let Some(d) = self.acc(p) {
                        for (drow, grow) in d.chunks_exact_mut(pc).zip(g.chunks_exact(total)) {
                            for (d, g) in drow.iter_mut().zip(&grow[off..off + pc]) {
                                *d += g;
                            }
                        }
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    if let Some(d) = self.acc(p) {
                        d.iter_mut().zip(&g[off..off + len]).for_each(|(d, g)| *d += g);
                    }
                    off += len;
                }
            }
            Op::CrossEntropy(a, labels, clamped) => {
                let (b, k) = self.shape(*a);
                let p = softmax_rows(self.nodes[a.0].value.data(), k);
                let scale = g[0] / b as f64;
                if let Some(d) = self.acc(*a) {
                    for (r, (&y, &cl)) in labels.iter().zip(clamped).enumerate() {
                        if cl {
                            continue;
                        }
                        for j in 0..k {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            d[r * k + j] += scale * (p[r * k + j] - onehot);
                        }
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{gaussian, RngStream};

    fn rand(seed: u64, shape: &[usize]) -> Tensor {
        gaussian(&mut RngStream::new(seed, 99), shape)
    }

    /// Central differences of `f` at `x`, step 1e-5.
    fn finite_diff(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-5;
        let mut out = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        a.max_abs_diff(b) / a.max_abs().max(b.max_abs()).max(1e-300)
    }

    /// Checks d/dx of `sum(w ⊙ op(x, y))` for both operands.
    fn check_binary(shapes: (&[usize], &[usize]), op: impl Fn(&mut Graph, Var, Var) -> Var) {
        let x = rand(1, shapes.0);
        let y = rand(2, shapes.1);
        let eval = |x: &Tensor, y: &Tensor, grads: bool| {
            let mut g = Graph::new();
            let (vx, vy) = (g.param(x.clone()), g.param(y.clone()));
            let out = op(&mut g, vx, vy);
            let w = rand(3, &[g.shape(out).0, g.shape(out).1]);
            let vw = g.constant(w);
            let prod = g.mul(out, vw).unwrap();
            let loss = g.sum(prod);
            if grads {
                g.backward(loss);
            }
            (g.value(loss).item(), g.grad(vx), g.grad(vy))
        };
        let (_, gx, gy) = eval(&x, &y, true);
        let fx = finite_diff(&x, &|x| eval(x, &y, false).0);
        let gx = gx.unwrap().reshape(x.shape()).unwrap();
        assert!(rel_err(&gx, &fx) <= 1e-6, "lhs rel err {}", rel_err(&gx, &fx));
        // unary checks leave `y` disconnected
        if let Some(gy) = gy {
            let fy = finite_diff(&y, &|y| eval(&x, y, false).0);
            let gy = gy.reshape(y.shape()).unwrap();
            assert!(rel_err(&gy, &fy) <= 1e-6, "rhs rel err {}", rel_err(&gy, &fy));
        }
    }

    fn check_unary(op: impl Fn(&mut Graph, Var) -> Var) {
        check_binary((&[3, 4], &[3, 4]), |g, x, _| op(g, x));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let y = g.softmax(x);
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 5], 3.7));
        let y = g.layer_norm(x);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mean_sq_stationary_at_target() {
        let c = rand(5, &[3, 4]);
        let mut g = Graph::new();
        let x = g.param(c.clone());
        let k = g.constant(c);
        let d = g.sub(x, k).unwrap();
        let l = g.mean_sq(d);
        g.backward(l);
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[3, 4]));
        let b = g.constant(Tensor::zeros(&[3, 4]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("(3, 4)"), "{err}");
    }

    #[test]
    fn grad_matmul() {
        check_binary((&[3, 4], &[4, 5]), |g, a, b| g.matmul(a, b).unwrap());
    }

    #[test]
    fn grad_matmul_t() {
        check_binary((&[3, 4], &[5, 4]), |g, a, b| g.matmul_t(a, b).unwrap());
    }

    #[test]
    fn grad_add_sub_mul() {
        check_binary((&[3, 4], &[3, 4]), |g, a, b| g.add(a, b).unwrap());
        check_binary((&[3, 4], &[3, 4]), |g, a, b| g.sub(a, b).unwrap());
        check_binary((&[3, 4], &[3, 4]), |g, a, b| g.mul(a, b).unwrap());
    }

    #[test]
    fn grad_expand_rows() {
        check_binary((&[6, 4], &[2, 4]), |g, a, b| {
            let e = g.expand_rows(b, 6, Expand::Tile).unwrap();
            g.mul(a, e).unwrap()
        });
        check_binary((&[6, 4], &[2, 4]), |g, a, b| {
            let e = g.expand_rows(b, 6, Expand::Repeat).unwrap();
            g.mul(a, e).unwrap()
        });
    }

    #[test]
    fn grad_unary_ops() {
        check_unary(|g, x| g.layer_norm(x));
        check_unary(|g, x| g.gelu(x));
        check_unary(|g, x| g.softmax(x));
        check_unary(|g, x| g.scale(x, -1.7));
        check_unary(|g, x| {
            let m = g.mean_sq(x);
            g.expand_rows(m, 1, Expand::Tile).unwrap()
        });
    }

    #[test]
    fn grad_slice_and_concat() {
        check_binary((&[3, 4], &[3, 4]), |g, a, b| {
            let l = g.slice(a, 0, 3, 0, 2).unwrap();
            let r = g.slice(b, 0, 3, 1, 3).unwrap();
            let c = g.concat_cols(&[l, r]).unwrap();
            let top = g.slice(c, 0, 1, 0, 5).unwrap();
            g.concat_rows(&[c, top]).unwrap()
        });
    }

    #[test]
    fn grad_cross_entropy() {
        check_binary((&[3, 4], &[3, 4]), |g, a, b| {
            let s = g.add(a, b).unwrap();
            let ce = g.cross_entropy(s, &[0, 3, 1]).unwrap();
            g.expand_rows(ce, 1, Expand::Tile).unwrap()
        });
    }

    #[test]
    fn cross_entropy_floor_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[vec![100.0, -100.0]]).unwrap());
        let l = g.cross_entropy(x, &[1]).unwrap();
        assert_eq!(g.value(l).item(), 30.0);
        g.backward(l);
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.param(rand(1, &[2, 2]));
        let b = g.constant(rand(2, &[2, 2]));
        let m = g.mul(a, b).unwrap();
        let l = g.sum(m);
        g.backward(l);
        assert!(g.grad(a).is_some());
        assert!(g.grad(b).is_none());
    }
}
