//! Dynamic reverse-mode tape over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and the backward pass is a single reverse sweep.

use super::tensor::{matmul_a_bt, matmul_at_b, matmul_raw, Tensor};
use super::GradError;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Log(Var),
    Square(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SoftmaxLast(Var),
    CumsumLast(Var),
    Reshape(Var),
    SliceLast { src: Var, start: usize, len: usize },
    ConcatLast(Vec<Var>),
    Take { src: Var, indices: Vec<usize> },
    Select { mask: Vec<bool>, on_true: Var, on_false: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A tape of recorded tensor operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros if the loss does not
    /// depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match &self.adjoints[var.0] {
            Some(adj) => Tensor::new(shape, adj.clone()).expect("adjoint shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn is_connected(&self, var: Var) -> bool {
        self.adjoints[var.0].is_some()
    }
}

fn broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>, GradError> {
    let (big, small) = if (a.len(), a.shape().len()) >= (b.len(), b.shape().len()) { (a, b) } else { (b, a) };
    if a.shape() == b.shape() || small.len() == 1 {
        return Ok(big.shape().to_vec());
    }
    let (bs, ss) = (big.shape(), small.shape());
    if ss.len() <= bs.len() && bs[bs.len() - ss.len()..] == *ss {
        return Ok(bs.to_vec());
    }
    Err(GradError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })
}

/// Sums `grad` (laid out like the broadcast output) back into a buffer of
/// length `len`.
fn reduce_to(grad: &[f64], len: usize) -> Vec<f64> {
    if grad.len() == len {
        return grad.to_vec();
    }
    let mut out = vec![0.0; len];
    for (j, g) in grad.iter().enumerate() {
        out[j % len] += g;
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        None => *slot = Some(contrib),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var, GradError> {
        if !value.all_finite() {
            return Err(GradError::NonFinite { op: name });
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, GradError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast(name, ta, tb)?;
        let len: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let data = (0..len).map(|j| f(da[j % da.len()], db[j % db.len()])).collect();
        let value = Tensor::new(shape, data)?;
        self.push(name, value, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, GradError> {
        let value = self.value(a).map(f);
        self.push(name, value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(GradError::Shape {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        let value = Tensor::matrix(m, n, data)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, GradError> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, GradError> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, GradError> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var, GradError> {
        self.unary(
            "leaky_relu",
            a,
            |x| if x >= 0.0 { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    /// Elementwise clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, GradError> {
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, GradError> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, GradError> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(GradError::Invalid {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push("mean", value, Op::Mean(a), &[a])
    }

    pub fn softmax_last(&mut self, a: Var) -> Result<Var, GradError> {
        let t = self.value(a);
        let cols = t.cols();
        let mut data = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            let row = t.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            data.extend(exps.into_iter().map(|e| e / z));
        }
        debug_assert_eq!(data.len(), t.rows() * cols);
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push("softmax", value, Op::SoftmaxLast(a), &[a])
    }

    /// Inclusive prefix sum along the last axis.
    pub fn cumsum_last(&mut self, a: Var) -> Result<Var, GradError> {
        let t = self.value(a);
        let mut data = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            let mut acc = 0.0;
            for v in t.row(r) {
                acc += v;
                data.push(acc);
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push("cumsum", value, Op::CumsumLast(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, GradError> {
        let value = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var, GradError> {
        let t = self.value(a);
        if start + len > t.cols() {
            return Err(GradError::Invalid {
                op: "slice",
                msg: format!("range {}..{} exceeds last axis {}", start, start + len, t.cols()),
            });
        }
        let value = t.slice_cols(start, len);
        self.push("slice", value, Op::SliceLast { src: a, start, len }, &[a])
    }

    /// Concatenation along the last axis; all leading dimensions must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var, GradError> {
        let first = parts.first().ok_or(GradError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let lead = self.value(*first).shape()[..self.value(*first).shape().len().saturating_sub(1)].to_vec();
        let rows = self.value(*first).rows();
        let mut total = 0;
        for p in parts {
            let t = self.value(*p);
            let s = t.shape();
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(GradError::Shape {
                    op: "concat",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        self.push("concat", value, Op::ConcatLast(parts.to_vec()), parts)
    }

    /// Flat gather: `out[j] = src.data[indices[j]]`, reshaped to `shape`.
    pub fn take(&mut self, a: Var, indices: Vec<usize>, shape: Vec<usize>) -> Result<Var, GradError> {
        let t = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.len()) {
            return Err(GradError::Invalid {
                op: "take",
                msg: format!("index {} out of range for {} elements", bad, t.len()),
            });
        }
        let data = indices.iter().map(|&i| t.data()[i]).collect();
        let value = Tensor::new(shape, data)?;
        self.push("take", value, Op::Take { src: a, indices }, &[a])
    }

    /// Rows of a 2-D tensor.
    pub fn take_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, GradError> {
        let cols = self.value(a).cols();
        let indices = rows.iter().flat_map(|&r| (r * cols)..(r * cols + cols)).collect();
        self.take(a, indices, vec![rows.len(), cols])
    }

    /// Elementwise choice between two equally shaped tensors.
    pub fn select(&mut self, mask: Vec<bool>, on_true: Var, on_false: Var) -> Result<Var, GradError> {
        let (tt, tf) = (self.value(on_true), self.value(on_false));
        if tt.shape() != tf.shape() || mask.len() != tt.len() {
            return Err(GradError::Shape {
                op: "select",
                lhs: tt.shape().to_vec(),
                rhs: tf.shape().to_vec(),
            });
        }
        let data = mask
            .iter()
            .zip(tt.data().iter().zip(tf.data()))
            .map(|(&m, (&x, &y))| if m { x } else { y })
            .collect();
        let value = Tensor::new(tt.shape().to_vec(), data)?;
        self.push(
            "select",
            value,
            Op::Select {
                mask,
                on_true,
                on_false,
            },
            &[on_true, on_false],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, GradError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(GradError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            adj[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(&node.op, &node.value, &g, &mut adj);
            adj[idx] = Some(g);
        }
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    accumulate(&mut adj[a.0], reduce_to(g, self.value(*a).len()));
                }
                if self.wants(*b) {
                    let mut r = reduce_to(g, self.value(*b).len());
                    if sign < 0.0 {
                        r.iter_mut().for_each(|v| *v = -*v);
                    }
                    accumulate(&mut adj[b.0], r);
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let full: Vec<f64> = g.iter().enumerate().map(|(j, gv)| gv * db[j % db.len()]).collect();
                    accumulate(&mut adj[a.0], reduce_to(&full, da.len()));
                }
                if self.wants(*b) {
                    let full: Vec<f64> = g.iter().enumerate().map(|(j, gv)| gv * da[j % da.len()]).collect();
                    accumulate(&mut adj[b.0], reduce_to(&full, db.len()));
                }
            }
            Op::Div(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let full: Vec<f64> = g.iter().enumerate().map(|(j, gv)| gv / db[j % db.len()]).collect();
                    accumulate(&mut adj[a.0], reduce_to(&full, da.len()));
                }
                if self.wants(*b) {
                    let full: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(j, gv)| {
                            let y = db[j % db.len()];
                            -gv * da[j % da.len()] / (y * y)
                        })
                        .collect();
                    accumulate(&mut adj[b.0], reduce_to(&full, db.len()));
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    accumulate(&mut adj[a.0], matmul_a_bt(g, tb.data(), m, n, k));
                }
                if self.wants(*b) {
                    accumulate(&mut adj[b.0], matmul_at_b(ta.data(), g, m, k, n));
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    accumulate(&mut adj[a.0], g.iter().map(|v| v * c).collect());
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if self.wants(*a) {
                    accumulate(&mut adj[a.0], g.to_vec());
                }
            }
            Op::LeakyRelu(a, slope) => self.elementwise(*a, g, adj, |x, _| if x >= 0.0 { 1.0 } else { *slope }, out),
            Op::Exp(a) => self.elementwise(*a, g, adj, |_, y| y, out),
            Op::Log(a) => self.elementwise(*a, g, adj, |x, _| 1.0 / x, out),
            Op::Square(a) => self.elementwise(*a, g, adj, |x, _| 2.0 * x, out),
            Op::Softplus(a) => self.elementwise(*a, g, adj, |x, _| sigmoid(x), out),
            Op::Clamp(a, lo, hi) => {
                self.elementwise(*a, g, adj, |x, _| if x >= *lo && x <= *hi { 1.0 } else { 0.0 }, out)
            }
            Op::Sum(a) | Op::Mean(a) => {
                if self.wants(*a) {
                    let n = self.value(*a).len();
                    let v = if matches!(op, Op::Mean(_)) { g[0] / n as f64 } else { g[0] };
                    accumulate(&mut adj[a.0], vec![v; n]);
                }
            }
            Op::SoftmaxLast(a) => {
                if self.wants(*a) {
                    let cols = out.cols();
                    let mut res = vec![0.0; out.len()];
                    for r in 0..out.rows() {
                        let y = out.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            res[r * cols + c] = y[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut adj[a.0], res);
                }
            }
            Op::CumsumLast(a) => {
                if self.wants(*a) {
                    let cols = out.cols();
                    let mut res = vec![0.0; out.len()];
                    for r in 0..out.rows() {
                        let mut acc = 0.0;
                        for c in (0..cols).rev() {
                            acc += g[r * cols + c];
                            res[r * cols + c] = acc;
                        }
                    }
                    accumulate(&mut adj[a.0], res);
                }
            }
            Op::SliceLast { src, start, len } => {
                if self.wants(*src) {
                    let t = self.value(*src);
                    let cols = t.cols();
                    let mut res = vec![0.0; t.len()];
                    for r in 0..t.rows() {
                        res[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    accumulate(&mut adj[src.0], res);
                }
            }
            Op::ConcatLast(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut offset = 0;
                for p in parts {
                    let pc = self.value(*p).cols();
                    if self.wants(*p) {
                        let mut res = Vec::with_capacity(rows * pc);
                        for r in 0..rows {
                            res.extend_from_slice(&g[r * total + offset..r * total + offset + pc]);
                        }
                        accumulate(&mut adj[p.0], res);
                    }
                    offset += pc;
                }
            }
            Op::Take { src, indices } => {
                if self.wants(*src) {
                    let mut res = vec![0.0; self.value(*src).len()];
                    for (gv, &i) in g.iter().zip(indices) {
                        res[i] += gv;
                    }
                    accumulate(&mut adj[src.0], res);
                }
            }
            Op::Select {
                mask,
                on_true,
                on_false,
            } => {
                if self.wants(*on_true) {
                    let res = g.iter().zip(mask).map(|(gv, &m)| if m { *gv } else { 0.0 }).collect();
                    accumulate(&mut adj[on_true.0], res);
                }
                if self.wants(*on_false) {
                    let res = g.iter().zip(mask).map(|(gv, &m)| if m { 0.0 } else { *gv }).collect();
                    accumulate(&mut adj[on_false.0], res);
                }
            }
        }
    }

    /// Chain rule for elementwise unary ops; `d(x, y)` is the local derivative
    /// given input `x` and output `y`.
    fn elementwise(&self, a: Var, g: &[f64], adj: &mut [Option<Vec<f64>>], d: impl Fn(f64, f64) -> f64, out: &Tensor) {
        if !self.wants(a) {
            return;
        }
        let x = self.value(a).data();
        let res = g
            .iter()
            .zip(x.iter().zip(out.data()))
            .map(|(gv, (&xv, &yv))| gv * d(xv, yv))
            .collect();
        accumulate(&mut adj[a.0], res);
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 2], &[1., 2., 3., 4.]));
        let id = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let c = g.matmul(a, id).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn leaky_relu_negative_side() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(-1.0));
        let y = g.leaky_relu(x, 0.2).unwrap();
        assert!((g.value(y).item() + 0.2).abs() < 1e-15);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(-5.0));
        let y = g.leaky_relu(x, 0.2).unwrap();
        let grads = g.backward(y).unwrap();
        assert!((grads.wrt(x).item() - 0.2).abs() < 1e-15);

        // Subgradient at zero takes the positive side.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0));
        let y = g.leaky_relu(x, 0.2).unwrap();
        assert_eq!(g.backward(y).unwrap().wrt(x).item(), 1.0);
    }

    #[test]
    fn sum_of_squares() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1., 2., 3.]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        assert_eq!(g.value(s).item(), 14.0);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[2., 4., 6.]);
    }

    #[test]
    fn derivative_of_square() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.square(x).unwrap();
        assert_eq!(g.backward(y).unwrap().wrt(x).item(), 6.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1., 2.]));
        assert!(matches!(g.backward(x), Err(GradError::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 3], &[0.; 6]));
        let b = g.leaf(t(&[2], &[0.; 2]));
        assert!(matches!(g.add(a, b), Err(GradError::Shape { .. })));
        assert!(matches!(g.matmul(a, a), Err(GradError::Shape { .. })));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2], &[1.0, -1.0]));
        assert!(matches!(g.log(a), Err(GradError::NonFinite { op: "log" })));
        let big = g.leaf(Tensor::scalar(1000.0));
        assert!(g.exp(big).is_err());
    }

    #[test]
    fn unused_leaf_gets_exact_zero() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1., 2.]));
        let unused = g.leaf(t(&[3], &[5., 6., 7.]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(!grads.is_connected(unused));
        assert_eq!(grads.wrt(unused).data(), &[0., 0., 0.]);
    }

    #[test]
    fn repeated_backward_is_deterministic() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 2], &[0.3, -1.2, 2.0, 0.7]));
        let e = g.exp(x).unwrap();
        let sm = g.softmax_last(e).unwrap();
        let c = g.cumsum_last(sm).unwrap();
        let l = g.sum(c).unwrap();
        let first = g.backward(l).unwrap().wrt(x);
        let second = g.backward(l).unwrap().wrt(x);
        assert_eq!(first, second);
    }

    #[test]
    fn broadcast_bias_gradient_sums_rows() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let b = g.leaf(t(&[2], &[10., 20.]));
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[11., 22., 13., 24., 15., 26.]);
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(b).data(), &[3., 3.]);
    }

    #[test]
    fn equal_length_broadcast_keeps_the_higher_rank() {
        let mut g = Graph::new();
        let row = g.leaf(t(&[2], &[1., 2.]));
        let m = g.leaf(t(&[1, 2], &[3., 4.]));
        for y in [g.sub(row, m).unwrap(), g.sub(m, row).unwrap()] {
            assert_eq!(g.shape(y), &[1, 2]);
        }
    }

    #[test]
    fn softplus_inverse_round_trip() {
        for &y in &[1e-3, 0.5, 0.999, 3.0, 50.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }
}
