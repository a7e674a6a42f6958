//! Tape-style reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so walking the tape backwards visits every node after all
//! of its consumers. Each primitive carries a hand-derived backward rule.

use crate::error::{MsmfError, Result};

use super::ops;
use super::Tensor;

/// Handle to a node in one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Conv { x: Var, kernel: Var, bias: Var },
    Pool { x: Var, window: usize },
    Softmax(Var),
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Square(Var),
    Log(Var),
    Mean(Var),
    Sum(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node of a graph.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` is not on a path to the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.grads[v.0].take() {
            Some(g) => Tensor::new(shape, g).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Matmul(a, b), rg))
    }

    pub fn temporal_conv(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let value = ops::temporal_conv(self.value(x), self.value(kernel), self.value(bias))?;
        let rg = self.needs(&[x, kernel, bias]);
        Ok(self.push(value, Op::Conv { x, kernel, bias }, rg))
    }

    pub fn temporal_pool(&mut self, x: Var, window: usize) -> Result<Var> {
        let value = ops::temporal_pool(self.value(x), window)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Pool { x, window }, rg))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let value = ops::softmax(self.value(x))?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = ops::relu(self.value(x));
        let rg = self.needs(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        let rg = self.needs(&[x]);
        self.push(value, Op::Square(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::ln);
        let rg = self.needs(&[x]);
        self.push(value, Op::Log(x), rg)
    }

    /// Mean of all entries, as a `1 × 1` tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.needs(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    /// Sum of all entries, as a `1 × 1` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.needs(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = ops::concat(&tensors, axis)?;
        let rg = self.needs(parts);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = ops::slice(self.value(x), axis, start, len)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Slice { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    // Composite helpers built only from primitives.

    /// `x · c` for a constant scalar `c`.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let k = self.constant(Tensor::full(self.value(x).shape(), c));
        self.mul(x, k)
    }

    /// Row-wise `x · w + b` where `b` is `1 × n` and `x` is `r × k`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xw = self.matmul(x, weight)?;
        let rows = self.value(x).shape()[0];
        if rows == 1 {
            return self.add(xw, bias);
        }
        let ones = self.constant(Tensor::full(&[rows, 1], 1.0));
        let tiled = self.matmul(ones, bias)?;
        self.add(xw, tiled)
    }

    /// Column means of an `r × d` tensor, returned as `1 × d`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let rows = self.value(x).shape()[0];
        let avg = self.constant(Tensor::full(&[1, rows], 1.0 / rows as f64));
        self.matmul(avg, x)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(MsmfError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        dy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let av = self.value(a);
                let bv = self.value(b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.wants(a) {
                    // dA = dY · Bᵀ
                    let mut da = vec![0.0; m * k];
                    let bd = bv.data();
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += dy[i * n + j] * bd[p * n + j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    self.accumulate(grads, a, da);
                }
                if self.wants(b) {
                    // dB = Aᵀ · dY
                    let mut db = vec![0.0; k * n];
                    let ad = av.data();
                    for i in 0..m {
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += aip * dy[i * n + j];
                            }
                        }
                    }
                    self.accumulate(grads, b, db);
                }
            }
            Op::Conv { x, kernel, bias } => {
                let xv = self.value(x);
                let kv = self.value(kernel);
                let (t_len, d_in, w, d_out) = ops::conv_dims(xv, kv, self.value(bias))?;
                let pad = (w - 1) / 2;
                let xs = xv.data();
                let ks = kv.data();
                let mut dx = vec![0.0; xs.len()];
                let mut dk = vec![0.0; ks.len()];
                let mut db = vec![0.0; d_out];
                for t in 0..t_len {
                    let dyr = &dy[t * d_out..(t + 1) * d_out];
                    for (o, &g) in dyr.iter().enumerate() {
                        db[o] += g;
                    }
                    for k in 0..w {
                        let src = t + k;
                        if src < pad || src - pad >= t_len {
                            continue;
                        }
                        let s = src - pad;
                        for i in 0..d_in {
                            let base = (k * d_in + i) * d_out;
                            let xval = xs[s * d_in + i];
                            let mut acc = 0.0;
                            for o in 0..d_out {
                                acc += dyr[o] * ks[base + o];
                                dk[base + o] += dyr[o] * xval;
                            }
                            dx[s * d_in + i] += acc;
                        }
                    }
                }
                self.accumulate(grads, x, dx);
                self.accumulate(grads, kernel, dk);
                self.accumulate(grads, bias, db);
            }
            Op::Pool { x, window } => {
                let xv = self.value(x);
                let (t_len, d) = (xv.shape()[0], xv.shape()[1]);
                let mut dx = vec![0.0; t_len * d];
                for t in 0..t_len {
                    let r = t / window;
                    let start = r * window;
                    let count = ((start + window).min(t_len) - start) as f64;
                    for j in 0..d {
                        dx[t * d + j] = dy[r * d + j] / count;
                    }
                }
                self.accumulate(grads, x, dx);
            }
            Op::Softmax(x) => {
                let (rows, d) = out.as_matrix_dims();
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let ys = &y[r * d..(r + 1) * d];
                    let gs = &dy[r * d..(r + 1) * d];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = ys[j] * (gs[j] - dot);
                    }
                }
                self.accumulate(grads, x, dx);
            }
            Op::Relu(x) => {
                let xs = self.value(x).data();
                let dx = xs
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(grads, x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, dy.to_vec());
                self.accumulate(grads, b, dy.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, dy.to_vec());
                self.accumulate(grads, b, dy.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    let bs = self.value(b).data();
                    let da = dy.iter().zip(bs).map(|(g, v)| g * v).collect();
                    self.accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let as_ = self.value(a).data();
                    let db = dy.iter().zip(as_).map(|(g, v)| g * v).collect();
                    self.accumulate(grads, b, db);
                }
            }
            Op::Square(x) => {
                let xs = self.value(x).data();
                let dx = xs.iter().zip(dy).map(|(v, g)| 2.0 * v * g).collect();
                self.accumulate(grads, x, dx);
            }
            Op::Log(x) => {
                let xs = self.value(x).data();
                let dx = xs.iter().zip(dy).map(|(v, g)| g / v).collect();
                self.accumulate(grads, x, dx);
            }
            Op::Mean(x) => {
                let n = self.value(x).len();
                self.accumulate(grads, x, vec![dy[0] / n as f64; n]);
            }
            Op::Sum(x) => {
                let n = self.value(x).len();
                self.accumulate(grads, x, vec![dy[0]; n]);
            }
            Op::Concat { ref parts, axis } => {
                let (outer, extent, inner) = ops::axis_split(out.shape(), axis);
                let mut offset = 0;
                for &p in parts {
                    let pe = self.value(p).shape()[axis];
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(outer * pe * inner);
                        for o in 0..outer {
                            let base = o * extent * inner + offset * inner;
                            dp.extend_from_slice(&dy[base..base + pe * inner]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += pe;
                }
            }
            Op::Slice { x, axis, start } => {
                let xv = self.value(x);
                let (outer, extent, inner) = ops::axis_split(xv.shape(), axis);
                let len = out.shape()[axis];
                let mut dx = vec![0.0; xv.len()];
                for o in 0..outer {
                    let base = o * extent * inner + start * inner;
                    let src = o * len * inner;
                    dx[base..base + len * inner].copy_from_slice(&dy[src..src + len * inner]);
                }
                self.accumulate(grads, x, dx);
            }
            Op::Reshape(x) => {
                self.accumulate(grads, x, dy.to_vec());
            }
        }
        Ok(())
    }
}

/// Reverse-mode gradients of a scalar `loss` with respect to `params`.
/// Parameters not on a path to the loss receive zeros.
pub fn gradient(graph: &Graph, loss: Var, params: &[Var]) -> Result<Vec<Tensor>> {
    let mut grads = graph.backward(loss)?;
    Ok(params.iter().map(|&p| grads.take(p)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![3.0]));
        let sq = g.square(x);
        let loss = g.sum(sq);
        let grads = gradient(&g, loss, &[x]).unwrap();
        assert_eq!(grads[0].data(), &[6.0]);
    }

    #[test]
    fn disconnected_param_gets_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![1.0, 2.0]));
        let p = g.param(Tensor::row(vec![5.0, 5.0]));
        let loss = g.sum(x);
        let grads = gradient(&g, loss, &[p]).unwrap();
        assert_eq!(grads[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![0.4, -1.0, 2.2]));
        let s = g.softmax(x).unwrap();
        let loss = g.sum(s);
        let grads = gradient(&g, loss, &[x]).unwrap();
        for v in grads[0].data() {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn reuse_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![2.0]));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let loss = g.sum(z);
        let grads = gradient(&g, loss, &[x]).unwrap();
        assert_eq!(grads[0].data(), &[5.0]);
    }

    #[test]
    fn relu_subgradient_zero_at_kink() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![0.0, 1.0, -1.0]));
        let r = g.relu(x);
        let loss = g.sum(r);
        let grads = gradient(&g, loss, &[x]).unwrap();
        assert_eq!(grads[0].data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(
            g.backward(x).err().unwrap(),
            MsmfError::Contract(_)
        ));
    }
}
