//! The recording tape.
//!
//! Values are computed eagerly when an op is added; the op and its inputs
//! are kept so that [`Graph::backward`] can replay the chain rule in
//! reverse insertion order. Node ids are indices into the tape, so a
//! node's inputs always precede it.

use crate::{Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, axis: usize, start: usize },
    Reshape(Var),
    Transpose(Var),
    Softmax { src: Var, axis: usize },
    LogSoftmax { src: Var, axis: usize },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Sum(Var),
    Pick(Var, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode differentiation tape.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2().ok_or_else(|| TensorError::Rank {
        op,
        expected: 2,
        shape: t.shape().to_vec(),
    })
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Splits a rank-2 shape into (outer, axis_len, inner) strides for `axis`.
fn axis_layout(op: &'static str, t: &Tensor, axis: usize) -> Result<(usize, usize, usize)> {
    let (r, c) = dims2(op, t)?;
    match axis {
        0 => Ok((1, r, c)),
        1 => Ok((r, c, 1)),
        _ => Err(TensorError::Axis {
            axis,
            shape: t.shape().to_vec(),
        }),
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

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn unary(&mut self, src: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = &self.nodes[src.0].value;
        let data = t.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("shape preserved");
        let needs = self.needs(&[src]);
        self.push(value, op, needs)
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = dims2("matmul", ta)?;
        let (k2, n) = dims2("matmul", tb)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), needs))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(name, ta, tb)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` tensor.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        let (m, n) = dims2("add_row", ta)?;
        if tb.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = ta.data().to_vec();
        for i in 0..m {
            for (o, &b) in data[i * n..(i + 1) * n].iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        let needs = self.needs(&[a, bias]);
        Ok(self.push(value, Op::AddRow(a, bias), needs))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// Concatenates rank-2 tensors along `axis` (0 stacks rows, 1 joins columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::InvalidShape(vec![]))?;
        let (r0, c0) = dims2("concat", &self.nodes[first.0].value)?;
        let mut total = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            let (r, c) = dims2("concat", t)?;
            let ok = match axis {
                0 => c == c0,
                1 => r == r0,
                _ => {
                    return Err(TensorError::Axis {
                        axis,
                        shape: t.shape().to_vec(),
                    })
                }
            };
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: vec![r0, c0],
                    rhs: vec![r, c],
                });
            }
            total += if axis == 0 { r } else { c };
        }
        let value = if axis == 0 {
            let mut data = Vec::with_capacity(total * c0);
            for p in parts {
                data.extend_from_slice(self.nodes[p.0].value.data());
            }
            Tensor::matrix(total, c0, data)?
        } else {
            let mut data = Vec::with_capacity(r0 * total);
            for i in 0..r0 {
                for p in parts {
                    let t = &self.nodes[p.0].value;
                    let c = t.shape()[1];
                    data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
                }
            }
            Tensor::matrix(r0, total, data)?
        };
        let needs = self.needs(parts);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// Takes `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&mut self, src: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[src.0].value;
        let (r, c) = dims2("slice", t)?;
        let extent = match axis {
            0 => r,
            1 => c,
            _ => {
                return Err(TensorError::Axis {
                    axis,
                    shape: t.shape().to_vec(),
                })
            }
        };
        if len == 0 || start + len > extent {
            return Err(TensorError::OutOfRange {
                start,
                end: start + len,
                len: extent,
            });
        }
        let value = if axis == 0 {
            Tensor::matrix(len, c, t.data()[start * c..(start + len) * c].to_vec())?
        } else {
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
            }
            Tensor::matrix(r, len, data)?
        };
        let needs = self.needs(&[src]);
        Ok(self.push(value, Op::Slice { src, axis, start }, needs))
    }

    pub fn reshape(&mut self, src: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[src.0].value.clone().reshape(shape.to_vec())?;
        let needs = self.needs(&[src]);
        Ok(self.push(value, Op::Reshape(src), needs))
    }

    pub fn transpose(&mut self, src: Var) -> Result<Var> {
        let t = &self.nodes[src.0].value;
        let (r, c) = dims2("transpose", t)?;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.data()[i * c + j];
            }
        }
        let value = Tensor::matrix(c, r, data)?;
        let needs = self.needs(&[src]);
        Ok(self.push(value, Op::Transpose(src), needs))
    }

    pub fn softmax(&mut self, src: Var, axis: usize) -> Result<Var> {
        let t = &self.nodes[src.0].value;
        let (outer, n, inner) = axis_layout("softmax", t, axis)?;
        let mut data = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (data[idx(j)] - max).exp();
                    data[idx(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    data[idx(j)] /= sum;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let needs = self.needs(&[src]);
        Ok(self.push(value, Op::Softmax { src, axis }, needs))
    }

    pub fn log_softmax(&mut self, src: Var, axis: usize) -> Result<Var> {
        let t = &self.nodes[src.0].value;
        let (outer, n, inner) = axis_layout("log_softmax", t, axis)?;
        let mut data = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..n).map(|j| (data[idx(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..n {
                    data[idx(j)] -= lse;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let needs = self.needs(&[src]);
        Ok(self.push(value, Op::LogSoftmax { src, axis }, needs))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, src: Var) -> Var {
        let s = self.nodes[src.0].value.data().iter().sum();
        let needs = self.needs(&[src]);
        self.push(Tensor::scalar(s), Op::Sum(src), needs)
    }

    /// Element `index` of the flattened tensor, as a `[1]` tensor.
    pub fn pick(&mut self, src: Var, index: usize) -> Result<Var> {
        let t = &self.nodes[src.0].value;
        if index >= t.len() {
            return Err(TensorError::OutOfRange {
                start: index,
                end: index + 1,
                len: t.len(),
            });
        }
        let v = t.data()[index];
        let needs = self.needs(&[src]);
        Ok(self.push(Tensor::scalar(v), Op::Pick(src, index), needs))
    }

    /// Propagates d(loss)/d(node) to every node that depends on a tracked leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = &self.nodes[loss.0].value;
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[v.0];
            if !n.needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = ta.dims2().unwrap();
                let n = tb.shape()[1];
                let (ad, bd) = (ta.data(), tb.data());
                acc(*a, &mut |da| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * va[i];
                    }
                });
            }
            Op::AddRow(a, bias) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*bias, &mut |d| {
                    let n = d.len();
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::Concat { parts, axis } => {
                let (rows, total) = node.value.dims2().unwrap();
                let mut offset = 0;
                for p in parts {
                    let (r, c) = self.nodes[p.0].value.dims2().unwrap();
                    acc(*p, &mut |d| {
                        if *axis == 0 {
                            add_into(d, &g[offset * c..(offset + r) * c]);
                        } else {
                            for i in 0..rows {
                                add_into(
                                    &mut d[i * c..(i + 1) * c],
                                    &g[i * total + offset..i * total + offset + c],
                                );
                            }
                        }
                    });
                    offset += if *axis == 0 { r } else { c };
                }
            }
            Op::Slice { src, axis, start } => {
                let (r, c) = node.value.dims2().unwrap();
                let src_cols = self.nodes[src.0].value.shape()[1];
                acc(*src, &mut |d| {
                    if *axis == 0 {
                        add_into(&mut d[start * c..(start + r) * c], g);
                    } else {
                        for i in 0..r {
                            let base = i * src_cols + start;
                            add_into(&mut d[base..base + c], &g[i * c..(i + 1) * c]);
                        }
                    }
                });
            }
            Op::Transpose(src) => {
                let (r, c) = node.value.dims2().unwrap();
                acc(*src, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Softmax { src, axis } => {
                let (outer, n, inner) = axis_layout("softmax", &node.value, *axis).unwrap();
                acc(*src, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| g[idx(j)] * out[idx(j)]).sum();
                            for j in 0..n {
                                d[idx(j)] += out[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { src, axis } => {
                let (outer, n, inner) = axis_layout("log_softmax", &node.value, *axis).unwrap();
                acc(*src, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            let gsum: f64 = (0..n).map(|j| g[idx(j)]).sum();
                            for j in 0..n {
                                d[idx(j)] += g[idx(j)] - out[idx(j)].exp() * gsum;
                            }
                        }
                    }
                });
            }
            Op::Tanh(a) => acc(*a, &mut |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * (1.0 - out[i] * out[i]);
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::Relu(a) => {
                let x = self.nodes[a.0].value.data();
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        if x[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                })
            }
            Op::Exp(a) => acc(*a, &mut |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * out[i];
                }
            }),
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::Pick(a, index) => acc(*a, &mut |d| d[*index] += g[0]),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v` shaped like its value; zeros when the loss does
    /// not reach `v`.
    pub fn tensor(&self, graph: &Graph, v: Var) -> Tensor {
        let shape = graph.shape(v).to_vec();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}
