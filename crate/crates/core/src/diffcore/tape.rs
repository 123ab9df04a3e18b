//! Define-by-run reverse-mode differentiation.
//!
//! Every primitive pushes a node holding its value and the handles of its
//! inputs. `backward` walks the nodes in reverse insertion order, which is a
//! valid reverse topological order because inputs always exist before the
//! node that consumes them.

use indexmap::IndexMap;

use super::array::NdArray;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
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
    Scale(Var, f64),
    Offset(Var, f64),
    Matmul(Var, Var),
    Bmv(Var, Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Elu(Var),
    Square(Var),
    Sum(Var),
    SumLast(Var),
    Concat(Vec<Var>, usize),
    Reshape(Var, Vec<usize>),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    LogSoftmax(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: NdArray,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Broadcast {
    Same,
    /// Left operand lacks the leading batch axis of the right one.
    Left,
    /// Right operand lacks the leading batch axis of the left one.
    Right,
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::Same)
    } else if b.len() == a.len() + 1 && &b[1..] == a {
        Ok(Broadcast::Left)
    } else if a.len() == b.len() + 1 && &a[1..] == b {
        Ok(Broadcast::Right)
    } else {
        Err(Error::Shape {
            op,
            left: a.to_vec(),
            right: b.to_vec(),
        })
    }
}

fn binary_forward(op: &'static str, a: &NdArray, b: &NdArray, f: impl Fn(f64, f64) -> f64) -> Result<NdArray> {
    let kind = broadcast(op, a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let (shape, data) = match kind {
        Broadcast::Same => (
            a.shape().to_vec(),
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        ),
        Broadcast::Left => {
            let w = ad.len();
            (
                b.shape().to_vec(),
                bd.iter().enumerate().map(|(i, &y)| f(ad[i % w], y)).collect(),
            )
        }
        Broadcast::Right => {
            let w = bd.len();
            (
                a.shape().to_vec(),
                ad.iter().enumerate().map(|(i, &x)| f(x, bd[i % w])).collect(),
            )
        }
    };
    Ok(NdArray::from_parts(shape, data))
}

/// Split a shape around `axis` into (outer, axis length, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn concat_forward(parts: &[&NdArray], axis: usize) -> Result<NdArray> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArray("concat of zero arrays".into()))?;
    let base = first.shape();
    if axis >= base.len() {
        return Err(Error::InvalidArray(format!(
            "concat axis {axis} out of range for {base:?}"
        )));
    }
    let mut total = 0;
    for p in parts {
        let s = p.shape();
        let compatible = s.len() == base.len()
            && s.iter()
                .zip(base)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::Shape {
                op: "concat",
                left: base.to_vec(),
                right: s.to_vec(),
            });
        }
        total += s[axis];
    }
    let (outer, _, inner) = axis_extents(base, axis);
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let w = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
        }
    }
    let mut shape = base.to_vec();
    shape[axis] = total;
    Ok(NdArray::from_parts(shape, data))
}

fn matmul_forward(a: &NdArray, b: &NdArray) -> Result<NdArray> {
    let err = || Error::Shape {
        op: "matmul",
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    };
    if a.ndim() != 2 || b.ndim() > 2 || a.shape()[1] != b.shape()[0] {
        return Err(err());
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = if b.ndim() == 2 { b.shape()[1] } else { 1 };
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = ad[i * k + p];
            if x == 0.0 {
                continue;
            }
            for (o, &y) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += x * y;
            }
        }
    }
    let shape = if b.ndim() == 2 { vec![m, n] } else { vec![m] };
    Ok(NdArray::from_parts(shape, out))
}

fn bmv_forward(a: &NdArray, v: &NdArray) -> Result<NdArray> {
    if a.ndim() != 3 || v.ndim() != 2 || a.shape()[0] != v.shape()[0] || a.shape()[2] != v.shape()[1] {
        return Err(Error::Shape {
            op: "bmv",
            left: a.shape().to_vec(),
            right: v.shape().to_vec(),
        });
    }
    let (bsz, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (ad, vd) = (a.data(), v.data());
    let mut out = vec![0.0; bsz * m];
    for b in 0..bsz {
        let vb = &vd[b * k..(b + 1) * k];
        for i in 0..m {
            let row = &ad[(b * m + i) * k..(b * m + i + 1) * k];
            out[b * m + i] = row.iter().zip(vb).map(|(x, y)| x * y).sum();
        }
    }
    Ok(NdArray::from_parts(vec![bsz, m], out))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// Reverse-mode record of one forward computation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: IndexMap<String, Var>,
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

    pub fn value(&self, v: Var) -> &NdArray {
        &self.nodes[v.0].value
    }

    pub fn last(&self) -> Option<Var> {
        self.nodes.len().checked_sub(1).map(Var)
    }

    /// Registered parameter leaves, in registration order.
    pub fn params(&self) -> &IndexMap<String, Var> {
        &self.params
    }

    /// Register a named, differentiable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: NdArray) -> Var {
        let v = self.push_leaf(value, true);
        self.params.insert(name.into(), v);
        v
    }

    /// An unnamed differentiable leaf (e.g. an initial state).
    pub fn input(&mut self, value: NdArray) -> Var {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: NdArray) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: NdArray, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = self.compute(&op)?;
        let requires_grad = self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) | Op::Bmv(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Elu(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::SumLast(a)
            | Op::Reshape(a, _)
            | Op::LogSoftmax(a) => vec![*a],
            Op::Slice { input, .. } => vec![*input],
            Op::Concat(parts, _) => parts.clone(),
        }
    }

    fn compute(&self, op: &Op) -> Result<NdArray> {
        let val = |v: &Var| &self.nodes[v.0].value;
        Ok(match op {
            Op::Leaf => unreachable!("leaves are never recomputed"),
            Op::Add(a, b) => binary_forward("add", val(a), val(b), |x, y| x + y)?,
            Op::Sub(a, b) => binary_forward("sub", val(a), val(b), |x, y| x - y)?,
            Op::Mul(a, b) => binary_forward("mul", val(a), val(b), |x, y| x * y)?,
            Op::Scale(a, c) => val(a).map(|x| c * x),
            Op::Offset(a, c) => val(a).map(|x| x + c),
            Op::Matmul(a, b) => matmul_forward(val(a), val(b))?,
            Op::Bmv(a, b) => bmv_forward(val(a), val(b))?,
            Op::Tanh(a) => val(a).map(f64::tanh),
            Op::Relu(a) => val(a).map(|x| x.max(0.0)),
            Op::Sigmoid(a) => val(a).map(sigmoid),
            Op::Elu(a) => val(a).map(elu),
            Op::Square(a) => val(a).map(|x| x * x),
            Op::Sum(a) => NdArray::scalar(val(a).data().iter().sum()),
            Op::SumLast(a) => {
                let x = val(a);
                let w = *x.shape().last().unwrap();
                let data: Vec<f64> = x.data().chunks(w).map(|c| c.iter().sum()).collect();
                let mut shape = x.shape().to_vec();
                *shape.last_mut().unwrap() = 1;
                NdArray::from_parts(shape, data)
            }
            Op::Concat(parts, axis) => {
                let arrs: Vec<&NdArray> = parts.iter().map(val).collect();
                concat_forward(&arrs, *axis)?
            }
            Op::Reshape(a, shape) => val(a).reshape(shape)?,
            Op::Slice {
                input,
                axis,
                start,
                len,
            } => {
                let x = val(input);
                if *axis >= x.ndim() || *len == 0 || start + len > x.shape()[*axis] {
                    return Err(Error::InvalidArray(format!(
                        "slice [{start}, {}) on axis {axis} of {:?}",
                        start + len,
                        x.shape()
                    )));
                }
                let (outer, n, inner) = axis_extents(x.shape(), *axis);
                let mut data = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    data.extend_from_slice(&x.data()[base..base + len * inner]);
                }
                let mut shape = x.shape().to_vec();
                shape[*axis] = *len;
                NdArray::from_parts(shape, data)
            }
            Op::LogSoftmax(a) => {
                let x = val(a);
                let w = *x.shape().last().unwrap();
                let mut data = Vec::with_capacity(x.len());
                for row in x.data().chunks(w) {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    data.extend(row.iter().map(|v| v - lse));
                }
                NdArray::from_parts(x.shape().to_vec(), data)
            }
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::Offset(a, c))
    }

    /// `[m,k]·[k,n]` or `[m,k]·[k]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Matmul(a, b))
    }

    /// Batched matrix-vector product `[B,m,k]·[B,k] -> [B,m]`.
    pub fn bmv(&mut self, a: Var, v: Var) -> Result<Var> {
        self.push(Op::Bmv(a, v))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid(a))
    }

    pub fn elu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Elu(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Square(a))
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    /// Sum over the last axis, keeping it with length 1.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumLast(a))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.push(Op::Concat(parts.to_vec(), axis))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.push(Op::Slice {
            input: a,
            axis,
            start,
            len,
        })
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LogSoftmax(a))
    }

    /// Recompute every non-leaf node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<NdArray>> {
        let mut replayed = Tape {
            nodes: Vec::with_capacity(self.nodes.len()),
            params: IndexMap::new(),
        };
        for node in &self.nodes {
            let value = match node.op {
                Op::Leaf => node.value.clone(),
                _ => replayed.compute(&node.op)?,
            };
            replayed.nodes.push(Node {
                value,
                op: node.op.clone(),
                requires_grad: node.requires_grad,
            });
        }
        Ok(replayed.nodes.into_iter().map(|n| n.value).collect())
    }

    /// Backpropagate `seed` from the most recent node.
    pub fn backward(&self, seed: &NdArray) -> Result<Gradients> {
        let out = self.last().ok_or(Error::EmptyTape)?;
        self.backward_from(out, seed)
    }

    /// Gradients of `seed · value(output)` with respect to every node.
    pub fn backward_from(&self, output: Var, seed: &NdArray) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let out_shape = self.nodes[output.0].value.shape();
        if seed.shape() != out_shape {
            return Err(Error::Shape {
                op: "backward seed",
                left: seed.shape().to_vec(),
                right: out_shape.to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.data().to_vec());

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.clone(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, contrib: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            contrib(slot);
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let kind = broadcast("add", val(a).shape(), val(b).shape())?;
                let reduce = |target: &mut [f64], s: f64| {
                    let w = target.len();
                    for (i, gi) in g.iter().enumerate() {
                        target[i % w] += s * gi;
                    }
                };
                match kind {
                    Broadcast::Same => {
                        acc(grads, *a, &|t| t.iter_mut().zip(g).for_each(|(x, gi)| *x += gi));
                        acc(grads, *b, &|t| t.iter_mut().zip(g).for_each(|(x, gi)| *x += sign * gi));
                    }
                    Broadcast::Left => {
                        acc(grads, *a, &|t| reduce(t, 1.0));
                        acc(grads, *b, &|t| t.iter_mut().zip(g).for_each(|(x, gi)| *x += sign * gi));
                    }
                    Broadcast::Right => {
                        acc(grads, *a, &|t| t.iter_mut().zip(g).for_each(|(x, gi)| *x += gi));
                        acc(grads, *b, &|t| reduce(t, sign));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let kind = broadcast("mul", av.shape(), bv.shape())?;
                let (ad, bd) = (av.data(), bv.data());
                match kind {
                    Broadcast::Same => {
                        acc(grads, *a, &|t| {
                            for i in 0..t.len() {
                                t[i] += g[i] * bd[i];
                            }
                        });
                        acc(grads, *b, &|t| {
                            for i in 0..t.len() {
                                t[i] += g[i] * ad[i];
                            }
                        });
                    }
                    Broadcast::Left => {
                        let w = ad.len();
                        acc(grads, *a, &|t| {
                            for i in 0..g.len() {
                                t[i % w] += g[i] * bd[i];
                            }
                        });
                        acc(grads, *b, &|t| {
                            for i in 0..g.len() {
                                t[i] += g[i] * ad[i % w];
                            }
                        });
                    }
                    Broadcast::Right => {
                        let w = bd.len();
                        acc(grads, *a, &|t| {
                            for i in 0..g.len() {
                                t[i] += g[i] * bd[i % w];
                            }
                        });
                        acc(grads, *b, &|t| {
                            for i in 0..g.len() {
                                t[i % w] += g[i] * ad[i];
                            }
                        });
                    }
                }
            }
            Op::Scale(a, c) => acc(grads, *a, &|t| t.iter_mut().zip(g).for_each(|(x, gi)| *x += c * gi)),
            Op::Offset(a, _) => acc(grads, *a, &|t| t.iter_mut().zip(g).for_each(|(x, gi)| *x += gi)),
            Op::Matmul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = if bv.ndim() == 2 { bv.shape()[1] } else { 1 };
                let (ad, bd) = (av.data(), bv.data());
                if wants(a) {
                    // dA = G · Bᵀ
                    acc(grads, *a, &|t| {
                        for i in 0..m {
                            let gr = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let br = &bd[p * n..(p + 1) * n];
                                t[i * k + p] += gr.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    });
                }
                if wants(b) {
                    // dB = Aᵀ · G
                    acc(grads, *b, &|t| {
                        for i in 0..m {
                            let gr = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let x = ad[i * k + p];
                                if x == 0.0 {
                                    continue;
                                }
                                for (tj, gj) in t[p * n..(p + 1) * n].iter_mut().zip(gr) {
                                    *tj += x * gj;
                                }
                            }
                        }
                    });
                }
            }
            Op::Bmv(a, v) => {
                let (av, vv) = (val(a), val(v));
                let (bsz, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let (ad, vd) = (av.data(), vv.data());
                acc(grads, *a, &|t| {
                    for b in 0..bsz {
                        for i in 0..m {
                            let gi = g[b * m + i];
                            for j in 0..k {
                                t[(b * m + i) * k + j] += gi * vd[b * k + j];
                            }
                        }
                    }
                });
                acc(grads, *v, &|t| {
                    for b in 0..bsz {
                        for i in 0..m {
                            let gi = g[b * m + i];
                            for j in 0..k {
                                t[b * k + j] += gi * ad[(b * m + i) * k + j];
                            }
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(grads, *a, &|t| {
                    for i in 0..t.len() {
                        t[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Relu(a) => {
                let x = val(a).data();
                acc(grads, *a, &|t| {
                    for i in 0..t.len() {
                        if x[i] > 0.0 {
                            t[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(grads, *a, &|t| {
                    for i in 0..t.len() {
                        t[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Elu(a) => {
                let (x, y) = (val(a).data(), node.value.data());
                acc(grads, *a, &|t| {
                    for i in 0..t.len() {
                        t[i] += g[i] * if x[i] > 0.0 { 1.0 } else { y[i] + 1.0 };
                    }
                });
            }
            Op::Square(a) => {
                let x = val(a).data();
                acc(grads, *a, &|t| {
                    for i in 0..t.len() {
                        t[i] += 2.0 * x[i] * g[i];
                    }
                });
            }
            Op::Sum(a) => acc(grads, *a, &|t| t.iter_mut().for_each(|x| *x += g[0])),
            Op::SumLast(a) => {
                let w = *val(a).shape().last().unwrap();
                acc(grads, *a, &|t| {
                    for (i, x) in t.iter_mut().enumerate() {
                        *x += g[i / w];
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_extents(node.value.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let n = val(p).shape()[*axis];
                    let start = offset;
                    acc(grads, *p, &|t| {
                        for o in 0..outer {
                            let src = &g[(o * total + start) * inner..(o * total + start + n) * inner];
                            for (x, gi) in t[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src) {
                                *x += gi;
                            }
                        }
                    });
                    offset += n;
                }
            }
            Op::Reshape(a, _) => acc(grads, *a, &|t| t.iter_mut().zip(g).for_each(|(x, gi)| *x += gi)),
            Op::Slice {
                input,
                axis,
                start,
                len,
            } => {
                let (outer, n, inner) = axis_extents(val(input).shape(), *axis);
                acc(grads, *input, &|t| {
                    for o in 0..outer {
                        let base = o * n * inner + start * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (x, gi) in t[base..base + len * inner].iter_mut().zip(src) {
                            *x += gi;
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let w = *node.value.shape().last().unwrap();
                acc(grads, *a, &|t| {
                    for r in 0..y.len() / w {
                        let gs: f64 = g[r * w..(r + 1) * w].iter().sum();
                        for j in r * w..(r + 1) * w {
                            t[j] += g[j] - y[j].exp() * gs;
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

/// Result of a backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: IndexMap<String, Var>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> NdArray {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => NdArray::from_parts(self.shapes[v.0].clone(), g.clone()),
            None => NdArray::zeros(&self.shapes[v.0]),
        }
    }

    /// Gradient of every registered parameter, keyed by name.
    pub fn params(&self) -> IndexMap<String, NdArray> {
        self.params
            .iter()
            .map(|(name, &v)| (name.clone(), self.wrt(v)))
            .collect()
    }
}
