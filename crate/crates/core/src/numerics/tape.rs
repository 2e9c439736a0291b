//! Dynamic reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of one evaluation. Leaves are either
//! trainable ([`Tape::param`]) or constant ([`Tape::constant`]); only nodes
//! that depend on a trainable leaf take part in [`Tape::backward`]. A fresh
//! tape is built for each evaluation, so which quantities are trainable can
//! change from one loop to the next.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{shape_len, TensorValue};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Vector-Jacobian product of an operation defined outside this module.
pub trait CustomBackward {
    /// Given the gradient of the output, returns one gradient per input, in
    /// the order the inputs were passed to [`Tape::custom`].
    fn backward(&self, out_grad: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Silu(usize),
    Linear { x: usize, w: usize, b: usize, rows: usize, inputs: usize, outputs: usize },
    Concat { parts: Vec<(usize, usize)>, rows: usize },
    Stack { parts: Vec<usize> },
    Combine { parts: Vec<(usize, f64)> },
    Sum(usize),
    Mean(usize),
    SumSquares(usize),
    Dot(usize, usize),
    WeightedSum { x: usize, weights: Vec<f64> },
    Reshape(usize),
    Custom { inputs: Vec<usize>, backward: Box<dyn CustomBackward> },
}

struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Per-evaluation operation record.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape_len(&shape));
        let index = self.nodes.len();
        self.nodes.push(Node { value, shape, op, requires_grad });
        Var { tape: self.id, index }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Provenance);
        }
        Ok(v.index)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        Ok(&self.nodes[self.idx(v)?])
    }

    /// Records a trainable leaf holding a copy of `t`.
    pub fn param(&mut self, t: &TensorValue) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, true)
    }

    /// Records a constant leaf holding a copy of `t`.
    pub fn constant(&mut self, t: &TensorValue) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if shape_len(shape) != data.len() {
            return Err(Error::shape("constant", format!("{} values for {shape:?}", data.len())));
        }
        Ok(self.push(data, shape.to_vec(), Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> Result<&[f64]> {
        Ok(&self.node(v)?.value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(&self.node(v)?.shape)
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let n = self.node(v)?;
        if n.value.len() != 1 {
            return Err(Error::shape("scalar_value", format!("shape {:?}", n.shape)));
        }
        Ok(n.value[0])
    }

    /// Copies the recorded value out as a tensor.
    pub fn tensor(&self, v: Var) -> Result<TensorValue> {
        let n = self.node(v)?;
        TensorValue::new(&n.shape, n.value.clone())
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (na, nb) = (&self.nodes[ia], &self.nodes[ib]);
        if na.shape != nb.shape {
            return Err(Error::shape(name, format!("{:?} vs {:?}", na.shape, nb.shape)));
        }
        let value = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
        let shape = na.shape.clone();
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(value, shape, op(ia, ib), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let n = &self.nodes[ia];
        let value = n.value.iter().map(|v| v * c).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(value, shape, Op::Scale(ia, c), rg))
    }

    /// `x * sigmoid(x)`, elementwise.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let n = &self.nodes[ia];
        let value = n.value.iter().map(|&x| x * sigmoid(x)).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(value, shape, Op::Silu(ia), rg))
    }

    /// Affine layer `x W^T + b` for `x` of shape `[rows, in]` (or `[in]`),
    /// `w` of shape `[out, in]` and `b` of shape `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (ix, iw, ib) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let (nx, nw, nb) = (&self.nodes[ix], &self.nodes[iw], &self.nodes[ib]);
        if nw.shape.len() != 2 || nb.shape != [nw.shape[0]] {
            return Err(Error::shape("linear", format!("w {:?}, b {:?}", nw.shape, nb.shape)));
        }
        let (outputs, inputs) = (nw.shape[0], nw.shape[1]);
        let (rows, out_shape) = match nx.shape.as_slice() {
            [n] if *n == inputs => (1, vec![outputs]),
            [r, n] if *n == inputs => (*r, vec![*r, outputs]),
            s => return Err(Error::shape("linear", format!("x {s:?} vs w {:?}", nw.shape))),
        };
        let mut value = vec![0.0; rows * outputs];
        for r in 0..rows {
            let xr = &nx.value[r * inputs..(r + 1) * inputs];
            let out = &mut value[r * outputs..(r + 1) * outputs];
            for (o, slot) in out.iter_mut().enumerate() {
                let wo = &nw.value[o * inputs..(o + 1) * inputs];
                let mut acc = nb.value[o];
                for (a, c) in wo.iter().zip(xr) {
                    acc += a * c;
                }
                *slot = acc;
            }
        }
        let rg = nx.requires_grad || nw.requires_grad || nb.requires_grad;
        Ok(self.push(value, out_shape, Op::Linear { x: ix, w: iw, b: ib, rows, inputs, outputs }, rg))
    }

    /// Concatenates along the last axis. Inputs are `[rows, k_i]` or, when
    /// all are rank 1, `[k_i]`.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let mut idx = Vec::with_capacity(parts.len());
        let mut rows = None;
        let mut rank1 = true;
        for &p in parts {
            let i = self.idx(p)?;
            let s = &self.nodes[i].shape;
            let (r, w) = match s.as_slice() {
                [w] => (1, *w),
                [r, w] => {
                    rank1 = false;
                    (*r, *w)
                }
                _ => return Err(Error::shape("concat", format!("rank of {s:?}"))),
            };
            if *rows.get_or_insert(r) != r {
                return Err(Error::shape("concat", "row counts differ"));
            }
            idx.push((i, w));
        }
        let rows = rows.unwrap_or(1);
        let total: usize = idx.iter().map(|p| p.1).sum();
        let mut value = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(i, w) in &idx {
                value.extend_from_slice(&self.nodes[i].value[r * w..(r + 1) * w]);
            }
        }
        let rg = idx.iter().any(|&(i, _)| self.nodes[i].requires_grad);
        let shape = if rank1 { vec![total] } else { vec![rows, total] };
        Ok(self.push(value, shape, Op::Concat { parts: idx, rows }, rg))
    }

    /// Stacks equally shaped rank-1 values into `[count, width]`.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("stack", "no inputs"))?;
        let width = self.node(*first)?.value.len();
        let mut idx = Vec::with_capacity(parts.len());
        let mut value = Vec::with_capacity(width * parts.len());
        for &p in parts {
            let i = self.idx(p)?;
            let n = &self.nodes[i];
            if n.shape.len() != 1 || n.value.len() != width {
                return Err(Error::shape("stack", format!("{:?}", n.shape)));
            }
            value.extend_from_slice(&n.value);
            idx.push(i);
        }
        let rg = idx.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(value, vec![parts.len(), width], Op::Stack { parts: idx }, rg))
    }

    /// Linear combination `sum_i coeff_i * part_i` of equally shaped values.
    pub fn combine(&mut self, parts: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = parts.first().ok_or_else(|| Error::shape("combine", "no inputs"))?;
        let shape = self.node(*first)?.shape.clone();
        let mut value = vec![0.0; shape_len(&shape)];
        let mut idx = Vec::with_capacity(parts.len());
        for &(p, c) in parts {
            let i = self.idx(p)?;
            let n = &self.nodes[i];
            if n.shape != shape {
                return Err(Error::shape("combine", format!("{:?} vs {shape:?}", n.shape)));
            }
            for (acc, v) in value.iter_mut().zip(&n.value) {
                *acc += c * v;
            }
            idx.push((i, c));
        }
        let rg = idx.iter().any(|&(i, _)| self.nodes[i].requires_grad);
        Ok(self.push(value, shape, Op::Combine { parts: idx }, rg))
    }

    fn reduce(&mut self, a: Var, f: impl Fn(&[f64]) -> f64, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let ia = self.idx(a)?;
        let n = &self.nodes[ia];
        let v = f(&n.value);
        let rg = n.requires_grad;
        Ok(self.push(vec![v], vec![1], op(ia), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, |v| v.iter().sum(), Op::Sum)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, |v| v.iter().sum::<f64>() / v.len() as f64, Op::Mean)
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, |v| v.iter().map(|x| x * x).sum(), Op::SumSquares)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (na, nb) = (&self.nodes[ia], &self.nodes[ib]);
        if na.shape != nb.shape {
            return Err(Error::shape("dot", format!("{:?} vs {:?}", na.shape, nb.shape)));
        }
        let v = na.value.iter().zip(&nb.value).map(|(x, y)| x * y).sum();
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(vec![v], vec![1], Op::Dot(ia, ib), rg))
    }

    /// `sum_i weights_i * a_i` with constant weights.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<f64>) -> Result<Var> {
        let ia = self.idx(a)?;
        let n = &self.nodes[ia];
        if weights.len() != n.value.len() {
            return Err(Error::shape("weighted_sum", format!("{} weights for {:?}", weights.len(), n.shape)));
        }
        let v = n.value.iter().zip(&weights).map(|(x, w)| x * w).sum();
        let rg = n.requires_grad;
        Ok(self.push(vec![v], vec![1], Op::WeightedSum { x: ia, weights }, rg))
    }

    /// Mean of squared differences between `a` and a constant target.
    pub fn mse(&mut self, a: Var, target: &[f64]) -> Result<Var> {
        let shape = self.shape(a)?.to_vec();
        let t = self.constant_from(&shape, target.to_vec())?;
        let d = self.sub(a, t)?;
        let s = self.sum_squares(d)?;
        self.scale(s, 1.0 / target.len() as f64)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let n = &self.nodes[ia];
        if shape_len(shape) != n.value.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", n.shape)));
        }
        let (value, rg) = (n.value.clone(), n.requires_grad);
        Ok(self.push(value, shape.to_vec(), Op::Reshape(ia), rg))
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Vec<f64>,
        shape: &[usize],
        backward: Box<dyn CustomBackward>,
    ) -> Result<Var> {
        if shape_len(shape) != value.len() {
            return Err(Error::shape("custom", format!("{} values for {shape:?}", value.len())));
        }
        let idx = inputs.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let rg = idx.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(value, shape.to_vec(), Op::Custom { inputs: idx, backward }, rg))
    }

    /// Propagates `d loss / d node` to every node that depends on a
    /// trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.idx(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(Error::shape("backward", format!("loss has shape {:?}", self.nodes[root].shape)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root).map(|_| None).collect();
        if self.nodes[root].requires_grad {
            grads[root] = Some(vec![1.0]);
        }
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: usize, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let slot = grads[target].get_or_insert_with(|| vec![0.0; self.nodes[target].value.len()]);
        f(slot);
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                self.accumulate(grads, *b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                self.accumulate(grads, *b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                self.accumulate(grads, *a, |s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(vb) {
                        *s += g * y;
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(va) {
                        *s += g * x;
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g));
            }
            Op::Silu(a) => {
                let x = &self.nodes[*a].value;
                self.accumulate(grads, *a, |s| {
                    for ((s, g), &x) in s.iter_mut().zip(g).zip(x) {
                        let sg = sigmoid(x);
                        *s += g * sg * (1.0 + x * (1.0 - sg));
                    }
                });
            }
            Op::Linear { x, w, b, rows, inputs, outputs } => {
                let (rows, inputs, outputs) = (*rows, *inputs, *outputs);
                let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                self.accumulate(grads, *x, |s| {
                    for r in 0..rows {
                        let gr = &g[r * outputs..(r + 1) * outputs];
                        let sr = &mut s[r * inputs..(r + 1) * inputs];
                        for (o, &go) in gr.iter().enumerate() {
                            if go == 0.0 {
                                continue;
                            }
                            let wo = &wv[o * inputs..(o + 1) * inputs];
                            for (acc, wk) in sr.iter_mut().zip(wo) {
                                *acc += go * wk;
                            }
                        }
                    }
                });
                self.accumulate(grads, *w, |s| {
                    for r in 0..rows {
                        let gr = &g[r * outputs..(r + 1) * outputs];
                        let xr = &xv[r * inputs..(r + 1) * inputs];
                        for (o, &go) in gr.iter().enumerate() {
                            if go == 0.0 {
                                continue;
                            }
                            let so = &mut s[o * inputs..(o + 1) * inputs];
                            for (acc, xk) in so.iter_mut().zip(xr) {
                                *acc += go * xk;
                            }
                        }
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for r in 0..rows {
                        for (acc, go) in s.iter_mut().zip(&g[r * outputs..(r + 1) * outputs]) {
                            *acc += go;
                        }
                    }
                });
            }
            Op::Concat { parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, w) in parts {
                    self.accumulate(grads, p, |s| {
                        for r in 0..*rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            for (acc, v) in s[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *acc += v;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Stack { parts } => {
                let width = g.len() / parts.len();
                for (r, &p) in parts.iter().enumerate() {
                    self.accumulate(grads, p, |s| {
                        for (acc, v) in s.iter_mut().zip(&g[r * width..(r + 1) * width]) {
                            *acc += v;
                        }
                    });
                }
            }
            Op::Combine { parts } => {
                for &(p, c) in parts {
                    self.accumulate(grads, p, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g));
                }
            }
            Op::Sum(a) => self.accumulate(grads, *a, |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(a) => {
                let c = g[0] / self.nodes[*a].value.len() as f64;
                self.accumulate(grads, *a, |s| s.iter_mut().for_each(|s| *s += c));
            }
            Op::SumSquares(a) => {
                let x = &self.nodes[*a].value;
                self.accumulate(grads, *a, |s| {
                    for (s, x) in s.iter_mut().zip(x) {
                        *s += 2.0 * g[0] * x;
                    }
                });
            }
            Op::Dot(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                self.accumulate(grads, *a, |s| s.iter_mut().zip(vb).for_each(|(s, y)| *s += g[0] * y));
                self.accumulate(grads, *b, |s| s.iter_mut().zip(va).for_each(|(s, x)| *s += g[0] * x));
            }
            Op::WeightedSum { x, weights } => {
                self.accumulate(grads, *x, |s| {
                    s.iter_mut().zip(weights).for_each(|(s, w)| *s += g[0] * w)
                });
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Custom { inputs, backward } => {
                if inputs.iter().all(|&p| !self.nodes[p].requires_grad) {
                    return;
                }
                let local = backward.backward(g);
                for (&p, lg) in inputs.iter().zip(local) {
                    self.accumulate(grads, p, |s| s.iter_mut().zip(&lg).for_each(|(s, g)| *s += g));
                }
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` when `v` is unreachable
    /// from the loss or does not depend on a trainable leaf.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }

    /// Writes gradients into the grad slots of the bound tensors. Tensors
    /// whose variable is unreachable keep their previous grad.
    pub fn assign<'a>(&self, bindings: impl IntoIterator<Item = (Var, &'a mut TensorValue)>) -> Result<()> {
        for (v, t) in bindings {
            if v.tape != self.tape {
                return Err(Error::Provenance);
            }
            if let Some(g) = self.get(v) {
                t.set_grad(g.to_vec())?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff::finite_diff_grad;
    use crate::numerics::rng::RngStream;

    fn close(a: &[f64], b: &[f64], rtol: f64, atol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= atol + rtol * y.abs())
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut x = TensorValue::from_vec(vec![0.3, -1.0, 2.0]);
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let loss = tape.sum(v).unwrap();
        tape.backward(loss).unwrap().assign([(v, &mut x)]).unwrap();
        assert_eq!(x.grad(), Some(&[1.0, 1.0, 1.0][..]));
    }

    #[test]
    fn dot_self_gradient() {
        let mut x = TensorValue::from_vec(vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let loss = tape.dot(v, v).unwrap();
        tape.backward(loss).unwrap().assign([(v, &mut x)]).unwrap();
        assert_eq!(x.grad(), Some(&[2.0, 4.0][..]));
    }

    #[test]
    fn non_scalar_loss_is_a_shape_error() {
        let mut tape = Tape::new();
        let v = tape.param(&TensorValue::zeros(&[2]));
        assert!(matches!(tape.backward(v), Err(Error::Shape { .. })));
    }

    #[test]
    fn foreign_variable_is_a_provenance_error() {
        let mut a = Tape::new();
        let b = Tape::new();
        let v = a.param(&TensorValue::scalar(1.0));
        assert_eq!(b.backward(v).err(), Some(Error::Provenance));
    }

    #[test]
    fn unreachable_grad_is_untouched() {
        let mut x = TensorValue::scalar(1.0);
        let mut y = TensorValue::scalar(2.0);
        y.set_grad(vec![42.0]).unwrap();
        let mut tape = Tape::new();
        let (vx, vy) = (tape.param(&x), tape.param(&y));
        let loss = tape.scale(vx, 3.0).unwrap();
        tape.backward(loss).unwrap().assign([(vx, &mut x), (vy, &mut y)]).unwrap();
        assert_eq!(x.grad(), Some(&[3.0][..]));
        assert_eq!(y.grad(), Some(&[42.0][..]));
    }

    // A small network touching every op, checked against central differences.
    fn composite(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
        let h = tape.linear(x, w, b).unwrap();
        let h = tape.silu(h).unwrap();
        let r = tape.reshape(h, &[6]).unwrap();
        let c = tape.concat(&[r, r]).unwrap();
        let s = tape.stack(&[c, c]).unwrap();
        let q = tape.combine(&[(s, 0.7), (s, -0.2)]).unwrap();
        let m = tape.mul(q, q).unwrap();
        let d = tape.sub(m, q).unwrap();
        let a = tape.add(d, q).unwrap();
        let ws = tape.weighted_sum(a, (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let ss = tape.sum_squares(q).unwrap();
        let mean = tape.mean(a).unwrap();
        let t = tape.combine(&[(ws, 1.0), (ss, 0.5), (mean, 2.0)]).unwrap();
        let dd = tape.dot(t, t).unwrap();
        tape.add(dd, ws).unwrap()
    }

    #[test]
    fn composite_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = RngStream::new(seed);
            let x = rng.gaussian(&[2, 4]);
            let w = rng.gaussian(&[3, 4]);
            let b = rng.gaussian(&[3]);
            let mut tape = Tape::new();
            let (vx, vw, vb) = (tape.param(&x), tape.param(&w), tape.param(&b));
            let loss = composite(&mut tape, vx, vw, vb);
            let g = tape.backward(loss).unwrap();
            let eval = |xx: &TensorValue, ww: &TensorValue, bb: &TensorValue| {
                let mut t = Tape::new();
                let (a, c, d) = (t.constant(xx), t.constant(ww), t.constant(bb));
                let l = composite(&mut t, a, c, d);
                Ok(t.scalar_value(l).unwrap())
            };
            let fx = finite_diff_grad(|p| eval(p, &w, &b), &x, 1e-5).unwrap();
            let fw = finite_diff_grad(|p| eval(&x, p, &b), &w, 1e-5).unwrap();
            let fb = finite_diff_grad(|p| eval(&x, &w, p), &b, 1e-5).unwrap();
            assert!(close(g.get(vx).unwrap(), fx.data(), 1e-3, 1e-5));
            assert!(close(g.get(vw).unwrap(), fw.data(), 1e-3, 1e-5));
            assert!(close(g.get(vb).unwrap(), fb.data(), 1e-3, 1e-5));
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(&TensorValue::from_vec(vec![1.0, 2.0]));
        let p = tape.param(&TensorValue::from_vec(vec![3.0, 4.0]));
        let m = tape.mul(c, p).unwrap();
        let l = tape.sum(m).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p), Some(&[1.0, 2.0][..]));
    }
}
