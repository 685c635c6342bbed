//! Reverse-mode differentiation over an append-only tape.
//!
//! Every operation appends a node holding its output value and the indices of
//! its inputs. `backward` walks the nodes in strict reverse append order and
//! accumulates gradients additively, which makes the result independent of
//! anything but the order in which the forward pass was written.

use alloc::{format, vec, vec::Vec};

use super::tensor::{kernels, Tensor};
use crate::error::{contract, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Silu,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// `[n,m] * scalar var`
    ScalarMul(Var, Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Act(Var, Activation),
    Square(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    /// Repeat a `[1,m]` row `n` times.
    BroadcastRows(Var),
    ConcatCols(Vec<Var>),
    /// Row lookup into a `[k,m]` table.
    Gather(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    requires_grad: bool,
}

/// The append-only computation record.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when the node was not reachable or did not require a gradient.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to `v`, zero-filled when unreachable.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.value(v).len()],
        }
    }
}

fn shape_err(context: &'static str, expected: usize, got: usize) -> Error {
    Error::Dimension {
        context,
        expected,
        got,
    }
}

fn act_forward(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Identity => x,
        Activation::Tanh => libm::tanh(x),
        Activation::Relu => {
            if x > 0.0 {
                x
            } else {
                0.0
            }
        }
        Activation::Silu => x / (1.0 + libm::exp(-x)),
    }
}

pub(crate) fn apply_activation(a: Activation, xs: &mut [f64]) {
    if a == Activation::Identity {
        return;
    }
    for v in xs {
        *v = act_forward(a, *v);
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.value.len() != 1 {
            return Err(contract(format!(
                "expected scalar node, got {}x{}",
                n.rows, n.cols
            )));
        }
        Ok(n.value[0])
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        debug_assert_eq!(rows * cols, value.len());
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("tape op {:?}", op_name(&op))));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf_from(&mut self, t: &Tensor, requires_grad: bool) -> Result<Var> {
        let v = self.push(Op::Leaf, t.rows(), t.cols(), t.data().to_vec())?;
        self.nodes[v.0].requires_grad = requires_grad;
        Ok(v)
    }

    /// A differentiable input.
    pub fn variable(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf_from(t, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf_from(t, false)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, a: Var, b: Var, context: &'static str) -> Result<(usize, usize)> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        if ar != br {
            return Err(shape_err(context, ar, br));
        }
        if ac != bc {
            return Err(shape_err(context, ac, bc));
        }
        Ok((ar, ac))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, "add")?;
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), r, c, v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, "sub")?;
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), r, c, v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, "mul")?;
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), r, c, v)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let (r, c) = self.dims(a);
        let v = self.value(a).iter().map(|x| k * x).collect();
        self.push(Op::Scale(a, k), r, c, v)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        let (r, c) = self.dims(a);
        let v = self.value(a).iter().map(|x| x + k).collect();
        self.push(Op::AddScalar(a), r, c, v)
    }

    pub fn scalar_mul(&mut self, a: Var, s: Var) -> Result<Var> {
        let (sr, sc) = self.dims(s);
        if sr * sc != 1 {
            return Err(shape_err("scalar_mul scalar operand", 1, sr * sc));
        }
        let k = self.value(s)[0];
        let (r, c) = self.dims(a);
        let v = self.value(a).iter().map(|x| k * x).collect();
        self.push(Op::ScalarMul(a, s), r, c, v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul inner dimension", k, k2));
        }
        let v = kernels::matmul(self.value(a), self.value(b), n, k, m);
        self.push(Op::MatMul(a, b), n, m, v)
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let blen = self.value(bias).len();
        if blen != c {
            return Err(shape_err("add_bias", c, blen));
        }
        let mut v = self.value(x).to_vec();
        kernels::add_bias(&mut v, self.value(bias));
        self.push(Op::AddBias(x, bias), r, c, v)
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var> {
        if act == Activation::Identity {
            return Ok(x);
        }
        let (r, c) = self.dims(x);
        let mut v = self.value(x).to_vec();
        apply_activation(act, &mut v);
        self.push(Op::Act(x, act), r, c, v)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let v = self.value(x).iter().map(|a| a * a).collect();
        self.push(Op::Square(x), r, c, v)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push(Op::Sum(x), 1, 1, vec![s])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(contract("mean of an empty tensor"));
        }
        let s: f64 = self.value(x).iter().sum();
        self.push(Op::Mean(x), 1, 1, vec![s / n as f64])
    }

    /// `[n,m] -> [n,1]`
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let v = self
            .value(x)
            .chunks(c.max(1))
            .map(|row| row.iter().sum())
            .collect();
        self.push(Op::RowSum(x), r, 1, v)
    }

    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if r != 1 {
            return Err(shape_err("broadcast_rows source rows", 1, r));
        }
        let row = self.value(x).to_vec();
        let mut v = Vec::with_capacity(n * c);
        for _ in 0..n {
            v.extend_from_slice(&row);
        }
        self.push(Op::BroadcastRows(x), n, c, v)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| contract("concat of nothing"))?;
        let rows = self.dims(first).0;
        let mut total = 0;
        for p in parts {
            let (r, c) = self.dims(*p);
            if r != rows {
                return Err(shape_err("concat_cols rows", rows, r));
            }
            total += c;
        }
        let mut v = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                let (_, c) = self.dims(*p);
                v.extend_from_slice(&self.value(*p)[i * c..(i + 1) * c]);
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), rows, total, v)
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (k, m) = self.dims(table);
        let mut v = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            if i >= k {
                return Err(contract(format!(
                    "gather index {i} outside table of {k} rows"
                )));
            }
            v.extend_from_slice(&self.value(table)[i * m..(i + 1) * m]);
        }
        self.push(Op::Gather(table, idx.to_vec()), idx.len(), m, v)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = &self.nodes[loss.0];
        if n.value.len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got {}x{}",
                n.rows, n.cols
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !n.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Only keep entries for nodes that asked for gradients.
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, contrib: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            contrib(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &|s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(bv) {
                        *s += g * y;
                    }
                });
                acc(*b, &|s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(av) {
                        *s += g * x;
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += k * g)),
            Op::AddScalar(a) => acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::ScalarMul(a, sv) => {
                let k = self.value(*sv)[0];
                let av = self.value(*a);
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += k * g));
                acc(*sv, &|s| {
                    s[0] += g.iter().zip(av).map(|(g, x)| g * x).sum::<f64>()
                });
            }
            Op::MatMul(a, b) => {
                let (n, k) = self.dims(*a);
                let (_, m) = self.dims(*b);
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &|s| {
                    let ga = kernels::matmul_bt(g, bv, n, m, k);
                    s.iter_mut().zip(&ga).for_each(|(s, v)| *s += v);
                });
                acc(*b, &|s| {
                    let gb = kernels::matmul_at(av, g, n, k, m);
                    s.iter_mut().zip(&gb).for_each(|(s, v)| *s += v);
                });
            }
            Op::AddBias(x, b) => {
                let c = node.cols;
                acc(*x, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &|s| {
                    for row in g.chunks(c) {
                        s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::Act(x, act) => {
                let xv = self.value(*x);
                let yv = &node.value;
                acc(*x, &|s| {
                    for j in 0..s.len() {
                        let d = match act {
                            Activation::Identity => 1.0,
                            Activation::Tanh => 1.0 - yv[j] * yv[j],
                            Activation::Relu => {
                                if xv[j] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Activation::Silu => {
                                let sig = 1.0 / (1.0 + libm::exp(-xv[j]));
                                sig * (1.0 + xv[j] * (1.0 - sig))
                            }
                        };
                        s[j] += g[j] * d;
                    }
                });
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                acc(*x, &|s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(xv) {
                        *s += 2.0 * x * g;
                    }
                });
            }
            Op::Sum(x) => acc(*x, &|s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                acc(*x, &|s| s.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::RowSum(x) => {
                let (_, c) = self.dims(*x);
                acc(*x, &|s| {
                    for (row, gv) in s.chunks_mut(c.max(1)).zip(g) {
                        row.iter_mut().for_each(|s| *s += gv);
                    }
                });
            }
            Op::BroadcastRows(x) => {
                let c = node.cols;
                acc(*x, &|s| {
                    for row in g.chunks(c) {
                        s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.cols;
                let mut offset = 0;
                for p in parts {
                    let (_, c) = self.dims(*p);
                    let off = offset;
                    acc(*p, &|s| {
                        for (r, srow) in s.chunks_mut(c.max(1)).enumerate() {
                            let grow = &g[r * total + off..r * total + off + c];
                            srow.iter_mut().zip(grow).for_each(|(s, g)| *s += g);
                        }
                    });
                    offset += c;
                }
            }
            Op::Gather(table, idx) => {
                let m = node.cols;
                acc(*table, &|s| {
                    for (r, &ti) in idx.iter().enumerate() {
                        let grow = &g[r * m..(r + 1) * m];
                        s[ti * m..(ti + 1) * m]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(s, g)| *s += g);
                    }
                });
            }
        }
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::MatMul(a, b)
        | Op::AddBias(a, b)
        | Op::ScalarMul(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Act(a, _)
        | Op::Square(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::RowSum(a)
        | Op::BroadcastRows(a)
        | Op::Gather(a, _) => vec![*a],
        Op::ConcatCols(parts) => parts.clone(),
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::ScalarMul(..) => "scalar_mul",
        Op::MatMul(..) => "matmul",
        Op::AddBias(..) => "add_bias",
        Op::Act(..) => "activation",
        Op::Square(..) => "square",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::RowSum(..) => "row_sum",
        Op::BroadcastRows(..) => "broadcast_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::Gather(..) => "gather",
    }
}
