//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every op pushes one node holding its output value. Nodes whose inputs do
//! not depend on any gradient-tracking leaf are stored as plain constants, so
//! a forward pass through frozen weights records no backward work for them.
//! [`Tape::backward`] walks the node list once, last to first; node indices
//! are a topological order by construction.

use std::cell::{Cell, RefCell};

use super::tensor::{gemm, Tensor};
use super::NumericsError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    MeanRows(Var),
    Sum(Var),
    Distance(Var, Var),
    Bce {
        p: Var,
        label: f64,
        clamped: f64,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Lower and upper clamp applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-12;

const LN_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Gradients produced by one [`Tape::backward`] call, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` when `v` does not track
    /// gradients or the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.shapes[v.0].clone(), g.clone()).ok()
    }

    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }
}

fn shape_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::ShapeMismatch { op, detail }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize), NumericsError> {
    if t.shape().len() != 2 {
        return Err(shape_err(op, format!("expected a matrix, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|v| nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn leaf_node(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(nodes.len() - 1)
    }

    /// A gradient-tracking input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.leaf_node(value, true)
    }

    /// A constant input; nothing downstream of it alone is differentiated.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf_node(value, false)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k) = dims2(ta, "matmul")?;
            let (k2, n) = dims2(tb, "matmul")?;
            if k != k2 {
                return Err(shape_err("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
            }
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, ta.data(), k as isize, 1, tb.data(), n as isize, 1, 0.0, &mut out);
            Tensor::new(vec![m, n], out)?
        };
        self.push(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_bt(&self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k) = dims2(ta, "matmul_bt")?;
            let (n, k2) = dims2(tb, "matmul_bt")?;
            if k != k2 {
                return Err(shape_err("matmul_bt", format!("{:?} x {:?}ᵀ", ta.shape(), tb.shape())));
            }
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, ta.data(), k as isize, 1, tb.data(), 1, k as isize, 0.0, &mut out);
            Tensor::new(vec![m, n], out)?
        };
        self.push(out, Op::MatMulBt(a, b), &[a, b], "matmul_bt")
    }

    fn zip(&self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, NumericsError> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), &[a, b], "mul")
    }

    /// Adds a row vector to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tr) = (&nodes[a.0].value, &nodes[row.0].value);
            let (_, n) = dims2(ta, "add_row")?;
            if tr.numel() != n {
                return Err(shape_err("add_row", format!("{:?} + row {:?}", ta.shape(), tr.shape())));
            }
            let r = tr.data();
            let data = ta
                .data()
                .chunks(n)
                .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
                .collect();
            Tensor::new(ta.shape().to_vec(), data)?
        };
        self.push(out, Op::AddRow(a, row), &[a, row], "add_row")
    }

    /// `mul · a + add`, elementwise.
    pub fn affine(&self, a: Var, mul: f64, add: f64) -> Result<Var, NumericsError> {
        let out = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| mul * x + add).collect())?
        };
        self.push(out, Op::Affine(a, mul), &[a], "affine")
    }

    pub fn scale(&self, a: Var, s: f64) -> Result<Var, NumericsError> {
        self.affine(a, s, 0.0)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Result<Tensor, NumericsError> {
        let nodes = self.nodes.borrow();
        let ta = &nodes[a.0].value;
        Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect())
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Result<Var, NumericsError> {
        let out = self.map(a, |x| gelu_parts(x).0)?;
        self.push(out, Op::Gelu(a), &[a], "gelu")
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var, NumericsError> {
        let out = self.map(a, sigmoid)?;
        self.push(out, Op::Sigmoid(a), &[a], "sigmoid")
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is masked to 0.
    pub fn softmax_rows(&self, a: Var, causal: bool) -> Result<Var, NumericsError> {
        let out = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            let (m, n) = dims2(ta, "softmax")?;
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let width = if causal { (i + 1).min(n) } else { n };
                let row = &ta.data()[i * n..i * n + width];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let dst = &mut out[i * n..i * n + width];
                let mut total = 0.0;
                for (d, &x) in dst.iter_mut().zip(row) {
                    *d = (x - max).exp();
                    total += *d;
                }
                dst.iter_mut().for_each(|d| *d /= total);
            }
            Tensor::new(vec![m, n], out)?
        };
        self.push(out, Op::Softmax(a), &[a], "softmax")
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var, NumericsError> {
        let (out, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let (tx, tg, tb) = (&nodes[x.0].value, &nodes[gamma.0].value, &nodes[beta.0].value);
            let (m, n) = dims2(tx, "layer_norm")?;
            if tg.numel() != n || tb.numel() != n {
                return Err(shape_err("layer_norm", format!("width {n}, gain {:?}", tg.shape())));
            }
            let mut xhat = vec![0.0; m * n];
            let mut inv_std = vec![0.0; m];
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let row = &tx.data()[i * n..(i + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + LN_EPS).sqrt();
                inv_std[i] = is;
                for j in 0..n {
                    let h = (row[j] - mean) * is;
                    xhat[i * n + j] = h;
                    out[i * n + j] = h * tg.data()[j] + tb.data()[j];
                }
            }
            (Tensor::new(vec![m, n], out)?, xhat, inv_std)
        };
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
            "layer_norm",
        )
    }

    /// Embedding lookup: row `i` of the result is row `ids[i]` of `table`.
    pub fn gather(&self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let out = {
            let nodes = self.nodes.borrow();
            let tt = &nodes[table.0].value;
            let (v, d) = dims2(tt, "gather")?;
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= v {
                    return Err(NumericsError::IndexOutOfRange { index: id, bound: v });
                }
                data.extend_from_slice(tt.row(id));
            }
            Tensor::new(vec![ids.len(), d], data)?
        };
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
            "gather",
        )
    }

    /// Stacks matrices with equal column counts along the sequence axis.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var, NumericsError> {
        let out = {
            let nodes = self.nodes.borrow();
            let first = parts.first().ok_or_else(|| shape_err("concat_rows", "no inputs".into()))?;
            let (_, n) = dims2(&nodes[first.0].value, "concat_rows")?;
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                let t = &nodes[p.0].value;
                let (m, c) = dims2(t, "concat_rows")?;
                if c != n {
                    return Err(shape_err("concat_rows", format!("width {c} vs {n}")));
                }
                rows += m;
                data.extend_from_slice(t.data());
            }
            Tensor::new(vec![rows, n], data)?
        };
        self.push(out, Op::ConcatRows(parts.to_vec()), parts, "concat_rows")
    }

    pub fn slice_cols(&self, x: Var, start: usize, width: usize) -> Result<Var, NumericsError> {
        let out = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let (m, n) = dims2(tx, "slice_cols")?;
            if start + width > n {
                return Err(shape_err("slice_cols", format!("[{start}, {}) of width {n}", start + width)));
            }
            let data = (0..m)
                .flat_map(|i| tx.data()[i * n + start..i * n + start + width].iter().copied())
                .collect();
            Tensor::new(vec![m, width], data)?
        };
        self.push(out, Op::SliceCols { x, start }, &[x], "slice_cols")
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var, NumericsError> {
        let out = {
            let nodes = self.nodes.borrow();
            let first = parts.first().ok_or_else(|| shape_err("concat_cols", "no inputs".into()))?;
            let (m, _) = dims2(&nodes[first.0].value, "concat_cols")?;
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let (r, c) = dims2(&nodes[p.0].value, "concat_cols")?;
                if r != m {
                    return Err(shape_err("concat_cols", format!("rows {r} vs {m}")));
                }
                widths.push(c);
            }
            let n: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(m * n);
            for i in 0..m {
                for (p, &w) in parts.iter().zip(&widths) {
                    data.extend_from_slice(&nodes[p.0].value.data()[i * w..(i + 1) * w]);
                }
            }
            Tensor::new(vec![m, n], data)?
        };
        self.push(out, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    /// Mean over positions of `-log softmax(logits[i])[targets[i]]`.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
        let (out, probs) = {
            let nodes = self.nodes.borrow();
            let tl = &nodes[logits.0].value;
            let (m, v) = dims2(tl, "cross_entropy")?;
            if m == 0 || targets.is_empty() {
                return Err(NumericsError::EmptySequence);
            }
            if targets.len() != m {
                return Err(shape_err("cross_entropy", format!("{m} rows, {} targets", targets.len())));
            }
            let mut probs = vec![0.0; m * v];
            let mut total = 0.0;
            for (i, &t) in targets.iter().enumerate() {
                if t >= v {
                    return Err(NumericsError::IndexOutOfRange { index: t, bound: v });
                }
                let row = tl.row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let dst = &mut probs[i * v..(i + 1) * v];
                let mut z = 0.0;
                for (d, &x) in dst.iter_mut().zip(row) {
                    *d = (x - max).exp();
                    z += *d;
                }
                dst.iter_mut().for_each(|d| *d /= z);
                total += -(row[t] - max - z.ln());
            }
            (Tensor::scalar(total / m as f64), probs)
        };
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
            "cross_entropy",
        )
    }

    /// Column means; `m×n -> 1×n`.
    pub fn mean_rows(&self, a: Var) -> Result<Var, NumericsError> {
        let out = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            let (m, n) = dims2(ta, "mean_rows")?;
            if m == 0 {
                return Err(NumericsError::EmptySequence);
            }
            let mut acc = vec![0.0; n];
            for chunk in ta.data().chunks(n) {
                acc.iter_mut().zip(chunk).for_each(|(a, x)| *a += x);
            }
            acc.iter_mut().for_each(|a| *a /= m as f64);
            Tensor::new(vec![1, n], acc)?
        };
        self.push(out, Op::MeanRows(a), &[a], "mean_rows")
    }

    pub fn sum(&self, a: Var) -> Result<Var, NumericsError> {
        let total = self.nodes.borrow()[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a), &[a], "sum")
    }

    /// Sum of scalar nodes.
    pub fn sum_scalars(&self, vars: &[Var]) -> Result<Var, NumericsError> {
        let mut iter = vars.iter();
        let first = *iter.next().ok_or_else(|| shape_err("sum_scalars", "no inputs".into()))?;
        iter.try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// Euclidean distance between two equally shaped tensors.
    pub fn distance(&self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.numel() != tb.numel() {
                return Err(shape_err("distance", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
            }
            let sq: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
            Tensor::scalar(sq.sqrt())
        };
        self.push(out, Op::Distance(a, b), &[a, b], "distance")
    }

    /// Binary cross entropy of a scalar probability against `label`, with the
    /// probability clamped to `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn bce(&self, p: Var, label: f64) -> Result<Var, NumericsError> {
        let raw = self.scalar_value(p);
        let clamped = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let loss = -label * clamped.ln() - (1.0 - label) * (1.0 - clamped).ln();
        self.push(Tensor::scalar(loss), Op::Bce { p, label, clamped }, &[p], "bce")
    }

    /// Reverse sweep from a scalar `loss`. May be called once per tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        if self.consumed.replace(true) {
            return Err(NumericsError::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(shape_err("backward", format!("loss shape {:?}", nodes[loss.0].value.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if !nodes[loss.0].requires_grad {
            return Ok(Gradients { grads, shapes });
        }
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            if let Some(ga) = slot(nodes, grads, *a) {
                // ga += g · bᵀ
                gemm(m, n, k, g, n as isize, 1, val(*b).data(), 1, n as isize, 1.0, ga);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                // gb += aᵀ · g
                gemm(k, m, n, val(*a).data(), 1, k as isize, g, n as isize, 1, 1.0, gb);
            }
        }
        Op::MatMulBt(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[0];
            if let Some(ga) = slot(nodes, grads, *a) {
                // ga += g · b
                gemm(m, n, k, g, n as isize, 1, val(*b).data(), k as isize, 1, 1.0, ga);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                // gb += gᵀ · a
                gemm(n, m, k, g, 1, n as isize, val(*a).data(), k as isize, 1, 1.0, gb);
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(gv) = slot(nodes, grads, *v) {
                    gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((x, y), o) in ga.iter_mut().zip(g).zip(val(*b).data()) {
                    *x += y * o;
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for ((x, y), o) in gb.iter_mut().zip(g).zip(val(*a).data()) {
                    *x += y * o;
                }
            }
        }
        Op::AddRow(a, row) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            let n = val(*a).shape()[1];
            if let Some(gr) = slot(nodes, grads, *row) {
                for chunk in g.chunks(n) {
                    gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Affine(a, mul) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += mul * y);
            }
        }
        Op::Gelu(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((x, y), &inp) in ga.iter_mut().zip(g).zip(val(*a).data()) {
                    *x += y * gelu_parts(inp).1;
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((x, y), s) in ga.iter_mut().zip(g).zip(node.value.data()) {
                    *x += y * s * (1.0 - s);
                }
            }
        }
        Op::Softmax(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let n = node.value.shape()[1];
                for ((gx, gy), y) in ga.chunks_mut(n).zip(g.chunks(n)).zip(node.value.data().chunks(n)) {
                    let dot: f64 = gy.iter().zip(y).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        gx[j] += y[j] * (gy[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let n = node.value.shape()[1];
            let gam = val(*gamma).data();
            if let Some(gg) = slot(nodes, grads, *gamma) {
                for (gy, h) in g.chunks(n).zip(xhat.chunks(n)) {
                    for j in 0..n {
                        gg[j] += gy[j] * h[j];
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *beta) {
                for gy in g.chunks(n) {
                    gb.iter_mut().zip(gy).for_each(|(a, b)| *a += b);
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let nf = n as f64;
                for (i, (gxr, (gy, h))) in gx.chunks_mut(n).zip(g.chunks(n).zip(xhat.chunks(n))).enumerate() {
                    let mut sum_gh = 0.0;
                    let mut sum_ghh = 0.0;
                    for j in 0..n {
                        let gh = gy[j] * gam[j];
                        sum_gh += gh;
                        sum_ghh += gh * h[j];
                    }
                    let is = inv_std[i];
                    for j in 0..n {
                        let gh = gy[j] * gam[j];
                        gxr[j] += is / nf * (nf * gh - sum_gh - h[j] * sum_ghh);
                    }
                }
            }
        }
        Op::Gather { table, ids } => {
            if let Some(gt) = slot(nodes, grads, *table) {
                let d = val(*table).shape()[1];
                for (i, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id * d..(id + 1) * d];
                    dst.iter_mut().zip(&g[i * d..(i + 1) * d]).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = val(*p).numel();
                if let Some(gp) = slot(nodes, grads, *p) {
                    gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(a, b)| *a += b);
                }
                offset += len;
            }
        }
        Op::SliceCols { x, start } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let n = val(*x).shape()[1];
                let w = node.value.shape()[1];
                for (i, chunk) in g.chunks(w).enumerate() {
                    let dst = &mut gx[i * n + start..i * n + start + w];
                    dst.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::ConcatCols(parts) => {
            let n = node.value.shape()[1];
            let mut offset = 0;
            for p in parts {
                let w = val(*p).shape()[1];
                if let Some(gp) = slot(nodes, grads, *p) {
                    for (i, row) in g.chunks(n).enumerate() {
                        let dst = &mut gp[i * w..(i + 1) * w];
                        dst.iter_mut().zip(&row[offset..offset + w]).for_each(|(a, b)| *a += b);
                    }
                }
                offset += w;
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            if let Some(gl) = slot(nodes, grads, *logits) {
                let v = val(*logits).shape()[1];
                let scale = g[0] / targets.len() as f64;
                for (i, &t) in targets.iter().enumerate() {
                    let row = &mut gl[i * v..(i + 1) * v];
                    for (j, r) in row.iter_mut().enumerate() {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        *r += scale * (probs[i * v + j] - onehot);
                    }
                }
            }
        }
        Op::MeanRows(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let n = g.len();
                let m = val(*a).numel() / n.max(1);
                for chunk in ga.chunks_mut(n) {
                    chunk.iter_mut().zip(g).for_each(|(x, y)| *x += y / m as f64);
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::Distance(a, b) => {
            let d = node.value.item();
            if d > 0.0 {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((x, p), q) in ga.iter_mut().zip(ta).zip(tb) {
                        *x += g[0] * (p - q) / d;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for ((x, p), q) in gb.iter_mut().zip(ta).zip(tb) {
                        *x -= g[0] * (p - q) / d;
                    }
                }
            }
        }
        Op::Bce { p, label, clamped } => {
            if let Some(gp) = slot(nodes, grads, *p) {
                let q = *clamped;
                gp[0] += g[0] * (-label / q + (1.0 - label) / (1.0 - q));
            }
        }
    }
}
