//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive as it executes; [`Tape::backward`]
//! walks the records in exact reverse order. A fresh tape is built for each
//! forward pass and dropped afterwards.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds, used for diagnostics and for fault injection in the
/// gradient-check harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    AddRow,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Tanh,
    Sigmoid,
    Exp,
    ConcatCols,
    SliceCols,
    GatherRows,
    LogSoftmax,
    PickCols,
    SumCols,
    Sum,
    WeightedSum,
    GaussianLogProb,
}

impl OpKind {
    pub fn parse(name: &str) -> Option<OpKind> {
        use OpKind::*;
        Some(match name {
            "matmul" => MatMul,
            "add_row" => AddRow,
            "add" => Add,
            "sub" => Sub,
            "mul" => Mul,
            "scale" => Scale,
            "tanh" => Tanh,
            "sigmoid" => Sigmoid,
            "exp" => Exp,
            "concat" => ConcatCols,
            "slice" => SliceCols,
            "gather" => GatherRows,
            "log_softmax" => LogSoftmax,
            "pick" => PickCols,
            "sum_cols" => SumCols,
            "sum" => Sum,
            "weighted_sum" => WeightedSum,
            "gaussian_logprob" => GaussianLogProb,
            _ => return None,
        })
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    GatherRows(usize, Vec<usize>),
    LogSoftmax(usize),
    PickCols(usize, Vec<usize>),
    SumCols(usize),
    Sum(usize),
    WeightedSum(usize, Tensor),
    GaussianLogProb {
        mean: usize,
        log_std: usize,
        action: Tensor,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Exp(..) => OpKind::Exp,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::PickCols(..) => OpKind::PickCols,
            Op::SumCols(..) => OpKind::SumCols,
            Op::Sum(..) => OpKind::Sum,
            Op::WeightedSum(..) => OpKind::WeightedSum,
            Op::GaussianLogProb { .. } => OpKind::GaussianLogProb,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
    param_index: HashMap<String, usize>,
    corrupt: Option<OpKind>,
}

/// Result of a backward pass. Holds gradients for leaf variables only.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, usize)>,
}

impl Gradients {
    /// Gradient with respect to a leaf created by [`Tape::variable`] or
    /// [`Tape::param`]. `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, i)| self.grads[*i].as_ref())
    }

    /// Parameter gradients in first-use order.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(n, i)| self.grads[*i].as_ref().map(|g| (n.as_str(), g)))
    }

    /// Add every parameter gradient into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (name, g) in self.params() {
            store.accumulate_grad(name, g)?;
        }
        Ok(())
    }
}

fn check_same(ctx: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::dim(
            ctx,
            format!("{}x{} vs {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
        ))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose backward rule for `kind` is deliberately wrong. Only
    /// useful for checking that the gradient harness catches bad rules.
    pub fn with_corrupted_rule(kind: OpKind) -> Self {
        Tape {
            corrupt: Some(kind),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradients (see [`Gradients::wrt`]).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Bind a named parameter. Repeated calls with the same name return the
    /// same leaf, so gradients from every use accumulate on it.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&i) = self.param_index.get(name) {
            return Ok(Var(i));
        }
        let value = store.get(name)?.clone();
        let v = self.variable(value);
        self.params.push((name.to_string(), v.0));
        self.param_index.insert(name.to_string(), v.0);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k, k2, n) = (av.rows(), av.cols(), bv.rows(), bv.cols());
        if k != k2 {
            return Err(Error::dim("matmul", format!("{m}x{k} @ {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, 0.0, &mut out);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a.0, b.0), rg))
    }

    /// `a + bias` with `bias` (a single row) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(Error::dim(
                "add_row",
                format!("{}x{} + bias {}x{}", av.rows(), av.cols(), bv.rows(), bv.cols()),
            ));
        }
        let c = av.cols();
        let mut out = av.data().to_vec();
        for row in out.chunks_exact_mut(c.max(1)) {
            for (x, b) in row.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let value = Tensor::matrix(av.rows(), c, out);
        let rg = self.rg(a.0) || self.rg(bias.0);
        Ok(self.push(value, Op::AddRow(a.0, bias.0), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, ctx: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        check_same(ctx, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::matrix(av.rows(), av.cols(), data);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::matrix(av.rows(), av.cols(), data);
        let rg = self.rg(a.0);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a.0, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::EmptySequence("concat_cols"))?;
        let rows = self.nodes[first.0].value.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.rows() != rows {
                return Err(Error::dim("concat_cols", format!("{} rows vs {rows}", t.rows())));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        let idx = parts.iter().map(|p| p.0).collect();
        Ok(self.push(Tensor::matrix(rows, total, out), Op::ConcatCols(idx), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if start + width > av.cols() {
            return Err(Error::dim(
                "slice_cols",
                format!("columns {start}..{} of {}", start + width, av.cols()),
            ));
        }
        let mut out = Vec::with_capacity(av.rows() * width);
        for r in 0..av.rows() {
            out.extend_from_slice(&av.row(r)[start..start + width]);
        }
        let value = Tensor::matrix(av.rows(), width, out);
        let rg = self.rg(a.0);
        Ok(self.push(value, Op::SliceCols(a.0, start), rg))
    }

    /// Select rows of `table` by index; backward scatters into those rows.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = &self.nodes[table.0].value;
        let (n, c) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= n {
                return Err(Error::Index {
                    what: "gather_rows".into(),
                    index: i,
                    len: n,
                });
            }
            out.extend_from_slice(tv.row(i));
        }
        let value = Tensor::matrix(indices.len(), c, out);
        let rg = self.rg(table.0);
        Ok(self.push(value, Op::GatherRows(table.0, indices.to_vec()), rg))
    }

    /// Row-wise log-softmax, max-subtracted for stability.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.cols() == 0 {
            return Err(Error::EmptySequence("log_softmax"));
        }
        if !av.is_finite() {
            return Err(Error::NonFinite("log_softmax input".into()));
        }
        let c = av.cols();
        let mut out = Vec::with_capacity(av.len());
        for r in 0..av.rows() {
            out.extend(log_softmax_row(av.row(r)));
        }
        let value = Tensor::matrix(av.rows(), c, out);
        let rg = self.rg(a.0);
        Ok(self.push(value, Op::LogSoftmax(a.0), rg))
    }

    /// One entry per row: `out[i] = a[i, cols[i]]`, shape `rows x 1`.
    pub fn pick_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if cols.len() != av.rows() {
            return Err(Error::dim(
                "pick_cols",
                format!("{} indices for {} rows", cols.len(), av.rows()),
            ));
        }
        let mut out = Vec::with_capacity(cols.len());
        for (r, &c) in cols.iter().enumerate() {
            if c >= av.cols() {
                return Err(Error::Index {
                    what: "pick_cols".into(),
                    index: c,
                    len: av.cols(),
                });
            }
            out.push(av.at(r, c));
        }
        let value = Tensor::matrix(cols.len(), 1, out);
        let rg = self.rg(a.0);
        Ok(self.push(value, Op::PickCols(a.0, cols.to_vec()), rg))
    }

    /// Row sums, shape `rows x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let out = (0..av.rows()).map(|r| av.row(r).iter().sum()).collect();
        let value = Tensor::matrix(av.rows(), 1, out);
        let rg = self.rg(a.0);
        self.push(value, Op::SumCols(a.0), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `sum(a * weights)` with constant weights.
    pub fn weighted_sum(&mut self, a: Var, weights: Tensor) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.len() != weights.len() {
            return Err(Error::dim(
                "weighted_sum",
                format!("{} values vs {} weights", av.len(), weights.len()),
            ));
        }
        let s = av.data().iter().zip(weights.data()).map(|(x, w)| x * w).sum();
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(a.0, weights), rg))
    }

    /// Diagonal-Gaussian log density of constant `action` rows, summed over
    /// dimensions. `log_std` is either one row (shared) or one per row.
    pub fn gaussian_logprob(&mut self, mean: Var, log_std: Var, action: Tensor) -> Result<Var> {
        let mv = &self.nodes[mean.0].value;
        let lv = &self.nodes[log_std.0].value;
        let (r, d) = (mv.rows(), mv.cols());
        if action.rows() != r || action.cols() != d {
            return Err(Error::dim(
                "gaussian_logprob",
                format!("mean {r}x{d} vs action {}x{}", action.rows(), action.cols()),
            ));
        }
        if lv.cols() != d || (lv.rows() != 1 && lv.rows() != r) {
            return Err(Error::dim(
                "gaussian_logprob",
                format!("mean {r}x{d} vs log_std {}x{}", lv.rows(), lv.cols()),
            ));
        }
        let shared = lv.rows() == 1;
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let ls = if shared { lv.row(0) } else { lv.row(i) };
            let mut s = 0.0;
            for j in 0..d {
                let z = (action.at(i, j) - mv.at(i, j)) * (-ls[j]).exp();
                s += -0.5 * z * z - ls[j] - HALF_LN_2PI;
            }
            out.push(s);
        }
        let rg = self.rg(mean.0) || self.rg(log_std.0);
        Ok(self.push(
            Tensor::matrix(r, 1, out),
            Op::GaussianLogProb {
                mean: mean.0,
                log_std: log_std.0,
                action,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss` (seeded with 1).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be scalar, got {:?}", lv.shape()),
            ));
        }
        self.backward_with(loss, Tensor::filled(lv.shape(), 1.0))
    }

    /// Reverse pass from `out` seeded with an arbitrary upstream gradient.
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        check_same("backward seed", &self.nodes[out.0].value, &seed)?;
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[out.0] = Some(seed);

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let flip = if self.corrupt == Some(node.op.kind()) {
                -1.5
            } else {
                1.0
            };
            self.backward_node(node, &g, flip, &mut grads);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn backward_node(&self, node: &Node, g: &Tensor, flip: f64, grads: &mut [Option<Tensor>]) {
        let val = |i: usize| &self.nodes[i].value;
        let acc = |grads: &mut [Option<Tensor>], i: usize, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[i].requires_grad {
                return;
            }
            let slot = grads[i].get_or_insert_with(|| Tensor::zeros(self.nodes[i].value.shape()));
            f(slot.data_mut());
            if flip != 1.0 {
                // fault injection: applied to the whole accumulated buffer
                // of this input, which is enough to break the check
                slot.data_mut().iter_mut().for_each(|x| *x *= flip);
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                // dA = G B^T, dB = A^T G
                acc(grads, *a, &|s| gemm(m, n, k, gd, false, bv.data(), true, 1.0, s));
                acc(grads, *b, &|s| gemm(k, m, n, av.data(), true, gd, false, 1.0, s));
            }
            Op::AddRow(a, bias) => {
                let c = node.value.cols();
                acc(grads, *a, &|s| add_into(s, gd));
                acc(grads, *bias, &|s| {
                    for row in gd.chunks_exact(c.max(1)) {
                        add_into(s, row);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(grads, *a, &|s| add_into(s, gd));
                acc(grads, *b, &|s| add_into(s, gd));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &|s| add_into(s, gd));
                acc(grads, *b, &|s| {
                    for (x, y) in s.iter_mut().zip(gd) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(grads, *a, &|s| {
                    for ((x, y), w) in s.iter_mut().zip(gd).zip(bv) {
                        *x += y * w;
                    }
                });
                acc(grads, *b, &|s| {
                    for ((x, y), w) in s.iter_mut().zip(gd).zip(av) {
                        *x += y * w;
                    }
                });
            }
            Op::Scale(a, f) => acc(grads, *a, &|s| {
                for (x, y) in s.iter_mut().zip(gd) {
                    *x += f * y;
                }
            }),
            Op::AddScalar(a) => acc(grads, *a, &|s| add_into(s, gd)),
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(grads, *a, &|s| {
                    for ((x, gg), yy) in s.iter_mut().zip(gd).zip(y) {
                        *x += gg * (1.0 - yy * yy);
                    }
                })
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(grads, *a, &|s| {
                    for ((x, gg), yy) in s.iter_mut().zip(gd).zip(y) {
                        *x += gg * yy * (1.0 - yy);
                    }
                })
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(grads, *a, &|s| {
                    for ((x, gg), yy) in s.iter_mut().zip(gd).zip(y) {
                        *x += gg * yy;
                    }
                })
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    acc(grads, p, &|s| {
                        for r in 0..rows {
                            let src = &gd[r * total + offset..r * total + offset + w];
                            add_into(&mut s[r * w..(r + 1) * w], src);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, w) = (node.value.rows(), node.value.cols());
                let c = val(*a).cols();
                acc(grads, *a, &|s| {
                    for r in 0..rows {
                        add_into(&mut s[r * c + start..r * c + start + w], &gd[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::GatherRows(table, idx) => {
                let c = node.value.cols();
                acc(grads, *table, &|s| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut s[i * c..(i + 1) * c], &gd[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let c = node.value.cols();
                let y = node.value.data();
                acc(grads, *a, &|s| {
                    for ((sr, gr), yr) in s.chunks_exact_mut(c).zip(gd.chunks_exact(c)).zip(y.chunks_exact(c)) {
                        let total: f64 = gr.iter().sum();
                        for ((x, gg), yy) in sr.iter_mut().zip(gr).zip(yr) {
                            *x += gg - yy.exp() * total;
                        }
                    }
                });
            }
            Op::PickCols(a, cols) => {
                let c = val(*a).cols();
                acc(grads, *a, &|s| {
                    for (r, &j) in cols.iter().enumerate() {
                        s[r * c + j] += gd[r];
                    }
                });
            }
            Op::SumCols(a) => {
                let c = val(*a).cols();
                acc(grads, *a, &|s| {
                    for (r, row) in s.chunks_exact_mut(c.max(1)).enumerate() {
                        row.iter_mut().for_each(|x| *x += gd[r]);
                    }
                });
            }
            Op::Sum(a) => acc(grads, *a, &|s| s.iter_mut().for_each(|x| *x += gd[0])),
            Op::WeightedSum(a, w) => acc(grads, *a, &|s| {
                for (x, ww) in s.iter_mut().zip(w.data()) {
                    *x += gd[0] * ww;
                }
            }),
            Op::GaussianLogProb { mean, log_std, action } => {
                let (mv, lv) = (val(*mean), val(*log_std));
                let (r, d) = (mv.rows(), mv.cols());
                let shared = lv.rows() == 1;
                // z = (a - mu) / sigma;  d/dmu = z / sigma;  d/dlog_std = z^2 - 1
                acc(grads, *mean, &|s| {
                    for i in 0..r {
                        let ls = if shared { lv.row(0) } else { lv.row(i) };
                        for j in 0..d {
                            let inv = (-ls[j]).exp();
                            let z = (action.at(i, j) - mv.at(i, j)) * inv;
                            s[i * d + j] += gd[i] * z * inv;
                        }
                    }
                });
                acc(grads, *log_std, &|s| {
                    for i in 0..r {
                        let (ls, base) = if shared { (lv.row(0), 0) } else { (lv.row(i), i * d) };
                        for j in 0..d {
                            let z = (action.at(i, j) - mv.at(i, j)) * (-ls[j]).exp();
                            s[base + j] += gd[i] * (z * z - 1.0);
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (x, y) in dst.iter_mut().zip(src) {
        *x += y;
    }
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax_row(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}
