//! Recorded computation graph with reverse-mode differentiation.

use crate::error::{dim_err, NnError, Result};
use crate::ops::{self, GroupStats};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv1d { x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize },
    MatMul { a: Var, b: Var, trans_a: bool, trans_b: bool },
    Add(Var, Var),
    Mul(Var, Var),
    AddRowBias { x: Var, bias: Var },
    Scale(Var, T),
    Silu(Var),
    GroupNorm { x: Var, gamma: Var, beta: Var, stats: GroupStats<T> },
    Softmax(Var),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Transpose(Var),
    Resample { x: Var, src_len: usize },
    Mse { pred: Var, target: Var },
    WeightedSum { x: Var, weights: Tensor<T> },
}

struct Node<T> {
    /// `None` for parameter leaves, whose values live in the store.
    value: Option<Tensor<T>>,
    op: Op<T>,
}

/// A forward pass recorded against a parameter store.
pub struct Graph<'s, T: Scalar> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<'s, T: Scalar> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Graph { store, nodes: Vec::new(), check_finite: false }
    }

    /// Fail any operation that produces NaN or infinity.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.value(v).dims()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(NnError::NonFinite(name));
        }
        self.nodes.push(Node { value: Some(value), op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value: Some(value), op: Op::Input });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node { value: None, op: Op::Param(id) });
        Var(self.nodes.len() - 1)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = ops::linear_forward(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        self.push(y, Op::Linear { x, w, b }, "linear")
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let y = ops::conv1d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, padding)?;
        self.push(y, Op::Conv1d { x, w, b, stride, padding }, "conv1d")
    }

    pub fn matmul(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let y = ops::matmul_forward(self.value(a), self.value(b), trans_a, trans_b)?;
        self.push(y, Op::MatMul { a, b, trans_a, trans_b }, "matmul")
    }

    fn same_dims(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(dim_err(op, format!("{:?} vs {:?}", self.dims(a), self.dims(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "add")?;
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        self.push(y, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "mul")?;
        let mut y = self.value(a).clone();
        for (v, &w) in y.data_mut().iter_mut().zip(self.value(b).data()) {
            *v *= w;
        }
        self.push(y, Op::Mul(a, b), "mul")
    }

    /// `x[c, l] + bias[c]` broadcast over the time axis.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self
            .value(x)
            .shape2()
            .ok_or_else(|| dim_err("add_row_bias", format!("{:?}", self.dims(x))))?;
        if self.value(bias).len() != rows {
            return Err(dim_err("add_row_bias", format!("{rows} rows vs bias {:?}", self.dims(bias))));
        }
        let mut y = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for (row, bi) in y.data_mut().chunks_mut(cols).zip(b) {
            row.iter_mut().for_each(|v| *v += bi);
        }
        self.push(y, Op::AddRowBias { x, bias }, "add_row_bias")
    }

    pub fn scale(&mut self, x: Var, k: T) -> Result<Var> {
        let y = self.value(x).map(|v| v * k);
        self.push(y, Op::Scale(x, k), "scale")
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let y = ops::silu(self.value(x));
        self.push(y, Op::Silu(x), "silu")
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let (y, stats) = ops::group_norm_forward(self.value(x), self.value(gamma), self.value(beta), groups, eps)?;
        self.push(y, Op::GroupNorm { x, gamma, beta, stats }, "group_norm")
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let y = ops::softmax_rows(self.value(x))?;
        self.push(y, Op::Softmax(x), "softmax")
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| dim_err("concat_rows", "no inputs"))?;
        let (_, cols) = self
            .value(first)
            .shape2()
            .ok_or_else(|| dim_err("concat_rows", format!("{:?}", self.dims(first))))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            match self.value(x).shape2() {
                Some((r, c)) if c == cols => {
                    rows += r;
                    data.extend_from_slice(self.value(x).data());
                }
                _ => return Err(dim_err("concat_rows", format!("{:?} vs {cols} columns", self.dims(x)))),
            }
        }
        let y = Tensor::new(vec![rows, cols], data)?;
        self.push(y, Op::ConcatRows(xs.to_vec()), "concat_rows")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self
            .value(x)
            .shape2()
            .ok_or_else(|| dim_err("slice_rows", format!("{:?}", self.dims(x))))?;
        if start >= end || end > rows {
            return Err(dim_err("slice_rows", format!("rows {start}..{end} of {rows}")));
        }
        let y = Tensor::new(vec![end - start, cols], self.value(x).data()[start * cols..end * cols].to_vec())?;
        self.push(y, Op::SliceRows { x, start }, "slice_rows")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).transpose()?;
        self.push(y, Op::Transpose(x), "transpose")
    }

    /// Nearest-neighbour resampling along the last axis.
    pub fn resample_nearest(&mut self, x: Var, len: usize) -> Result<Var> {
        let src_len = self.dims(x).get(1).copied().unwrap_or(0);
        let y = ops::resample_nearest(self.value(x), len)?;
        self.push(y, Op::Resample { x, src_len }, "resample_nearest")
    }

    /// Mean squared error, a scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_dims(pred, target, "mse")?;
        let (p, t) = (self.value(pred), self.value(target));
        let n = T::from_f64(p.len() as f64);
        let loss = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n;
        self.push(Tensor::scalar(loss), Op::Mse { pred, target }, "mse")
    }

    /// `sum(x * weights)` for a constant weight tensor, a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        if self.dims(x) != weights.dims() {
            return Err(dim_err("weighted_sum", format!("{:?} vs {:?}", self.dims(x), weights.dims())));
        }
        let s = self.value(x).data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum::<T>();
        self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, "weighted_sum")
    }

    /// Reverse pass from a scalar output; returns gradients for every
    /// parameter reachable from `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() || output.0 >= self.nodes.len() {
            return Err(NnError::GraphNotRecorded);
        }
        if self.value(output).len() != 1 {
            return Err(NnError::NonScalarOutput(self.dims(output).to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<Tensor<T>>> = (0..self.store.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.dims(output), T::one()));

        fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Param(id) => match &mut param_grads[id.index()] {
                    Some(existing) => existing.add_assign(&dy),
                    slot @ None => *slot = Some(dy),
                },
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = ops::linear_backward(self.value(*x), self.value(*w), &dy);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    if let Some(b) = b {
                        let db = db.reshape(self.dims(*b).to_vec())?;
                        acc(&mut grads, *b, db);
                    }
                }
                Op::Conv1d { x, w, b, stride, padding } => {
                    let (dx, dw, db) = ops::conv1d_backward(self.value(*x), self.value(*w), &dy, *stride, *padding);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    if let Some(b) = b {
                        let db = db.reshape(self.dims(*b).to_vec())?;
                        acc(&mut grads, *b, db);
                    }
                }
                Op::MatMul { a, b, trans_a, trans_b } => {
                    let (da, db) = ops::matmul_backward(self.value(*a), self.value(*b), *trans_a, *trans_b, &dy);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, dy.clone());
                    acc(&mut grads, *b, dy);
                }
                Op::Mul(a, b) => {
                    let mut da = dy.clone();
                    for (g, &v) in da.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *g *= v;
                    }
                    let mut db = dy;
                    for (g, &v) in db.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *g *= v;
                    }
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::AddRowBias { x, bias } => {
                    let cols = dy.dims()[1];
                    let sums: Vec<T> = dy.data().chunks(cols).map(|r| r.iter().copied().sum()).collect();
                    let db = Tensor::new(self.dims(*bias).to_vec(), sums)?;
                    acc(&mut grads, *bias, db);
                    acc(&mut grads, *x, dy);
                }
                Op::Scale(x, k) => {
                    let k = *k;
                    acc(&mut grads, *x, dy.map(|g| g * k));
                }
                Op::Silu(x) => {
                    let dx = ops::silu_backward(self.value(*x), &dy);
                    acc(&mut grads, *x, dx);
                }
                Op::GroupNorm { x, gamma, beta, stats } => {
                    let (dx, dg, db) = ops::group_norm_backward(self.value(*x), self.value(*gamma), stats, &dy);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gamma, dg.reshape(self.dims(*gamma).to_vec())?);
                    acc(&mut grads, *beta, db.reshape(self.dims(*beta).to_vec())?);
                }
                Op::Softmax(x) => {
                    let y = self.nodes[idx].value.as_ref().expect("softmax output");
                    acc(&mut grads, *x, ops::softmax_rows_backward(y, &dy));
                }
                Op::ConcatRows(xs) => {
                    let mut offset = 0;
                    for x in xs {
                        let n = self.value(*x).len();
                        let part = Tensor::new(self.dims(*x).to_vec(), dy.data()[offset..offset + n].to_vec())?;
                        offset += n;
                        acc(&mut grads, *x, part);
                    }
                }
                Op::SliceRows { x, start } => {
                    let cols = dy.dims()[1];
                    let mut dx = Tensor::zeros(self.dims(*x));
                    dx.data_mut()[start * cols..start * cols + dy.len()].copy_from_slice(dy.data());
                    acc(&mut grads, *x, dx);
                }
                Op::Transpose(x) => acc(&mut grads, *x, dy.transpose()?),
                Op::Resample { x, src_len } => {
                    acc(&mut grads, *x, ops::resample_nearest_backward(*src_len, &dy));
                }
                Op::Mse { pred, target } => {
                    let g = dy.data()[0];
                    let (p, t) = (self.value(*pred), self.value(*target));
                    let k = T::from_f64(2.0) * g / T::from_f64(p.len() as f64);
                    let dp = Tensor::new(
                        p.dims().to_vec(),
                        p.data().iter().zip(t.data()).map(|(&a, &b)| k * (a - b)).collect(),
                    )?;
                    let dt = dp.map(|v| -v);
                    acc(&mut grads, *pred, dp);
                    acc(&mut grads, *target, dt);
                }
                Op::WeightedSum { x, weights } => {
                    let g = dy.data()[0];
                    acc(&mut grads, *x, weights.map(|w| w * g));
                }
            }
        }
        Ok(Gradients { grads: param_grads })
    }
}
