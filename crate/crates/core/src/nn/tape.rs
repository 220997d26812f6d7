//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! [`Tape::backward`] walks the nodes in reverse and accumulates gradients,
//! returning the gradient for each parameter of the bound [`ParamStore`].
//!
//! All values are `f64`. Vectors are represented as `1 × n` row matrices and
//! scalars as `1 × 1` matrices.

use std::borrow::Cow;

use ndarray::{concatenate, s, Array2, Axis};

use super::params::{ParamId, ParamStore};

pub type Tensor = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// `(n × c) + (1 × c)` broadcast over rows.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `a * s` with `s` a `1 × 1` node.
    ScaleBy(Var, Var),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    SoftmaxRows(Var),
    Ln(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    Row(Var, usize),
    MeanRows(Var),
    Transpose(Var),
    Sum(Var),
    Pick(Var, usize, usize),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
}

/// Gradients of a scalar loss with respect to every parameter of a store.
/// Parameters that did not take part in the computation have `None`.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.index()].as_ref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            grads: vec![None; store.len()],
        }
    }

    /// Adds `other * weight` into `self`.
    pub fn accumulate(&mut self, other: &Gradients, weight: f64) {
        assert_eq!(self.grads.len(), other.grads.len(), "gradient layouts differ");
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(src) = src {
                match dst {
                    Some(d) => d.scaled_add(weight, src),
                    None => *dst = Some(src * weight),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Option<&Tensor>> {
        self.grads.iter().map(Option::as_ref)
    }
}

pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    store: Option<&'a ParamStore>,
    bound: Vec<Option<Var>>,
}

impl<'a> Default for Tape<'a> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    /// A tape with no parameters; everything is a constant.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            store: None,
            bound: Vec::new(),
        }
    }

    pub fn with_params(store: &'a ParamStore) -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
            store: Some(store),
            bound: vec![None; store.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.dim(), (1, 1));
        t[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf)
    }

    pub fn row_vector(&mut self, values: &[f64]) -> Var {
        let t = Tensor::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape");
        self.constant(t)
    }

    /// Binds a parameter of the store this tape was created with. Repeated
    /// calls return the same node, so a parameter used in several places
    /// accumulates a single gradient.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let store = self.store.expect("tape has no parameter store");
        let v = self.push(Cow::Borrowed(store.get(id)), Op::Param(id));
        self.bound[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(Cow::Owned(value), Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(Cow::Owned(value), Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(Cow::Owned(value), Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "bias must be a row vector");
        assert_eq!(self.shape(a).1, self.shape(row).1, "bias width mismatch");
        let value = self.value(a) + self.value(row);
        self.push(Cow::Owned(value), Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let value = self.value(a) - self.value(b);
        self.push(Cow::Owned(value), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let value = self.value(a) * self.value(b);
        self.push(Cow::Owned(value), Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        self.push(Cow::Owned(value), Op::Scale(a, k))
    }

    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let value = self.value(a) * k;
        self.push(Cow::Owned(value), Op::ScaleBy(a, s))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| 1.0 - v);
        self.push(Cow::Owned(value), Op::OneMinus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(Cow::Owned(value), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(Cow::Owned(value), Op::Tanh(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::abs);
        self.push(Cow::Owned(value), Op::Abs(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let z = row.sum();
            row.mapv_inplace(|v| v / z);
        }
        self.push(Cow::Owned(value), Op::SoftmaxRows(a))
    }

    /// Natural log with inputs below `floor` clamped to `floor`.
    pub fn ln(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).mapv(|v| v.max(floor).ln());
        self.push(Cow::Owned(value), Op::Ln(a, floor))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols row counts differ");
        self.push(Cow::Owned(value), Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows column counts differ");
        self.push(Cow::Owned(value), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(Cow::Owned(value), Op::SliceCols(a, start, len))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let value = self.value(a).slice(s![i..i + 1, ..]).to_owned();
        self.push(Cow::Owned(value), Op::Row(a, i))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean of empty matrix")
            .insert_axis(Axis(0));
        self.push(Cow::Owned(value), Op::MeanRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(Cow::Owned(value), Op::Transpose(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::from_elem((1, 1), self.value(a).sum());
        self.push(Cow::Owned(value), Op::Sum(a))
    }

    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Var {
        let value = Tensor::from_elem((1, 1), self.value(a)[[r, c]]);
        self.push(Cow::Owned(value), Op::Pick(a, r, c))
    }

    /// Sum of several `1 × 1` nodes (or equally shaped nodes).
    pub fn add_all(&mut self, parts: &[Var]) -> Var {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    /// Back-propagates from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "loss must be a scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones((1, 1)));
        let mut out = vec![None; self.store.map_or(0, ParamStore::len)];

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out[id.index()] = Some(g),
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = g.dot(self.value(*b));
                    let db = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, dr);
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = &g * self.value(*b);
                    let db = &g * self.value(*a);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g * *k),
                Op::ScaleBy(a, s) => {
                    let k = self.scalar(*s);
                    let ds = (&g * self.value(*a)).sum();
                    acc(&mut grads, *s, Tensor::from_elem((1, 1), ds));
                    acc(&mut grads, *a, g * k);
                }
                Op::OneMinus(a) => acc(&mut grads, *a, -g),
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let da = &g * &y.mapv(|v| v * (1.0 - v));
                    acc(&mut grads, *a, da);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let da = &g * &y.mapv(|v| 1.0 - v * v);
                    acc(&mut grads, *a, da);
                }
                Op::Abs(a) => {
                    let x = self.value(*a);
                    let da = &g * &x.mapv(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 });
                    acc(&mut grads, *a, da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut da = Tensor::zeros(y.dim());
                    for ((mut dr, yr), gr) in da.rows_mut().into_iter().zip(y.rows()).zip(g.rows()) {
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr.iter()).zip(gr.iter()) {
                            *d = yv * (gv - dot);
                        }
                    }
                    acc(&mut grads, *a, da);
                }
                Op::Ln(a, floor) => {
                    let x = self.value(*a);
                    let mut da = g;
                    da.zip_mut_with(x, |d, &xv| {
                        *d = if xv > *floor { *d / xv } else { 0.0 };
                    });
                    acc(&mut grads, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        acc(&mut grads, p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = self.shape(p).0;
                        acc(&mut grads, p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let mut da = Tensor::zeros(self.shape(*a));
                    da.slice_mut(s![.., *start..*start + *len]).assign(&g);
                    acc(&mut grads, *a, da);
                }
                Op::Row(a, r) => {
                    let mut da = Tensor::zeros(self.shape(*a));
                    da.slice_mut(s![*r..*r + 1, ..]).assign(&g);
                    acc(&mut grads, *a, da);
                }
                Op::MeanRows(a) => {
                    let (n, c) = self.shape(*a);
                    let row = &g / n as f64;
                    let da = row.broadcast((n, c)).expect("mean broadcast").to_owned();
                    acc(&mut grads, *a, da);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Sum(a) => {
                    let da = Tensor::from_elem(self.shape(*a), g[[0, 0]]);
                    acc(&mut grads, *a, da);
                }
                Op::Pick(a, r, c) => {
                    let mut da = Tensor::zeros(self.shape(*a));
                    da[[*r, *c]] = g[[0, 0]];
                    acc(&mut grads, *a, da);
                }
            }
        }
        Gradients { grads: out }
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
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

/// Numerically stable softmax of a slice.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}
