use std::collections::BTreeMap;

use super::math;
use super::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

/// Identity of a trainable parameter; the key of a [`GradMap`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Handle to a node of one [`Graph`]. Only meaningful for the graph that
/// produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Abs(Var),
    Softplus(Var),
    Sigmoid(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SumCols(Var),
    RowDiv(Var, Var),
    ScaleRows(Var, Vec<T>),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, inv_std: Vec<T> },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gradients of a loss with respect to every parameter leaf of a graph.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradMap<T> {
    grads: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Real> GradMap<T> {
    /// Sets the gradient of `id`, replacing any previous entry.
    pub fn insert(&mut self, id: ParamId, grad: Tensor<T>) {
        self.grads.insert(id, grad);
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    /// Adds `other` entry-wise; entries missing on one side are taken as zero.
    pub fn accumulate(&mut self, other: GradMap<T>) -> Result<()> {
        for (id, g) in other.grads {
            match self.grads.get_mut(&id) {
                Some(acc) => {
                    if acc.shape() != g.shape() {
                        return Err(Error::shape("grad accumulate", acc.shape(), g.shape()));
                    }
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.grads.insert(id, g);
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.grads.values_mut() {
            for x in g.data_mut() {
                *x *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }
}

/// Single-use reverse-mode tape.
///
/// Every op validates shapes eagerly and returns a dimension error naming
/// both operands. [`Graph::backward`] may be called once.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

fn suffix_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf; receives an entry in the [`GradMap`].
    pub fn param(&mut self, id: ParamId, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [m, n] => Ok((m, n)),
            ref s => Err(Error::shape(op, s, &[])),
        }
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op, &[a])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !suffix_broadcast(ta.shape(), tb.shape()) {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let nb = tb.numel();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[i % nb]))
            .collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let data = math::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, T::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, T::ln, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, T::abs, Op::Abs(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, math::softplus, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, math::sigmoid, Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, math::gelu, Op::Gelu(a))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.sum() / T::of(t.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Column sums of a matrix: `[m, n] -> [1, n]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "sum_rows")?;
        let d = self.value(a).data();
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            for (o, &x) in out.iter_mut().zip(&d[i * n..(i + 1) * n]) {
                *o += x;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![1, n], out), Op::SumRows(a), &[a]))
    }

    /// Row sums of a matrix: `[m, n] -> [m, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "sum_cols")?;
        let d = self.value(a).data();
        let out = (0..m).map(|i| d[i * n..(i + 1) * n].iter().copied().sum()).collect();
        Ok(self.push(Tensor::from_parts(vec![m, 1], out), Op::SumCols(a), &[a]))
    }

    /// Divides row `i` of `a[m, n]` by `d[i, 0]`.
    pub fn row_div(&mut self, a: Var, d: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "row_div")?;
        if self.shape(d) != [m, 1] {
            return Err(Error::shape("row_div", self.shape(a), self.shape(d)));
        }
        let (ta, td) = (self.value(a).data(), self.value(d).data());
        let out = (0..m * n).map(|i| ta[i] / td[i / n]).collect();
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::RowDiv(a, d), &[a, d]))
    }

    /// Multiplies row `i` by the constant `weights[i]`.
    pub fn scale_rows(&mut self, a: Var, weights: &[T]) -> Result<Var> {
        let (m, n) = self.dims2(a, "scale_rows")?;
        if weights.len() != m {
            return Err(Error::shape("scale_rows", self.shape(a), &[weights.len()]));
        }
        let ta = self.value(a).data();
        let out = (0..m * n).map(|i| ta[i] * weights[i / n]).collect();
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::ScaleRows(a, weights.to_vec()),
            &[a],
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let data = math::transpose(self.value(a).data(), m, n);
        Ok(self.push(Tensor::from_parts(vec![n, m], data), Op::Transpose(a), &[a]))
    }

    /// Row-wise softmax with the row maximum subtracted first. Entries of
    /// `-inf` receive zero weight; a row must contain at least one finite
    /// entry.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "softmax_rows")?;
        let d = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &d[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                return Err(Error::Contract(format!("softmax row {i} has no finite entry")));
            }
            let o = &mut out[i * n..(i + 1) * n];
            let mut total = T::zero();
            for (y, &x) in o.iter_mut().zip(row) {
                *y = (x - max).exp();
                total += *y;
            }
            for y in o.iter_mut() {
                *y /= total;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::SoftmaxRows(a), &[a]))
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: T) -> Result<Var> {
        let (m, n) = self.dims2(a, "layer_norm_rows")?;
        let d = self.value(a).data();
        let nf = T::of(n as f64);
        let mut out = vec![T::zero(); m * n];
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = &d[i * n..(i + 1) * n];
            let mu = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            for (y, &x) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *y = (x - mu) * r;
            }
            inv_std.push(r);
        }
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::LayerNorm { x: a, inv_std },
            &[a],
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a).rows(start, end)?;
        Ok(self.push(t, Op::SliceRows(a, start), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if start >= end || end > n {
            return Err(Error::Contract(format!(
                "column range {start}..{end} out of bounds for {n} columns"
            )));
        }
        let d = self.value(a).data();
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&d[i * n + start..i * n + end]);
        }
        Ok(self.push(Tensor::from_parts(vec![m, w], out), Op::SliceCols(a, start), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (_, n) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (m, n2) = self.dims2(p, "concat_rows")?;
            if n2 != n {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, n], data),
            Op::ConcatRows(parts.to_vec()),
            parts,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (m2, n) = self.dims2(p, "concat_cols")?;
            if m2 != m {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(n);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![m, total], data),
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    /// Row lookup: output row `i` is `table[indices[i]]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(table, "gather_rows")?;
        if indices.is_empty() {
            return Err(Error::Contract("gather of no rows".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::Contract(format!("row index {bad} out of range for {m} rows")));
        }
        let d = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            out.extend_from_slice(&d[i * n..(i + 1) * n]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![indices.len(), n], out),
            Op::GatherRows(table, indices.to_vec()),
            &[table],
        ))
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of
    /// `logits[B, C]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.dims2(logits, "cross_entropy")?;
        if labels.len() != b {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Contract(format!("label {bad} out of range for {c} classes")));
        }
        let d = self.value(logits).data();
        let mut probs = vec![T::zero(); b * c];
        let mut loss = T::zero();
        for i in 0..b {
            let row = &d[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            loss += lse - row[labels[i]];
        }
        loss /= T::of(b as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar `loss`. Consumes the graph: a second call
    /// fails with a state error.
    pub fn backward(&mut self, loss: Var) -> Result<GradMap<T>> {
        if self.consumed {
            return Err(Error::State("backward already ran on this graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        let mut out = GradMap::default();
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(id) = node.param else { continue };
            let data = grads[i]
                .take()
                .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
            let mut single = GradMap::default();
            single
                .grads
                .insert(id, Tensor::from_parts(node.value.shape().to_vec(), data));
            out.accumulate(single)?;
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let shape = |v: Var| self.nodes[v.0].value.shape();
        let wants = |v: Var| self.nodes[v.0].requires_grad;

        // Adds `delta` into the gradient slot of `v`.
        fn acc<T: Real>(slot: &mut Option<Vec<T>>, delta: impl IntoIterator<Item = T>, n: usize) {
            let buf = slot.get_or_insert_with(|| vec![T::zero(); n]);
            for (b, d) in buf.iter_mut().zip(delta) {
                *b += d;
            }
        }
        let numel = |v: Var| self.nodes[v.0].value.numel();

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (shape(a)[0], shape(a)[1]);
                let n = shape(b)[1];
                if wants(a) {
                    let da = math::matmul_nt(g, val(b), m, n, k);
                    acc(&mut grads[a.0], da, m * k);
                }
                if wants(b) {
                    let db = math::matmul_tn(val(a), g, m, k, n);
                    acc(&mut grads[b.0], db, k * n);
                }
            }
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if wants(a) {
                    acc(&mut grads[a.0], g.iter().copied(), g.len());
                }
                if wants(b) {
                    let nb = numel(b);
                    let mut db = vec![T::zero(); nb];
                    for (j, &x) in g.iter().enumerate() {
                        db[j % nb] += sign * x;
                    }
                    acc(&mut grads[b.0], db, nb);
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                let nb = vb.len();
                if wants(a) {
                    let da = g.iter().enumerate().map(|(j, &x)| x * vb[j % nb]);
                    acc(&mut grads[a.0], da, g.len());
                }
                if wants(b) {
                    let mut db = vec![T::zero(); nb];
                    for (j, &x) in g.iter().enumerate() {
                        db[j % nb] += x * va[j];
                    }
                    acc(&mut grads[b.0], db, nb);
                }
            }
            &Op::Div(a, b) => {
                let (va, vb) = (val(a), val(b));
                let nb = vb.len();
                if wants(a) {
                    let da = g.iter().enumerate().map(|(j, &x)| x / vb[j % nb]);
                    acc(&mut grads[a.0], da, g.len());
                }
                if wants(b) {
                    let mut db = vec![T::zero(); nb];
                    for (j, &x) in g.iter().enumerate() {
                        let d = vb[j % nb];
                        db[j % nb] -= x * va[j] / (d * d);
                    }
                    acc(&mut grads[b.0], db, nb);
                }
            }
            &Op::Scale(a, c) => acc(&mut grads[a.0], g.iter().map(|&x| x * c), g.len()),
            &Op::AddScalar(a) => acc(&mut grads[a.0], g.iter().copied(), g.len()),
            &Op::Exp(a) => acc(&mut grads[a.0], g.iter().zip(y).map(|(&x, &e)| x * e), g.len()),
            &Op::Log(a) => {
                let va = val(a);
                acc(&mut grads[a.0], g.iter().zip(va).map(|(&x, &v)| x / v), g.len())
            }
            &Op::Square(a) => {
                let va = val(a);
                let two = T::of(2.0);
                acc(&mut grads[a.0], g.iter().zip(va).map(|(&x, &v)| two * v * x), g.len())
            }
            &Op::Abs(a) => {
                let va = val(a);
                let sgn = |v: T| {
                    if v > T::zero() {
                        T::one()
                    } else if v < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                };
                acc(&mut grads[a.0], g.iter().zip(va).map(|(&x, &v)| x * sgn(v)), g.len())
            }
            &Op::Softplus(a) => {
                let va = val(a);
                let d = g.iter().zip(va).map(|(&x, &v)| x * math::sigmoid(v));
                acc(&mut grads[a.0], d, g.len())
            }
            &Op::Sigmoid(a) => {
                let d = g.iter().zip(y).map(|(&x, &s)| x * s * (T::one() - s));
                acc(&mut grads[a.0], d, g.len())
            }
            &Op::Gelu(a) => {
                let va = val(a);
                let d = g.iter().zip(va).map(|(&x, &v)| x * math::gelu_grad(v));
                acc(&mut grads[a.0], d, g.len())
            }
            &Op::Sum(a) => {
                let n = numel(a);
                acc(&mut grads[a.0], std::iter::repeat_n(g[0], n), n)
            }
            &Op::Mean(a) => {
                let n = numel(a);
                let v = g[0] / T::of(n as f64);
                acc(&mut grads[a.0], std::iter::repeat_n(v, n), n)
            }
            &Op::SumRows(a) => {
                let n = shape(a)[1];
                let total = numel(a);
                acc(&mut grads[a.0], (0..total).map(|j| g[j % n]), total)
            }
            &Op::SumCols(a) => {
                let n = shape(a)[1];
                let total = numel(a);
                acc(&mut grads[a.0], (0..total).map(|j| g[j / n]), total)
            }
            &Op::RowDiv(a, d) => {
                let (m, n) = (shape(a)[0], shape(a)[1]);
                let (va, vd) = (val(a), val(d));
                if wants(a) {
                    acc(&mut grads[a.0], (0..m * n).map(|j| g[j] / vd[j / n]), m * n);
                }
                if wants(d) {
                    let dd = (0..m).map(|i| {
                        let s: T = (0..n).map(|c| g[i * n + c] * va[i * n + c]).sum();
                        -s / (vd[i] * vd[i])
                    });
                    acc(&mut grads[d.0], dd, m);
                }
            }
            Op::ScaleRows(a, w) => {
                let n = shape(*a)[1];
                acc(&mut grads[a.0], g.iter().enumerate().map(|(j, &x)| x * w[j / n]), g.len())
            }
            &Op::Transpose(a) => {
                let (m, n) = (shape(a)[0], shape(a)[1]);
                acc(&mut grads[a.0], math::transpose(g, n, m), m * n)
            }
            &Op::SoftmaxRows(a) => {
                let (m, n) = (shape(a)[0], shape(a)[1]);
                let mut d = vec![T::zero(); m * n];
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    let dot: T = g[r.clone()].iter().zip(&y[r.clone()]).map(|(&x, &p)| x * p).sum();
                    for j in r {
                        d[j] = y[j] * (g[j] - dot);
                    }
                }
                acc(&mut grads[a.0], d, m * n)
            }
            Op::LayerNorm { x, inv_std } => {
                let (m, n) = (shape(*x)[0], shape(*x)[1]);
                let nf = T::of(n as f64);
                let mut d = vec![T::zero(); m * n];
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    let gm = g[r.clone()].iter().copied().sum::<T>() / nf;
                    let gy = g[r.clone()].iter().zip(&y[r.clone()]).map(|(&a, &b)| a * b).sum::<T>() / nf;
                    for j in r {
                        d[j] = inv_std[i] * (g[j] - gm - y[j] * gy);
                    }
                }
                acc(&mut grads[x.0], d, m * n)
            }
            &Op::SliceRows(a, start) => {
                let n = shape(a)[1];
                let total = numel(a);
                let slot = grads[a.0].get_or_insert_with(|| vec![T::zero(); total]);
                for (b, &x) in slot[start * n..start * n + g.len()].iter_mut().zip(g) {
                    *b += x;
                }
            }
            &Op::SliceCols(a, start) => {
                let n = shape(a)[1];
                let w = node.value.shape()[1];
                let total = numel(a);
                let slot = grads[a.0].get_or_insert_with(|| vec![T::zero(); total]);
                for (i, row) in g.chunks(w).enumerate() {
                    for (b, &x) in slot[i * n + start..i * n + start + w].iter_mut().zip(row) {
                        *b += x;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = numel(p);
                    if wants(p) {
                        acc(&mut grads[p.0], g[offset..offset + len].iter().copied(), len);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut col = 0;
                for &p in parts {
                    let (m, w) = (shape(p)[0], shape(p)[1]);
                    if wants(p) {
                        let d = (0..m).flat_map(|i| g[i * total + col..i * total + col + w].iter().copied());
                        acc(&mut grads[p.0], d, m * w);
                    }
                    col += w;
                }
            }
            Op::GatherRows(table, idx) => {
                let n = shape(*table)[1];
                let total = numel(*table);
                let slot = grads[table.0].get_or_insert_with(|| vec![T::zero(); total]);
                for (r, &i) in idx.iter().enumerate() {
                    for (b, &x) in slot[i * n..(i + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]) {
                        *b += x;
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = shape(*logits)[1];
                let scale = g[0] / T::of(labels.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] -= scale;
                }
                acc(&mut grads[logits.0], d, probs.len())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::eye(2));
        let m = g.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn row_by_column_product() {
        let mut g = Graph::new();
        let a = g.constant(t(&[vec![1.0, 2.0]]));
        let b = g.constant(t(&[vec![3.0], vec![4.0]]));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn add_and_mean_square() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);
        let c = g.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let sq = g.square(c);
        let m = g.mean(sq);
        assert_eq!(g.value(m).item().unwrap(), 12.5);
    }

    #[test]
    fn broadcast_only_along_leading_dims() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[3, 2]));
        let bias = g.constant(Tensor::ones(&[2]));
        assert!(g.add(a, bias).is_ok());
        let col = g.constant(Tensor::ones(&[3]));
        assert!(g.add(a, col).is_err());
    }

    #[test]
    fn softmax_rows_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[vec![0.0, 0.0], vec![1000.0, 1000.0]]));
        let s = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5, 0.5, 0.5]);
        let x = g.constant(t(&[vec![1.0, 2.0, 3.0]]));
        let s = g.softmax_rows(x).unwrap();
        // e^k / (e + e^2 + e^3), evaluated with mpmath at 30 digits.
        let want = [0.090_030_573_170_380_46, 0.244_728_471_054_797_6, 0.665_240_955_774_821_9];
        for (a, b) in g.value(s).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let w = g.param(ParamId(0), t(&[vec![1.0, -2.0], vec![0.5, 3.0]]));
        let s = g.sum(w);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn backward_of_sum_square_is_twice_w() {
        let wv = t(&[vec![1.0, -2.0], vec![0.5, 3.0]]);
        let mut g = Graph::new();
        let w = g.param(ParamId(7), wv.clone());
        let sq = g.square(w);
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(ParamId(7)).unwrap(), &wv.map(|x| 2.0 * x));
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let mut g = Graph::new();
        let w = g.param(ParamId(0), Tensor::<f64>::ones(&[2, 2]));
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::State(_))));
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut g = Graph::new();
        let a = g.param(ParamId(0), Tensor::<f64>::ones(&[2]));
        let _b = g.param(ParamId(1), Tensor::<f64>::ones(&[3]));
        let s = g.sum(a);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.len(), 2);
        assert_eq!(grads.get(ParamId(1)).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[2, 4]));
        let l = g.cross_entropy(z, &[0, 3]).unwrap();
        assert!((g.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(g.cross_entropy(z, &[4, 0]).is_err());
    }

    #[test]
    fn gather_scatters_back() {
        let mut g = Graph::new();
        let table = g.param(ParamId(0), Tensor::<f64>::zeros(&[3, 2]));
        let rows = g.gather_rows(table, &[2, 0, 2]).unwrap();
        let s = g.sum(rows);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
