//! Reverse-mode gradient tape over 2-D tensors.
//!
//! A [`Tape`] lives for one forward pass. Parameters are copied in from a
//! [`ParamStore`] with [`Tape::param`]; after [`Tape::backward`] their
//! gradients are added back with [`Tape::accumulate_into`].

use crate::error::{Error, Result};
use crate::numcore::tensor::{matmul, softmax_rows, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.set_grad(None);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// All parameter values concatenated in registration order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_scalars() {
            return Err(Error::shape(format!(
                "expected {} parameter values, got {}",
                self.num_scalars(),
                values.len()
            )));
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Scale(Var, f64),
    Transpose(Var),
    SoftmaxRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SelectCols(Var, Vec<usize>),
    MeanCols(Var),
    Sum(Var),
    CrossEntropy { logits: Var, target: usize, mask: Vec<bool> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A value that takes no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.without_grad(), Op::Leaf, false)
    }

    /// A free variable whose gradient is readable through [`Tape::grad`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t.without_grad(), Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).without_grad(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::MatMul(a, b), tracked))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{what} {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Add(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Mul(a, b), tracked))
    }

    /// Adds an `rows × 1` bias to every column of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.cols() != 1 || bv.rows() != xv.rows() {
            return Err(Error::shape(format!(
                "bias {:?} for input {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let c = xv.cols();
        let mut data = xv.data().to_vec();
        for (i, row) in data.chunks_mut(c).enumerate() {
            let b = bv.data()[i];
            row.iter_mut().for_each(|v| *v += b);
        }
        let out = Tensor::matrix(xv.rows(), c, data)?;
        let tracked = self.tracked(x) || self.tracked(bias);
        Ok(self.push(out, Op::AddBias(x, bias), tracked))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let tracked = self.tracked(x);
        Ok(self.push(out, Op::Relu(x), tracked))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * c).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let tracked = self.tracked(x);
        Ok(self.push(out, Op::Scale(x, c), tracked))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let tracked = self.tracked(x);
        self.push(out, Op::Transpose(x), tracked)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = softmax_rows(self.value(x))?;
        let tracked = self.tracked(x);
        Ok(self.push(out, Op::SoftmaxRows(x), tracked))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            if v.cols() != cols {
                return Err(Error::shape("concat_rows column mismatch"));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        let tracked = parts.iter().any(|p| self.tracked(*p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), tracked))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let rows = self.value(*first).rows();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(Error::shape("concat_cols row mismatch"));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                let v = self.value(*p);
                let c = v.cols();
                data.extend_from_slice(&v.data()[i * c..(i + 1) * c]);
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        let tracked = parts.iter().any(|p| self.tracked(*p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), tracked))
    }

    /// Gathers columns by index (repeats allowed).
    pub fn select_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if idx.is_empty() {
            return Err(Error::shape("select_cols with no indices"));
        }
        if let Some(bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::shape(format!("column {bad} out of range for {c} columns")));
        }
        let mut data = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            data.extend(idx.iter().map(|&j| xv.data()[i * c + j]));
        }
        let out = Tensor::matrix(r, idx.len(), data)?;
        let tracked = self.tracked(x);
        Ok(self.push(out, Op::SelectCols(x, idx.to_vec()), tracked))
    }

    /// Column mean, `rows × 1`.
    pub fn mean_cols(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let data = xv
            .data()
            .chunks(c)
            .map(|row| row.iter().sum::<f64>() / c as f64)
            .collect();
        let out = Tensor::matrix(r, 1, data)?;
        let tracked = self.tracked(x);
        Ok(self.push(out, Op::MeanCols(x), tracked))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    /// `-log softmax(logits)[target]` over a `1 × L` row; entries with
    /// `mask[j] == false` are excluded from the normalizer.
    pub fn cross_entropy(&mut self, logits: Var, target: usize, mask: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        let n = lv.len();
        if lv.rows() != 1 || mask.len() != n || target >= n {
            return Err(Error::shape(format!(
                "cross_entropy over {:?} with mask {} and target {target}",
                lv.shape(),
                mask.len()
            )));
        }
        if !mask[target] {
            return Err(Error::validation("cross_entropy target is masked out"));
        }
        let max = lv
            .data()
            .iter()
            .zip(mask)
            .filter(|(_, m)| **m)
            .map(|(v, _)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + lv.data()
                .iter()
                .zip(mask)
                .filter(|(_, m)| **m)
                .map(|(v, _)| (v - max).exp())
                .sum::<f64>()
                .ln();
        let loss = lse - lv.data()[target];
        if loss.is_nan() {
            return Err(Error::Numeric("cross_entropy produced NaN".into()));
        }
        let tracked = self.tracked(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                mask: mask.to_vec(),
            },
            tracked,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`; zeros for a
    /// tracked value the loss did not depend on.
    pub fn grad(&self, v: Var) -> Option<Vec<f64>> {
        if !self.tracked(v) {
            return None;
        }
        Some(
            self.grads
                .get(v.0)
                .cloned()
                .flatten()
                .unwrap_or_else(|| vec![0.0; self.value(v).len()]),
        )
    }

    /// Adds parameter gradients into the store; every parameter touched by
    /// this tape receives a gradient buffer, zero if unreached.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                let buf = store.get_mut(id).grad_mut_or_zero();
                if let Some(Some(g)) = self.grads.get(i) {
                    buf.iter_mut().zip(g).for_each(|(b, x)| *b += x);
                }
            }
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.tracked(*a) {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv.data()[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    add_grad(grads, *a, &da);
                }
                if self.tracked(*b) {
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let x = av.data()[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            let row = &mut db[p * n..(p + 1) * n];
                            for (d, gv) in row.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *d += x * gv;
                            }
                        }
                    }
                    add_grad(grads, *b, &db);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.tracked(*v) {
                        add_grad(grads, *v, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    let d: Vec<f64> = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    add_grad(grads, *a, &d);
                }
                if self.tracked(*b) {
                    let d: Vec<f64> = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    add_grad(grads, *b, &d);
                }
            }
            Op::AddBias(x, b) => {
                if self.tracked(*x) {
                    add_grad(grads, *x, g);
                }
                if self.tracked(*b) {
                    let c = out.cols();
                    let d: Vec<f64> = g.chunks(c).map(|row| row.iter().sum()).collect();
                    add_grad(grads, *b, &d);
                }
            }
            Op::Relu(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                add_grad(grads, *x, &d);
            }
            Op::Scale(x, c) => {
                let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                add_grad(grads, *x, &d);
            }
            Op::Transpose(x) => {
                let (r, c) = (out.rows(), out.cols());
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = g[i * c + j];
                    }
                }
                add_grad(grads, *x, &d);
            }
            Op::SoftmaxRows(x) => {
                let c = out.cols();
                let mut d = vec![0.0; g.len()];
                for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dv = yv * (gv - dot);
                    }
                }
                add_grad(grads, *x, &d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if self.tracked(*p) {
                        add_grad(grads, *p, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut col0 = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let (r, c) = (pv.rows(), pv.cols());
                    if self.tracked(*p) {
                        let mut d = Vec::with_capacity(r * c);
                        for i in 0..r {
                            d.extend_from_slice(&g[i * total + col0..i * total + col0 + c]);
                        }
                        add_grad(grads, *p, &d);
                    }
                    col0 += c;
                }
            }
            Op::SelectCols(x, idx_list) => {
                let xv = self.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let k = idx_list.len();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for (jj, &j) in idx_list.iter().enumerate() {
                        d[i * c + j] += g[i * k + jj];
                    }
                }
                add_grad(grads, *x, &d);
            }
            Op::MeanCols(x) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut d = Vec::with_capacity(xv.len());
                for gv in g {
                    d.extend(std::iter::repeat_n(gv / c as f64, c));
                }
                add_grad(grads, *x, &d);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                add_grad(grads, *x, &vec![g[0]; n]);
            }
            Op::CrossEntropy {
                logits,
                target,
                mask,
            } => {
                let lv = self.value(*logits).data();
                let max = lv
                    .iter()
                    .zip(mask)
                    .filter(|(_, m)| **m)
                    .map(|(v, _)| *v)
                    .fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = lv
                    .iter()
                    .zip(mask)
                    .filter(|(_, m)| **m)
                    .map(|(v, _)| (v - max).exp())
                    .sum();
                let d: Vec<f64> = lv
                    .iter()
                    .zip(mask)
                    .enumerate()
                    .map(|(j, (v, m))| {
                        if !*m {
                            return 0.0;
                        }
                        let p = (v - max).exp() / z;
                        g[0] * (p - if j == *target { 1.0 } else { 0.0 })
                    })
                    .collect();
                add_grad(grads, *logits, &d);
            }
        }
    }
}

fn add_grad(grads: &mut [Option<Vec<f64>>], v: Var, d: &[f64]) {
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(d).for_each(|(b, x)| *b += x),
        slot @ None => *slot = Some(d.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::column(vec![1.0, -2.0, 0.5]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn constant_loss_gives_zero_grads() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::column(vec![1.0, 2.0]).unwrap());
        let c = tape.constant(Tensor::column(vec![3.0, 4.0]).unwrap());
        let loss = tape.sum(c);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vec![0.0, 0.0]);
        assert_eq!(tape.grad(c), None);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 2));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn masked_cross_entropy() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::matrix(1, 3, vec![1.0, 5.0, 2.0]).unwrap());
        let loss = tape.cross_entropy(l, 0, &[true, false, true]).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 2f64.exp())).ln();
        assert!((tape.value(loss).item().unwrap() - expected).abs() < 1e-14);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(l).unwrap()[1], 0.0);
        assert!(tape.cross_entropy(l, 1, &[true, false, true]).is_err());
    }

    #[test]
    fn param_grads_accumulate() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::column(vec![3.0]).unwrap());
        for _ in 0..2 {
            let mut tape = Tape::new();
            let x = tape.param(&store, w);
            let loss = tape.sum(x);
            tape.backward(loss).unwrap();
            tape.accumulate_into(&mut store);
        }
        assert_eq!(store.get(w).grad(), Some(&[2.0][..]));
        store.zero_grad();
        assert_eq!(store.get(w).grad(), None);
    }
}
