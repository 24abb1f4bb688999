use std::collections::HashMap;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Storage precision of forward values. `F32` rounds every forward result to
/// single precision while keeping the arithmetic in `f64`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// Operation families, used to name gradient rules (e.g. for fault injection).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    MatMulT,
    Transpose,
    Add,
    Sub,
    Mul,
    AddRow,
    MulRow,
    Scale,
    Relu,
    Sigmoid,
    Tanh,
    Softmax,
    LayerNorm,
    Concat,
    Gather,
    MaxAxis,
    MeanAxis,
    SegmentMax,
    Sum,
    Mean,
    Reshape,
    SliceCols,
    GroupDot,
    GroupWeightedSum,
}

enum Op {
    Input,
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Concat { parts: Vec<Var>, axis: usize },
    Gather { x: Var, idx: Vec<usize> },
    MaxAxis { x: Var, arg: Vec<usize> },
    MeanAxis { x: Var, axis: usize },
    SegmentMax { x: Var, arg: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    GroupDot { q: Var, kv: Var, k: usize },
    GroupWeightedSum { w: Var, v: Var, k: usize },
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Input | Op::Leaf | Op::Param => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulT(..) => OpKind::MatMulT,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MulRow(..) => OpKind::MulRow,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Concat { .. } => OpKind::Concat,
            Op::Gather { .. } => OpKind::Gather,
            Op::MaxAxis { .. } => OpKind::MaxAxis,
            Op::MeanAxis { .. } => OpKind::MeanAxis,
            Op::SegmentMax { .. } => OpKind::SegmentMax,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Reshape(_) => OpKind::Reshape,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::GroupDot { .. } => OpKind::GroupDot,
            Op::GroupWeightedSum { .. } => OpKind::GroupWeightedSum,
        })
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of recorded operations. Nodes are appended in evaluation order, which
/// is a valid topological order, so the backward pass is a single reverse scan.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
    precision: Precision,
    fault: Option<OpKind>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: Vec::new(),
            precision: Precision::F64,
            fault: None,
        }
    }

    pub fn with_precision(precision: Precision) -> Self {
        Graph {
            precision,
            ..Self::new()
        }
    }

    /// Scales the gradient rule of one operation family by 1.5. Only used to
    /// prove that gradient checks catch a broken rule.
    #[doc(hidden)]
    pub fn with_fault(mut self, kind: OpKind) -> Self {
        self.fault = Some(kind);
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Var {
        if self.precision == Precision::F32 {
            for x in value.data_mut() {
                *x = *x as f32 as f64;
            }
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Differentiable leaf that is not a stored parameter.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter. Repeated calls with the same id return the
    /// same node, so shared weights accumulate a single gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
        Error::Shape {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Self::shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), needs))
    }

    /// `a × bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Self::shape_err("matmul_t", self.shape(a), self.shape(b)));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = dot(&ad[i * k..(i + 1) * k], &bd[j * k..(j + 1) * k]);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulT(a, b), needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let ad = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ad[i * n + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), needs))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::shape_err(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (m, n) = self.value(a).dims2()?;
        if self.value(b).len() != n || self.value(b).rank() != 1 {
            return Err(Self::shape_err(name, self.shape(a), self.shape(b)));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            out.extend(ad[i * n..(i + 1) * n].iter().zip(bd).map(|(x, y)| f(*x, *y)));
        }
        Tensor::new(vec![m, n], out)
    }

    /// `a[m×n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.row_broadcast("add_row", a, b, |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::AddRow(a, b), needs))
    }

    /// `a[m×n] ⊙ b[n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.row_broadcast("mul_row", a, b, |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::MulRow(a, b), needs))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|x| f(*x)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(a);
        self.push(t, op, needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    /// Softmax along `axis`, stabilized by subtracting the running maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        if axis >= v.rank() {
            return Err(Error::Index {
                value: axis,
                bound: v.rank(),
            });
        }
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let x = v.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mx = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - mx).exp();
                    out[at(j)] = e;
                    s += e;
                }
                for j in 0..len {
                    out[at(j)] /= s;
                }
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let needs = self.needs(a);
        Ok(self.push(t, Op::Softmax { x: a, axis }, needs))
    }

    /// Normalizes each row of a rank-2 tensor to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let x = self.value(a).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                xhat[i * n + j] = (row[j] - mean) * r;
            }
        }
        let t = Tensor::new(vec![m, n], xhat.clone())?;
        let needs = self.needs(a);
        Ok(self.push(t, Op::LayerNorm { x: a, xhat, rstd }, needs))
    }

    /// Concatenates rank-2 tensors along `axis` (0 = rows, 1 = columns).
    /// Parts with zero extent along the concatenation axis are allowed.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        if axis > 1 {
            return Err(Error::Index {
                value: axis,
                bound: 2,
            });
        }
        let (r0, c0) = self.value(parts[0]).dims2()?;
        let mut out_rows = 0;
        let mut out_cols = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if axis == 0 {
                if c != c0 {
                    return Err(Self::shape_err("concat", self.shape(parts[0]), self.shape(p)));
                }
                out_rows += r;
                out_cols = c0;
            } else {
                if r != r0 {
                    return Err(Self::shape_err("concat", self.shape(parts[0]), self.shape(p)));
                }
                out_rows = r0;
                out_cols += c;
            }
        }
        let mut data = vec![0.0; out_rows * out_cols];
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            let (r, c) = v.dims2()?;
            if axis == 0 {
                data[offset * out_cols..(offset + r) * out_cols].copy_from_slice(v.data());
                offset += r;
            } else {
                for i in 0..r {
                    data[i * out_cols + offset..i * out_cols + offset + c]
                        .copy_from_slice(&v.data()[i * c..(i + 1) * c]);
                }
                offset += c;
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let t = Tensor::new(vec![out_rows, out_cols], data)?;
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// Selects rows of a rank-2 tensor; indices may repeat.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::Index { value: i, bound: m });
            }
            out.extend_from_slice(&x[i * n..(i + 1) * n]);
        }
        let t = Tensor::new(vec![idx.len(), n], out)?;
        let needs = self.needs(a);
        Ok(self.push(
            t,
            Op::Gather {
                x: a,
                idx: idx.to_vec(),
            },
            needs,
        ))
    }

    /// Maximum along `axis`; the gradient goes to the first maximal element.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        if axis >= v.rank() || v.shape()[axis] == 0 {
            return Err(Error::Index {
                value: axis,
                bound: v.rank(),
            });
        }
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let x = v.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * len * inner + i;
                for j in 1..len {
                    let at = o * len * inner + j * inner + i;
                    if x[at] > x[best] {
                        best = at;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        let needs = self.needs(a);
        Ok(self.push(t, Op::MaxAxis { x: a, arg }, needs))
    }

    /// Argmax positions recorded by a `max_axis` or `segment_max` node, as
    /// flat offsets into the source tensor.
    pub fn argmax_of(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::MaxAxis { arg, .. } | Op::SegmentMax { arg, .. } => Some(arg),
            _ => None,
        }
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        if axis >= v.rank() || v.shape()[axis] == 0 {
            return Err(Error::Index {
                value: axis,
                bound: v.rank(),
            });
        }
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let x = v.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..len).map(|j| x[o * len * inner + j * inner + i]).sum();
                out[o * inner + i] = s / len as f64;
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        let needs = self.needs(a);
        Ok(self.push(t, Op::MeanAxis { x: a, axis }, needs))
    }

    /// Column-wise maximum over consecutive row segments `[start, start+len)`.
    pub fn segment_max(&mut self, a: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(segments.len() * n);
        let mut arg = Vec::with_capacity(segments.len() * n);
        for &(start, len) in segments {
            if len == 0 || start + len > m {
                return Err(Error::Index {
                    value: start + len,
                    bound: m,
                });
            }
            for c in 0..n {
                let mut best = start * n + c;
                for r in start + 1..start + len {
                    if x[r * n + c] > x[best] {
                        best = r * n + c;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
        let t = Tensor::new(vec![segments.len(), n], out)?;
        let needs = self.needs(a);
        Ok(self.push(t, Op::SegmentMax { x: a, arg }, needs))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean(a), needs)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let needs = self.needs(a);
        Ok(self.push(t, Op::Reshape(a), needs))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if start + len > n {
            return Err(Error::Index {
                value: start + len,
                bound: n,
            });
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&x[i * n + start..i * n + start + len]);
        }
        let t = Tensor::new(vec![m, len], out)?;
        let needs = self.needs(a);
        Ok(self.push(t, Op::SliceCols { x: a, start }, needs))
    }

    /// Per-group dot products: row `g` of `q[G×D]` against rows
    /// `g*k .. g*k+k` of `kv[(G·k)×D]`, giving `[G×k]`.
    pub fn group_dot(&mut self, q: Var, kv: Var, k: usize) -> Result<Var> {
        let (g, d) = self.value(q).dims2()?;
        let (r, d2) = self.value(kv).dims2()?;
        if d != d2 || r != g * k {
            return Err(Self::shape_err("group_dot", self.shape(q), self.shape(kv)));
        }
        let (qd, kd) = (self.value(q).data(), self.value(kv).data());
        let mut out = vec![0.0; g * k];
        for i in 0..g {
            let qi = &qd[i * d..(i + 1) * d];
            for j in 0..k {
                let row = i * k + j;
                out[i * k + j] = dot(qi, &kd[row * d..(row + 1) * d]);
            }
        }
        let t = Tensor::new(vec![g, k], out)?;
        let needs = self.needs(q) || self.needs(kv);
        Ok(self.push(t, Op::GroupDot { q, kv, k }, needs))
    }

    /// Per-group weighted sums: `out[g] = Σ_j w[g,j] · v[g*k+j]`.
    pub fn group_weighted_sum(&mut self, w: Var, v: Var, k: usize) -> Result<Var> {
        let (g, k2) = self.value(w).dims2()?;
        let (r, d) = self.value(v).dims2()?;
        if k2 != k || r != g * k {
            return Err(Self::shape_err("group_weighted_sum", self.shape(w), self.shape(v)));
        }
        let (wd, vd) = (self.value(w).data(), self.value(v).data());
        let mut out = vec![0.0; g * d];
        for i in 0..g {
            let orow = &mut out[i * d..(i + 1) * d];
            for j in 0..k {
                let wij = wd[i * k + j];
                let row = i * k + j;
                for (o, x) in orow.iter_mut().zip(&vd[row * d..(row + 1) * d]) {
                    *o += wij * x;
                }
            }
        }
        let t = Tensor::new(vec![g, d], out)?;
        let needs = self.needs(w) || self.needs(v);
        Ok(self.push(t, Op::GroupWeightedSum { w, v, k }, needs))
    }

    /// Reverse pass from a scalar loss. Gradient buffers are kept in the graph
    /// and can be read with [`Graph::grad`] and [`Graph::param_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(gy) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            let factor = match (self.fault, node.op.kind()) {
                (Some(f), Some(k)) if f == k => 1.5,
                _ => 1.0,
            };
            let gy: Vec<f64> = if factor != 1.0 {
                gy.iter().map(|g| g * factor).collect()
            } else {
                gy
            };
            self.backprop_node(id, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, id: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };
        let y = nodes[id].value.data();
        match &nodes[id].op {
            Op::Input | Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let sa = nodes[a.0].value.shape();
                let (m, k, n) = (sa[0], sa[1], nodes[b.0].value.shape()[1]);
                let (ad, bd) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            ga[i * k + p] += dot(&gy[i * n..(i + 1) * n], &bd[p * n..(p + 1) * n]);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..m {
                        let grow = &gy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (g, x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *g += av * x;
                            }
                        }
                    }
                });
            }
            Op::MatMulT(a, b) => {
                let sa = nodes[a.0].value.shape();
                let (m, k, n) = (sa[0], sa[1], nodes[b.0].value.shape()[0]);
                let (ad, bd) = (val(*a), val(*b));
                acc(*a, &mut |ga| matmul_into(gy, bd, ga, m, n, k));
                acc(*b, &mut |gb| {
                    for i in 0..m {
                        for j in 0..n {
                            let g = gy[i * n + j];
                            if g == 0.0 {
                                continue;
                            }
                            for (o, x) in gb[j * k..(j + 1) * k].iter_mut().zip(&ad[i * k..(i + 1) * k]) {
                                *o += g * x;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let s = nodes[a.0].value.shape();
                let (m, n) = (s[0], s[1]);
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += gy[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g += d));
                acc(*b, &mut |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g += d));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g += d));
                acc(*b, &mut |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * bd[i];
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * ad[i];
                    }
                });
            }
            Op::AddRow(a, b) => {
                let n = nodes[b.0].value.len();
                acc(*a, &mut |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g += d));
                acc(*b, &mut |g| {
                    for (i, d) in gy.iter().enumerate() {
                        g[i % n] += d;
                    }
                });
            }
            Op::MulRow(a, b) => {
                let n = nodes[b.0].value.len();
                let (ad, bd) = (val(*a), val(*b));
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * bd[i % n];
                    }
                });
                acc(*b, &mut |g| {
                    for (i, d) in gy.iter().enumerate() {
                        g[i % n] += d * ad[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g += c * d));
            }
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            g[i] += gy[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Tanh(a) => {
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let s: f64 = (0..len).map(|j| gy[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                g[at(j)] += y[at(j)] * (gy[at(j)] - s);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, xhat, rstd } => {
                let n = nodes[x.0].value.shape()[1];
                acc(*x, &mut |g| {
                    for (i, r) in rstd.iter().enumerate() {
                        let gr = &gy[i * n..(i + 1) * n];
                        let xr = &xhat[i * n..(i + 1) * n];
                        let mg = gr.iter().sum::<f64>() / n as f64;
                        let mgx = dot(gr, xr) / n as f64;
                        for j in 0..n {
                            g[i * n + j] += r * (gr[j] - mg - xr[j] * mgx);
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let cols = nodes[id].value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let s = nodes[p.0].value.shape();
                    let (r, c) = (s[0], s[1]);
                    if *axis == 0 {
                        acc(p, &mut |g| {
                            g.iter_mut()
                                .zip(&gy[offset * cols..(offset + r) * cols])
                                .for_each(|(g, d)| *g += d)
                        });
                        offset += r;
                    } else {
                        acc(p, &mut |g| {
                            for i in 0..r {
                                for j in 0..c {
                                    g[i * c + j] += gy[i * cols + offset + j];
                                }
                            }
                        });
                        offset += c;
                    }
                }
            }
            Op::Gather { x, idx } => {
                let n = nodes[x.0].value.shape()[1];
                acc(*x, &mut |g| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..n {
                            g[i * n + j] += gy[r * n + j];
                        }
                    }
                });
            }
            Op::MaxAxis { x, arg, .. } | Op::SegmentMax { x, arg } => {
                acc(*x, &mut |g| {
                    for (o, &src) in arg.iter().enumerate() {
                        g[src] += gy[o];
                    }
                });
            }
            Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                g[o * len * inner + j * inner + i] += gy[o * inner + i] / len as f64;
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &mut |g| g.iter_mut().for_each(|g| *g += gy[0]));
            }
            Op::Mean(a) => {
                let n = nodes[a.0].value.len().max(1) as f64;
                acc(*a, &mut |g| g.iter_mut().for_each(|g| *g += gy[0] / n));
            }
            Op::Reshape(a) => {
                acc(*a, &mut |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g += d));
            }
            Op::SliceCols { x, start } => {
                let n = nodes[x.0].value.shape()[1];
                let len = nodes[id].value.shape()[1];
                acc(*x, &mut |g| {
                    for (i, grow) in gy.chunks(len).enumerate() {
                        for (j, d) in grow.iter().enumerate() {
                            g[i * n + start + j] += d;
                        }
                    }
                });
            }
            Op::GroupDot { q, kv, k } => {
                let d = nodes[q.0].value.shape()[1];
                let (qd, kd) = (val(*q), val(*kv));
                let k = *k;
                acc(*q, &mut |g| {
                    for (i, grow) in g.chunks_mut(d).enumerate() {
                        for j in 0..k {
                            let w = gy[i * k + j];
                            let row = i * k + j;
                            for (o, x) in grow.iter_mut().zip(&kd[row * d..(row + 1) * d]) {
                                *o += w * x;
                            }
                        }
                    }
                });
                acc(*kv, &mut |g| {
                    for (row, grow) in g.chunks_mut(d).enumerate() {
                        let i = row / k;
                        let w = gy[row];
                        for (o, x) in grow.iter_mut().zip(&qd[i * d..(i + 1) * d]) {
                            *o += w * x;
                        }
                    }
                });
            }
            Op::GroupWeightedSum { w, v, k } => {
                let d = nodes[v.0].value.shape()[1];
                let (wd, vd) = (val(*w), val(*v));
                let k = *k;
                acc(*w, &mut |g| {
                    for (row, gw) in g.iter_mut().enumerate() {
                        let i = row / k;
                        *gw += dot(&gy[i * d..(i + 1) * d], &vd[row * d..(row + 1) * d]);
                    }
                });
                acc(*v, &mut |g| {
                    for (row, grow) in g.chunks_mut(d).enumerate() {
                        let i = row / k;
                        let wij = wd[row];
                        for (o, x) in grow.iter_mut().zip(&gy[i * d..(i + 1) * d]) {
                            *o += wij * x;
                        }
                    }
                });
            }
        }
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.shape(v).to_vec(), g.clone()).ok()
    }

    /// Gradients for every parameter bound into this graph, in binding order.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .params
            .iter()
            .map(|(&id, &v)| {
                let g = self.grad(v).unwrap_or_else(|| Tensor::zeros(self.shape(v).to_vec()));
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
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

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.input(Tensor::eye(3));
        let a = g.input(m(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let y = g.matmul(i, a).unwrap();
        assert_eq!(g.value(y), g.value(a));
    }

    #[test]
    fn hand_matmul() {
        let mut g = Graph::new();
        let a = g.input(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.input(m(&[&[0.0], &[1.0]]));
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(vec![2, 3]));
        let b = g.input(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_sum_gradient_is_ones_times_bt() {
        let mut g = Graph::new();
        let a = g.leaf(m(&[&[1.0, -2.0, 0.5], &[0.3, 0.0, 4.0]]));
        let b = g.input(m(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let y = g.matmul(a, b).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        let ga = g.grad(a).unwrap();
        // ones(2×2) × Bᵀ: each row = row sums of B
        assert_eq!(ga.data(), &[3.0, 7.0, 11.0, 3.0, 7.0, 11.0]);
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        let x = g.input(Tensor::new(vec![2], vec![2f64.ln(), 0.0]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        assert!((g.value(y).data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.value(y).data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariant() {
        let mut g = Graph::new();
        let x = g.input(m(&[&[0.1, -3.0, 2.0], &[1.0, 1.5, -0.5]]));
        let xs = g.input(m(&[&[100.1, 97.0, 102.0], &[101.0, 101.5, 99.5]]));
        let a = g.softmax(x, 1).unwrap();
        let b = g.softmax(xs, 1).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-12);
        for r in 0..2 {
            assert!((g.value(a).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_saturates_without_overflow() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![3], vec![0.0, -800.0, -30.0]).unwrap());
        let y = g.sigmoid(x);
        let v = g.value(y).data();
        assert_eq!(v[0], 0.5);
        assert!(v[1] >= 0.0 && v[1] < 1e-6 && v[1].is_finite());
        assert!(v[2] > 0.0 && v[2] < 1e-6);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1], vec![0.0]).unwrap());
        let y = g.sigmoid(x);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data()[0], 0.25);
    }

    #[test]
    fn max_axis_and_argmax() {
        let mut g = Graph::new();
        let x = g.input(m(&[&[1.0, 5.0], &[3.0, 2.0]]));
        let y = g.max_axis(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 5.0]);
        assert_eq!(g.argmax_of(y).unwrap(), &[2, 1]);
    }

    #[test]
    fn max_ties_route_to_lowest_index() {
        let mut g = Graph::new();
        let x = g.leaf(m(&[&[2.0], &[2.0], &[1.0]]));
        let y = g.max_axis(x, 0).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_with_empty_is_identity() {
        let mut g = Graph::new();
        let x = g.input(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let e = g.input(Tensor::zeros(vec![0, 2]));
        let y = g.concat(&[x, e], 0).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn layer_norm_identity() {
        let mut g = Graph::new();
        let x = g.input(m(&[&[1.0, 2.0, 3.0, 10.0], &[-4.0, 0.5, 0.25, 7.0]]));
        let y = g.layer_norm(x, 0.0).unwrap();
        for r in 0..2 {
            let row = g.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gather_out_of_range_names_index() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![3, 2]));
        match g.gather(x, &[0, 7]) {
            Err(Error::Index { value: 7, bound: 3 }) => {}
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let sq = g.mul(p, p).unwrap();
        let s = g.sum(sq);
        let l = g.scale(s, 0.5);
        g.backward(l).unwrap();
        assert_eq!(g.grad(p).unwrap(), *g.value(p));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::zeros(vec![2]));
        assert!(matches!(g.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn inputs_are_not_mutated() {
        let mut g = Graph::new();
        let before = m(&[&[1.0, -1.0], &[0.5, 2.0]]);
        let x = g.leaf(before.clone());
        let y = g.softmax(x, 1).unwrap();
        let z = g.layer_norm(y, 1e-5).unwrap();
        let s = g.sum(z);
        g.backward(s).unwrap();
        assert_eq!(*g.value(x), before);
    }

    #[test]
    fn f32_precision_rounds_values() {
        let mut g = Graph::with_precision(Precision::F32);
        let x = g.input(Tensor::new(vec![1], vec![0.1]).unwrap());
        let y = g.scale(x, 1.0);
        assert_eq!(g.value(y).data()[0], 0.1f32 as f64);
    }
}
