use std::rc::Rc;

use super::{matmul_acc, matmul_at_acc, matmul_bt_acc, sigmoid, Tensor};
use crate::error::{contract, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Last,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var, Vec<f64>),
    Conv1d { x: Var, w: Var, lookahead: usize },
    Gelu(Var),
    Swish(Var),
    Sigmoid(Var),
    Tanh(Var),
    Ln(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Embedding { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var>, axis: Axis },
    Slice { x: Var, axis: Axis, start: usize },
    Reshape(Var),
    Mean(Var),
    Sum(Var),
    Gather { x: Var, idx: Rc<[usize]>, width: usize },
    OuterAdd(Var, Var),
    L2Normalize(Var, Vec<f64>),
    /// A fused scalar loss: stores d(out)/d(input) computed at forward time.
    Fused { input: Var, local_grad: Vec<f64> },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Define-by-run record of operations.
///
/// Nodes are appended in execution order, so every node's inputs precede it
/// and a single reverse sweep visits each recorded op exactly once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> Error {
    Error::Shape {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

/// True when `b` equals the trailing dimensions of `a` (leading-batch expansion).
fn is_suffix(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by [`Tape::backward`], if `v` participated.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: "leaf".into(),
            });
        }
        Ok(self.push_raw(value, requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Copies `v`'s value into a new constant node, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push_raw(value, false, Op::Leaf)
    }

    fn push_raw(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name.into() });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if rg { op } else { Op::Leaf };
        Ok(self.push_raw(value, rg, op))
    }

    // ---------------------------------------------------------------- ops

    /// `a[.., k] · b[k × n]`; leading dimensions of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || *sa.last().unwrap() != sb[0] {
            return Err(shape_err("matmul", &[sa, sb]));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).len() / k.max(1);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let value = Tensor::new(shape, out)?;
        self.push("matmul", value, &[a, b], Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(shape_err("transpose", &[s]));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        self.push("transpose", value, &[a], Op::Transpose(a))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sa, sb) {
            return Err(shape_err(name, &[sa, sb]));
        }
        let bd = self.value(b).data();
        let nb = bd.len().max(1);
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % nb]))
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        self.push(name, value, &[a, b], op)
    }

    /// Elementwise `a + b`, with `b` expanded over leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale · a + shift` with constant coefficients.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let value = self.map(a, |x| scale * x + shift);
        self.push("affine", value, &[a], Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Result<Var> {
        self.affine(a, scale, 0.0)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&x| f(x)).collect(),
        }
    }

    /// Softmax over the last dimension.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        self.masked_softmax_lastdim(a, None)
    }

    /// Softmax over the last dimension where entries with `mask[i] == false`
    /// are excluded and come out as exact zeros.
    pub fn masked_softmax_lastdim(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() == 0 {
            return Err(shape_err("softmax", &[t.shape()]));
        }
        if let Some(m) = mask {
            if m.len() != t.len() {
                return Err(shape_err("softmax", &[t.shape(), &[m.len()]]));
            }
        }
        let c = t.last_dim();
        let mut out = vec![0.0; t.len()];
        for r in 0..t.rows() {
            let x = t.row(r);
            let keep = |j: usize| mask.map_or(true, |m| m[r * c + j]);
            let mut mx = f64::NEG_INFINITY;
            for (j, &v) in x.iter().enumerate() {
                if keep(j) {
                    mx = mx.max(v);
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(contract("softmax: row with every entry masked"));
            }
            let mut s = 0.0;
            for (j, &v) in x.iter().enumerate() {
                if keep(j) {
                    let e = (v - mx).exp();
                    out[r * c + j] = e;
                    s += e;
                }
            }
            for o in &mut out[r * c..(r + 1) * c] {
                *o /= s;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("softmax", value, &[a], Op::Softmax(a))
    }

    pub fn log_softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() == 0 {
            return Err(shape_err("log_softmax", &[t.shape()]));
        }
        let c = t.last_dim();
        let mut out = vec![0.0; t.len()];
        for r in 0..t.rows() {
            let lse = super::log_sum_exp(t.row(r));
            for (o, &v) in out[r * c..(r + 1) * c].iter_mut().zip(t.row(r)) {
                *o = v - lse;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("log_softmax", value, &[a], Op::LogSoftmax(a))
    }

    /// Normalizes each row over the last dimension (no learned gain/bias).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() == 0 || t.last_dim() == 0 {
            return Err(shape_err("layer_norm", &[t.shape()]));
        }
        let c = t.last_dim();
        let mut out = vec![0.0; t.len()];
        let mut inv = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let x = t.row(r);
            let mu = x.iter().sum::<f64>() / c as f64;
            let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, &v) in out[r * c..(r + 1) * c].iter_mut().zip(x) {
                *o = (v - mu) * is;
            }
            inv.push(is);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("layer_norm", value, &[a], Op::LayerNorm(a, inv))
    }

    /// Depthwise 1-D convolution over time.
    ///
    /// `x` is `[T × C]`, `w` is `[K × C]`; output row `t` reads input rows
    /// `t + lookahead - (K-1) ..= t + lookahead`, zero outside `[0, T)`.
    /// With `lookahead == 0` the convolution is causal.
    pub fn conv1d_depthwise(&mut self, x: Var, w: Var, lookahead: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || sw[0] == 0 || lookahead >= sw[0] {
            return Err(shape_err("conv1d", &[sx, sw]));
        }
        let (t_len, c, k) = (sx[0], sx[1], sw[0]);
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; t_len * c];
        for t in 0..t_len {
            for j in 0..k {
                let s = t as isize + j as isize + lookahead as isize - (k as isize - 1);
                if s < 0 || s >= t_len as isize {
                    continue;
                }
                let s = s as usize;
                let orow = &mut out[t * c..(t + 1) * c];
                for ((o, &xv), &wv) in orow.iter_mut().zip(&xd[s * c..(s + 1) * c]).zip(&wd[j * c..(j + 1) * c]) {
                    *o += wv * xv;
                }
            }
        }
        let value = Tensor::new(vec![t_len, c], out)?;
        self.push("conv1d", value, &[x, w], Op::Conv1d { x, w, lookahead })
    }

    pub fn causal_conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        self.conv1d_depthwise(x, w, 0)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push("gelu", value, &[a], Op::Gelu(a))
    }

    pub fn swish(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, |x| x * sigmoid(x));
        self.push("swish", value, &[a], Op::Swish(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, sigmoid);
        self.push("sigmoid", value, &[a], Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, f64::tanh);
        self.push("tanh", value, &[a], Op::Tanh(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, f64::ln);
        self.push("ln", value, &[a], Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, |x| x * x);
        self.push("square", value, &[a], Op::Square(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let value = self.map(a, |x| x.clamp(lo, hi));
        self.push("clamp", value, &[a], Op::Clamp(a, lo, hi))
    }

    /// Gathers rows of a `[N × E]` table.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(shape_err("embedding_lookup", &[s]));
        }
        let (n, e) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(contract(format!("embedding_lookup: id {bad} out of range {n}")));
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            out.extend_from_slice(&td[i * e..(i + 1) * e]);
        }
        let value = Tensor::new(vec![ids.len(), e], out)?;
        self.push(
            "embedding_lookup",
            value,
            &[table],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Concatenates along the first dimension (`Axis::Rows`, trailing
    /// dimensions must agree) or the last dimension of 2-D tensors.
    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(contract("concat: no inputs"));
        };
        let s0 = self.shape(first).to_vec();
        let value = match axis {
            Axis::Rows => {
                if s0.is_empty() {
                    return Err(shape_err("concat", &[&s0]));
                }
                let mut rows = 0;
                let mut data = Vec::new();
                for &p in parts {
                    let s = self.shape(p);
                    if s.len() != s0.len() || s[1..] != s0[1..] {
                        return Err(shape_err("concat", &[&s0, s]));
                    }
                    rows += s[0];
                    data.extend_from_slice(self.value(p).data());
                }
                let mut shape = s0.clone();
                shape[0] = rows;
                Tensor::new(shape, data)?
            }
            Axis::Last => {
                if s0.len() != 2 {
                    return Err(shape_err("concat", &[&s0]));
                }
                let r = s0[0];
                let mut widths = Vec::with_capacity(parts.len());
                for &p in parts {
                    let s = self.shape(p);
                    if s.len() != 2 || s[0] != r {
                        return Err(shape_err("concat", &[&s0, s]));
                    }
                    widths.push(s[1]);
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(r * total);
                for i in 0..r {
                    for (&p, &w) in parts.iter().zip(&widths) {
                        data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
                    }
                }
                Tensor::new(vec![r, total], data)?
            }
        };
        self.push(
            "concat",
            value,
            parts,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// `[start, end)` along the first dimension, or the last dimension of a
    /// 2-D tensor.
    pub fn slice(&mut self, x: Var, axis: Axis, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let value = match axis {
            Axis::Rows => {
                if s.is_empty() || start > end || end > s[0] {
                    return Err(shape_err("slice", &[&s, &[start, end]]));
                }
                let inner: usize = s[1..].iter().product();
                let mut shape = s.clone();
                shape[0] = end - start;
                Tensor::new(shape, self.value(x).data()[start * inner..end * inner].to_vec())?
            }
            Axis::Last => {
                if s.len() != 2 || start > end || end > s[1] {
                    return Err(shape_err("slice", &[&s, &[start, end]]));
                }
                let (r, c) = (s[0], s[1]);
                let src = self.value(x).data();
                let mut data = Vec::with_capacity(r * (end - start));
                for i in 0..r {
                    data.extend_from_slice(&src[i * c + start..i * c + end]);
                }
                Tensor::new(vec![r, end - start], data)?
            }
        };
        self.push("slice", value, &[x], Op::Slice { x, axis, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", value, &[x], Op::Reshape(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(shape_err("mean", &[t.shape()]));
        }
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push("mean", value, &[x], Op::Mean(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push("sum", value, &[x], Op::Sum(x))
    }

    /// `out[i][j] = x[i][idx[i·width + j]]` for a 2-D `x`.
    pub fn gather_lastdim(&mut self, x: Var, idx: Rc<[usize]>, width: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || idx.len() != s[0] * width {
            return Err(shape_err("gather", &[&s, &[idx.len()]]));
        }
        let (r, c) = (s[0], s[1]);
        if idx.iter().any(|&j| j >= c) {
            return Err(contract("gather: column index out of range"));
        }
        let src = self.value(x).data();
        let data = (0..r * width).map(|p| src[(p / width) * c + idx[p]]).collect();
        let value = Tensor::new(vec![r, width], data)?;
        self.push("gather", value, &[x], Op::Gather { x, idx, width })
    }

    /// `out[t][u][:] = a[t][:] + b[u][:]` for `a: [T × J]`, `b: [U × J]`.
    pub fn outer_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("outer_add", &[sa, sb]));
        }
        let (t_len, u_len, j) = (sa[0], sb[0], sa[1]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(t_len * u_len * j);
        for t in 0..t_len {
            let ar = &ad[t * j..(t + 1) * j];
            for u in 0..u_len {
                out.extend(ar.iter().zip(&bd[u * j..(u + 1) * j]).map(|(x, y)| x + y));
            }
        }
        let value = Tensor::new(vec![t_len, u_len, j], out)?;
        self.push("outer_add", value, &[a, b], Op::OuterAdd(a, b))
    }

    /// Scales each row to unit L2 norm (norms floored at 1e-8).
    pub fn l2_normalize_lastdim(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() == 0 {
            return Err(shape_err("l2_normalize", &[t.shape()]));
        }
        let c = t.last_dim();
        let mut out = vec![0.0; t.len()];
        let mut norms = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let row = t.row(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
            for (o, &v) in out[r * c..(r + 1) * c].iter_mut().zip(row) {
                *o = v / n;
            }
            norms.push(n);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("l2_normalize", value, &[x], Op::L2Normalize(x, norms))
    }

    /// Records a scalar whose gradient w.r.t. `input` was computed by the
    /// caller (used by the transducer lattice loss).
    pub fn fused_scalar(&mut self, name: &'static str, input: Var, value: f64, local_grad: Vec<f64>) -> Result<Var> {
        if local_grad.len() != self.value(input).len() {
            return Err(shape_err(name, &[self.shape(input), &[local_grad.len()]]));
        }
        self.push(name, Tensor::scalar(value), &[input], Op::Fused { input, local_grad })
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`, filling gradients of every node
    /// that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(contract("backward called twice without reset_grads"));
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(contract(format!("backward: loss must be scalar, got {:?}", lv.shape())));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite {
                op: "backward".into(),
            });
        }
        if !self.requires_grad(loss) {
            return Err(contract("backward: loss does not depend on any trainable leaf"));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        self.backward_done = true;
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }


    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let val = |v: Var| &nodes[v.0].value;
        let op = &nodes[i].op;
        match op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let k = val(b).shape()[0];
                let n = val(b).shape()[1];
                let m = val(a).len() / k.max(1);
                if nodes[a.0].requires_grad {
                    let ga = acc(grads, nodes, a).unwrap();
                    matmul_bt_acc(g, val(b).data(), m, n, k, ga);
                }
                if nodes[b.0].requires_grad {
                    let gb = acc(grads, nodes, b).unwrap();
                    matmul_at_acc(val(a).data(), g, m, k, n, gb);
                }
            }
            &Op::Transpose(a) => {
                let s = val(a).shape();
                let (r, c) = (s[0], s[1]);
                let ga = acc(grads, nodes, a).unwrap();
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(ga) = acc(grads, nodes, a) {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if let Some(gb) = acc(grads, nodes, b) {
                    let nb = gb.len().max(1);
                    for (p, y) in g.iter().enumerate() {
                        gb[p % nb] += sign * y;
                    }
                }
            }
            &Op::Mul(a, b) => {
                let av = val(a).data();
                let bv = val(b).data();
                let nb = bv.len().max(1);
                if let Some(ga) = acc(grads, nodes, a) {
                    for (p, x) in ga.iter_mut().enumerate() {
                        *x += g[p] * bv[p % nb];
                    }
                }
                if let Some(gb) = acc(grads, nodes, b) {
                    for (p, y) in g.iter().enumerate() {
                        gb[p % nb] += y * av[p];
                    }
                }
            }
            &Op::Affine(a, s) => {
                let ga = acc(grads, nodes, a).unwrap();
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += s * y;
                }
            }
            &Op::Softmax(a) => {
                let y = &nodes[i].value;
                let c = y.last_dim();
                let ga = acc(grads, nodes, a).unwrap();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        ga[r * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            &Op::LogSoftmax(a) => {
                let y = &nodes[i].value;
                let c = y.last_dim();
                let ga = acc(grads, nodes, a).unwrap();
                for r in 0..y.rows() {
                    let gr = &g[r * c..(r + 1) * c];
                    let gs: f64 = gr.iter().sum();
                    for j in 0..c {
                        ga[r * c + j] += gr[j] - y.row(r)[j].exp() * gs;
                    }
                }
            }
            Op::LayerNorm(a, inv) => {
                let a = *a;
                let y = &nodes[i].value;
                let c = y.last_dim();
                let ga = acc(grads, nodes, a).unwrap();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                    for j in 0..c {
                        ga[r * c + j] += inv[r] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
            }
            &Op::Conv1d { x, w, lookahead } => {
                let (t_len, c) = (val(x).shape()[0], val(x).shape()[1]);
                let k = val(w).shape()[0];
                let xd = val(x).data();
                let wd = val(w).data();
                let src = |t: usize, j: usize| -> Option<usize> {
                    let s = t as isize + j as isize + lookahead as isize - (k as isize - 1);
                    (s >= 0 && s < t_len as isize).then_some(s as usize)
                };
                if let Some(gx) = acc(grads, nodes, x) {
                    for t in 0..t_len {
                        for j in 0..k {
                            if let Some(s) = src(t, j) {
                                for ch in 0..c {
                                    gx[s * c + ch] += wd[j * c + ch] * g[t * c + ch];
                                }
                            }
                        }
                    }
                }
                if let Some(gw) = acc(grads, nodes, w) {
                    for t in 0..t_len {
                        for j in 0..k {
                            if let Some(s) = src(t, j) {
                                for ch in 0..c {
                                    gw[j * c + ch] += xd[s * c + ch] * g[t * c + ch];
                                }
                            }
                        }
                    }
                }
            }
            &Op::Gelu(a) => {
                let xv = val(a).data();
                let ga = acc(grads, nodes, a).unwrap();
                for (p, &x) in xv.iter().enumerate() {
                    let inner = GELU_C * (x + 0.044715 * x * x * x);
                    let th = inner.tanh();
                    let d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    ga[p] += g[p] * d;
                }
            }
            &Op::Swish(a) => {
                let xv = val(a).data();
                let ga = acc(grads, nodes, a).unwrap();
                for (p, &x) in xv.iter().enumerate() {
                    let s = sigmoid(x);
                    ga[p] += g[p] * (s + x * s * (1.0 - s));
                }
            }
            &Op::Sigmoid(a) => {
                let y = nodes[i].value.data();
                let ga = acc(grads, nodes, a).unwrap();
                for (p, &s) in y.iter().enumerate() {
                    ga[p] += g[p] * s * (1.0 - s);
                }
            }
            &Op::Tanh(a) => {
                let y = nodes[i].value.data();
                let ga = acc(grads, nodes, a).unwrap();
                for (p, &t) in y.iter().enumerate() {
                    ga[p] += g[p] * (1.0 - t * t);
                }
            }
            &Op::Ln(a) => {
                let xv = val(a).data();
                let ga = acc(grads, nodes, a).unwrap();
                for (p, &x) in xv.iter().enumerate() {
                    ga[p] += g[p] / x;
                }
            }
            &Op::Square(a) => {
                let xv = val(a).data();
                let ga = acc(grads, nodes, a).unwrap();
                for (p, &x) in xv.iter().enumerate() {
                    ga[p] += g[p] * 2.0 * x;
                }
            }
            &Op::Clamp(a, lo, hi) => {
                let xv = val(a).data();
                let ga = acc(grads, nodes, a).unwrap();
                for (p, &x) in xv.iter().enumerate() {
                    if x > lo && x < hi {
                        ga[p] += g[p];
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let e = val(*table).shape()[1];
                let gt = acc(grads, nodes, *table).unwrap();
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..e {
                        gt[id * e + j] += g[r * e + j];
                    }
                }
            }
            Op::Concat { parts, axis } => match axis {
                Axis::Rows => {
                    let mut off = 0;
                    for &p in parts {
                        let n = val(p).len();
                        if let Some(gp) = acc(grads, nodes, p) {
                            for (x, y) in gp.iter_mut().zip(&g[off..off + n]) {
                                *x += y;
                            }
                        }
                        off += n;
                    }
                }
                Axis::Last => {
                    let r = val(parts[0]).shape()[0];
                    let widths: Vec<usize> = parts.iter().map(|&p| val(p).shape()[1]).collect();
                    let total: usize = widths.iter().sum();
                    let mut col = 0;
                    for (&p, &w) in parts.iter().zip(&widths) {
                        if let Some(gp) = acc(grads, nodes, p) {
                            for i in 0..r {
                                for j in 0..w {
                                    gp[i * w + j] += g[i * total + col + j];
                                }
                            }
                        }
                        col += w;
                    }
                }
            },
            &Op::Slice { x, axis, start } => {
                let s = val(x).shape();
                let ox = nodes[i].value.shape();
                let gx = acc(grads, nodes, x).unwrap();
                match axis {
                    Axis::Rows => {
                        let inner: usize = s[1..].iter().product();
                        for (p, y) in g.iter().enumerate() {
                            gx[start * inner + p] += y;
                        }
                    }
                    Axis::Last => {
                        let (r, c, w) = (s[0], s[1], ox[1]);
                        for i in 0..r {
                            for j in 0..w {
                                gx[i * c + start + j] += g[i * w + j];
                            }
                        }
                    }
                }
            }
            &Op::Reshape(x) => {
                let gx = acc(grads, nodes, x).unwrap();
                for (a, b) in gx.iter_mut().zip(g) {
                    *a += b;
                }
            }
            &Op::Mean(x) => {
                let gx = acc(grads, nodes, x).unwrap();
                let n = gx.len() as f64;
                for a in gx.iter_mut() {
                    *a += g[0] / n;
                }
            }
            &Op::Sum(x) => {
                let gx = acc(grads, nodes, x).unwrap();
                for a in gx.iter_mut() {
                    *a += g[0];
                }
            }
            Op::Gather { x, idx, width } => {
                let c = val(*x).shape()[1];
                let gx = acc(grads, nodes, *x).unwrap();
                for (p, y) in g.iter().enumerate() {
                    gx[(p / width) * c + idx[p]] += y;
                }
            }
            &Op::OuterAdd(a, b) => {
                let (t_len, j) = (val(a).shape()[0], val(a).shape()[1]);
                let u_len = val(b).shape()[0];
                if let Some(ga) = acc(grads, nodes, a) {
                    for t in 0..t_len {
                        for u in 0..u_len {
                            let base = (t * u_len + u) * j;
                            for q in 0..j {
                                ga[t * j + q] += g[base + q];
                            }
                        }
                    }
                }
                if let Some(gb) = acc(grads, nodes, b) {
                    for t in 0..t_len {
                        for u in 0..u_len {
                            let base = (t * u_len + u) * j;
                            for q in 0..j {
                                gb[u * j + q] += g[base + q];
                            }
                        }
                    }
                }
            }
            Op::L2Normalize(x, norms) => {
                let x = *x;
                let y = &nodes[i].value;
                let c = y.last_dim();
                let gx = acc(grads, nodes, x).unwrap();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        gx[r * c + j] += (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
            }
            Op::Fused { input, local_grad } => {
                let gi = acc(grads, nodes, *input).unwrap();
                for (a, b) in gi.iter_mut().zip(local_grad) {
                    *a += g[0] * b;
                }
            }
        }
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0])).unwrap();
        let y = tape.softmax_lastdim(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn causal_conv_identity_kernel_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4, 2], &[1.0, -2.0, 3.0, 0.5, 7.0, 1.0, -1.0, 2.0])).unwrap();
        let mut k = vec![0.0; 3 * 2];
        k[4] = 1.0;
        k[5] = 1.0;
        let w = tape.constant(t(&[3, 2], &k)).unwrap();
        let y = tape.causal_conv1d(x, w).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = [1.0, 2.0, 3.0, -1.0, 0.5, 4.0];
        let b = [2.0, -1.0, 0.0, 3.0, 1.5, 1.0];
        let mut naive = [0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..3 {
                    naive[i * 2 + j] += a[i * 3 + p] * b[p * 2 + j];
                }
            }
        }
        let mut tape = Tape::new();
        let av = tape.constant(t(&[2, 3], &a)).unwrap();
        let bv = tape.constant(t(&[3, 2], &b)).unwrap();
        let c = tape.matmul(av, bv).unwrap();
        assert_eq!(tape.value(c).data(), &naive);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true).unwrap();
        let y = tape.mul(x, x).unwrap();
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], &[1.0, 5.0, -2.0, 0.0]), true).unwrap();
        let l = tape.mean(x).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn second_backward_is_rejected_until_reset() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true).unwrap();
        let l = tape.sum(x).unwrap();
        tape.backward(l).unwrap();
        assert!(matches!(tape.backward(l), Err(Error::Contract(_))));
        tape.reset_grads();
        tape.backward(l).unwrap();
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        match tape.matmul(a, b) {
            Err(Error::Shape { op, shapes }) => {
                assert_eq!(op, "matmul");
                assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
        // Only leading-batch expansion is allowed.
        let c = tape.constant(Tensor::zeros(&[2])).unwrap();
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut tape = Tape::new();
        assert!(matches!(
            tape.leaf(t(&[2], &[1.0, f64::NAN]), false),
            Err(Error::NonFinite { .. })
        ));
        let x = tape.constant(t(&[1], &[-1.0])).unwrap();
        assert!(matches!(tape.ln(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn ops_without_grad_inputs_are_not_recorded() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0])).unwrap();
        let b = tape.add(a, a).unwrap();
        assert!(!tape.requires_grad(b));
        let s = tape.sum(b).unwrap();
        assert!(tape.backward(s).is_err());
    }

    #[test]
    fn masked_softmax_zeroes_excluded_entries() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0])).unwrap();
        let mask = [true, true, false, false, true, true];
        let y = tape.masked_softmax_lastdim(x, Some(&mask)).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[2], 0.0);
        assert_eq!(v[3], 0.0);
        assert!((v[0] + v[1] - 1.0).abs() < 1e-15);
        assert!((v[4] - 0.5).abs() < 1e-15);
    }
}
