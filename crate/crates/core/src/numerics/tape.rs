//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its value and enough saved state to
//! run its backward rule. Nodes are only ever appended, so node order is a
//! topological order and `backward` is a single reverse sweep.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::conv::{self, ConvGeom};
use super::kernels::{gemm_nn, gemm_nt, gemm_tn, log_sum_exp};
use super::{Real, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    MatMul { a: Var, b: Var, trans_b: bool, m: usize, k: usize, n: usize, batch: usize, b_shared: bool },
    Transpose { a: Var, rows: usize, cols: usize },
    Reshape(Var),
    Permute { a: Var, axes: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, rstd: Vec<F> },
    Relu(Var),
    Gelu(Var),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<F>, smoothing: F },
    WeightedSqErr { pred: Var, target: Var, row_weights: Vec<F> },
    MaskRows { x: Var, fill: Var, mask: Vec<bool> },
    Ctc { log_probs: Var, grad: Vec<F> },
}

struct Node<F> {
    value: Rc<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Recorded computation. Create one per training step and drop it after
/// `backward`.
pub struct Tape<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid { op, msg: msg.into() }
}

/// `b` broadcasts onto `a` when its shape is a suffix of `a`'s shape.
fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn gelu_parts<F: Real>(x: F) -> (F, F) {
    let c = F::c((2.0 / std::f64::consts::PI).sqrt());
    let k = F::c(0.044715);
    let half = F::c(0.5);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let y = half * x * (F::one() + t);
    let dy = half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::c(3.0) * k * x * x);
    (y, dy)
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    fn val(&self, v: Var) -> Rc<Tensor<F>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A trainable leaf sharing storage with the caller.
    pub fn param(&self, t: Rc<Tensor<F>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn variable(&self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<F>> {
        self.val(v)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar_value(&self, v: Var) -> F {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn binary(&self, op_name: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<Tensor<F>, TensorError> {
        let (ta, tb) = (self.val(a), self.val(b));
        if !broadcastable(ta.shape(), tb.shape()) {
            return Err(mismatch(op_name, ta.shape(), tb.shape()));
        }
        let nb = tb.len().max(1);
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[i % nb]))
            .collect();
        Tensor::new(ta.shape(), data)
    }

    /// Elementwise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), self.rg(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), self.rg(&[a, b])))
    }

    /// Elementwise product; `b` may broadcast over leading axes of `a`.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), self.rg(&[a, b])))
    }

    pub fn scale(&self, a: Var, s: F) -> Var {
        let out = self.val(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), self.rg(&[a]))
    }

    /// Matrix product over the last two axes. `a` is `[.., m, k]`; `b` is
    /// either `[k, n]` (shared across the batch) or has the same leading axes
    /// as `a`. With `trans_b` the last two axes of `b` are read as `[n, k]`.
    pub fn matmul_ext(&self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(mismatch("matmul", sa, sb));
        }
        let b_shared = sb.len() == 2;
        if !b_shared && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(mismatch("matmul", sa, sb));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![F::zero(); batch * m * n];
        for bi in 0..batch {
            let a_s = &ta.data()[bi * m * k..(bi + 1) * m * k];
            let b_s = if b_shared {
                tb.data()
            } else {
                &tb.data()[bi * k * n..(bi + 1) * k * n]
            };
            let c_s = &mut out[bi * m * n..(bi + 1) * m * n];
            if trans_b {
                gemm_nt(m, k, n, a_s, b_s, c_s);
            } else {
                gemm_nn(m, k, n, a_s, b_s, c_s);
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(
            t,
            Op::MatMul { a, b, trans_b, m, k, n, batch, b_shared },
            self.rg(&[a, b]),
        ))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_ext(a, b, false)
    }

    /// Swap the last two axes.
    pub fn transpose(&self, a: Var) -> Result<Var, TensorError> {
        let ta = self.val(a);
        let s = ta.shape();
        if s.len() < 2 {
            return Err(invalid("transpose", format!("need ≥2 axes, got {s:?}")));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = ta.len() / (rows * cols).max(1);
        let mut out = vec![F::zero(); ta.len()];
        for b in 0..batch {
            let off = b * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    out[off + j * rows + i] = ta.data()[off + i * cols + j];
                }
            }
        }
        let mut shape = s.to_vec();
        let nd = shape.len();
        shape.swap(nd - 2, nd - 1);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Transpose { a, rows, cols }, self.rg(&[a])))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = (*self.val(a)).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a), self.rg(&[a])))
    }

    /// General axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, a: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let ta = self.val(a);
        let s = ta.shape();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&x| x >= s.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(invalid("permute", format!("axes {axes:?} invalid for shape {s:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&i| s[i]).collect();
        let out = permute_data(ta.data(), s, axes);
        let t = Tensor::new(&out_shape, out)?;
        Ok(self.push(t, Op::Permute { a, axes: axes.to_vec() }, self.rg(&[a])))
    }

    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        if inputs.is_empty() {
            return Err(invalid("concat", "no inputs"));
        }
        let vals: Vec<_> = inputs.iter().map(|&v| self.val(v)).collect();
        let first = vals[0].shape().to_vec();
        if axis >= first.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for v in &vals {
            let s = v.shape();
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &vals {
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Concat { inputs: inputs.to_vec(), axis }, self.rg(inputs)))
    }

    /// Half-open slice `[start, end)` along `axis`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, TensorError> {
        let ta = self.val(a);
        let s = ta.shape();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(invalid("slice", format!("[{start},{end}) on axis {axis} of {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let len = end - start;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&ta.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Slice { a, axis, start }, self.rg(&[a])))
    }

    /// Row lookup: `table` is `[V, d]`, result `[ids.len(), d]`.
    pub fn gather(&self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let tt = self.val(table);
        if tt.ndim() != 2 {
            return Err(invalid("gather", format!("table must be 2-D, got {:?}", tt.shape())));
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(invalid("gather", format!("id {id} out of range for {v} rows")));
            }
            out.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.push(t, Op::Gather { table, ids: ids.to_vec() }, self.rg(&[table])))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, a: Var) -> Var {
        let ta = self.val(a);
        let c = ta.cols();
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let lse = log_sum_exp(row);
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let t = Tensor::new(ta.shape(), out).expect("same shape");
        self.push(t, Op::Softmax(a), self.rg(&[a]))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self, a: Var) -> Var {
        let ta = self.val(a);
        let c = ta.cols();
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let lse = log_sum_exp(row);
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let t = Tensor::new(ta.shape(), out).expect("same shape");
        self.push(t, Op::LogSoftmax(a), self.rg(&[a]))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let (tx, tg, tb) = (self.val(x), self.val(gamma), self.val(beta));
        let d = tx.cols();
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(mismatch("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.len() / d.max(1);
        let mut xhat = vec![F::zero(); tx.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); tx.len()];
        let nd = F::c(d as f64);
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / nd;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nd;
            let rs = F::one() / (var + F::c(eps)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, self.rg(&[x, gamma, beta])))
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.val(a).map(|x| if x <= F::zero() { F::zero() } else { x });
        self.push(out, Op::Relu(a), self.rg(&[a]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        let out = self.val(a).map(|x| gelu_parts(x).0);
        self.push(out, Op::Gelu(a), self.rg(&[a]))
    }

    /// 2-D convolution of `x: [C_in, H, W]` with `w: [C_out, C_in, k, k]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let (tx, tw, tb) = (self.val(x), self.val(w), self.val(b));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] || tb.shape() != [sw[0]] {
            return Err(mismatch("conv2d", sx, sw));
        }
        let (h, wd, k) = (sx[1], sx[2], sw[2]);
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(invalid("conv2d", format!("input {sx:?} too small for kernel {k} (pad {pad}, stride {stride})")));
        }
        let geom = ConvGeom::conv(sx[0], sw[0], h, wd, k, stride, pad);
        let out = conv::conv2d_forward(&geom, tx.data(), tw.data(), tb.data());
        let t = Tensor::new(&[geom.c_out, geom.oh, geom.ow], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, self.rg(&[x, w, b])))
    }

    /// Transposed 2-D convolution of `x: [C_in, H, W]` with `w: [C_in, C_out, k, k]`.
    pub fn conv_transpose2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let (tx, tw, tb) = (self.val(x), self.val(w), self.val(b));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 3 || sw.len() != 4 || sw[0] != sx[0] || sw[2] != sw[3] || tb.shape() != [sw[1]] {
            return Err(mismatch("conv_transpose2d", sx, sw));
        }
        if stride == 0 {
            return Err(invalid("conv_transpose2d", "stride must be positive"));
        }
        let geom = ConvGeom::transposed(sx[0], sw[1], sx[1], sx[2], sw[2], stride, pad);
        if geom.oh == 0 || geom.ow == 0 {
            return Err(invalid("conv_transpose2d", "empty output"));
        }
        let out = conv::conv_transpose2d_forward(&geom, tx.data(), tw.data(), tb.data());
        let t = Tensor::new(&[geom.c_out, geom.oh, geom.ow], out)?;
        Ok(self.push(t, Op::ConvTranspose2d { x, w, b, geom }, self.rg(&[x, w, b])))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self, a: Var) -> Var {
        let s = self.val(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), self.rg(&[a]))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.val(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, F::one() / F::c(n as f64))
    }

    /// `Σ_i weights[i] · CE(logits[i], targets[i])` with optional label smoothing.
    pub fn cross_entropy_weighted(
        &self,
        logits: Var,
        targets: &[usize],
        weights: &[F],
        smoothing: F,
    ) -> Result<Var, TensorError> {
        let tl = self.val(logits);
        if tl.ndim() != 2 || tl.rows() != targets.len() || weights.len() != targets.len() {
            return Err(invalid(
                "cross_entropy",
                format!("logits {:?} with {} targets / {} weights", tl.shape(), targets.len(), weights.len()),
            ));
        }
        let v = tl.cols();
        let mut total = F::zero();
        for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if t >= v {
                return Err(invalid("cross_entropy", format!("target {t} out of range for {v} classes")));
            }
            if w == F::zero() {
                continue;
            }
            let row = tl.row(i);
            let lse = log_sum_exp(row);
            let nll = lse - row[t];
            let loss = if smoothing > F::zero() {
                let mean_nll = row.iter().map(|&x| lse - x).sum::<F>() / F::c(v as f64);
                (F::one() - smoothing) * nll + smoothing * mean_nll
            } else {
                nll
            };
            total += w * loss;
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), smoothing },
            self.rg(&[logits]),
        ))
    }

    /// Mean cross-entropy over all rows.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let w = vec![F::one() / F::c(targets.len().max(1) as f64); targets.len()];
        self.cross_entropy_weighted(logits, targets, &w, F::zero())
    }

    /// `Σ_i row_weights[i] · Σ_j (pred[i,j] − target[i,j])²` over the rows of
    /// the last axis.
    pub fn weighted_sq_err(&self, pred: Var, target: Var, row_weights: &[F]) -> Result<Var, TensorError> {
        let (tp, tt) = (self.val(pred), self.val(target));
        if tp.shape() != tt.shape() {
            return Err(mismatch("weighted_sq_err", tp.shape(), tt.shape()));
        }
        if tp.rows() != row_weights.len() {
            return Err(invalid("weighted_sq_err", format!("{} rows, {} weights", tp.rows(), row_weights.len())));
        }
        let d = tp.cols();
        let mut total = F::zero();
        for (r, &w) in row_weights.iter().enumerate() {
            if w == F::zero() {
                continue;
            }
            let s: F = (0..d)
                .map(|j| {
                    let e = tp.data()[r * d + j] - tt.data()[r * d + j];
                    e * e
                })
                .sum();
            total += w * s;
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSqErr { pred, target, row_weights: row_weights.to_vec() },
            self.rg(&[pred, target]),
        ))
    }

    /// Mean squared error over every element.
    pub fn mse(&self, pred: Var, target: Var) -> Result<Var, TensorError> {
        let tp = self.val(pred);
        let w = F::one() / F::c(tp.len().max(1) as f64);
        self.weighted_sq_err(pred, target, &vec![w; tp.rows()])
    }

    /// Replace rows of `x: [n, d]` flagged in `mask` with the vector `fill: [d]`.
    pub fn mask_rows(&self, x: Var, fill: Var, mask: &[bool]) -> Result<Var, TensorError> {
        let (tx, tf) = (self.val(x), self.val(fill));
        let d = tx.cols();
        if tx.ndim() != 2 || tf.shape() != [d] || tx.rows() != mask.len() {
            return Err(mismatch("mask_rows", tx.shape(), tf.shape()));
        }
        let mut out = tx.data().to_vec();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out[r * d..(r + 1) * d].copy_from_slice(tf.data());
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        Ok(self.push(t, Op::MaskRows { x, fill, mask: mask.to_vec() }, self.rg(&[x, fill])))
    }

    /// CTC negative log-likelihood of `labels` under per-frame `log_probs`
    /// (`[T, C]`, already normalized). Errors when the label cannot be
    /// aligned within `T` frames.
    pub fn ctc_loss(&self, log_probs: Var, labels: &[usize], blank: usize) -> Result<Var, TensorError> {
        let tl = self.val(log_probs);
        if tl.ndim() != 2 || blank >= tl.cols() {
            return Err(invalid("ctc_loss", format!("log-probs {:?} with blank {blank}", tl.shape())));
        }
        let (nll, grad) = crate::objectives::ctc::ctc_forward_backward(tl.data(), tl.rows(), tl.cols(), labels, blank)
            .ok_or_else(|| invalid("ctc_loss", format!("label of length {} infeasible in {} frames", labels.len(), tl.rows())))?;
        Ok(self.push(Tensor::scalar(nll), Op::Ctc { log_probs, grad }, self.rg(&[log_probs])))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>, TensorError> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            backward_node(&nodes, node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads: grads
                .into_iter()
                .enumerate()
                .map(|(i, g)| {
                    g.filter(|_| nodes[i].requires_grad)
                        .map(|g| Tensor::new(nodes[i].value.shape(), g).expect("grad shape"))
                })
                .collect(),
        })
    }

    /// Borrow a node's value without cloning the `Rc`.
    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor<F>) -> R) -> R {
        let nodes: Ref<'_, Vec<Node<F>>> = self.nodes.borrow();
        f(&nodes[v.0].value)
    }
}

fn permute_data<F: Real>(data: &[F], shape: &[usize], axes: &[usize]) -> Vec<F> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&i| shape[i]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let nd = shape.len();
    let mut idx = vec![0usize; nd];
    for _ in 0..n {
        let src: usize = (0..nd).map(|i| idx[i] * in_strides[axes[i]]).sum();
        out.push(data[src]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

fn accumulate<F: Real>(grads: &mut [Option<Vec<F>>], nodes: &[Node<F>], v: Var, delta: Vec<F>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Reduce a gradient of `a`'s shape onto a suffix-broadcast operand of length `nb`.
fn reduce_broadcast<F: Real>(g: &[F], nb: usize) -> Vec<F> {
    let mut out = vec![F::zero(); nb];
    for (i, &x) in g.iter().enumerate() {
        out[i % nb] += x;
    }
    out
}

fn backward_node<F: Real>(nodes: &[Node<F>], node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
    let val = |v: Var| -> &Tensor<F> { &nodes[v.0].value };
    let rg = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            let nb = val(*b).len();
            accumulate(grads, nodes, *a, g.to_vec());
            if rg(*b) {
                accumulate(grads, nodes, *b, reduce_broadcast(g, nb));
            }
        }
        Op::Sub(a, b) => {
            let nb = val(*b).len();
            accumulate(grads, nodes, *a, g.to_vec());
            if rg(*b) {
                let r = reduce_broadcast(g, nb).into_iter().map(|x| -x).collect();
                accumulate(grads, nodes, *b, r);
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let nb = tb.len();
            if rg(*a) {
                let da = g.iter().enumerate().map(|(i, &gi)| gi * tb.data()[i % nb]).collect();
                accumulate(grads, nodes, *a, da);
            }
            if rg(*b) {
                let prod: Vec<F> = g.iter().zip(ta.data()).map(|(&gi, &x)| gi * x).collect();
                accumulate(grads, nodes, *b, reduce_broadcast(&prod, nb));
            }
        }
        Op::Scale(a, s) => accumulate(grads, nodes, *a, g.iter().map(|&x| x * *s).collect()),
        Op::MatMul { a, b, trans_b, m, k, n, batch, b_shared } => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (*m, *k, *n);
            if rg(*a) {
                let mut da = vec![F::zero(); ta.len()];
                for bi in 0..*batch {
                    let g_s = &g[bi * m * n..(bi + 1) * m * n];
                    let b_s = if *b_shared { tb.data() } else { &tb.data()[bi * k * n..(bi + 1) * k * n] };
                    let da_s = &mut da[bi * m * k..(bi + 1) * m * k];
                    if *trans_b {
                        gemm_nn(m, n, k, g_s, b_s, da_s);
                    } else {
                        gemm_nt(m, n, k, g_s, b_s, da_s);
                    }
                }
                accumulate(grads, nodes, *a, da);
            }
            if rg(*b) {
                let mut db = vec![F::zero(); tb.len()];
                for bi in 0..*batch {
                    let g_s = &g[bi * m * n..(bi + 1) * m * n];
                    let a_s = &ta.data()[bi * m * k..(bi + 1) * m * k];
                    let db_s = if *b_shared { &mut db[..] } else { &mut db[bi * k * n..(bi + 1) * k * n] };
                    if *trans_b {
                        gemm_tn(m, n, k, g_s, a_s, db_s);
                    } else {
                        gemm_tn(m, k, n, a_s, g_s, db_s);
                    }
                }
                accumulate(grads, nodes, *b, db);
            }
        }
        Op::Transpose { a, rows, cols } => {
            let (rows, cols) = (*rows, *cols);
            let batch = g.len() / (rows * cols).max(1);
            let mut da = vec![F::zero(); g.len()];
            for b in 0..batch {
                let off = b * rows * cols;
                for i in 0..rows {
                    for j in 0..cols {
                        da[off + i * cols + j] = g[off + j * rows + i];
                    }
                }
            }
            accumulate(grads, nodes, *a, da);
        }
        Op::Reshape(a) => accumulate(grads, nodes, *a, g.to_vec()),
        Op::Permute { a, axes } => {
            let out_shape = node.value.shape();
            let mut inverse = vec![0; axes.len()];
            for (i, &ax) in axes.iter().enumerate() {
                inverse[ax] = i;
            }
            accumulate(grads, nodes, *a, permute_data(g, out_shape, &inverse));
        }
        Op::Concat { inputs, axis } => {
            let shape = node.value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let total = shape[*axis];
            let mut offset = 0;
            for &inp in inputs {
                let len = val(inp).shape()[*axis];
                if rg(inp) {
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&g[base..base + len * inner]);
                    }
                    accumulate(grads, nodes, inp, d);
                }
                offset += len;
            }
        }
        Op::Slice { a, axis, start } => {
            let s = val(*a).shape();
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[*axis + 1..].iter().product();
            let len = node.value.shape()[*axis];
            let mut da = vec![F::zero(); val(*a).len()];
            for o in 0..outer {
                let base = (o * s[*axis] + start) * inner;
                da[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(grads, nodes, *a, da);
        }
        Op::Gather { table, ids } => {
            let tt = val(*table);
            let d = tt.shape()[1];
            let mut dt = vec![F::zero(); tt.len()];
            for (r, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    dt[id * d + j] += g[r * d + j];
                }
            }
            accumulate(grads, nodes, *table, dt);
        }
        Op::Softmax(a) => {
            let y = node.value.data();
            let c = node.value.cols().max(1);
            let mut da = vec![F::zero(); y.len()];
            for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(da.chunks_mut(c)) {
                let dot: F = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                for j in 0..c {
                    dr[j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(grads, nodes, *a, da);
        }
        Op::LogSoftmax(a) => {
            let y = node.value.data();
            let c = node.value.cols().max(1);
            let mut da = vec![F::zero(); y.len()];
            for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(da.chunks_mut(c)) {
                let gs: F = gr.iter().copied().sum();
                for j in 0..c {
                    dr[j] = gr[j] - yr[j].exp() * gs;
                }
            }
            accumulate(grads, nodes, *a, da);
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let tg = val(*gamma);
            let d = tg.len();
            let rows = rstd.len();
            if rg(*gamma) {
                let mut dg = vec![F::zero(); d];
                for r in 0..rows {
                    for j in 0..d {
                        dg[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
                accumulate(grads, nodes, *gamma, dg);
            }
            if rg(*beta) {
                let mut db = vec![F::zero(); d];
                for r in 0..rows {
                    for j in 0..d {
                        db[j] += g[r * d + j];
                    }
                }
                accumulate(grads, nodes, *beta, db);
            }
            if rg(*x) {
                let nd = F::c(d as f64);
                let mut dx = vec![F::zero(); g.len()];
                for r in 0..rows {
                    let mut sum_g = F::zero();
                    let mut sum_gx = F::zero();
                    for j in 0..d {
                        let gh = g[r * d + j] * tg.data()[j];
                        sum_g += gh;
                        sum_gx += gh * xhat[r * d + j];
                    }
                    for j in 0..d {
                        let gh = g[r * d + j] * tg.data()[j];
                        dx[r * d + j] = rstd[r] / nd * (nd * gh - sum_g - xhat[r * d + j] * sum_gx);
                    }
                }
                accumulate(grads, nodes, *x, dx);
            }
        }
        Op::Relu(a) => {
            let y = node.value.data();
            let da = g.iter().zip(y).map(|(&gi, &yi)| if yi > F::zero() { gi } else { F::zero() }).collect();
            accumulate(grads, nodes, *a, da);
        }
        Op::Gelu(a) => {
            let x = val(*a).data();
            let da = g.iter().zip(x).map(|(&gi, &xi)| gi * gelu_parts(xi).1).collect();
            accumulate(grads, nodes, *a, da);
        }
        Op::Conv2d { x, w, b, geom } => {
            let (dx, dw, db) = conv::conv2d_backward(geom, val(*x).data(), val(*w).data(), g);
            accumulate(grads, nodes, *x, dx);
            accumulate(grads, nodes, *w, dw);
            accumulate(grads, nodes, *b, db);
        }
        Op::ConvTranspose2d { x, w, b, geom } => {
            let (dx, dw, db) = conv::conv_transpose2d_backward(geom, val(*x).data(), val(*w).data(), g);
            accumulate(grads, nodes, *x, dx);
            accumulate(grads, nodes, *w, dw);
            accumulate(grads, nodes, *b, db);
        }
        Op::Sum(a) => {
            let n = val(*a).len();
            accumulate(grads, nodes, *a, vec![g[0]; n]);
        }
        Op::CrossEntropy { logits, targets, weights, smoothing } => {
            let tl = val(*logits);
            let v = tl.cols();
            let mut dl = vec![F::zero(); tl.len()];
            let uniform = *smoothing / F::c(v as f64);
            for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                if w == F::zero() {
                    continue;
                }
                let row = tl.row(i);
                let lse = log_sum_exp(row);
                let scale = g[0] * w;
                for j in 0..v {
                    let p = (row[j] - lse).exp();
                    let target = if j == t { F::one() - *smoothing } else { F::zero() } + uniform;
                    dl[i * v + j] = scale * (p - target);
                }
            }
            accumulate(grads, nodes, *logits, dl);
        }
        Op::WeightedSqErr { pred, target, row_weights } => {
            let (tp, tt) = (val(*pred), val(*target));
            let d = tp.cols();
            let mut dp = vec![F::zero(); tp.len()];
            let two = F::c(2.0);
            for (r, &w) in row_weights.iter().enumerate() {
                if w == F::zero() {
                    continue;
                }
                for j in 0..d {
                    let i = r * d + j;
                    dp[i] = two * w * (tp.data()[i] - tt.data()[i]) * g[0];
                }
            }
            if rg(*target) {
                accumulate(grads, nodes, *target, dp.iter().map(|&x| -x).collect());
            }
            accumulate(grads, nodes, *pred, dp);
        }
        Op::MaskRows { x, fill, mask } => {
            let d = val(*fill).len();
            let mut dx = g.to_vec();
            let mut df = vec![F::zero(); d];
            for (r, &m) in mask.iter().enumerate() {
                if m {
                    for j in 0..d {
                        df[j] += dx[r * d + j];
                        dx[r * d + j] = F::zero();
                    }
                }
            }
            accumulate(grads, nodes, *x, dx);
            accumulate(grads, nodes, *fill, df);
        }
        Op::Ctc { log_probs, grad } => {
            accumulate(grads, nodes, *log_probs, grad.iter().map(|&x| x * g[0]).collect());
        }
    }
}
