//! Define-by-run reverse-mode tape.
//!
//! Every op appends a node whose value is computed eagerly. Nodes created
//! from inputs that do not require gradients are recorded but skipped by
//! [`Tape::backward`]. The graph is rebuilt for every step; nothing is cached
//! across tapes.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::model::mask::AttentionMask;
use crate::scalar::{axpy, dot, Scalar};
use crate::tensor::{gemm, MatView, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Public identifiers of the differentiable primitives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    SoftmaxRows,
    LayerNorm,
    Gelu,
    EmbeddingLookup,
    Slice,
    ConcatRows,
    Transpose,
    Scale,
    Sum,
    SliceCols,
    ConcatCols,
    Rope,
    Attention,
    CrossEntropy,
}

pub(crate) enum Op<T> {
    MatMul {
        trans_b: bool,
    },
    Add,
    AddRow,
    Mul,
    Scale(T),
    Softmax,
    LayerNorm {
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu,
    Embedding {
        ids: Vec<usize>,
    },
    SliceRows {
        start: usize,
    },
    SliceCols {
        start: usize,
    },
    ConcatRows,
    ConcatCols,
    Transpose,
    Sum,
    Rope {
        cos: Vec<T>,
        sin: Vec<T>,
        n_heads: usize,
    },
    Attention {
        mask: Rc<AttentionMask>,
        probs: Vec<T>,
        n_heads: usize,
        scale: T,
    },
    CrossEntropy {
        probs: Vec<T>,
        targets: Vec<usize>,
        rows: Vec<usize>,
    },
}

impl<T> Op<T> {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add | Op::AddRow => OpKind::Add,
            Op::Mul => OpKind::Mul,
            Op::Scale(_) => OpKind::Scale,
            Op::Softmax => OpKind::SoftmaxRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu => OpKind::Gelu,
            Op::Embedding { .. } => OpKind::EmbeddingLookup,
            Op::SliceRows { .. } => OpKind::Slice,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatRows => OpKind::ConcatRows,
            Op::ConcatCols => OpKind::ConcatCols,
            Op::Transpose => OpKind::Transpose,
            Op::Sum => OpKind::Sum,
            Op::Rope { .. } => OpKind::Rope,
            Op::Attention { .. } => OpKind::Attention,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

/// Producing operation and its inputs.
pub struct OpRecord<T> {
    pub(crate) op: Op<T>,
    pub inputs: Vec<Var>,
}

impl<T> OpRecord<T> {
    pub fn kind(&self) -> OpKind {
        self.op.kind()
    }
}

pub struct Node<T> {
    pub value: Tensor<T>,
    pub record: Option<OpRecord<T>>,
    pub requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    strict: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            strict: false,
        }
    }

    /// Strict mode rejects non-finite values at every op boundary.
    pub fn strict() -> Self {
        Self {
            strict: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].value.rows()
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].value.cols()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like the node, zeros if never reached.
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::from_vec(&shape, g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if self.strict && !value.is_finite() {
            return Err(Error::NumericFault { op: "leaf".into() });
        }
        Ok(self.push(value, None, requires_grad))
    }

    /// Non-differentiable constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, record: Option<OpRecord<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            record,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: Vec<Var>) -> Result<Var> {
        if self.strict {
            if inputs.iter().any(|&v| !self.nodes[v.0].value.is_finite()) || !value.is_finite() {
                return Err(Error::NumericFault { op: name.into() });
            }
        }
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, Some(OpRecord { op, inputs }), requires_grad))
    }

    fn expect_2d(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, "rank-2 operand", format!("{:?}", s)));
        }
        Ok((s[0], s[1]))
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.expect_2d("matmul", a)?;
        let (br, bc) = self.expect_2d("matmul", b)?;
        let (bk, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != bk {
            return Err(Error::shape(
                "matmul",
                format!("inner dimension {}", k),
                format!(
                    "{:?} x {:?}{}",
                    self.shape(a),
                    self.shape(b),
                    if trans_b { "^T" } else { "" }
                ),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        {
            let av = MatView::new(self.value(a).data(), m, k);
            let bv = MatView::new(self.value(b).data(), br, bc);
            let bv = if trans_b { bv.t() } else { bv };
            gemm(T::one(), &av, &bv, T::zero(), &mut out);
        }
        let value = Tensor::from_vec(&[m, n], out)?;
        self.record("matmul", value, Op::MatMul { trans_b }, vec![a, b])
    }

    /// Element-wise sum; `b` may also be a single row broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa == sb {
            let mut v = self.value(a).clone();
            v.add_assign(self.value(b));
            return self.record("add", v, Op::Add, vec![a, b]);
        }
        let cols = self.cols(a);
        let b_is_row = self.value(b).numel() == cols && (sb.len() == 1 || (sb.len() == 2 && sb[0] == 1));
        if sa.len() == 2 && b_is_row {
            let mut v = self.value(a).clone();
            let row = self.value(b).data().to_vec();
            for r in 0..v.rows() {
                for (x, &y) in v.row_mut(r).iter_mut().zip(&row) {
                    *x += y;
                }
            }
            return self.record("add", v, Op::AddRow, vec![a, b]);
        }
        Err(Error::shape(
            "add",
            format!("{:?} or a broadcast row", sa),
            format!("{:?}", sb),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?}", self.shape(a)),
                format!("{:?}", self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let v = Tensor::from_vec(self.shape(a), data)?;
        self.record("mul", v, Op::Mul, vec![a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.record("scale", v, Op::Scale(s), vec![a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.record("sum", v, Op::Sum, vec![a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.expect_2d("softmax_rows", a)?;
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            softmax_in_place(v.row_mut(r));
        }
        self.record("softmax_rows", v, Op::Softmax, vec![a])
    }

    /// Row-wise normalization followed by the affine `gamma`, `beta` rescale.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = self.expect_2d("layer_norm", x)?;
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(Error::shape(
                "layer_norm",
                format!("gamma/beta of {} elements", cols),
                format!("{:?}/{:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let eps = T::of(LAYER_NORM_EPS);
        let n = T::of(cols as f64);
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let v = Tensor::from_vec(&[rows, cols], out)?;
        self.record("layer_norm", v, Op::LayerNorm { xhat, rstd }, vec![x, gamma, beta])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(gelu_scalar);
        self.record("gelu", v, Op::Gelu, vec![a])
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.expect_2d("embedding_lookup", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::contract(format!(
                "embedding_lookup: token id {} out of vocabulary {}",
                bad, vocab
            )));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let v = Tensor::from_vec(&[ids.len(), d], out)?;
        self.record("embedding_lookup", v, Op::Embedding { ids: ids.to_vec() }, vec![table])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.expect_2d("slice", a)?;
        if start > end || end > rows {
            return Err(Error::shape(
                "slice",
                format!("row range within 0..{}", rows),
                format!("{}..{}", start, end),
            ));
        }
        let data = self.value(a).data()[start * cols..end * cols].to_vec();
        let v = Tensor::from_vec(&[end - start, cols], data)?;
        self.record("slice", v, Op::SliceRows { start }, vec![a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.expect_2d("slice_cols", a)?;
        if start > end || end > cols {
            return Err(Error::shape(
                "slice_cols",
                format!("col range within 0..{}", cols),
                format!("{}..{}", start, end),
            ));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&src.row(r)[start..end]);
        }
        let v = Tensor::from_vec(&[rows, end - start], data)?;
        self.record("slice_cols", v, Op::SliceCols { start }, vec![a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows: no operands"));
        }
        let cols = self.expect_2d("concat_rows", parts[0])?.1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.expect_2d("concat_rows", p)?;
            if c != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("{} columns", cols),
                    format!("{:?}", self.shape(p)),
                ));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::from_vec(&[rows, cols], data)?;
        self.record("concat_rows", v, Op::ConcatRows, parts.to_vec())
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols: no operands"));
        }
        let rows = self.expect_2d("concat_cols", parts[0])?.0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.expect_2d("concat_cols", p)?;
            if r != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("{} rows", rows),
                    format!("{:?}", self.shape(p)),
                ));
            }
            cols += c;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let v = Tensor::from_vec(&[rows, cols], data)?;
        self.record("concat_cols", v, Op::ConcatCols, parts.to_vec())
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.expect_2d("transpose", a)?;
        let v = self.value(a).transpose2();
        self.record("transpose", v, Op::Transpose, vec![a])
    }

    /// Rotary position encoding applied per head (half-split pairing).
    pub fn rope(&mut self, x: Var, positions: &[usize], n_heads: usize, base: f64) -> Result<Var> {
        let (rows, d) = self.expect_2d("rope", x)?;
        if positions.len() != rows {
            return Err(Error::shape(
                "rope",
                format!("{} positions", rows),
                format!("{}", positions.len()),
            ));
        }
        if n_heads == 0 || d % n_heads != 0 || (d / n_heads) % 2 != 0 {
            return Err(Error::shape(
                "rope",
                "even head dimension dividing d",
                format!("d={} heads={}", d, n_heads),
            ));
        }
        let dh = d / n_heads;
        let half = dh / 2;
        let mut cos = Vec::with_capacity(rows * half);
        let mut sin = Vec::with_capacity(rows * half);
        for &p in positions {
            for i in 0..half {
                let freq = base.powf(-2.0 * i as f64 / dh as f64);
                let ang = p as f64 * freq;
                cos.push(T::of(ang.cos()));
                sin.push(T::of(ang.sin()));
            }
        }
        let src = self.value(x);
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = src.row(r);
            for h in 0..n_heads {
                let o = h * dh;
                for i in 0..half {
                    let (c, s) = (cos[r * half + i], sin[r * half + i]);
                    let (a, b) = (row[o + i], row[o + half + i]);
                    out[r * d + o + i] = a * c - b * s;
                    out[r * d + o + half + i] = a * s + b * c;
                }
            }
        }
        let v = Tensor::from_vec(&[rows, d], out)?;
        self.record("rope", v, Op::Rope { cos, sin, n_heads }, vec![x])
    }

    /// Multi-head scaled dot-product attention under a boolean mask.
    ///
    /// `q` is `T x d`; `k` and `v` are `Tk x d` with heads laid out as
    /// contiguous column blocks. Masked keys are skipped entirely, so their
    /// values never influence the result.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: Rc<AttentionMask>, n_heads: usize) -> Result<Var> {
        let (t, d) = self.expect_2d("attention", q)?;
        let (tk, dk) = self.expect_2d("attention", k)?;
        if self.shape(v) != [tk, dk] || dk != d {
            return Err(Error::shape(
                "attention",
                format!("k, v of shape [{}, {}]", tk, d),
                format!("{:?}, {:?}", self.shape(k), self.shape(v)),
            ));
        }
        if mask.rows() != t || mask.cols() != tk {
            return Err(Error::shape(
                "attention",
                format!("mask {}x{}", t, tk),
                format!("{}x{}", mask.rows(), mask.cols()),
            ));
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::shape(
                "attention",
                "heads dividing d",
                format!("d={} heads={}", d, n_heads),
            ));
        }
        let dh = d / n_heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let nnz = mask.nnz();
        let mut probs = vec![T::zero(); n_heads * nnz];
        let mut out = vec![T::zero(); t * d];
        for h in 0..n_heads {
            let o = h * dh;
            let mut off = h * nnz;
            for i in 0..t {
                let allowed = mask.allowed(i);
                let qi = &qv[i * d + o..i * d + o + dh];
                let p = &mut probs[off..off + allowed.len()];
                let mut mx = T::neg_infinity();
                for (pj, &j) in p.iter_mut().zip(allowed) {
                    let s = dot(qi, &kv[j as usize * d + o..j as usize * d + o + dh]) * scale;
                    *pj = s;
                    if s > mx {
                        mx = s;
                    }
                }
                let mut z = T::zero();
                for pj in p.iter_mut() {
                    *pj = (*pj - mx).exp();
                    z += *pj;
                }
                let inv = T::one() / z;
                let oi = &mut out[i * d + o..i * d + o + dh];
                for (pj, &j) in p.iter_mut().zip(allowed) {
                    *pj *= inv;
                    axpy(*pj, &vv[j as usize * d + o..j as usize * d + o + dh], oi);
                }
                off += allowed.len();
            }
        }
        let value = Tensor::from_vec(&[t, d], out)?;
        self.record(
            "attention",
            value,
            Op::Attention {
                mask,
                probs,
                n_heads,
                scale,
            },
            vec![q, k, v],
        )
    }

    /// Mean negative log-likelihood over rows where `mask` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, vocab) = self.expect_2d("cross_entropy", logits)?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets and mask entries", t),
                format!("{} targets, {} mask entries", targets.len(), mask.len()),
            ));
        }
        let rows: Vec<usize> = (0..t).filter(|&i| mask[i]).collect();
        if rows.is_empty() {
            return Err(Error::contract("cross_entropy: loss mask selects no positions"));
        }
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(rows.len() * vocab);
        let mut kept = Vec::with_capacity(rows.len());
        let mut total = T::zero();
        for &r in &rows {
            let y = targets[r];
            if y >= vocab {
                return Err(Error::contract(format!(
                    "cross_entropy: target {} out of vocabulary {}",
                    y, vocab
                )));
            }
            let row = lv.row(r);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&x| (x - mx).exp()).sum();
            let lse = mx + z.ln();
            total += lse - row[y];
            probs.extend(row.iter().map(|&x| (x - lse).exp()));
            kept.push(y);
        }
        let value = Tensor::scalar(total / T::of(rows.len() as f64));
        self.record(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                probs,
                targets: kept,
                rows,
            },
            vec![logits],
        )
    }

    // ----------------------------------------------------------- backward

    /// Clears all gradients, then back-propagates from the scalar `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        for g in &mut self.grads {
            *g = None;
        }
        self.backward_accumulate(root)
    }

    /// Back-propagates from `root` adding into any gradients already present.
    pub fn backward_accumulate(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::contract(format!(
                "backward: root must be a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        if !self.requires_grad(root) {
            return Ok(());
        }
        let previous: Vec<Option<Vec<T>>> = self.grads.iter_mut().map(Option::take).collect();
        self.propagate(root);
        for (slot, prev) in self.grads.iter_mut().zip(previous) {
            match (slot.as_mut(), prev) {
                (Some(g), Some(p)) => axpy(T::one(), &p, g),
                (None, Some(p)) => *slot = Some(p),
                _ => {}
            }
        }
        Ok(())
    }

    fn propagate(&mut self, root: Var) {
        self.grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[idx].take() else {
                continue;
            };
            if let Some(rec) = &self.nodes[idx].record {
                backprop_node(&self.nodes, &mut self.grads, idx, rec, &gout);
            }
            self.grads[idx] = Some(gout);
        }
    }

    /// Zeroes every gradient slot.
    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}

pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let three = T::of(3.0);
    let th = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * k * x * x)
}

fn grad_slot<'g, T: Scalar>(grads: &'g mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Option<&'g mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], idx: usize, rec: &OpRecord<T>, g: &[T]) {
    let ins = &rec.inputs;
    let val = |v: Var| &nodes[v.0].value;
    match &rec.op {
        Op::MatMul { trans_b } => {
            let (a, b) = (ins[0], ins[1]);
            let (m, k) = (val(a).rows(), val(a).cols());
            let (br, bc) = (val(b).rows(), val(b).cols());
            let n = if *trans_b { br } else { bc };
            let gv = MatView::new(g, m, n);
            if let Some(ga) = grad_slot(grads, nodes, a) {
                let bv = MatView::new(val(b).data(), br, bc);
                // no trans: dA = g B^T ; trans_b: dA = g B
                let bv = if *trans_b { bv } else { bv.t() };
                gemm(T::one(), &gv, &bv, T::one(), ga);
            }
            if let Some(gb) = grad_slot(grads, nodes, b) {
                let av = MatView::new(val(a).data(), m, k);
                let gv = MatView::new(g, m, n);
                if *trans_b {
                    // dB = g^T A
                    gemm(T::one(), &gv.t(), &av, T::one(), gb);
                } else {
                    // dB = A^T g
                    gemm(T::one(), &av.t(), &gv, T::one(), gb);
                }
            }
        }
        Op::Add => {
            for &x in ins {
                if let Some(gx) = grad_slot(grads, nodes, x) {
                    for (a, &b) in gx.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
        }
        Op::AddRow => {
            let cols = val(ins[1]).numel();
            if let Some(ga) = grad_slot(grads, nodes, ins[0]) {
                for (a, &b) in ga.iter_mut().zip(g) {
                    *a += b;
                }
            }
            if let Some(gb) = grad_slot(grads, nodes, ins[1]) {
                for row in g.chunks(cols) {
                    for (a, &b) in gb.iter_mut().zip(row) {
                        *a += b;
                    }
                }
            }
        }
        Op::Mul => {
            let (a, b) = (ins[0], ins[1]);
            if let Some(ga) = grad_slot(grads, nodes, a) {
                for ((x, &gi), &bv) in ga.iter_mut().zip(g).zip(val(b).data()) {
                    *x += gi * bv;
                }
            }
            if let Some(gb) = grad_slot(grads, nodes, b) {
                for ((x, &gi), &av) in gb.iter_mut().zip(g).zip(val(a).data()) {
                    *x += gi * av;
                }
            }
        }
        Op::Scale(s) => {
            if let Some(ga) = grad_slot(grads, nodes, ins[0]) {
                for (x, &gi) in ga.iter_mut().zip(g) {
                    *x += gi * *s;
                }
            }
        }
        Op::Sum => {
            if let Some(ga) = grad_slot(grads, nodes, ins[0]) {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }
        }
        Op::Softmax => {
            let y = &nodes[idx].value;
            let cols = y.cols();
            if let Some(ga) = grad_slot(grads, nodes, ins[0]) {
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let s = dot(yr, gr);
                    for c in 0..cols {
                        ga[r * cols + c] += yr[c] * (gr[c] - s);
                    }
                }
            }
        }
        Op::LayerNorm { xhat, rstd } => {
            let (x, gamma, beta) = (ins[0], ins[1], ins[2]);
            let cols = val(gamma).numel();
            let rows = rstd.len();
            let gam = val(gamma).data();
            if let Some(gg) = grad_slot(grads, nodes, gamma) {
                for r in 0..rows {
                    for c in 0..cols {
                        gg[c] += g[r * cols + c] * xhat[r * cols + c];
                    }
                }
            }
            if let Some(gb) = grad_slot(grads, nodes, beta) {
                for r in 0..rows {
                    for c in 0..cols {
                        gb[c] += g[r * cols + c];
                    }
                }
            }
            if let Some(gx) = grad_slot(grads, nodes, x) {
                let n = T::of(cols as f64);
                let mut dxhat = vec![T::zero(); cols];
                for r in 0..rows {
                    let xr = &xhat[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        dxhat[c] = g[r * cols + c] * gam[c];
                    }
                    let m1 = dxhat.iter().copied().sum::<T>() / n;
                    let m2 = dot(&dxhat, xr) / n;
                    for c in 0..cols {
                        gx[r * cols + c] += rstd[r] * (dxhat[c] - m1 - xr[c] * m2);
                    }
                }
            }
        }
        Op::Gelu => {
            if let Some(ga) = grad_slot(grads, nodes, ins[0]) {
                for ((x, &gi), &xv) in ga.iter_mut().zip(g).zip(val(ins[0]).data()) {
                    *x += gi * gelu_grad(xv);
                }
            }
        }
        Op::Embedding { ids } => {
            let d = val(ins[0]).cols();
            if let Some(gt) = grad_slot(grads, nodes, ins[0]) {
                for (r, &id) in ids.iter().enumerate() {
                    axpy(T::one(), &g[r * d..(r + 1) * d], &mut gt[id * d..(id + 1) * d]);
                }
            }
        }
        Op::SliceRows { start } => {
            let cols = val(ins[0]).cols();
            if let Some(ga) = grad_slot(grads, nodes, ins[0]) {
                axpy(T::one(), g, &mut ga[start * cols..start * cols + g.len()]);
            }
        }
        Op::SliceCols { start } => {
            let src_cols = val(ins[0]).cols();
            let w = nodes[idx].value.cols();
            if let Some(ga) = grad_slot(grads, nodes, ins[0]) {
                for (r, gr) in g.chunks(w.max(1)).enumerate().take(nodes[idx].value.rows()) {
                    let o = r * src_cols + start;
                    axpy(T::one(), gr, &mut ga[o..o + w]);
                }
            }
        }
        Op::ConcatRows => {
            let mut off = 0;
            for &p in ins {
                let n = val(p).numel();
                if let Some(gp) = grad_slot(grads, nodes, p) {
                    axpy(T::one(), &g[off..off + n], gp);
                }
                off += n;
            }
        }
        Op::ConcatCols => {
            let total = nodes[idx].value.cols();
            let rows = nodes[idx].value.rows();
            let mut coff = 0;
            for &p in ins {
                let w = val(p).cols();
                if let Some(gp) = grad_slot(grads, nodes, p) {
                    for r in 0..rows {
                        axpy(
                            T::one(),
                            &g[r * total + coff..r * total + coff + w],
                            &mut gp[r * w..(r + 1) * w],
                        );
                    }
                }
                coff += w;
            }
        }
        Op::Transpose => {
            let (r, c) = (val(ins[0]).rows(), val(ins[0]).cols());
            if let Some(ga) = grad_slot(grads, nodes, ins[0]) {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Rope { cos, sin, n_heads } => {
            let (rows, d) = (val(ins[0]).rows(), val(ins[0]).cols());
            let dh = d / n_heads;
            let half = dh / 2;
            if let Some(ga) = grad_slot(grads, nodes, ins[0]) {
                for r in 0..rows {
                    for h in 0..*n_heads {
                        let o = r * d + h * dh;
                        for i in 0..half {
                            let (c, s) = (cos[r * half + i], sin[r * half + i]);
                            let (ga_, gb_) = (g[o + i], g[o + half + i]);
                            ga[o + i] += ga_ * c + gb_ * s;
                            ga[o + half + i] += gb_ * c - ga_ * s;
                        }
                    }
                }
            }
        }
        Op::Attention {
            mask,
            probs,
            n_heads,
            scale,
        } => {
            let (q, k, v) = (ins[0], ins[1], ins[2]);
            let (t, d) = (val(q).rows(), val(q).cols());
            let dh = d / n_heads;
            let nnz = mask.nnz();
            let (qv, kv, vv) = (val(q).data(), val(k).data(), val(v).data());
            let mut dq = nodes[q.0].requires_grad.then(|| vec![T::zero(); qv.len()]);
            let mut dk = nodes[k.0].requires_grad.then(|| vec![T::zero(); kv.len()]);
            let mut dv = nodes[v.0].requires_grad.then(|| vec![T::zero(); vv.len()]);
            let mut ds: Vec<T> = Vec::new();
            for h in 0..*n_heads {
                let o = h * dh;
                let mut off = h * nnz;
                for i in 0..t {
                    let allowed = mask.allowed(i);
                    let p = &probs[off..off + allowed.len()];
                    let gi = &g[i * d + o..i * d + o + dh];
                    ds.clear();
                    let mut acc = T::zero();
                    for (&pj, &j) in p.iter().zip(allowed) {
                        let j = j as usize;
                        let dp = dot(gi, &vv[j * d + o..j * d + o + dh]);
                        ds.push(dp);
                        acc += pj * dp;
                        if let Some(dv) = dv.as_mut() {
                            axpy(pj, gi, &mut dv[j * d + o..j * d + o + dh]);
                        }
                    }
                    for (s, &pj) in ds.iter_mut().zip(p) {
                        *s = pj * (*s - acc) * *scale;
                    }
                    if let Some(dq) = dq.as_mut() {
                        let dqi = &mut dq[i * d + o..i * d + o + dh];
                        for (&s, &j) in ds.iter().zip(allowed) {
                            let j = j as usize;
                            axpy(s, &kv[j * d + o..j * d + o + dh], dqi);
                        }
                    }
                    if let Some(dk) = dk.as_mut() {
                        let qi = &qv[i * d + o..i * d + o + dh];
                        for (&s, &j) in ds.iter().zip(allowed) {
                            let j = j as usize;
                            axpy(s, qi, &mut dk[j * d + o..j * d + o + dh]);
                        }
                    }
                    off += allowed.len();
                }
            }
            for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
                if let (Some(buf), Some(slot)) = (buf, grad_slot(grads, nodes, var)) {
                    axpy(T::one(), &buf, slot);
                }
            }
        }
        Op::CrossEntropy { probs, targets, rows } => {
            let vocab = val(ins[0]).cols();
            let scale = g[0] / T::of(rows.len() as f64);
            if let Some(gl) = grad_slot(grads, nodes, ins[0]) {
                for (n, (&r, &y)) in rows.iter().zip(targets).enumerate() {
                    let p = &probs[n * vocab..(n + 1) * vocab];
                    let dst = &mut gl[r * vocab..(r + 1) * vocab];
                    for c in 0..vocab {
                        dst[c] += scale * p[c];
                    }
                    dst[y] -= scale;
                }
            }
        }
    }
}
