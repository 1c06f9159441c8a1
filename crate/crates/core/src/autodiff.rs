//! Reverse-mode differentiation tape.
//!
//! A [`Tape`] records primitive ops in execution order; that order is a
//! topological order, so [`Tape::backward`] is a single reverse sweep that
//! visits every node once. Parameters enter the tape by reference (no copy)
//! through [`Tape::param`]; frozen parameters and constants never allocate
//! gradient buffers and ops that depend only on them are skipped entirely in
//! the backward sweep.
//!
//! Shape mismatches between op operands are programming errors and panic.
//! Only [`Tape::conv1d`] reports user-facing shape errors, because its
//! length constraint depends on input data.

use alloc::borrow::Cow;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<R> {
    Leaf(Option<ParamId>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    AddBias(Var, Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv1d { x: Var, w: Var, stride: usize },
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, means: Vec<R>, rstds: Vec<R> },
    Softmax(Var),
    LogSoftmax(Var),
    Rows { x: Var, idx: Vec<usize> },
    GroupMean { x: Var, groups: Vec<(usize, usize)> },
    ConcatRows(Vec<Var>),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<R> },
    Rotary { x: Var, heads: usize, rot_dims: usize, offset: usize },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, pairs: Vec<(usize, usize)>, probs: Vec<R> },
    Pick { x: Var, idx: Vec<usize> },
    Shift { x: Var, by: usize },
    LogAddExp(Var, Var),
}

struct Node<'p, R: Real> {
    value: Cow<'p, Tensor<R>>,
    op: Op<R>,
    needs_grad: bool,
}

/// Single-owner record of one forward computation.
pub struct Tape<'p, R: Real = f32> {
    nodes: Vec<Node<'p, R>>,
    param_vars: BTreeMap<ParamId, Var>,
}

impl<R: Real> Default for Tape<'_, R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, R: Real> Tape<'p, R> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), param_vars: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn data(&self, v: Var) -> &[R] {
        self.nodes[v.0].value.data()
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf(None), false)
    }

    pub fn constant_ref(&mut self, value: &'p Tensor<R>) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(value), op: Op::Leaf(None), needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Free leaf that receives a gradient (used by gradient checks).
    pub fn leaf(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf(None), true)
    }

    /// Parameter leaf borrowed from the store. Trainability is read from the
    /// store; repeated calls with the same id return the same handle.
    pub fn param(&mut self, store: &'p ParamStore<R>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            op: Op::Leaf(Some(id)),
            needs_grad: store.is_trainable(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(R, R) -> R, op: Op<R>, name: &str) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "{name}: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let ng = self.ng(&[a, b]);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, s: R) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// `x[.., n] + b[n]`, broadcasting over all leading dimensions.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let n = self.value(b).len();
        let tx = self.value(x);
        assert_eq!(tx.cols(), n, "add_bias: width mismatch");
        let bd = self.data(b);
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, &bb) in row.iter_mut().zip(bd) {
                *v += bb;
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        let ng = self.ng(&[x, b]);
        self.push(out, Op::AddBias(x, b), ng)
    }

    /// `[m×k] · [k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul: {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![R::zero(); m * n];
        kernels::gemm_nn_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let ng = self.ng(&[a, b]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), ng)
    }

    /// `[m×k] · [n×k]ᵀ`; the natural layout for `x · Wᵀ` with `W` as `[out × in]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[1], "matmul_nt: {sa:?} x {sb:?}ᵀ");
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![R::zero(); m * n];
        kernels::gemm_nt_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let ng = self.ng(&[a, b]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNT(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        assert_eq!(s.len(), 2, "transpose: rank-2 only");
        let (r, c) = (s[0], s[1]);
        let d = self.data(a);
        let mut out = vec![R::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape.to_vec()).expect("reshape: element count");
        let ng = self.ng(&[a]);
        self.push(out, Op::Reshape(a), ng)
    }

    /// Valid (unpadded) 1-D convolution of `x[c_in × len]` with `w[c_out × c_in × k]`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        if stride < 1 {
            return Err(Error::InvalidArgument("conv1d stride must be at least 1".into()));
        }
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 3 || sx[0] != sw[1] {
            return Err(Error::InvalidShape(format!("conv1d: input {sx:?} with kernel {sw:?}")));
        }
        let (c_in, len, c_out, k) = (sx[0], sx[1], sw[0], sw[2]);
        if len < k {
            return Err(Error::InvalidShape(format!(
                "conv1d: input length {len} is shorter than kernel {k}"
            )));
        }
        let lout = kernels::conv_out_len(len, k, stride);
        let out = kernels::conv1d_forward(self.data(x), self.data(w), c_in, len, c_out, k, stride);
        let ng = self.ng(&[x, w]);
        Ok(self.push(Tensor::from_parts(vec![c_out, lout], out), Op::Conv1d { x, w, stride }, ng))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::gelu);
        let ng = self.ng(&[a]);
        self.push(out, Op::Gelu(a), ng)
    }

    /// Layer norm over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let d = self.value(gamma).len();
        assert_eq!(self.value(x).cols(), d, "layer_norm: width mismatch");
        let (out, means, rstds) =
            kernels::layer_norm_forward(self.data(x), self.data(gamma), self.data(beta), d, R::lit(eps));
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x, gamma, beta]);
        self.push(Tensor::from_parts(shape, out), Op::LayerNorm { x, gamma, beta, means, rstds }, ng)
    }

    /// Softmax along the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let c = out.cols();
        out.data_mut().chunks_mut(c).for_each(kernels::softmax_in_place);
        let ng = self.ng(&[a]);
        self.push(out, Op::Softmax(a), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let c = out.cols();
        out.data_mut().chunks_mut(c).for_each(kernels::log_softmax_in_place);
        let ng = self.ng(&[a]);
        self.push(out, Op::LogSoftmax(a), ng)
    }

    /// Gathers rows of a 2-D tensor (embedding lookup, frame selection).
    pub fn rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(t.row(i));
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::from_parts(vec![idx.len(), c], out), Op::Rows { x, idx: idx.to_vec() }, ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let idx: Vec<usize> = (start..end).collect();
        self.rows(x, &idx)
    }

    /// Mean of each half-open row range `[start, end)`.
    pub fn group_mean(&mut self, x: Var, groups: &[(usize, usize)]) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut out = vec![R::zero(); groups.len() * c];
        for (g, &(s, e)) in groups.iter().enumerate() {
            assert!(e > s, "group_mean: empty group");
            let inv = R::one() / R::lit((e - s) as f64);
            let orow = &mut out[g * c..(g + 1) * c];
            for r in s..e {
                for (o, &v) in orow.iter_mut().zip(t.row(r)) {
                    *o += v;
                }
            }
            orow.iter_mut().for_each(|o| *o *= inv);
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::from_parts(vec![groups.len(), c], out), Op::GroupMean { x, groups: groups.to_vec() }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), c, "concat_rows: width mismatch");
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let ng = self.ng(parts);
        self.push(Tensor::from_parts(vec![rows, c], out), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Multi-head scaled dot-product attention over `[t × d]` projections.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (sq, sk) = (self.shape(q), self.shape(k));
        assert!(sq[1] == sk[1] && self.shape(v) == sk, "attention: shape mismatch");
        let (tq, tk, d) = (sq[0], sk[0], sq[1]);
        assert!(d % heads == 0, "attention: width not divisible by heads");
        assert!(!causal || tk >= tq, "attention: causal with fewer keys than queries");
        let (out, probs) =
            kernels::attention_forward(self.data(q), self.data(k), self.data(v), tq, tk, d, heads, causal);
        let ng = self.ng(&[q, k, v]);
        self.push(Tensor::from_parts(vec![tq, d], out), Op::Attention { q, k, v, heads, probs }, ng)
    }

    /// Rotary position embedding on `[t × d]` with `heads` heads; row `t` sits
    /// at absolute position `offset + t`.
    pub fn rotary(&mut self, x: Var, heads: usize, rot_dims: usize, offset: usize) -> Var {
        let mut out = self.value(x).clone();
        let (rows, d) = (out.rows(), out.cols());
        let (cos, sin) = kernels::rotary_tables::<R>(rows, offset, rot_dims);
        kernels::rotary_apply(out.data_mut(), rows, d, heads, rot_dims, &cos, &sin, false);
        let ng = self.ng(&[x]);
        self.push(out, Op::Rotary { x, heads, rot_dims, offset }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum::<R>();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().copied().sum::<R>() / R::lit(t.len() as f64);
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Mean over `(row, target)` pairs of `-log softmax(logits[row])[target]`.
    pub fn cross_entropy(&mut self, logits: Var, pairs: &[(usize, usize)]) -> Var {
        assert!(!pairs.is_empty(), "cross_entropy: no targets");
        let t = self.value(logits);
        let c = t.cols();
        let mut probs = Vec::with_capacity(pairs.len() * c);
        let mut total = R::zero();
        for &(r, y) in pairs {
            let mut row = t.row(r).to_vec();
            kernels::log_softmax_in_place(&mut row);
            total -= row[y];
            probs.extend(row.iter().map(|v| v.exp()));
        }
        let loss = total / R::lit(pairs.len() as f64);
        let ng = self.ng(&[logits]);
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, pairs: pairs.to_vec(), probs }, ng)
    }

    /// Flat gather into a 1-D tensor.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Var {
        let d = self.data(x);
        let out = idx.iter().map(|&i| d[i]).collect();
        let ng = self.ng(&[x]);
        self.push(Tensor::from_parts(vec![idx.len()], out), Op::Pick { x, idx: idx.to_vec() }, ng)
    }

    /// 1-D shift right by `by`, filling with `-inf`: `out[i] = x[i - by]`.
    pub fn shift_neg_inf(&mut self, x: Var, by: usize) -> Var {
        let d = self.data(x);
        let n = d.len();
        let mut out = vec![R::neg_infinity(); n];
        for i in by..n {
            out[i] = d[i - by];
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::from_parts(vec![n], out), Op::Shift { x, by }, ng)
    }

    /// Elementwise `ln(exp(a) + exp(b))`, exact for `-inf` operands.
    pub fn log_add_exp(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, log_add_exp, Op::LogAddExp(a, b), "log_add_exp")
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<R>> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward root must be a scalar, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Gradients { leaves: BTreeMap::new(), params: BTreeMap::new() };
        if !self.nodes[root.0].needs_grad {
            return Ok(out);
        }
        grads[root.0] = Some(vec![R::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf(param) = node.op {
                let t = Tensor::from_parts(node.value.shape().to_vec(), g);
                if let Some(id) = param {
                    out.params.insert(id, t.clone());
                }
                out.leaves.insert(i, t);
                continue;
            }
            self.backprop(&node.op, &node.value, &g, &mut grads);
        }
        Ok(out)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<R>>], v: Var) -> Option<&'g mut Vec<R>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![R::zero(); n]))
    }

    fn backprop(&self, op: &Op<R>, out: &Tensor<R>, g: &[R], grads: &mut [Option<Vec<R>>]) {
        match op {
            Op::Leaf(_) => unreachable!(),
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(s) = self.slot(grads, *v) {
                        s.iter_mut().zip(g).for_each(|(s, &g)| *s += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, &g)| *s += g);
                }
                if let Some(s) = self.slot(grads, *b) {
                    s.iter_mut().zip(g).for_each(|(s, &g)| *s -= g);
                }
            }
            Op::Mul(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    let bd = self.data(*b);
                    for ((s, &g), &y) in s.iter_mut().zip(g).zip(bd) {
                        *s += g * y;
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    let ad = self.data(*a);
                    for ((s, &g), &x) in s.iter_mut().zip(g).zip(ad) {
                        *s += g * x;
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, &g)| *s += g * *k);
                }
            }
            Op::AddBias(x, b) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(s, &g)| *s += g);
                }
                if let Some(s) = self.slot(grads, *b) {
                    let n = s.len();
                    for row in g.chunks(n) {
                        s.iter_mut().zip(row).for_each(|(s, &g)| *s += g);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(s) = self.slot(grads, *a) {
                    // dA = G · Bᵀ
                    kernels::gemm_nt_acc(g, self.data(*b), s, m, n, k);
                }
                if let Some(s) = self.slot(grads, *b) {
                    // dB = Aᵀ · G
                    kernels::gemm_tn_acc(self.data(*a), g, s, k, m, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                if let Some(s) = self.slot(grads, *a) {
                    // dA = G · B
                    kernels::gemm_nn_acc(g, self.data(*b), s, m, n, k);
                }
                if let Some(s) = self.slot(grads, *b) {
                    // dB = Gᵀ · A
                    kernels::gemm_tn_acc(g, self.data(*a), s, n, m, k);
                }
            }
            Op::Transpose(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    let sh = self.shape(*a);
                    let (r, c) = (sh[0], sh[1]);
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, &g)| *s += g);
                }
            }
            Op::Conv1d { x, w, stride } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (c_in, len, c_out, k) = (sx[0], sx[1], sw[0], sw[2]);
                let xd = self.data(*x);
                let wd = self.data(*w);
                let mut gx_buf = None;
                let mut gw_buf = None;
                if self.nodes[x.0].needs_grad {
                    gx_buf = Some(vec![R::zero(); xd.len()]);
                }
                if self.nodes[w.0].needs_grad {
                    gw_buf = Some(vec![R::zero(); wd.len()]);
                }
                kernels::conv1d_backward(
                    g,
                    xd,
                    wd,
                    c_in,
                    len,
                    c_out,
                    k,
                    *stride,
                    gx_buf.as_deref_mut(),
                    gw_buf.as_deref_mut(),
                );
                if let (Some(buf), Some(s)) = (gx_buf, self.slot(grads, *x)) {
                    s.iter_mut().zip(buf).for_each(|(s, g)| *s += g);
                }
                if let (Some(buf), Some(s)) = (gw_buf, self.slot(grads, *w)) {
                    s.iter_mut().zip(buf).for_each(|(s, g)| *s += g);
                }
            }
            Op::Gelu(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    let ad = self.data(*a);
                    for ((s, &g), &x) in s.iter_mut().zip(g).zip(ad) {
                        *s += g * kernels::gelu_grad(x);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, means, rstds } => {
                let xd = self.data(*x);
                let gd = self.data(*gamma);
                let d = gd.len();
                let rows = xd.len() / d;
                let dn = R::lit(d as f64);
                if let Some(s) = self.slot(grads, *gamma) {
                    for r in 0..rows {
                        for j in 0..d {
                            let xh = (xd[r * d + j] - means[r]) * rstds[r];
                            s[j] += g[r * d + j] * xh;
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *beta) {
                    for r in 0..rows {
                        for j in 0..d {
                            s[j] += g[r * d + j];
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *x) {
                    for r in 0..rows {
                        let (mean, rstd) = (means[r], rstds[r]);
                        let mut sum_dxh = R::zero();
                        let mut sum_dxh_xh = R::zero();
                        for j in 0..d {
                            let xh = (xd[r * d + j] - mean) * rstd;
                            let dxh = g[r * d + j] * gd[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        }
                        let (m1, m2) = (sum_dxh / dn, sum_dxh_xh / dn);
                        for j in 0..d {
                            let xh = (xd[r * d + j] - mean) * rstd;
                            let dxh = g[r * d + j] * gd[j];
                            s[r * d + j] += rstd * (dxh - m1 - xh * m2);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    let c = out.cols();
                    for ((srow, grow), prow) in s.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                        let dotp: R = grow.iter().zip(prow).map(|(&g, &p)| g * p).sum();
                        for ((s, &g), &p) in srow.iter_mut().zip(grow).zip(prow) {
                            *s += p * (g - dotp);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    let c = out.cols();
                    for ((srow, grow), lrow) in s.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                        let gsum: R = grow.iter().copied().sum();
                        for ((s, &g), &l) in srow.iter_mut().zip(grow).zip(lrow) {
                            *s += g - l.exp() * gsum;
                        }
                    }
                }
            }
            Op::Rows { x, idx } => {
                if let Some(s) = self.slot(grads, *x) {
                    let c = out.cols();
                    for (k, &i) in idx.iter().enumerate() {
                        for (s, &g) in s[i * c..(i + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]) {
                            *s += g;
                        }
                    }
                }
            }
            Op::GroupMean { x, groups } => {
                if let Some(s) = self.slot(grads, *x) {
                    let c = out.cols();
                    for (k, &(st, en)) in groups.iter().enumerate() {
                        let inv = R::one() / R::lit((en - st) as f64);
                        for r in st..en {
                            for (s, &g) in s[r * c..(r + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]) {
                                *s += g * inv;
                            }
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(s) = self.slot(grads, p) {
                        s.iter_mut().zip(&g[off..off + n]).for_each(|(s, &g)| *s += g);
                    }
                    off += n;
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (sq, sk) = (self.shape(*q), self.shape(*k));
                let (tq, tk, d) = (sq[0], sk[0], sq[1]);
                let mut bufs = [*q, *k, *v].map(|var| {
                    self.nodes[var.0].needs_grad.then(|| vec![R::zero(); self.value(var).len()])
                });
                let [bq, bk, bv] = &mut bufs;
                kernels::attention_backward(
                    g,
                    self.data(*q),
                    self.data(*k),
                    self.data(*v),
                    probs,
                    tq,
                    tk,
                    d,
                    *heads,
                    bq.as_deref_mut(),
                    bk.as_deref_mut(),
                    bv.as_deref_mut(),
                );
                for (var, buf) in [*q, *k, *v].into_iter().zip(bufs) {
                    if let (Some(buf), Some(s)) = (buf, self.slot(grads, var)) {
                        s.iter_mut().zip(buf).for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::Rotary { x, heads, rot_dims, offset } => {
                if let Some(s) = self.slot(grads, *x) {
                    let (rows, d) = (out.rows(), out.cols());
                    let (cos, sin) = kernels::rotary_tables::<R>(rows, *offset, *rot_dims);
                    let mut gg = g.to_vec();
                    kernels::rotary_apply(&mut gg, rows, d, *heads, *rot_dims, &cos, &sin, true);
                    s.iter_mut().zip(gg).for_each(|(s, g)| *s += g);
                }
            }
            Op::Sum(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    let k = g[0] / R::lit(s.len() as f64);
                    s.iter_mut().for_each(|s| *s += k);
                }
            }
            Op::CrossEntropy { logits, pairs, probs } => {
                if let Some(s) = self.slot(grads, *logits) {
                    let c = self.value(*logits).cols();
                    let k = g[0] / R::lit(pairs.len() as f64);
                    for (n, &(r, y)) in pairs.iter().enumerate() {
                        let prow = &probs[n * c..(n + 1) * c];
                        let srow = &mut s[r * c..(r + 1) * c];
                        for (j, (s, &p)) in srow.iter_mut().zip(prow).enumerate() {
                            let onehot = if j == y { R::one() } else { R::zero() };
                            *s += k * (p - onehot);
                        }
                    }
                }
            }
            Op::Pick { x, idx } => {
                if let Some(s) = self.slot(grads, *x) {
                    for (&i, &g) in idx.iter().zip(g) {
                        s[i] += g;
                    }
                }
            }
            Op::Shift { x, by } => {
                if let Some(s) = self.slot(grads, *x) {
                    let n = g.len();
                    for i in *by..n {
                        s[i - by] += g[i];
                    }
                }
            }
            Op::LogAddExp(a, b) => {
                let od = out.data();
                for v in [a, b] {
                    if let Some(s) = self.slot(grads, *v) {
                        let vd = self.data(*v);
                        for (((s, &g), &x), &o) in s.iter_mut().zip(g).zip(vd).zip(od) {
                            if o != R::neg_infinity() && x != R::neg_infinity() {
                                *s += g * (x - o).exp();
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn log_add_exp<R: Real>(a: R, b: R) -> R {
    if a == R::neg_infinity() {
        return b;
    }
    if b == R::neg_infinity() {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Gradients produced by one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients<R = f32> {
    leaves: BTreeMap<usize, Tensor<R>>,
    params: BTreeMap<ParamId, Tensor<R>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient of a leaf; zeros for leaves that did not participate.
    pub fn wrt(&self, tape: &Tape<'_, R>, v: Var) -> Tensor<R> {
        self.leaves.get(&v.0).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec()))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<R>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<R>)> {
        self.params.iter().map(|(&k, v)| (k, v))
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor<R>> {
        self.params
    }
}
