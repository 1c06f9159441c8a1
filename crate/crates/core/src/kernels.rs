// Raw slice kernels shared by the tape ops and the cached inference path.
// All matrices are row-major; every `*_acc` kernel adds into `out`.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

/// out[m×n] += a[m×k] · b[k×n]
pub fn gemm_nn_acc<R: Real>(a: &[R], b: &[R], out: &mut [R], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == R::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
pub fn gemm_nt_acc<R: Real>(a: &[R], b: &[R], out: &mut [R], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(arow, brow);
        }
    }
}

/// out[m×n] += a[k×m]ᵀ · b[k×n]
pub fn gemm_tn_acc<R: Real>(a: &[R], b: &[R], out: &mut [R], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == R::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    // Four independent partial sums; fixed order keeps results deterministic.
    let mut acc = [R::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn conv_out_len(len: usize, kernel: usize, stride: usize) -> usize {
    (len - kernel) / stride + 1
}

/// Valid 1-D convolution: input [c_in × len], kernel [c_out × c_in × k].
pub fn conv1d_forward<R: Real>(
    input: &[R],
    kernel: &[R],
    c_in: usize,
    len: usize,
    c_out: usize,
    k: usize,
    stride: usize,
) -> Vec<R> {
    let lout = conv_out_len(len, k, stride);
    let mut out = vec![R::zero(); c_out * lout];
    for co in 0..c_out {
        let orow = &mut out[co * lout..(co + 1) * lout];
        for ci in 0..c_in {
            let xrow = &input[ci * len..(ci + 1) * len];
            for kk in 0..k {
                let w = kernel[(co * c_in + ci) * k + kk];
                if stride == 1 {
                    for (o, &x) in orow.iter_mut().zip(&xrow[kk..kk + lout]) {
                        *o += w * x;
                    }
                } else {
                    for (t, o) in orow.iter_mut().enumerate() {
                        *o += w * xrow[t * stride + kk];
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward<R: Real>(
    grad_out: &[R],
    input: &[R],
    kernel: &[R],
    c_in: usize,
    len: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    grad_input: Option<&mut [R]>,
    grad_kernel: Option<&mut [R]>,
) {
    let lout = conv_out_len(len, k, stride);
    if let Some(gk) = grad_kernel {
        for co in 0..c_out {
            let grow = &grad_out[co * lout..(co + 1) * lout];
            for ci in 0..c_in {
                let xrow = &input[ci * len..(ci + 1) * len];
                for kk in 0..k {
                    let mut s = R::zero();
                    for (t, &g) in grow.iter().enumerate() {
                        s += g * xrow[t * stride + kk];
                    }
                    gk[(co * c_in + ci) * k + kk] += s;
                }
            }
        }
    }
    if let Some(gi) = grad_input {
        for co in 0..c_out {
            let grow = &grad_out[co * lout..(co + 1) * lout];
            for ci in 0..c_in {
                let girow = &mut gi[ci * len..(ci + 1) * len];
                for kk in 0..k {
                    let w = kernel[(co * c_in + ci) * k + kk];
                    for (t, &g) in grow.iter().enumerate() {
                        girow[t * stride + kk] += w * g;
                    }
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh-approximated GELU.
#[inline]
pub fn gelu<R: Real>(x: R) -> R {
    let c = R::lit(GELU_C);
    let a = R::lit(GELU_A);
    let half = R::lit(0.5);
    half * x * (R::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<R: Real>(x: R) -> R {
    let c = R::lit(GELU_C);
    let a = R::lit(GELU_A);
    let half = R::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (R::one() + t) + half * x * (R::one() - t * t) * c * (R::one() + R::lit(3.0) * a * x * x)
}

/// Layer norm over rows of width `d`; returns (output, per-row mean, per-row 1/std).
pub fn layer_norm_forward<R: Real>(
    x: &[R],
    gamma: &[R],
    beta: &[R],
    d: usize,
    eps: R,
) -> (Vec<R>, Vec<R>, Vec<R>) {
    let rows = x.len() / d;
    let mut out = vec![R::zero(); x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    let dn = R::lit(d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<R>() / dn;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / dn;
        let rstd = R::one() / (var + eps).sqrt();
        let orow = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            orow[j] = (xr[j] - mean) * rstd * gamma[j] + beta[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (out, means, rstds)
}

pub fn softmax_in_place<R: Real>(row: &mut [R]) {
    let max = row.iter().copied().fold(R::neg_infinity(), R::max);
    if max == R::neg_infinity() {
        // Fully masked row; keep a defined (uniform) distribution.
        let u = R::one() / R::lit(row.len() as f64);
        row.iter_mut().for_each(|v| *v = u);
        return;
    }
    let mut sum = R::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn log_softmax_in_place<R: Real>(row: &mut [R]) {
    let max = row.iter().copied().fold(R::neg_infinity(), R::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<R>().ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Multi-head scaled dot-product attention over `[t × d]` projections.
///
/// `q` has `tq` rows, `k`/`v` have `tk` rows. With `causal`, query `i`
/// attends to keys `j <= i + (tk - tq)`. Returns the output and the
/// attention probabilities laid out as `[heads, tq, tk]`.
#[allow(clippy::too_many_arguments)]
pub fn attention_forward<R: Real>(
    q: &[R],
    k: &[R],
    v: &[R],
    tq: usize,
    tk: usize,
    d: usize,
    heads: usize,
    causal: bool,
) -> (Vec<R>, Vec<R>) {
    let dh = d / heads;
    let scale = R::one() / R::lit(dh as f64).sqrt();
    debug_assert!(!causal || tk >= tq, "causal attention needs at least as many keys as queries");
    let shift = tk.saturating_sub(tq);
    let mut out = vec![R::zero(); tq * d];
    let mut probs = vec![R::zero(); heads * tq * tk];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..tq {
            let qi = &q[i * d + off..i * d + off + dh];
            let prow = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
            let limit = if causal { (i + shift + 1).min(tk) } else { tk };
            for j in 0..tk {
                prow[j] = if j < limit {
                    dot(qi, &k[j * d + off..j * d + off + dh]) * scale
                } else {
                    R::neg_infinity()
                };
            }
            softmax_in_place(prow);
            let orow = &mut out[i * d + off..i * d + off + dh];
            for j in 0..limit {
                let p = prow[j];
                let vj = &v[j * d + off..j * d + off + dh];
                for (o, &vv) in orow.iter_mut().zip(vj) {
                    *o += p * vv;
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward<R: Real>(
    grad_out: &[R],
    q: &[R],
    k: &[R],
    v: &[R],
    probs: &[R],
    tq: usize,
    tk: usize,
    d: usize,
    heads: usize,
    gq: Option<&mut [R]>,
    gk: Option<&mut [R]>,
    gv: Option<&mut [R]>,
) {
    let dh = d / heads;
    let scale = R::one() / R::lit(dh as f64).sqrt();
    // dS = P ⊙ (dP − rowsum(dP ⊙ P)), dP = dO · Vᵀ
    let mut ds = vec![R::zero(); heads * tq * tk];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..tq {
            let go = &grad_out[i * d + off..i * d + off + dh];
            let prow = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
            let srow = &mut ds[(h * tq + i) * tk..(h * tq + i + 1) * tk];
            let mut acc = R::zero();
            for j in 0..tk {
                if prow[j] == R::zero() {
                    continue;
                }
                let dp = dot(go, &v[j * d + off..j * d + off + dh]);
                srow[j] = dp;
                acc += dp * prow[j];
            }
            for j in 0..tk {
                srow[j] = prow[j] * (srow[j] - acc);
            }
        }
    }
    if let Some(gv) = gv {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tq {
                let go = &grad_out[i * d + off..i * d + off + dh];
                let prow = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                for j in 0..tk {
                    let p = prow[j];
                    if p == R::zero() {
                        continue;
                    }
                    let gvj = &mut gv[j * d + off..j * d + off + dh];
                    for (g, &o) in gvj.iter_mut().zip(go) {
                        *g += p * o;
                    }
                }
            }
        }
    }
    if let Some(gq) = gq {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tq {
                let srow = &ds[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                let gqi = &mut gq[i * d + off..i * d + off + dh];
                for j in 0..tk {
                    let s = srow[j] * scale;
                    if s == R::zero() {
                        continue;
                    }
                    for (g, &kk) in gqi.iter_mut().zip(&k[j * d + off..j * d + off + dh]) {
                        *g += s * kk;
                    }
                }
            }
        }
    }
    if let Some(gk) = gk {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tq {
                let srow = &ds[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                let qi = &q[i * d + off..i * d + off + dh];
                for j in 0..tk {
                    let s = srow[j] * scale;
                    if s == R::zero() {
                        continue;
                    }
                    for (g, &qq) in gk[j * d + off..j * d + off + dh].iter_mut().zip(qi) {
                        *g += s * qq;
                    }
                }
            }
        }
    }
}

/// Rotary tables: (cos, sin) per (row, pair) for `rows` consecutive positions
/// starting at `offset`. Angles are formed in f64.
pub fn rotary_tables<R: Real>(rows: usize, offset: usize, rot_dims: usize) -> (Vec<R>, Vec<R>) {
    let pairs = rot_dims / 2;
    let mut cos = Vec::with_capacity(rows * pairs);
    let mut sin = Vec::with_capacity(rows * pairs);
    for t in 0..rows {
        let pos = (offset + t) as f64;
        for i in 0..pairs {
            let theta = libm_pow(10000.0, -2.0 * i as f64 / rot_dims as f64);
            let angle = pos * theta;
            cos.push(R::lit(num_traits::Float::cos(angle)));
            sin.push(R::lit(num_traits::Float::sin(angle)));
        }
    }
    (cos, sin)
}

fn libm_pow(base: f64, exp: f64) -> f64 {
    num_traits::Float::powf(base, exp)
}

/// Rotates pairs `(2i, 2i+1)` of the first `rot_dims` dimensions of every head.
/// `inverse` applies the transpose rotation (used for the backward pass).
#[allow(clippy::too_many_arguments)]
pub fn rotary_apply<R: Real>(
    x: &mut [R],
    rows: usize,
    d: usize,
    heads: usize,
    rot_dims: usize,
    cos: &[R],
    sin: &[R],
    inverse: bool,
) {
    let dh = d / heads;
    let pairs = rot_dims / 2;
    for t in 0..rows {
        for h in 0..heads {
            let base = t * d + h * dh;
            for i in 0..pairs {
                let c = cos[t * pairs + i];
                let s = if inverse { -sin[t * pairs + i] } else { sin[t * pairs + i] };
                let x0 = x[base + 2 * i];
                let x1 = x[base + 2 * i + 1];
                x[base + 2 * i] = x0 * c - x1 * s;
                x[base + 2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
}
