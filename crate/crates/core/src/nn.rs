//! Parameterised building blocks shared by the encoder, bridge and LM.
//!
//! Each block holds [`ParamId`]s into a [`ParamStore`] and offers two forward
//! paths: one recording on a [`Tape`], and a plain-slice path used by the
//! cached inference loop.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Low-rank delta `scale · B · A` attached to a [`Linear`].
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    /// `[rank × in]`
    pub a: ParamId,
    /// `[out × rank]`
    pub b: ParamId,
    pub rank: usize,
    pub scale: f64,
}

/// Affine map `y = x · Wᵀ + b` with `W` stored as `[out × in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
    pub lora: Option<LoraAdapter>,
}

impl Linear {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let std = 1.0 / libm_sqrt(d_in as f64);
        Self::with_std(store, name, d_in, d_out, bias, std, rng)
    }

    pub fn with_std<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.insert(format!("{name}.weight"), Tensor::randn(vec![d_out, d_in], std, rng));
        let bias = bias.then(|| store.insert(format!("{name}.bias"), Tensor::zeros(vec![d_out])));
        Linear { name: name.into(), weight, bias, d_in, d_out, lora: None }
    }

    pub fn forward<'p, R: Real>(&self, tape: &mut Tape<'p, R>, store: &'p ParamStore<R>, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let mut y = tape.matmul_nt(x, w);
        if let Some(b) = self.bias {
            let b = tape.param(store, b);
            y = tape.add_bias(y, b);
        }
        if let Some(l) = &self.lora {
            let a = tape.param(store, l.a);
            let b = tape.param(store, l.b);
            let ax = tape.matmul_nt(x, a);
            let bax = tape.matmul_nt(ax, b);
            let delta = tape.scale(bax, R::lit(l.scale));
            y = tape.add(y, delta);
        }
        y
    }

    /// Plain forward over `rows` rows of width `d_in`.
    pub fn apply<R: Real>(&self, store: &ParamStore<R>, x: &[R], rows: usize) -> Vec<R> {
        let mut out = vec![R::zero(); rows * self.d_out];
        kernels::gemm_nt_acc(x, store.get(self.weight).data(), &mut out, rows, self.d_in, self.d_out);
        if let Some(b) = self.bias {
            let bd = store.get(b).data();
            for row in out.chunks_mut(self.d_out) {
                row.iter_mut().zip(bd).for_each(|(o, &b)| *o += b);
            }
        }
        if let Some(l) = &self.lora {
            let mut ax = vec![R::zero(); rows * l.rank];
            kernels::gemm_nt_acc(x, store.get(l.a).data(), &mut ax, rows, self.d_in, l.rank);
            let mut bax = vec![R::zero(); rows * self.d_out];
            kernels::gemm_nt_acc(&ax, store.get(l.b).data(), &mut bax, rows, l.rank, self.d_out);
            let s = R::lit(l.scale);
            out.iter_mut().zip(bax).for_each(|(o, d)| *o += s * d);
        }
        out
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.weight];
        v.extend(self.bias);
        if let Some(l) = &self.lora {
            v.extend([l.a, l.b]);
        }
        v
    }
}

fn libm_sqrt(x: f64) -> f64 {
    num_traits::Float::sqrt(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, dim: usize) -> Self {
        let gamma = store.insert(format!("{name}.gamma"), Tensor::full(vec![dim], R::one()));
        let beta = store.insert(format!("{name}.beta"), Tensor::zeros(vec![dim]));
        LayerNorm { gamma, beta, dim }
    }

    pub fn forward<'p, R: Real>(&self, tape: &mut Tape<'p, R>, store: &'p ParamStore<R>, x: Var) -> Var {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }

    pub fn apply<R: Real>(&self, store: &ParamStore<R>, x: &[R]) -> Vec<R> {
        kernels::layer_norm_forward(
            x,
            store.get(self.gamma).data(),
            store.get(self.beta).data(),
            self.dim,
            R::lit(LN_EPS),
        )
        .0
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Multi-head self-attention with Q/K/V/O projections.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

/// Which attention projection a LoRA target names.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Projection {
    Q,
    K,
    V,
    O,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Q, Projection::K, Projection::V, Projection::O];
}

/// Rotary settings for attention in the decoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotarySpec {
    pub rot_dims: usize,
    pub offset: usize,
}

impl SelfAttention {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let q = Linear::new(store, &format!("{name}.q"), d, d, true, rng);
        let k = Linear::new(store, &format!("{name}.k"), d, d, true, rng);
        let v = Linear::new(store, &format!("{name}.v"), d, d, true, rng);
        // Small output projection so each residual branch starts near identity.
        let o = Linear::with_std(store, &format!("{name}.o"), d, d, true, 0.02, rng);
        SelfAttention { q, k, v, o, heads }
    }

    pub fn projection(&self, p: Projection) -> &Linear {
        match p {
            Projection::Q => &self.q,
            Projection::K => &self.k,
            Projection::V => &self.v,
            Projection::O => &self.o,
        }
    }

    pub fn projection_mut(&mut self, p: Projection) -> &mut Linear {
        match p {
            Projection::Q => &mut self.q,
            Projection::K => &mut self.k,
            Projection::V => &mut self.v,
            Projection::O => &mut self.o,
        }
    }

    pub fn forward<'p, R: Real>(
        &self,
        tape: &mut Tape<'p, R>,
        store: &'p ParamStore<R>,
        x: Var,
        causal: bool,
        rotary: Option<RotarySpec>,
    ) -> Var {
        let mut q = self.q.forward(tape, store, x);
        let mut k = self.k.forward(tape, store, x);
        let v = self.v.forward(tape, store, x);
        if let Some(r) = rotary {
            q = tape.rotary(q, self.heads, r.rot_dims, r.offset);
            k = tape.rotary(k, self.heads, r.rot_dims, r.offset);
        }
        let a = tape.attention(q, k, v, self.heads, causal);
        self.o.forward(tape, store, a)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.q.param_ids();
        v.extend(self.k.param_ids());
        v.extend(self.v.param_ids());
        v.extend(self.o.param_ids());
        v
    }
}

/// Two-layer GELU feed-forward block.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, d: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        let up = Linear::new(store, &format!("{name}.up"), d, d_ff, true, rng);
        let down = Linear::with_std(store, &format!("{name}.down"), d_ff, d, true, 0.02, rng);
        FeedForward { up, down }
    }

    pub fn forward<'p, R: Real>(&self, tape: &mut Tape<'p, R>, store: &'p ParamStore<R>, x: Var) -> Var {
        let h = self.up.forward(tape, store, x);
        let h = tape.gelu(h);
        self.down.forward(tape, store, h)
    }

    pub fn apply<R: Real>(&self, store: &ParamStore<R>, x: &[R], rows: usize) -> Vec<R> {
        let mut h = self.up.apply(store, x, rows);
        h.iter_mut().for_each(|v| *v = kernels::gelu(*v));
        self.down.apply(store, &h, rows)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.up.param_ids();
        v.extend(self.down.param_ids());
        v
    }
}
