//! Speech encoder: strided convolutional waveform encoder followed by a
//! bidirectional pre-norm transformer.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::kernels;
use crate::nn::{FeedForward, LayerNorm, Linear, SelfAttention};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub attn_norm: LayerNorm,
    pub attn: SelfAttention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderBlock {
    fn forward<'p, R: Real>(&self, tape: &mut Tape<'p, R>, store: &'p ParamStore<R>, x: Var) -> Var {
        let h = self.attn_norm.forward(tape, store, x);
        let a = self.attn.forward(tape, store, h, false, None);
        let x = tape.add(x, a);
        let h = self.ff_norm.forward(tape, store, x);
        let f = self.ff.forward(tape, store, h);
        tape.add(x, f)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.attn_norm.param_ids();
        v.extend(self.attn.param_ids());
        v.extend(self.ff_norm.param_ids());
        v.extend(self.ff.param_ids());
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeechEncoder {
    pub cfg: EncoderConfig,
    /// Conv kernels `[C_out × C_in × K]`, one per layer.
    pub convs: Vec<ParamId>,
    pub feature_norm: LayerNorm,
    pub feature_proj: Linear,
    pub blocks: Vec<EncoderBlock>,
    pub final_norm: LayerNorm,
}

impl SpeechEncoder {
    pub fn new<R: Real>(store: &mut ParamStore<R>, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut convs = Vec::with_capacity(cfg.conv_kernels.len());
        let mut c_in = 1;
        for (i, (&k, &c_out)) in cfg.conv_kernels.iter().zip(&cfg.conv_channels).enumerate() {
            let std = num_traits::Float::sqrt(2.0 / (c_in * k) as f64);
            convs.push(store.insert(format!("encoder.conv{i}.kernel"), Tensor::randn(vec![c_out, c_in, k], std, rng)));
            c_in = c_out;
        }
        let feature_norm = LayerNorm::new(store, "encoder.feature_norm", c_in);
        let feature_proj = Linear::new(store, "encoder.feature_proj", c_in, cfg.d_model, true, rng);
        let blocks = (0..cfg.n_layers)
            .map(|i| {
                let name = format!("encoder.block{i}");
                EncoderBlock {
                    attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), cfg.d_model),
                    attn: SelfAttention::new(store, &format!("{name}.attn"), cfg.d_model, cfg.n_heads, rng),
                    ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), cfg.d_model),
                    ff: FeedForward::new(store, &format!("{name}.ff"), cfg.d_model, cfg.d_ff, rng),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(store, "encoder.final_norm", cfg.d_model);
        Ok(SpeechEncoder { cfg: cfg.clone(), convs, feature_norm, feature_proj, blocks, final_norm })
    }

    fn check_len(&self, samples: usize) -> Result<()> {
        let min = self.cfg.receptive_field();
        if samples < min {
            return Err(Error::InputTooShort { got: samples, min });
        }
        Ok(())
    }

    pub fn conv_trainable<R: Real>(&self, store: &ParamStore<R>) -> bool {
        self.convs.iter().any(|&id| store.is_trainable(id))
    }

    /// Conv stack without a tape; returns `[T × C]` frame features.
    pub fn conv_features<R: Real>(&self, store: &ParamStore<R>, samples: &[f32]) -> Result<Tensor<R>> {
        self.check_len(samples.len())?;
        let mut x: Vec<R> = samples.iter().map(|&s| R::lit(s as f64)).collect();
        let (mut c_in, mut len) = (1, samples.len());
        for (&id, &stride) in self.convs.iter().zip(&self.cfg.conv_strides) {
            let w = store.get(id);
            let (c_out, k) = (w.shape()[0], w.shape()[2]);
            let mut y = kernels::conv1d_forward(&x, w.data(), c_in, len, c_out, k, stride);
            y.iter_mut().for_each(|v| *v = kernels::gelu(*v));
            len = kernels::conv_out_len(len, k, stride);
            c_in = c_out;
            x = y;
        }
        let mut t = vec![R::zero(); x.len()];
        for c in 0..c_in {
            for i in 0..len {
                t[i * c_in + c] = x[c * len + i];
            }
        }
        Ok(Tensor::from_parts(vec![len, c_in], t))
    }

    /// Conv stack on the tape; falls back to a constant when every kernel is
    /// frozen so no backward work is recorded.
    pub fn wave_encode<'p, R: Real>(
        &self,
        tape: &mut Tape<'p, R>,
        store: &'p ParamStore<R>,
        samples: &[f32],
    ) -> Result<Var> {
        if !self.conv_trainable(store) {
            let f = self.conv_features(store, samples)?;
            return Ok(tape.constant(f));
        }
        self.check_len(samples.len())?;
        let input = Tensor::from_parts(vec![1, samples.len()], samples.iter().map(|&s| R::lit(s as f64)).collect());
        let mut x = tape.constant(input);
        for (&id, &stride) in self.convs.iter().zip(&self.cfg.conv_strides) {
            let w = tape.param(store, id);
            x = tape.conv1d(x, w, stride)?;
            x = tape.gelu(x);
        }
        Ok(tape.transpose(x))
    }

    /// Contextual encoding of `[T × C]` conv features into `[T × d_model]`.
    pub fn contextualize<'p, R: Real>(&self, tape: &mut Tape<'p, R>, store: &'p ParamStore<R>, feats: Var) -> Var {
        let t = tape.shape(feats)[0];
        let h = self.feature_norm.forward(tape, store, feats);
        let h = self.feature_proj.forward(tape, store, h);
        let pos = tape.constant(sinusoidal_positions(t, self.cfg.d_model));
        let mut x = tape.add(h, pos);
        for b in &self.blocks {
            x = b.forward(tape, store, x);
        }
        self.final_norm.forward(tape, store, x)
    }

    pub fn conv_ids(&self) -> Vec<ParamId> {
        self.convs.clone()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.convs.clone();
        v.extend(self.feature_norm.param_ids());
        v.extend(self.feature_proj.param_ids());
        for b in &self.blocks {
            v.extend(b.param_ids());
        }
        v.extend(self.final_norm.param_ids());
        v
    }
}

/// Fixed sinusoidal table: even columns `sin(t / 10000^(2i/d))`, odd columns
/// the matching cosine.
pub fn sinusoidal_positions<R: Real>(rows: usize, d: usize) -> Tensor<R> {
    let mut out = Vec::with_capacity(rows * d);
    for t in 0..rows {
        for j in 0..d {
            let i = (j / 2) as f64;
            let angle = t as f64 / libm::pow(10_000.0, 2.0 * i / d as f64);
            out.push(R::lit(if j % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) }));
        }
    }
    Tensor::from_parts(vec![rows, d], out)
}
