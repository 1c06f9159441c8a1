//! Bridge network: compresses encoder frames and projects them into the LM
//! embedding space as the speech prompt.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::config::BridgeMode;
use crate::error::{Error, Result};
use crate::kernels::conv_out_len;
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

pub const DOWNSAMPLE_KERNEL: usize = 4;
pub const DOWNSAMPLE_STRIDE: usize = 2;

/// Shortest frame sequence the two downsampling convolutions accept.
pub const DOWNSAMPLE_MIN_FRAMES: usize = 10;

/// Prompt length produced by the downsampling bridge for `t` frames.
pub fn downsample_len(t: usize) -> Option<usize> {
    if t < DOWNSAMPLE_KERNEL {
        return None;
    }
    let m1 = conv_out_len(t, DOWNSAMPLE_KERNEL, DOWNSAMPLE_STRIDE);
    if m1 < DOWNSAMPLE_KERNEL {
        return None;
    }
    Some(conv_out_len(m1, DOWNSAMPLE_KERNEL, DOWNSAMPLE_STRIDE))
}

/// Indices of frames whose label is not blank.
pub fn non_blank_frames(labels: &[u32], blank: u32) -> Vec<usize> {
    labels.iter().enumerate().filter(|(_, &l)| l != blank).map(|(i, _)| i).collect()
}

/// Half-open ranges of maximal equal-label runs, blank runs dropped.
pub fn label_runs(labels: &[u32], blank: u32) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..=labels.len() {
        if i == labels.len() || labels[i] != labels[start] {
            if labels[start] != blank {
                runs.push((start, i));
            }
            start = i;
        }
    }
    runs
}

#[derive(Clone, Debug, PartialEq)]
pub struct Downsampler {
    /// `[d × d × 4]` kernels with per-channel biases.
    pub conv1: ParamId,
    pub bias1: ParamId,
    pub conv2: ParamId,
    pub bias2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bridge {
    pub mode: BridgeMode,
    pub downsampler: Option<Downsampler>,
    pub proj: Linear,
}

impl Bridge {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        mode: BridgeMode,
        d_enc: usize,
        d_lm: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let downsampler = (mode == BridgeMode::Downsample).then(|| {
            let std = num_traits::Float::sqrt(2.0 / (d_enc * DOWNSAMPLE_KERNEL) as f64);
            let mut conv = |store: &mut ParamStore<R>, i: usize| {
                let w = store.insert(
                    format!("bridge.conv{i}.kernel"),
                    Tensor::randn(vec![d_enc, d_enc, DOWNSAMPLE_KERNEL], std, rng),
                );
                let b = store.insert(format!("bridge.conv{i}.bias"), Tensor::zeros(vec![d_enc]));
                (w, b)
            };
            let (conv1, bias1) = conv(store, 1);
            let (conv2, bias2) = conv(store, 2);
            Downsampler { conv1, bias1, conv2, bias2 }
        });
        let proj = Linear::new(store, "bridge.proj", d_enc, d_lm, true, rng);
        Bridge { mode, downsampler, proj }
    }

    /// Builds the speech prompt from `[T × d_enc]` features. CTC modes need
    /// the per-frame labels; the selection itself carries no gradient.
    pub fn forward<'p, R: Real>(
        &self,
        tape: &mut Tape<'p, R>,
        store: &'p ParamStore<R>,
        feats: Var,
        labels: Option<&[u32]>,
        blank: u32,
    ) -> Result<Var> {
        let t = tape.shape(feats)[0];
        let compressed = match self.mode {
            BridgeMode::Downsample => {
                let ds = self.downsampler.as_ref().expect("downsample bridge without convolutions");
                if downsample_len(t).is_none() {
                    return Err(Error::InputTooShort { got: t, min: DOWNSAMPLE_MIN_FRAMES });
                }
                let conv = |tape: &mut Tape<'p, R>, x: Var, w: ParamId, b: ParamId| -> Result<Var> {
                    let w = tape.param(store, w);
                    let b = tape.param(store, b);
                    let xc = tape.transpose(x);
                    let y = tape.conv1d(xc, w, DOWNSAMPLE_STRIDE)?;
                    let y = tape.transpose(y);
                    Ok(tape.add_bias(y, b))
                };
                let h = conv(tape, feats, ds.conv1, ds.bias1)?;
                let h = tape.gelu(h);
                conv(tape, h, ds.conv2, ds.bias2)?
            }
            BridgeMode::CtcRemove | BridgeMode::CtcAverage => {
                let labels = labels.ok_or_else(|| Error::InvalidArgument("CTC bridge needs frame labels".into()))?;
                if labels.len() != t {
                    return Err(Error::InvalidShape(format!("{} labels for {t} frames", labels.len())));
                }
                if self.mode == BridgeMode::CtcRemove {
                    tape.rows(feats, &non_blank_frames(labels, blank))
                } else {
                    tape.group_mean(feats, &label_runs(labels, blank))
                }
            }
        };
        Ok(self.proj.forward(tape, store, compressed))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        if let Some(d) = &self.downsampler {
            v.extend([d.conv1, d.bias1, d.conv2, d.bias2]);
        }
        v.extend(self.proj.param_ids());
        v
    }
}
