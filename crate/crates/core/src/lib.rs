//! Numerical core of the Nue end-to-end speech recognizer.
//!
//! The crate is `no_std` (it needs `alloc`) and carries everything that is pure
//! computation: dense tensors with a reverse-mode tape, the character
//! tokenizer, tone synthesis, the convolutional + transformer speech encoder,
//! the CTC branch, the bridge network with its three compression modes, the
//! rotary decoder-only language model, LoRA adapters, autoregressive decoding,
//! the optimizer/trainer logic and CER/RTF scoring. File formats, timing and the
//! command line live in the `nue-asr` companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod bridge;
pub mod config;
pub mod ctc;
pub mod decoding;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
mod kernels;
pub mod lm;
pub mod lora;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod real;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
