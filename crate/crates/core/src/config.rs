//! Model, training and decoding configuration.
//!
//! Every config serialises to `key = value` lines (dotted keys such as
//! `encoder.d_model`) and accepts the same keys back through [`set_key`].
//! Unknown keys are errors.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Display;
use core::str::FromStr;

use crate::error::{Error, Result};

/// Sequence compression used by the bridge network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BridgeMode {
    #[default]
    Downsample,
    CtcRemove,
    CtcAverage,
}

impl BridgeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BridgeMode::Downsample => "downsample",
            BridgeMode::CtcRemove => "ctc_remove",
            BridgeMode::CtcAverage => "ctc_average",
        }
    }

    pub fn uses_ctc(self) -> bool {
        !matches!(self, BridgeMode::Downsample)
    }
}

impl FromStr for BridgeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "downsample" => Ok(BridgeMode::Downsample),
            "ctc_remove" => Ok(BridgeMode::CtcRemove),
            "ctc_average" => Ok(BridgeMode::CtcAverage),
            _ => Err(Error::InvalidConfig(format!("unknown bridge mode `{s}`"))),
        }
    }
}

impl Display for BridgeMode {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub sample_rate: u32,
    pub conv_kernels: Vec<usize>,
    pub conv_strides: Vec<usize>,
    pub conv_channels: Vec<usize>,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub freeze_conv: bool,
    pub freeze_all: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            sample_rate: 16_000,
            conv_kernels: vec![10, 3, 3, 3, 3, 2, 2],
            conv_strides: vec![5, 2, 2, 2, 2, 2, 2],
            conv_channels: vec![32; 7],
            n_layers: 2,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            freeze_conv: true,
            freeze_all: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.conv_kernels.len();
        if n == 0 || self.conv_strides.len() != n || self.conv_channels.len() != n {
            return Err(Error::InvalidConfig(
                "conv kernels, strides and channels must be non-empty and equally long".into(),
            ));
        }
        if self.conv_kernels.iter().chain(&self.conv_strides).chain(&self.conv_channels).any(|&v| v == 0) {
            return Err(Error::InvalidConfig("conv kernels, strides and channels must be positive".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "encoder d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.conv_strides.iter().product()
    }

    /// Frame shift in milliseconds.
    pub fn frame_shift_ms(&self) -> f64 {
        self.total_stride() as f64 * 1000.0 / self.sample_rate as f64
    }

    /// Frames produced for `samples` input samples, or `None` when the input
    /// is shorter than the receptive field.
    pub fn frames_for(&self, samples: usize) -> Option<usize> {
        let mut len = samples;
        for (&k, &s) in self.conv_kernels.iter().zip(&self.conv_strides) {
            if len < k {
                return None;
            }
            len = (len - k) / s + 1;
        }
        Some(len)
    }

    /// Smallest input length yielding one frame.
    pub fn receptive_field(&self) -> usize {
        let mut len = 1;
        for (&k, &s) in self.conv_kernels.iter().zip(&self.conv_strides).rev() {
            len = (len - 1) * s + k;
        }
        len
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// LM vocabulary size including specials; filled from the tokenizer.
    pub vocab_size: usize,
    /// Rotated dimensions per head; 0 means the full head width.
    pub rotary_dims: usize,
    pub max_positions: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            n_layers: 4,
            d_model: 256,
            n_heads: 4,
            d_ff: 1024,
            vocab_size: 0,
            rotary_dims: 0,
            max_positions: 512,
        }
    }
}

impl LmConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn effective_rotary_dims(&self) -> usize {
        if self.rotary_dims == 0 {
            self.head_dim()
        } else {
            self.rotary_dims
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "lm d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        let dh = self.head_dim();
        let rot = self.effective_rotary_dims();
        if dh % 2 != 0 || rot % 2 != 0 || rot > dh {
            return Err(Error::InvalidConfig(format!(
                "rotary needs an even head dim and even rotary dims <= head dim (head {dh}, rotary {rot})"
            )));
        }
        if self.vocab_size == 0 {
            return Err(Error::InvalidConfig("lm vocab_size is unset".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub lm: LmConfig,
    pub bridge: BridgeMode,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.lm.validate()
    }
}

/// Which parts of the model LoRA adapters are attached to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoraTargets {
    pub encoder: bool,
    pub bridge: bool,
    pub lm: bool,
}

impl LoraTargets {
    pub const ALL: LoraTargets = LoraTargets { encoder: true, bridge: false, lm: true };
    pub const LM: LoraTargets = LoraTargets { encoder: false, bridge: false, lm: true };

    pub fn parse(list: &str) -> Result<Self> {
        let mut t = LoraTargets { encoder: false, bridge: false, lm: false };
        for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "encoder" => t.encoder = true,
                "bridge" => t.bridge = true,
                "lm" => t.lm = true,
                _ => return Err(Error::InvalidConfig(format!("unknown LoRA target module `{part}`"))),
            }
        }
        if !(t.encoder || t.bridge || t.lm) {
            return Err(Error::InvalidConfig("empty LoRA target list".into()));
        }
        Ok(t)
    }

    pub fn to_list(self) -> String {
        let mut parts = Vec::new();
        if self.encoder {
            parts.push("encoder");
        }
        if self.bridge {
            parts.push("bridge");
        }
        if self.lm {
            parts.push("lm");
        }
        parts.join(",")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: LoraTargets,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { rank: 32, alpha: 32.0, targets: LoraTargets::ALL }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Objective {
    /// `L_LM`, plus `λ_CTC · L_CTC` when the bridge uses CTC compression.
    #[default]
    Joint,
    /// CTC-only fine-tuning of the encoder and CTC head.
    CtcOnly,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Joint => "joint",
            Objective::CtcOnly => "ctc_only",
        }
    }
}

impl FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Objective::Joint),
            "ctc_only" => Ok(Objective::CtcOnly),
            _ => Err(Error::InvalidConfig(format!("unknown objective `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_ctc: f64,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub freeze_encoder: bool,
    pub freeze_bridge: bool,
    pub freeze_lm: bool,
    pub peft_lm: bool,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub objective: Objective,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_ctc: 0.5,
            peak_lr: 1e-4,
            warmup_fraction: 0.25,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.05,
            epochs: 5,
            batch_size: 8,
            grad_accum: 4,
            grad_clip: 1.0,
            freeze_encoder: false,
            freeze_bridge: false,
            freeze_lm: false,
            peft_lm: false,
            lora_rank: 32,
            lora_alpha: 32.0,
            objective: Objective::Joint,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_ctc < 0.0 || !self.lambda_ctc.is_finite() {
            return Err(Error::InvalidConfig("lambda_ctc must be a finite value >= 0".into()));
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("batch_size, grad_accum and epochs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::InvalidConfig("warmup_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Strategy {
    #[default]
    Greedy,
    Beam,
    TopK,
    Nucleus,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Greedy => "greedy",
            Strategy::Beam => "beam",
            Strategy::TopK => "top_k",
            Strategy::Nucleus => "nucleus",
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Strategy::Greedy),
            "beam" => Ok(Strategy::Beam),
            "top_k" => Ok(Strategy::TopK),
            "nucleus" => Ok(Strategy::Nucleus),
            _ => Err(Error::InvalidConfig(format!("unknown decoding strategy `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub beam_size: usize,
    pub top_k: usize,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub temperature: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: Strategy::Greedy,
            beam_size: 2,
            top_k: 2,
            top_p: 0.1,
            max_new_tokens: 64,
            seed: 0,
            temperature: 1.0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.beam_size < 1 {
            return Err(Error::InvalidConfig("beam size must be at least 1".into()));
        }
        if self.top_k < 1 || self.top_k > vocab {
            return Err(Error::InvalidConfig(format!("top_k must lie in 1..={vocab}")));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidConfig("top_p must lie in (0, 1]".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        Ok(())
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn float(v: f64) -> String {
    // `{:?}` round-trips f64 exactly.
    format!("{v:?}")
}

/// Key/value view of a config section.
pub trait KeyValue {
    fn set_key(&mut self, key: &str, value: &str) -> Result<bool>;
    fn entries(&self) -> Vec<(String, String)>;
}

impl KeyValue for EncoderConfig {
    fn set_key(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "encoder.sample_rate" => self.sample_rate = parse(key, value)?,
            "encoder.conv_kernels" => self.conv_kernels = parse_list(key, value)?,
            "encoder.conv_strides" => self.conv_strides = parse_list(key, value)?,
            "encoder.conv_channels" => self.conv_channels = parse_list(key, value)?,
            "encoder.n_layers" => self.n_layers = parse(key, value)?,
            "encoder.d_model" => self.d_model = parse(key, value)?,
            "encoder.n_heads" => self.n_heads = parse(key, value)?,
            "encoder.d_ff" => self.d_ff = parse(key, value)?,
            "encoder.freeze_conv" => self.freeze_conv = parse(key, value)?,
            "encoder.freeze_all" => self.freeze_all = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("encoder.sample_rate".into(), self.sample_rate.to_string()),
            ("encoder.conv_kernels".into(), list(&self.conv_kernels)),
            ("encoder.conv_strides".into(), list(&self.conv_strides)),
            ("encoder.conv_channels".into(), list(&self.conv_channels)),
            ("encoder.n_layers".into(), self.n_layers.to_string()),
            ("encoder.d_model".into(), self.d_model.to_string()),
            ("encoder.n_heads".into(), self.n_heads.to_string()),
            ("encoder.d_ff".into(), self.d_ff.to_string()),
            ("encoder.freeze_conv".into(), self.freeze_conv.to_string()),
            ("encoder.freeze_all".into(), self.freeze_all.to_string()),
        ]
    }
}

impl KeyValue for LmConfig {
    fn set_key(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lm.n_layers" => self.n_layers = parse(key, value)?,
            "lm.d_model" => self.d_model = parse(key, value)?,
            "lm.n_heads" => self.n_heads = parse(key, value)?,
            "lm.d_ff" => self.d_ff = parse(key, value)?,
            "lm.vocab_size" => self.vocab_size = parse(key, value)?,
            "lm.rotary_dims" => self.rotary_dims = parse(key, value)?,
            "lm.max_positions" => self.max_positions = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("lm.n_layers".into(), self.n_layers.to_string()),
            ("lm.d_model".into(), self.d_model.to_string()),
            ("lm.n_heads".into(), self.n_heads.to_string()),
            ("lm.d_ff".into(), self.d_ff.to_string()),
            ("lm.vocab_size".into(), self.vocab_size.to_string()),
            ("lm.rotary_dims".into(), self.rotary_dims.to_string()),
            ("lm.max_positions".into(), self.max_positions.to_string()),
        ]
    }
}

impl KeyValue for ModelConfig {
    fn set_key(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "bridge.mode" => self.bridge = value.trim().parse()?,
            "model.seed" => self.seed = parse(key, value)?,
            _ => return Ok(self.encoder.set_key(key, value)? || self.lm.set_key(key, value)?),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        let mut e = self.encoder.entries();
        e.extend(self.lm.entries());
        e.push(("bridge.mode".into(), self.bridge.as_str().into()));
        e.push(("model.seed".into(), self.seed.to_string()));
        e
    }
}

impl KeyValue for TrainConfig {
    fn set_key(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "train.lambda_ctc" => self.lambda_ctc = parse(key, value)?,
            "train.peak_lr" => self.peak_lr = parse(key, value)?,
            "train.warmup_fraction" => self.warmup_fraction = parse(key, value)?,
            "train.beta1" => self.beta1 = parse(key, value)?,
            "train.beta2" => self.beta2 = parse(key, value)?,
            "train.adam_eps" => self.adam_eps = parse(key, value)?,
            "train.weight_decay" => self.weight_decay = parse(key, value)?,
            "train.epochs" => self.epochs = parse(key, value)?,
            "train.batch_size" => self.batch_size = parse(key, value)?,
            "train.grad_accum" => self.grad_accum = parse(key, value)?,
            "train.grad_clip" => self.grad_clip = parse(key, value)?,
            "train.freeze_encoder" => self.freeze_encoder = parse(key, value)?,
            "train.freeze_bridge" => self.freeze_bridge = parse(key, value)?,
            "train.freeze_lm" => self.freeze_lm = parse(key, value)?,
            "train.peft_lm" => self.peft_lm = parse(key, value)?,
            "train.lora_rank" => self.lora_rank = parse(key, value)?,
            "train.lora_alpha" => self.lora_alpha = parse(key, value)?,
            "train.objective" => self.objective = value.trim().parse()?,
            "train.seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("train.lambda_ctc".into(), float(self.lambda_ctc)),
            ("train.peak_lr".into(), float(self.peak_lr)),
            ("train.warmup_fraction".into(), float(self.warmup_fraction)),
            ("train.beta1".into(), float(self.beta1)),
            ("train.beta2".into(), float(self.beta2)),
            ("train.adam_eps".into(), float(self.adam_eps)),
            ("train.weight_decay".into(), float(self.weight_decay)),
            ("train.epochs".into(), self.epochs.to_string()),
            ("train.batch_size".into(), self.batch_size.to_string()),
            ("train.grad_accum".into(), self.grad_accum.to_string()),
            ("train.grad_clip".into(), float(self.grad_clip)),
            ("train.freeze_encoder".into(), self.freeze_encoder.to_string()),
            ("train.freeze_bridge".into(), self.freeze_bridge.to_string()),
            ("train.freeze_lm".into(), self.freeze_lm.to_string()),
            ("train.peft_lm".into(), self.peft_lm.to_string()),
            ("train.lora_rank".into(), self.lora_rank.to_string()),
            ("train.lora_alpha".into(), float(self.lora_alpha)),
            ("train.objective".into(), self.objective.as_str().into()),
            ("train.seed".into(), self.seed.to_string()),
        ]
    }
}

impl KeyValue for DecodeConfig {
    fn set_key(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "decode.strategy" => self.strategy = value.trim().parse()?,
            "decode.beam_size" => self.beam_size = parse(key, value)?,
            "decode.top_k" => self.top_k = parse(key, value)?,
            "decode.top_p" => self.top_p = parse(key, value)?,
            "decode.max_new_tokens" => self.max_new_tokens = parse(key, value)?,
            "decode.seed" => self.seed = parse(key, value)?,
            "decode.temperature" => self.temperature = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("decode.strategy".into(), self.strategy.as_str().into()),
            ("decode.beam_size".into(), self.beam_size.to_string()),
            ("decode.top_k".into(), self.top_k.to_string()),
            ("decode.top_p".into(), float(self.top_p)),
            ("decode.max_new_tokens".into(), self.max_new_tokens.to_string()),
            ("decode.seed".into(), self.seed.to_string()),
            ("decode.temperature".into(), float(self.temperature)),
        ]
    }
}

impl KeyValue for LoraConfig {
    fn set_key(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lora.rank" => self.rank = parse(key, value)?,
            "lora.alpha" => self.alpha = parse(key, value)?,
            "lora.targets" => self.targets = LoraTargets::parse(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("lora.rank".into(), self.rank.to_string()),
            ("lora.alpha".into(), float(self.alpha)),
            ("lora.targets".into(), self.targets.to_list()),
        ]
    }
}

/// Renders entries as `key = value` lines.
pub fn render(entries: &[(String, String)]) -> String {
    let mut s = String::new();
    for (k, v) in entries {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(v);
        s.push('\n');
    }
    s
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected `key = value`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
