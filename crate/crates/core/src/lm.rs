//! Decoder-only causal language model with rotary positions and parallel
//! attention/feed-forward residuals.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::config::LmConfig;
use crate::error::{Error, Result};
use crate::kernels;
use crate::nn::{FeedForward, LayerNorm, Linear, RotarySpec, SelfAttention};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::tokenizer::{BOS, EOS};

/// Token layout of one LM input: `prompt_len` speech vectors, then BOS and
/// the text tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptedInput {
    pub prompt_len: usize,
    /// `[BOS, y_1, …, y_I]`
    pub tokens: Vec<u32>,
    /// Next-token targets per position; `None` where the loss mask is false.
    pub targets: Vec<Option<u32>>,
}

impl PromptedInput {
    /// Training layout: targets `y_1 … y_I, EOS` sit on positions `M … M+I`.
    pub fn for_training(prompt_len: usize, text: &[u32]) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::DegenerateInput(if prompt_len == 0 {
                "empty speech prompt and empty text".into()
            } else {
                "training text is empty".into()
            }));
        }
        let mut tokens = Vec::with_capacity(text.len() + 1);
        tokens.push(BOS);
        tokens.extend_from_slice(text);
        let mut targets = vec![None; prompt_len];
        targets.extend(text.iter().map(|&y| Some(y)));
        targets.push(Some(EOS));
        Ok(PromptedInput { prompt_len, tokens, targets })
    }

    /// Inference layout: the prompt, BOS and an optional forced prefix.
    pub fn for_inference(prompt_len: usize, prefix: &[u32]) -> Self {
        let mut tokens = vec![BOS];
        tokens.extend_from_slice(prefix);
        let targets = vec![None; prompt_len + tokens.len()];
        PromptedInput { prompt_len, tokens, targets }
    }

    pub fn len(&self) -> usize {
        self.prompt_len + self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn loss_mask(&self) -> Vec<bool> {
        self.targets.iter().map(Option::is_some).collect()
    }

    /// `(position, target)` pairs over the masked positions.
    pub fn target_pairs(&self) -> Vec<(usize, usize)> {
        self.targets.iter().enumerate().filter_map(|(i, t)| t.map(|t| (i, t as usize))).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmBlock {
    pub attn_norm: LayerNorm,
    pub ff_norm: LayerNorm,
    pub attn: SelfAttention,
    pub ff: FeedForward,
}

impl LmBlock {
    fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.attn_norm.param_ids();
        v.extend(self.ff_norm.param_ids());
        v.extend(self.attn.param_ids());
        v.extend(self.ff.param_ids());
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLm {
    pub cfg: LmConfig,
    /// `[V × d]` token embedding table.
    pub embed: ParamId,
    pub blocks: Vec<LmBlock>,
    pub final_norm: LayerNorm,
    pub head: Linear,
}

impl DecoderLm {
    pub fn new<R: Real>(store: &mut ParamStore<R>, cfg: &LmConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let embed = store.insert("lm.embed", Tensor::randn(vec![cfg.vocab_size, d], 0.02, rng));
        let blocks = (0..cfg.n_layers)
            .map(|i| {
                let name = format!("lm.block{i}");
                LmBlock {
                    attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d),
                    ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), d),
                    attn: SelfAttention::new(store, &format!("{name}.attn"), d, cfg.n_heads, rng),
                    ff: FeedForward::new(store, &format!("{name}.ff"), d, cfg.d_ff, rng),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(store, "lm.final_norm", d);
        let head = Linear::new(store, "lm.head", d, cfg.vocab_size, false, rng);
        Ok(DecoderLm { cfg: cfg.clone(), embed, blocks, final_norm, head })
    }

    fn rotary(&self, offset: usize) -> RotarySpec {
        RotarySpec { rot_dims: self.cfg.effective_rotary_dims(), offset }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len == 0 {
            return Err(Error::InvalidInput("LM input is empty".into()));
        }
        if len > self.cfg.max_positions {
            return Err(Error::ContextOverflow { len, max: self.cfg.max_positions });
        }
        Ok(())
    }

    /// Input sequence `[prompt; emb(BOS); emb(y)…]` on the tape.
    pub fn embed_input<'p, R: Real>(
        &self,
        tape: &mut Tape<'p, R>,
        store: &'p ParamStore<R>,
        prompt: Option<Var>,
        input: &PromptedInput,
    ) -> Var {
        let table = tape.param(store, self.embed);
        let idx: Vec<usize> = input.tokens.iter().map(|&t| t as usize).collect();
        let text = tape.rows(table, &idx);
        match prompt {
            Some(p) if tape.shape(p)[0] > 0 => tape.concat_rows(&[p, text]),
            _ => text,
        }
    }

    /// Logits `[L × V]`; row `t` scores the token at position `t + 1`.
    pub fn forward<'p, R: Real>(&self, tape: &mut Tape<'p, R>, store: &'p ParamStore<R>, x: Var) -> Result<Var> {
        self.check_len(tape.shape(x)[0])?;
        let mut x = x;
        for b in &self.blocks {
            let h = b.attn_norm.forward(tape, store, x);
            let a = b.attn.forward(tape, store, h, true, Some(self.rotary(0)));
            let h = b.ff_norm.forward(tape, store, x);
            let f = b.ff.forward(tape, store, h);
            let r = tape.add(a, f);
            x = tape.add(x, r);
        }
        let h = self.final_norm.forward(tape, store, x);
        Ok(self.head.forward(tape, store, h))
    }

    /// Mean next-token cross-entropy over the masked positions.
    pub fn loss<R: Real>(&self, tape: &mut Tape<'_, R>, logits: Var, input: &PromptedInput) -> Result<Var> {
        let pairs = input.target_pairs();
        if pairs.is_empty() {
            return Err(Error::DegenerateInput("no target positions in LM input".into()));
        }
        Ok(tape.cross_entropy(logits, &pairs))
    }

    /// Plain embedding lookup for one token.
    pub fn token_embedding<R: Real>(&self, store: &ParamStore<R>, token: u32) -> Vec<R> {
        store.get(self.embed).row(token as usize).to_vec()
    }

    /// Starts a cached decoding session over `rows` input vectors of width
    /// `d_model` and returns the logits for the position after them.
    pub fn prefill<R: Real>(&self, store: &ParamStore<R>, x: &[R], rows: usize) -> Result<(KvCache<R>, Vec<R>)> {
        let mut cache = KvCache {
            keys: vec![Vec::new(); self.blocks.len()],
            values: vec![Vec::new(); self.blocks.len()],
            len: 0,
        };
        let logits = self.extend(store, &mut cache, x, rows)?;
        Ok((cache, logits))
    }

    /// Appends one token and returns the logits for the following position.
    pub fn step<R: Real>(&self, store: &ParamStore<R>, cache: &mut KvCache<R>, token: u32) -> Result<Vec<R>> {
        let x = self.token_embedding(store, token);
        self.extend(store, cache, &x, 1)
    }

    fn extend<R: Real>(&self, store: &ParamStore<R>, cache: &mut KvCache<R>, x: &[R], rows: usize) -> Result<Vec<R>> {
        self.check_len(cache.len + rows)?;
        let d = self.cfg.d_model;
        let heads = self.cfg.n_heads;
        let rot = self.cfg.effective_rotary_dims();
        let (cos, sin) = kernels::rotary_tables::<R>(rows, cache.len, rot);
        let mut x = x.to_vec();
        for (l, b) in self.blocks.iter().enumerate() {
            let h = b.attn_norm.apply(store, &x);
            let mut q = b.attn.q.apply(store, &h, rows);
            let mut k = b.attn.k.apply(store, &h, rows);
            let v = b.attn.v.apply(store, &h, rows);
            kernels::rotary_apply(&mut q, rows, d, heads, rot, &cos, &sin, false);
            kernels::rotary_apply(&mut k, rows, d, heads, rot, &cos, &sin, false);
            cache.keys[l].extend_from_slice(&k);
            cache.values[l].extend_from_slice(&v);
            let tk = cache.len + rows;
            let (a, _) = kernels::attention_forward(&q, &cache.keys[l], &cache.values[l], rows, tk, d, heads, true);
            let a = b.attn.o.apply(store, &a, rows);
            let h = b.ff_norm.apply(store, &x);
            let f = b.ff.apply(store, &h, rows);
            for ((xv, av), fv) in x.iter_mut().zip(a).zip(f) {
                *xv += av + fv;
            }
        }
        cache.len += rows;
        let last = &x[(rows - 1) * d..rows * d];
        let h = self.final_norm.apply(store, last);
        Ok(self.head.apply(store, &h, 1))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.embed];
        for b in &self.blocks {
            v.extend(b.param_ids());
        }
        v.extend(self.final_norm.param_ids());
        v.extend(self.head.param_ids());
        v
    }
}

/// Per-layer key/value cache of one decoding session.
#[derive(Clone, Debug)]
pub struct KvCache<R> {
    keys: Vec<Vec<R>>,
    values: Vec<Vec<R>>,
    len: usize,
}

impl<R> KvCache<R> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}
