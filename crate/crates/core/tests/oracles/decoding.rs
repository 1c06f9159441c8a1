//! Decoding checks on random language models and on a hand-built table.

use nue_core::config::{BridgeMode, ModelConfig};
use nue_core::decoding::{beam, greedy, masked_log_probs, sample, Filter, StepModel};
use nue_core::model::{AsrModel, PromptSession};
use nue_core::tokenizer::{Vocab, EOS};
use nue_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Outcome;

pub const MAX_NEW: usize = 6;

/// A random LM with a sharpened head and a random 0-3 row prompt.
pub fn random_model(seed: u64) -> (AsrModel<f64>, Tensor<f64>) {
    let mut cfg = ModelConfig::default();
    cfg.encoder.conv_channels = vec![2; 7];
    cfg.encoder.d_model = 8;
    cfg.encoder.n_heads = 2;
    cfg.encoder.d_ff = 8;
    cfg.encoder.n_layers = 1;
    cfg.lm.d_model = 16;
    cfg.lm.n_heads = 2;
    cfg.lm.d_ff = 32;
    cfg.lm.n_layers = 2;
    cfg.bridge = BridgeMode::Downsample;
    cfg.seed = seed;
    let mut model = AsrModel::<f64>::new(cfg, Vocab::build(["abcdef"]).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let head = model.lm.head.weight;
    let shape = model.store.get(head).shape().to_vec();
    *model.store.get_mut(head) = Tensor::randn(shape, 1.0, &mut rng);
    let m = rng.random_range(0..4);
    let prompt = Tensor::randn(vec![m, 16], 1.0, &mut rng);
    (model, prompt)
}

/// Re-scores a token sequence under the model, EOS included when finished.
pub fn joint_log_prob<M: StepModel>(model: &M, tokens: &[u32], finished: bool) -> f64 {
    let (mut state, mut scores) = model.start().unwrap();
    let mut total = 0.0;
    for &t in tokens {
        total += masked_log_probs(&scores)[t as usize];
        scores = model.next(&mut state, t).unwrap();
    }
    if finished {
        total += masked_log_probs(&scores)[EOS as usize];
    }
    total
}

/// beam(1), top_k(1) and nucleus with `p` at or below the smallest
/// per-step top probability all reproduce greedy token for token.
pub fn degenerate_settings_equal_greedy(models: u64) -> Outcome {
    for seed in 0..models {
        let (model, prompt) = random_model(seed);
        let s = PromptSession {
            model: &model,
            prompt: &prompt,
        };
        let g = greedy(&s, MAX_NEW).map_err(|e| e.to_string())?;
        let fail = |what: &str| Err(format!("model {seed}: {what} differs from greedy"));
        if beam(&s, 1, MAX_NEW).map_err(|e| e.to_string())?.tokens != g.tokens {
            return fail("beam(1)");
        }
        for sample_seed in 0..3 {
            if sample(&s, Filter::TopK(1), 1.0, sample_seed, MAX_NEW)
                .map_err(|e| e.to_string())?
                .tokens
                != g.tokens
            {
                return fail("top_k(1)");
            }
        }
        let (mut state, mut scores) = s.start().map_err(|e| e.to_string())?;
        let top = |scores: &[f64]| {
            masked_log_probs(scores)
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
                .exp()
        };
        let mut p_min = top(&scores);
        for &t in &g.tokens {
            scores = s.next(&mut state, t).map_err(|e| e.to_string())?;
            p_min = p_min.min(top(&scores));
        }
        for p in [p_min, p_min * 0.5] {
            if sample(&s, Filter::Nucleus(p), 1.0, 9, MAX_NEW)
                .map_err(|e| e.to_string())?
                .tokens
                != g.tokens
            {
                return fail("nucleus");
            }
        }
        if (joint_log_prob(&s, &g.tokens, g.finished) - g.log_prob).abs() > 1e-9 {
            return Err(format!(
                "model {seed}: greedy score disagrees with rescoring"
            ));
        }
    }
    Ok(format!("{models} models"))
}

/// The best beam's joint log-probability never drops as the width grows.
pub fn beam_is_monotone(models: u64, max_width: usize) -> Outcome {
    for seed in 0..models {
        let (model, prompt) = random_model(seed);
        let s = PromptSession {
            model: &model,
            prompt: &prompt,
        };
        let mut prev = f64::NEG_INFINITY;
        for width in 1..=max_width {
            let h = beam(&s, width, MAX_NEW).map_err(|e| e.to_string())?;
            if (joint_log_prob(&s, &h.tokens, h.finished) - h.log_prob).abs() > 1e-9 {
                return Err(format!(
                    "model {seed}: beam({width}) score disagrees with rescoring"
                ));
            }
            if h.log_prob < prev - 1e-12 {
                return Err(format!(
                    "model {seed}: beam({width}) scored {} below {prev}",
                    h.log_prob
                ));
            }
            prev = h.log_prob;
        }
    }
    Ok(format!("{models} models, widths 1..={max_width}"))
}

/// Fixed distributions after every prefix, given as probabilities.
pub struct Table<F: Fn(&[u32]) -> Vec<f64>>(pub usize, pub F);

impl<F: Fn(&[u32]) -> Vec<f64>> StepModel for Table<F> {
    type State = Vec<u32>;
    fn vocab_size(&self) -> usize {
        self.0
    }
    fn start(&self) -> Result<(Vec<u32>, Vec<f64>)> {
        Ok((Vec::new(), (self.1)(&[]).iter().map(|p| p.ln()).collect()))
    }
    fn next(&self, state: &mut Vec<u32>, token: u32) -> Result<Vec<f64>> {
        state.push(token);
        Ok((self.1)(state).iter().map(|p| p.ln()).collect())
    }
}

const A: u32 = 4;
const B: u32 = 5;
const C: u32 = 6;

fn dist(pairs: &[(u32, f64)]) -> Vec<f64> {
    let mut v = vec![0.0; 7];
    for &(i, p) in pairs {
        v[i as usize] = p;
    }
    v
}

/// Greedy takes A (0.5) then A (0.34): 0.17. Beam keeps B (0.45), whose
/// continuation A (0.9) gives 0.405.
pub fn two_step_instance() -> Outcome {
    let m = Table(7, |prefix: &[u32]| match prefix {
        [] => dist(&[(A, 0.5), (B, 0.45), (C, 0.05)]),
        [a] if *a == A => dist(&[(A, 0.34), (B, 0.33), (C, 0.33)]),
        [b] if *b == B => dist(&[(A, 0.9), (B, 0.05), (C, 0.05)]),
        [_] => dist(&[(A, 1.0 / 3.0), (B, 1.0 / 3.0), (C, 1.0 / 3.0)]),
        _ => dist(&[(EOS, 1.0)]),
    });
    let g = greedy(&m, 10).map_err(|e| e.to_string())?;
    let b = beam(&m, 2, 10).map_err(|e| e.to_string())?;
    if g.tokens != [A, A] || b.tokens != [B, A] {
        return Err(format!("greedy {:?}, beam(2) {:?}", g.tokens, b.tokens));
    }
    if (g.log_prob.exp() - 0.17).abs() > 1e-12 || (b.log_prob.exp() - 0.405).abs() > 1e-12 {
        return Err(format!(
            "scores {} and {}",
            g.log_prob.exp(),
            b.log_prob.exp()
        ));
    }
    Ok("greedy [A,A] p=0.17, beam(2) [B,A] p=0.405".into())
}
