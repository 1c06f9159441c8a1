//! Autoregressive search and sampling over any next-token model.
//!
//! PAD, UNK and BOS are never emitted by any strategy; EOS ends a hypothesis.
//! Ties between equally scored tokens resolve toward the smaller id.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{DecodeConfig, Strategy};
use crate::error::Result;
use crate::tokenizer::{BOS, EOS, PAD, UNK};

/// A next-token model whose state can be forked for beam search.
pub trait StepModel {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    /// Initial state and the scores (logits or log-probabilities) of the
    /// first generated token.
    fn start(&self) -> Result<(Self::State, Vec<f64>)>;

    /// Feeds `token` and returns the scores of the token after it.
    fn next(&self, state: &mut Self::State, token: u32) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, EOS excluded.
    pub tokens: Vec<u32>,
    /// Joint log-probability, including the EOS step when finished.
    pub log_prob: f64,
    pub finished: bool,
}

/// Log-softmax over the emittable tokens; masked entries become `-inf`.
pub fn masked_log_probs(scores: &[f64]) -> Vec<f64> {
    let mut out = scores.to_vec();
    for id in [PAD, UNK, BOS] {
        if let Some(v) = out.get_mut(id as usize) {
            *v = f64::NEG_INFINITY;
        }
    }
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + libm::log(out.iter().map(|v| libm::exp(v - max)).sum::<f64>());
    out.iter_mut().for_each(|v| *v -= lse);
    out
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn decode<M: StepModel>(model: &M, cfg: &DecodeConfig) -> Result<Hypothesis> {
    match cfg.strategy {
        Strategy::Greedy => greedy(model, cfg.max_new_tokens),
        Strategy::Beam => beam(model, cfg.beam_size, cfg.max_new_tokens),
        Strategy::TopK => sample(model, Filter::TopK(cfg.top_k), cfg.temperature, cfg.seed, cfg.max_new_tokens),
        Strategy::Nucleus => sample(model, Filter::Nucleus(cfg.top_p), cfg.temperature, cfg.seed, cfg.max_new_tokens),
    }
}

pub fn greedy<M: StepModel>(model: &M, max_new_tokens: usize) -> Result<Hypothesis> {
    pick_loop(model, max_new_tokens, |lp| argmax(lp))
}

fn pick_loop<M: StepModel>(
    model: &M,
    max_new_tokens: usize,
    mut choose: impl FnMut(&[f64]) -> usize,
) -> Result<Hypothesis> {
    let (mut state, mut scores) = model.start()?;
    let mut hyp = Hypothesis { tokens: Vec::new(), log_prob: 0.0, finished: false };
    while hyp.tokens.len() < max_new_tokens {
        let lp = masked_log_probs(&scores);
        let tok = choose(&lp);
        hyp.log_prob += lp[tok];
        if tok as u32 == EOS {
            hyp.finished = true;
            break;
        }
        hyp.tokens.push(tok as u32);
        if hyp.tokens.len() == max_new_tokens {
            break;
        }
        scores = model.next(&mut state, tok as u32)?;
    }
    Ok(hyp)
}

/// Length-unnormalised beam search. Finished hypotheses stay in the pool and
/// compete on their final score with live extensions.
pub fn beam<M: StepModel>(model: &M, width: usize, max_new_tokens: usize) -> Result<Hypothesis> {
    let width = width.max(1);
    struct Live<S> {
        hyp: Hypothesis,
        state: S,
        log_probs: Vec<f64>,
    }
    let (state, scores) = model.start()?;
    let mut pool: Vec<Live<M::State>> = vec![Live {
        hyp: Hypothesis { tokens: Vec::new(), log_prob: 0.0, finished: false },
        state,
        log_probs: masked_log_probs(&scores),
    }];
    if max_new_tokens == 0 {
        return Ok(pool.remove(0).hyp);
    }
    loop {
        // Candidates: (score, parent, token); token None keeps a finished hypothesis.
        let mut cands: Vec<(f64, usize, Option<u32>)> = Vec::new();
        for (i, live) in pool.iter().enumerate() {
            if live.hyp.finished || live.hyp.tokens.len() >= max_new_tokens {
                cands.push((live.hyp.log_prob, i, None));
                continue;
            }
            for (tok, &lp) in live.log_probs.iter().enumerate() {
                if lp > f64::NEG_INFINITY {
                    cands.push((live.hyp.log_prob + lp, i, Some(tok as u32)));
                }
            }
        }
        // Stable sort keeps enumeration order (parent, then token id) among ties.
        cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(core::cmp::Ordering::Equal));
        cands.truncate(width);
        let mut next = Vec::with_capacity(cands.len());
        for (score, parent, tok) in cands {
            let src = &pool[parent];
            match tok {
                None => next.push(Live { hyp: src.hyp.clone(), state: src.state.clone(), log_probs: Vec::new() }),
                Some(t) if t == EOS => {
                    let mut hyp = src.hyp.clone();
                    hyp.log_prob = score;
                    hyp.finished = true;
                    next.push(Live { hyp, state: src.state.clone(), log_probs: Vec::new() });
                }
                Some(t) => {
                    let mut hyp = src.hyp.clone();
                    hyp.log_prob = score;
                    hyp.tokens.push(t);
                    let mut state = src.state.clone();
                    let log_probs = if hyp.tokens.len() < max_new_tokens {
                        masked_log_probs(&model.next(&mut state, t)?)
                    } else {
                        Vec::new()
                    };
                    next.push(Live { hyp, state, log_probs });
                }
            }
        }
        pool = next;
        let done = pool.iter().all(|l| l.hyp.finished || l.hyp.tokens.len() >= max_new_tokens);
        if done {
            break;
        }
    }
    let best = pool
        .into_iter()
        .map(|l| l.hyp)
        .reduce(|a, b| if b.log_prob > a.log_prob { b } else { a })
        .expect("beam pool is never empty");
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Filter {
    TopK(usize),
    Nucleus(f64),
}

/// Candidate ids (sorted by probability, ties toward smaller id) and their
/// renormalised probabilities.
pub fn candidates(log_probs: &[f64], filter: Filter, temperature: f64) -> (Vec<usize>, Vec<f64>) {
    let mut order: Vec<usize> = (0..log_probs.len()).filter(|&i| log_probs[i] > f64::NEG_INFINITY).collect();
    order.sort_by(|&a, &b| log_probs[b].partial_cmp(&log_probs[a]).unwrap_or(core::cmp::Ordering::Equal));
    let tempered: Vec<f64> = order.iter().map(|&i| log_probs[i] / temperature).collect();
    let max = tempered.first().copied().unwrap_or(0.0);
    let mut probs: Vec<f64> = tempered.iter().map(|v| libm::exp(v - max)).collect();
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);
    let keep = match filter {
        Filter::TopK(k) => k.clamp(1, order.len()),
        Filter::Nucleus(p) => {
            let mut acc = 0.0;
            let mut n = 0;
            for &q in &probs {
                acc += q;
                n += 1;
                if acc >= p {
                    break;
                }
            }
            n
        }
    };
    order.truncate(keep);
    probs.truncate(keep);
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);
    (order, probs)
}

pub fn sample<M: StepModel>(
    model: &M,
    filter: Filter,
    temperature: f64,
    seed: u64,
    max_new_tokens: usize,
) -> Result<Hypothesis> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pick_loop(model, max_new_tokens, |lp| {
        let (ids, probs) = candidates(lp, filter, temperature);
        if ids.len() == 1 {
            return ids[0];
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (&id, &p) in ids.iter().zip(&probs) {
            acc += p;
            if u < acc {
                return id;
            }
        }
        *ids.last().expect("at least one candidate")
    })
}
