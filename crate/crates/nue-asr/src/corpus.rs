//! Seeded synthetic corpora of tone-coded utterances.

use std::fs;
use std::path::Path;

use nue_core::synth::{synth_utterance, SynthProfile, Waveform};
use nue_core::tokenizer::{Vocab, NUM_SPECIALS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{AsrError, IoContext, Result};
use crate::manifest::{write_manifest, Record};
use crate::wav::write_wav;

pub const MAX_UTTERANCE_TOKENS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub utterances: usize,
    /// Inclusive token-count range.
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Tokens drawn preferentially, each position with probability `focus_rate`.
    pub focus: Vec<u32>,
    pub focus_rate: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            utterances: 2000,
            min_len: 3,
            max_len: 10,
            seed: 0,
            focus: Vec::new(),
            focus_rate: 0.0,
        }
    }
}

impl CorpusSpec {
    fn validate(&self, vocab: &Vocab) -> Result<()> {
        if self.min_len < 1 || self.min_len > self.max_len || self.max_len > MAX_UTTERANCE_TOKENS {
            return Err(AsrError::Config(format!(
                "utterance lengths {}..={} must lie within 1..={MAX_UTTERANCE_TOKENS}",
                self.min_len, self.max_len
            )));
        }
        if !(0.0..=1.0).contains(&self.focus_rate)
            || (self.focus_rate > 0.0 && self.focus.is_empty())
        {
            return Err(AsrError::Config(
                "focus rate must lie in [0, 1] and needs focus tokens".into(),
            ));
        }
        if let Some(&t) = self
            .focus
            .iter()
            .find(|&&t| t < NUM_SPECIALS || t as usize >= vocab.lm_size())
        {
            return Err(AsrError::Config(format!(
                "focus token {t} is not a character of the vocabulary"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub text: String,
    pub tokens: Vec<u32>,
    pub wave: Waveform,
}

/// Noise seed of utterance `index`.
pub fn utterance_seed(corpus_seed: u64, index: usize) -> u64 {
    corpus_seed
        .wrapping_mul(1_000_003)
        .wrapping_add(index as u64)
}

/// Builds the corpus in memory. A pure function of its arguments.
pub fn synth_corpus(
    vocab: &Vocab,
    spec: &CorpusSpec,
    profile: &SynthProfile,
) -> Result<Vec<Utterance>> {
    spec.validate(vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let chars = NUM_SPECIALS..vocab.lm_size() as u32;
    (0..spec.utterances)
        .map(|i| {
            let n = rng.random_range(spec.min_len..=spec.max_len);
            let tokens: Vec<u32> = (0..n)
                .map(|_| {
                    if spec.focus_rate > 0.0 && rng.random_bool(spec.focus_rate) {
                        spec.focus[rng.random_range(0..spec.focus.len())]
                    } else {
                        rng.random_range(chars.clone())
                    }
                })
                .collect();
            let text = vocab.decode(&tokens)?;
            let p = SynthProfile {
                seed: utterance_seed(spec.seed, i),
                ..profile.clone()
            };
            let wave = synth_utterance(&tokens, &p)?;
            Ok(Utterance { text, tokens, wave })
        })
        .collect()
}

/// Writes `out_dir/audio/NNNNN.wav` and `out_dir/manifest.jsonl`; returns
/// the manifest records.
pub fn generate_corpus(
    vocab: &Vocab,
    spec: &CorpusSpec,
    profile: &SynthProfile,
    out_dir: &Path,
) -> Result<Vec<Record>> {
    let utts = synth_corpus(vocab, spec, profile)?;
    let audio_dir = out_dir.join("audio");
    fs::create_dir_all(&audio_dir).at(&audio_dir)?;
    let mut records = Vec::with_capacity(utts.len());
    for (i, u) in utts.iter().enumerate() {
        let rel = format!("audio/{i:05}.wav");
        write_wav(&out_dir.join(&rel), &u.wave)?;
        records.push(Record {
            audio: rel,
            text: u.text.clone(),
        });
    }
    write_manifest(&out_dir.join("manifest.jsonl"), &records)?;
    Ok(records)
}
