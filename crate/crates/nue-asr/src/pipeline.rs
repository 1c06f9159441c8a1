//! Training, adaptation and transcription drivers shared by the command
//! line and the acceptance suite.

use std::time::Instant;

use nue_core::config::{DecodeConfig, LoraConfig, LoraTargets, TrainConfig};
use nue_core::eval;
use nue_core::lora;
use nue_core::model::AsrModel;
use nue_core::synth::Waveform;
use nue_core::tokenizer::Vocab;
use nue_core::trainer::{cache_features, Example, LogRecord, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Utterance;
use crate::error::Result;
use crate::runconfig::RunConfig;

/// Offsets the adapter-init stream from the other seeded streams.
const ADAPTER_SEED_SALT: u64 = 0x4c6f_5241;

pub fn examples_from(utts: &[Utterance]) -> Vec<Example<f32>> {
    utts.iter()
        .enumerate()
        .map(|(i, u)| {
            Example::new(
                format!("utt{i:05}"),
                u.wave.samples.clone(),
                u.tokens.clone(),
            )
        })
        .collect()
}

/// True when no conv parameter will be updated, so features can be cached.
pub fn conv_frozen(model: &AsrModel<f32>) -> bool {
    model
        .encoder
        .conv_ids()
        .iter()
        .all(|&id| !model.store.is_trainable(id))
}

fn fit(
    model: &mut AsrModel<f32>,
    tc: &TrainConfig,
    mut data: Vec<Example<f32>>,
    on_log: impl FnMut(&LogRecord),
) -> Result<Vec<LogRecord>> {
    if conv_frozen(model) {
        cache_features(model, &mut data)?;
    }
    let mut trainer = Trainer::for_dataset(tc.clone(), data.len())?;
    Ok(trainer.fit(model, &data, on_log)?)
}

/// Trains a fresh model. Under `peft_lm` the LM is wrapped in adapters of
/// the configured rank and only they (plus any unfrozen modules) train.
pub fn train(
    rc: &RunConfig,
    vocab: Vocab,
    data: Vec<Example<f32>>,
    on_log: impl FnMut(&LogRecord),
) -> Result<(AsrModel<f32>, Vec<LogRecord>)> {
    rc.train.validate()?;
    let mut model = AsrModel::<f32>::new(rc.model.clone(), vocab)?;
    if rc.train.peft_lm {
        let lc = LoraConfig {
            rank: rc.train.lora_rank,
            alpha: rc.train.lora_alpha,
            targets: LoraTargets::LM,
        };
        lora::attach(
            &mut model,
            &lc,
            &mut ChaCha8Rng::seed_from_u64(rc.train.seed ^ ADAPTER_SEED_SALT),
        )?;
    }
    model.apply_freeze(&rc.train);
    let log = fit(&mut model, &rc.train, data, on_log)?;
    Ok((model, log))
}

/// Attaches adapters to `model` and trains only them.
pub fn adapt(
    model: &mut AsrModel<f32>,
    lc: &LoraConfig,
    tc: &TrainConfig,
    data: Vec<Example<f32>>,
    on_log: impl FnMut(&LogRecord),
) -> Result<Vec<LogRecord>> {
    tc.validate()?;
    lora::attach(
        model,
        lc,
        &mut ChaCha8Rng::seed_from_u64(tc.seed ^ ADAPTER_SEED_SALT),
    )?;
    fit(model, tc, data, on_log)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transcript {
    pub text: String,
    pub decode_seconds: f64,
    pub audio_seconds: f64,
}

pub fn transcribe(model: &AsrModel<f32>, wave: &Waveform, dc: &DecodeConfig) -> Result<Transcript> {
    let start = Instant::now();
    let hyp = model.transcribe(&wave.samples, dc)?;
    let decode_seconds = start.elapsed().as_secs_f64();
    Ok(Transcript {
        text: model.vocab.decode(&hyp.tokens)?,
        decode_seconds,
        audio_seconds: wave.duration_seconds(),
    })
}

/// Pooled CER of `model` over an in-memory corpus.
pub fn corpus_cer(model: &AsrModel<f32>, utts: &[Utterance], dc: &DecodeConfig) -> Result<f64> {
    let mut hyps = Vec::with_capacity(utts.len());
    for u in utts {
        hyps.push(transcribe(model, &u.wave, dc)?.text);
    }
    let refs: Vec<&str> = utts.iter().map(|u| u.text.as_str()).collect();
    Ok(eval::cer(&refs, &hyps)?.cer())
}
