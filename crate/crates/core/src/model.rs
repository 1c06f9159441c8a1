//! The assembled recognizer: speech encoder, CTC head, bridge and decoder LM
//! over one shared parameter store.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::bridge::Bridge;
use crate::config::{LoraConfig, ModelConfig, Objective, TrainConfig};
use crate::ctc;
use crate::decoding::{self, Hypothesis, StepModel};
use crate::config::DecodeConfig;
use crate::encoder::SpeechEncoder;
use crate::error::{Error, Result};
use crate::lm::{DecoderLm, KvCache, PromptedInput};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::tokenizer::{Vocab, BOS};

/// Adapter lifecycle of a model.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum LoraState {
    #[default]
    Plain,
    Attached(LoraConfig),
    Merged,
}

#[derive(Clone, Debug)]
pub struct AsrModel<R: Real = f32> {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore<R>,
    pub encoder: SpeechEncoder,
    pub ctc_head: Linear,
    pub bridge: Bridge,
    pub lm: DecoderLm,
    pub lora: LoraState,
}

/// Loss nodes of one utterance.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub lm: Option<Var>,
    pub ctc: Option<Var>,
    pub total: Var,
}

impl<R: Real> AsrModel<R> {
    /// Randomly initialised model; the LM vocabulary size follows `vocab`.
    pub fn new(mut config: ModelConfig, vocab: Vocab) -> Result<Self> {
        if config.lm.vocab_size == 0 {
            config.lm.vocab_size = vocab.lm_size();
        }
        if config.lm.vocab_size != vocab.lm_size() {
            return Err(Error::InvalidConfig(alloc::format!(
                "lm.vocab_size {} does not match the {}-entry vocabulary",
                config.lm.vocab_size,
                vocab.lm_size()
            )));
        }
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let encoder = SpeechEncoder::new(&mut store, &config.encoder, &mut rng)?;
        let d_enc = config.encoder.d_model;
        let ctc_head = Linear::new(&mut store, "ctc.head", d_enc, vocab.ctc_size(), true, &mut rng);
        let bridge = Bridge::new(&mut store, config.bridge, d_enc, config.lm.d_model, &mut rng);
        let lm = DecoderLm::new(&mut store, &config.lm, &mut rng)?;
        let mut model = AsrModel { config, vocab, store, encoder, ctc_head, bridge, lm, lora: LoraState::Plain };
        model.set_default_trainability();
        Ok(model)
    }

    /// Everything trainable except the conv stack when it is configured frozen.
    pub fn set_default_trainability(&mut self) {
        self.store.set_all_trainable(true);
        if self.config.encoder.freeze_conv {
            self.set_trainable(&self.encoder.conv_ids(), false);
        }
    }

    pub fn set_trainable(&mut self, ids: &[ParamId], trainable: bool) {
        for &id in ids {
            self.store.set_trainable(id, trainable);
        }
    }

    pub fn blank(&self) -> u32 {
        self.vocab.blank()
    }

    pub fn encoder_ids(&self) -> Vec<ParamId> {
        self.encoder.param_ids()
    }

    pub fn ctc_ids(&self) -> Vec<ParamId> {
        self.ctc_head.param_ids()
    }

    pub fn bridge_ids(&self) -> Vec<ParamId> {
        self.bridge.param_ids()
    }

    pub fn lm_ids(&self) -> Vec<ParamId> {
        self.lm.param_ids()
    }

    /// Applies the freeze policy of a training run. Adapter tensors are
    /// always trainable; the base weights of adapted linears follow their
    /// module.
    pub fn apply_freeze(&mut self, t: &TrainConfig) {
        self.set_default_trainability();
        let adapters = crate::lora::adapter_ids(self);
        let enc_frozen = t.freeze_encoder || self.config.encoder.freeze_all;
        if enc_frozen {
            let mut ids = self.encoder_ids();
            ids.extend(self.ctc_ids());
            self.set_trainable(&ids, false);
        }
        if t.freeze_bridge {
            self.set_trainable(&self.bridge_ids(), false);
        }
        if t.freeze_lm || t.peft_lm {
            self.set_trainable(&self.lm_ids(), false);
        }
        if t.objective == Objective::CtcOnly {
            let mut ids = self.bridge_ids();
            ids.extend(self.lm_ids());
            self.set_trainable(&ids, false);
        }
        for id in adapters {
            self.store.set_trainable(id, true);
        }
    }

    /// Frame-level conv features for `samples`, computed without a tape.
    pub fn conv_features(&self, samples: &[f32]) -> Result<Tensor<R>> {
        self.encoder.conv_features(&self.store, samples)
    }

    /// Records the loss of one utterance. `feats` are conv features
    /// (`[T × C]`) already on the tape.
    pub fn loss<'p>(
        &'p self,
        tape: &mut Tape<'p, R>,
        feats: Var,
        text: &[u32],
        objective: Objective,
        lambda_ctc: f64,
    ) -> Result<LossVars> {
        let store = &self.store;
        let h = self.encoder.contextualize(tape, store, feats);
        let blank = self.blank();
        let needs_ctc = objective == Objective::CtcOnly || self.bridge.mode.uses_ctc();
        let log_probs = if needs_ctc {
            let logits = self.ctc_head.forward(tape, store, h);
            Some(tape.log_softmax(logits))
        } else {
            None
        };
        if objective == Objective::CtcOnly {
            let l = ctc::ctc_loss(tape, log_probs.expect("ctc branch"), text, blank)?;
            return Ok(LossVars { lm: None, ctc: Some(l), total: l });
        }
        let labels = log_probs.map(|lp| ctc::frame_labels(tape.value(lp)));
        let prompt = self.bridge.forward(tape, store, h, labels.as_deref(), blank)?;
        let input = PromptedInput::for_training(tape.shape(prompt)[0], text)?;
        let x = self.lm.embed_input(tape, store, Some(prompt), &input);
        let logits = self.lm.forward(tape, store, x)?;
        let lm_loss = self.lm.loss(tape, logits, &input)?;
        let ctc_loss = match log_probs {
            Some(lp) => Some(ctc::ctc_loss(tape, lp, text, blank)?),
            None => None,
        };
        let total = match ctc_loss {
            Some(c) if lambda_ctc != 0.0 => {
                let w = tape.scale(c, R::lit(lambda_ctc));
                tape.add(lm_loss, w)
            }
            _ => lm_loss,
        };
        Ok(LossVars { lm: Some(lm_loss), ctc: ctc_loss, total })
    }

    /// Speech prompt `[M × d_lm]` and, when the CTC branch ran, its
    /// log-probabilities.
    pub fn speech_prompt(&self, samples: &[f32]) -> Result<(Tensor<R>, Option<Tensor<R>>)> {
        let feats = self.conv_features(samples)?;
        self.speech_prompt_from_features(&feats)
    }

    pub fn speech_prompt_from_features(&self, feats: &Tensor<R>) -> Result<(Tensor<R>, Option<Tensor<R>>)> {
        let store = &self.store;
        let mut tape = Tape::new();
        let f = tape.constant_ref(feats);
        let h = self.encoder.contextualize(&mut tape, store, f);
        let blank = self.blank();
        let lp = if self.bridge.mode.uses_ctc() {
            let logits = self.ctc_head.forward(&mut tape, store, h);
            Some(tape.log_softmax(logits))
        } else {
            None
        };
        let labels = lp.map(|lp| ctc::frame_labels(tape.value(lp)));
        let prompt = self.bridge.forward(&mut tape, store, h, labels.as_deref(), blank)?;
        Ok((tape.value(prompt).clone(), lp.map(|v| tape.value(v).clone())))
    }

    /// CTC log-probabilities `[T × (V+1)]` of the encoder branch.
    pub fn ctc_log_probs(&self, samples: &[f32]) -> Result<Tensor<R>> {
        let feats = self.conv_features(samples)?;
        let store = &self.store;
        let mut tape = Tape::new();
        let f = tape.constant(feats);
        let h = self.encoder.contextualize(&mut tape, store, f);
        let logits = self.ctc_head.forward(&mut tape, store, h);
        let lp = tape.log_softmax(logits);
        Ok(tape.value(lp).clone())
    }

    /// Greedy CTC transcription (argmax, collapse) of the encoder branch.
    pub fn transcribe_ctc(&self, samples: &[f32]) -> Result<Vec<u32>> {
        let lp = self.ctc_log_probs(samples)?;
        Ok(ctc::collapse(&ctc::frame_labels(&lp), self.blank()))
    }

    /// End-to-end transcription through the LM.
    pub fn transcribe(&self, samples: &[f32], cfg: &DecodeConfig) -> Result<Hypothesis> {
        let (prompt, _) = self.speech_prompt(samples)?;
        self.decode_prompt(&prompt, cfg)
    }

    pub fn decode_prompt(&self, prompt: &Tensor<R>, cfg: &DecodeConfig) -> Result<Hypothesis> {
        let session = PromptSession { model: self, prompt };
        decoding::decode(&session, cfg)
    }
}

/// Step model over the LM conditioned on a fixed speech prompt.
pub struct PromptSession<'a, R: Real> {
    pub model: &'a AsrModel<R>,
    pub prompt: &'a Tensor<R>,
}

impl<R: Real> StepModel for PromptSession<'_, R> {
    type State = KvCache<R>;

    fn vocab_size(&self) -> usize {
        self.model.vocab.lm_size()
    }

    fn start(&self) -> Result<(Self::State, Vec<f64>)> {
        let lm = &self.model.lm;
        let m = self.prompt.rows();
        let mut rows = self.prompt.data().to_vec();
        rows.extend(lm.token_embedding(&self.model.store, BOS));
        let (cache, logits) = lm.prefill(&self.model.store, &rows, m + 1)?;
        Ok((cache, logits.iter().map(|v| v.as_f64()).collect()))
    }

    fn next(&self, state: &mut Self::State, token: u32) -> Result<Vec<f64>> {
        let logits = self.model.lm.step(&self.model.store, state, token)?;
        Ok(logits.iter().map(|v| v.as_f64()).collect())
    }
}
