//! Training loop: per-utterance graphs, gradient accumulation, AdamW with the
//! warmup + cosine schedule, and per-update log records.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::AsrModel;
use crate::optim::{clip_grad_norm, AdamW, Schedule};
use crate::params::ParamId;
use crate::real::Real;
use crate::tensor::Tensor;

/// One training utterance.
#[derive(Clone, Debug)]
pub struct Example<R = f32> {
    pub id: String,
    pub samples: Vec<f32>,
    pub tokens: Vec<u32>,
    /// Cached conv features, valid while the conv stack is frozen.
    pub features: Option<Tensor<R>>,
}

impl<R: Real> Example<R> {
    pub fn new(id: impl Into<String>, samples: Vec<f32>, tokens: Vec<u32>) -> Self {
        Example { id: id.into(), samples, tokens, features: None }
    }
}

/// Fills the conv-feature cache of every example.
pub fn cache_features<R: Real>(model: &AsrModel<R>, examples: &mut [Example<R>]) -> Result<()> {
    for ex in examples.iter_mut() {
        ex.features = Some(model.conv_features(&ex.samples)?);
    }
    Ok(())
}

/// Mean losses over the utterances of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepMetrics {
    pub loss_lm: Option<f64>,
    pub loss_ctc: Option<f64>,
    pub total: f64,
    pub utterances: usize,
}

/// Line-oriented training log entry, one per optimizer update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub loss_lm: Option<f64>,
    pub loss_ctc: Option<f64>,
    pub total: f64,
}

impl core::fmt::Display for LogRecord {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| String::from("-"), |v| alloc::format!("{v:.6}"));
        write!(f, "{}, {:.6e}, {}, {}, {:.6}", self.step, self.lr, opt(self.loss_lm), opt(self.loss_ctc), self.total)
    }
}

/// Summed per-utterance gradients and losses, not yet divided.
#[derive(Clone, Debug, Default)]
pub struct GradSum<R> {
    pub grads: BTreeMap<ParamId, Tensor<R>>,
    pub utterances: usize,
    loss_lm: f64,
    loss_ctc: f64,
    total: f64,
    lm_count: usize,
    ctc_count: usize,
}

impl<R: Real> GradSum<R> {
    pub fn new() -> Self {
        GradSum {
            grads: BTreeMap::new(),
            utterances: 0,
            loss_lm: 0.0,
            loss_ctc: 0.0,
            total: 0.0,
            lm_count: 0,
            ctc_count: 0,
        }
    }

    fn absorb(&mut self, grads: BTreeMap<ParamId, Tensor<R>>) {
        for (id, g) in grads {
            match self.grads.get_mut(&id) {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
                None => {
                    self.grads.insert(id, g);
                }
            }
        }
    }

    pub fn metrics(&self) -> StepMetrics {
        let n = self.utterances.max(1) as f64;
        StepMetrics {
            loss_lm: (self.lm_count > 0).then(|| self.loss_lm / self.lm_count as f64),
            loss_ctc: (self.ctc_count > 0).then(|| self.loss_ctc / self.ctc_count as f64),
            total: self.total / n,
            utterances: self.utterances,
        }
    }

    /// Gradients of the mean loss over every absorbed utterance.
    pub fn mean_grads(&self) -> BTreeMap<ParamId, Tensor<R>> {
        let inv = R::one() / R::lit(self.utterances.max(1) as f64);
        self.grads.iter().map(|(&id, g)| (id, g.map(|v| v * inv))).collect()
    }
}

/// Adds the gradients of every utterance in `batch` to `sum`, one graph per
/// utterance, in batch order.
pub fn accumulate<R: Real>(
    model: &AsrModel<R>,
    batch: &[&Example<R>],
    cfg: &TrainConfig,
    step: usize,
    sum: &mut GradSum<R>,
) -> Result<()> {
    let conv_trainable = model.encoder.conv_trainable(&model.store);
    for ex in batch {
        let mut tape = Tape::new();
        let feats = match (&ex.features, conv_trainable) {
            (Some(f), false) => tape.constant_ref(f),
            _ => model.encoder.wave_encode(&mut tape, &model.store, &ex.samples)?,
        };
        let loss = model.loss(&mut tape, feats, &ex.tokens, cfg.objective, cfg.lambda_ctc)?;
        let total = tape.value(loss.total).item().as_f64();
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { step, utterances: alloc::vec![ex.id.clone()] });
        }
        if let Some(l) = loss.lm {
            sum.loss_lm += tape.value(l).item().as_f64();
            sum.lm_count += 1;
        }
        if let Some(c) = loss.ctc {
            sum.loss_ctc += tape.value(c).item().as_f64();
            sum.ctc_count += 1;
        }
        sum.total += total;
        sum.utterances += 1;
        let grads = tape.backward(loss.total)?;
        sum.absorb(grads.into_params());
    }
    Ok(())
}

pub struct Trainer<R = f32> {
    pub cfg: TrainConfig,
    pub schedule: Schedule,
    opt: AdamW,
    updates: usize,
    micro: usize,
    pending: GradSum<R>,
}

impl<R: Real> Trainer<R> {
    pub fn new(cfg: TrainConfig, steps_per_epoch: usize) -> Result<Self> {
        cfg.validate()?;
        let schedule = Schedule::for_run(cfg.peak_lr, cfg.warmup_fraction, steps_per_epoch.max(1), cfg.epochs)?;
        let opt = AdamW::new(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
        Ok(Trainer { cfg, schedule, opt, updates: 0, micro: 0, pending: GradSum::new() })
    }

    /// Optimizer updates per epoch for `n` utterances.
    pub fn steps_per_epoch(cfg: &TrainConfig, n: usize) -> usize {
        n.div_ceil(cfg.batch_size).div_ceil(cfg.grad_accum)
    }

    pub fn for_dataset(cfg: TrainConfig, n: usize) -> Result<Self> {
        let spe = Self::steps_per_epoch(&cfg, n);
        Self::new(cfg, spe)
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    /// Processes one micro-batch; every `grad_accum` micro-batches the
    /// optimizer runs. Returns the micro-batch metrics and, when an update
    /// happened, its log record.
    pub fn train_step(
        &mut self,
        model: &mut AsrModel<R>,
        batch: &[&Example<R>],
    ) -> Result<(StepMetrics, Option<LogRecord>)> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty training batch".into()));
        }
        let mut local = GradSum::new();
        accumulate(model, batch, &self.cfg, self.updates + 1, &mut local)?;
        let metrics = local.metrics();
        self.merge_pending(local);
        self.micro += 1;
        let record = if self.micro == self.cfg.grad_accum { Some(self.apply(model)?) } else { None };
        Ok((metrics, record))
    }

    fn merge_pending(&mut self, local: GradSum<R>) {
        let p = &mut self.pending;
        p.loss_lm += local.loss_lm;
        p.loss_ctc += local.loss_ctc;
        p.total += local.total;
        p.lm_count += local.lm_count;
        p.ctc_count += local.ctc_count;
        p.utterances += local.utterances;
        p.absorb(local.grads);
    }

    /// Runs the optimizer on whatever is pending (used at epoch ends).
    pub fn flush(&mut self, model: &mut AsrModel<R>) -> Result<Option<LogRecord>> {
        if self.micro == 0 {
            return Ok(None);
        }
        self.apply(model).map(Some)
    }

    fn apply(&mut self, model: &mut AsrModel<R>) -> Result<LogRecord> {
        let pending = core::mem::replace(&mut self.pending, GradSum::new());
        self.micro = 0;
        let step = (self.updates + 1).min(self.schedule.total_steps);
        let lr = self.schedule.lr_at(step)?;
        let mut grads = pending.mean_grads();
        clip_grad_norm(&mut grads, self.cfg.grad_clip);
        self.opt.step(&mut model.store, &grads, lr);
        self.updates += 1;
        let m = pending.metrics();
        Ok(LogRecord { step: self.updates, lr, loss_lm: m.loss_lm, loss_ctc: m.loss_ctc, total: m.total })
    }

    /// Full run over `data` for the configured epochs with a seeded shuffle.
    pub fn fit(
        &mut self,
        model: &mut AsrModel<R>,
        data: &[Example<R>],
        mut on_log: impl FnMut(&LogRecord),
    ) -> Result<Vec<LogRecord>> {
        let mut log = Vec::new();
        let mut order: Vec<usize> = (0..data.len()).collect();
        for epoch in 0..self.cfg.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_add(epoch as u64));
            order.shuffle(&mut rng);
            for chunk in order.chunks(self.cfg.batch_size) {
                let batch: Vec<&Example<R>> = chunk.iter().map(|&i| &data[i]).collect();
                if let (_, Some(rec)) = self.train_step(model, &batch)? {
                    on_log(&rec);
                    log.push(rec);
                }
            }
            if let Some(rec) = self.flush(model)? {
                on_log(&rec);
                log.push(rec);
            }
        }
        Ok(log)
    }
}
