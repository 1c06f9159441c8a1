//! Low-rank adapters on attention projections (and optionally the bridge
//! projection): attach, count, merge.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::config::LoraConfig;
use crate::error::{Error, Result};
use crate::encoder::SpeechEncoder;
use crate::kernels;
use crate::lm::DecoderLm;
use crate::model::{AsrModel, LoraState};
use crate::nn::{Linear, LoraAdapter, Projection};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

pub const A_INIT_STD: f64 = 0.02;

fn encoder_linears(enc: &mut SpeechEncoder) -> Vec<&mut Linear> {
    let mut v = Vec::new();
    for b in enc.blocks.iter_mut() {
        let a = &mut b.attn;
        v.extend([&mut a.q, &mut a.k, &mut a.v, &mut a.o]);
    }
    v
}

fn lm_linears(lm: &mut DecoderLm) -> Vec<&mut Linear> {
    let mut v = Vec::new();
    for b in lm.blocks.iter_mut() {
        let a = &mut b.attn;
        v.extend([&mut a.q, &mut a.k, &mut a.v, &mut a.o]);
    }
    v
}

fn all_linears(m: &AsrModel<impl Real>) -> Vec<&Linear> {
    let mut v = Vec::new();
    for b in &m.encoder.blocks {
        v.extend(Projection::ALL.map(|p| b.attn.projection(p)));
    }
    v.push(&m.bridge.proj);
    for b in &m.lm.blocks {
        v.extend(Projection::ALL.map(|p| b.attn.projection(p)));
    }
    v
}

/// Adds a zero-delta adapter to one linear layer.
pub fn attach_linear<R: Real>(
    store: &mut ParamStore<R>,
    lin: &mut Linear,
    rank: usize,
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<()> {
    if rank == 0 || rank > lin.d_in.min(lin.d_out) {
        return Err(Error::InvalidConfig(format!(
            "LoRA rank {rank} must lie in 1..={} for `{}`",
            lin.d_in.min(lin.d_out),
            lin.name
        )));
    }
    if lin.lora.is_some() {
        return Err(Error::InvalidTarget(format!("`{}` already carries an adapter", lin.name)));
    }
    let a = store.insert(format!("{}.lora_a", lin.name), Tensor::randn(vec![rank, lin.d_in], A_INIT_STD, rng));
    let b = store.insert(format!("{}.lora_b", lin.name), Tensor::zeros(vec![lin.d_out, rank]));
    lin.lora = Some(LoraAdapter { a, b, rank, scale: alpha / rank as f64 });
    Ok(())
}

/// Attaches adapters to every configured target and freezes all base
/// parameters. Returns the number of trainable scalars.
pub fn attach<R: Real>(model: &mut AsrModel<R>, cfg: &LoraConfig, rng: &mut impl Rng) -> Result<usize> {
    if matches!(model.lora, LoraState::Attached(_)) {
        return Err(Error::InvalidTarget("model already carries adapters".into()));
    }
    let t = cfg.targets;
    if t.encoder && model.encoder.blocks.is_empty() {
        return Err(Error::InvalidTarget("encoder has no attention layers".into()));
    }
    if t.lm && model.lm.blocks.is_empty() {
        return Err(Error::InvalidTarget("lm has no attention layers".into()));
    }
    let mut store = core::mem::take(&mut model.store);
    let mut targets: Vec<&mut Linear> = Vec::new();
    if t.encoder {
        targets.extend(encoder_linears(&mut model.encoder));
    }
    // The bridge has no attention; its output projection stands in.
    if t.bridge {
        targets.push(&mut model.bridge.proj);
    }
    if t.lm {
        targets.extend(lm_linears(&mut model.lm));
    }
    let mut result = Ok(());
    if let Some(lin) = targets.iter().find(|l| cfg.rank == 0 || cfg.rank > l.d_in.min(l.d_out)) {
        result = Err(Error::InvalidConfig(format!(
            "LoRA rank {} must lie in 1..={} for `{}`",
            cfg.rank,
            lin.d_in.min(lin.d_out),
            lin.name
        )));
    } else {
        for lin in targets {
            if let Err(e) = attach_linear(&mut store, lin, cfg.rank, cfg.alpha, rng) {
                result = Err(e);
                break;
            }
        }
    }
    model.store = store;
    result?;
    model.lora = LoraState::Attached(cfg.clone());
    model.store.set_all_trainable(false);
    let ids = adapter_ids(model);
    model.set_trainable(&ids, true);
    Ok(model.store.trainable_count())
}

/// A/B tensors of every attached adapter, in model order.
pub fn adapter_ids<R: Real>(model: &AsrModel<R>) -> Vec<ParamId> {
    all_linears(model).into_iter().filter_map(|l| l.lora.as_ref()).flat_map(|l| [l.a, l.b]).collect()
}

pub fn lm_adapter_ids<R: Real>(model: &AsrModel<R>) -> Vec<ParamId> {
    model
        .lm
        .blocks
        .iter()
        .flat_map(|b| Projection::ALL.map(|p| b.attn.projection(p).lora.clone()))
        .flatten()
        .flat_map(|l| [l.a, l.b])
        .collect()
}

/// Names of the adapter tensors (what adapter checkpoints persist).
pub fn adapter_names<R: Real>(model: &AsrModel<R>) -> Vec<String> {
    adapter_ids(model).into_iter().map(|id| model.store.name(id).into()).collect()
}

/// `W + scale · B · A` for one adapted linear.
pub fn merged_weight<R: Real>(store: &ParamStore<R>, lin: &Linear) -> Tensor<R> {
    let w = store.get(lin.weight).clone();
    let Some(l) = &lin.lora else { return w };
    let mut delta = vec![R::zero(); lin.d_out * lin.d_in];
    kernels::gemm_nn_acc(store.get(l.b).data(), store.get(l.a).data(), &mut delta, lin.d_out, l.rank, lin.d_in);
    let s = R::lit(l.scale);
    let mut w = w;
    w.data_mut().iter_mut().zip(delta).for_each(|(w, d)| *w += s * d);
    w
}

/// Folds every adapter into its base weight and returns the plain model.
pub fn merge<R: Real>(model: &AsrModel<R>) -> Result<AsrModel<R>> {
    match model.lora {
        LoraState::Merged => return Err(Error::AlreadyMerged),
        LoraState::Plain => return Err(Error::InvalidTarget("model carries no adapters to merge".into())),
        LoraState::Attached(_) => {}
    }
    let mut plain = AsrModel::<R>::new(model.config.clone(), model.vocab.clone())?;
    let merged: Vec<(String, Tensor<R>)> = all_linears(model)
        .into_iter()
        .filter(|l| l.lora.is_some())
        .map(|l| (model.store.name(l.weight).into(), merged_weight(&model.store, l)))
        .collect();
    let ids: Vec<ParamId> = plain.store.ids().collect();
    for id in ids {
        let name = String::from(plain.store.name(id));
        let src = model.store.id(&name).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
        let value = merged.iter().find(|(n, _)| *n == name).map(|(_, t)| t.clone());
        let value = value.unwrap_or_else(|| model.store.get(src).clone());
        plain.store.assign(&name, value)?;
    }
    plain.set_default_trainability();
    plain.lora = LoraState::Merged;
    Ok(plain)
}
