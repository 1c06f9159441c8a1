//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//! - magic `NUEA`, `u8` format version
//! - `u32` length + UTF-8 `key = value` config snapshot
//! - `u32` length + UTF-8 vocabulary characters in id order
//! - `u32` record count, then per record: `u32` length + UTF-8 name,
//!   `u8` rank, `rank × u32` dims, `f32` payload
//!
//! A full checkpoint holds every parameter; an adapter checkpoint holds only
//! LoRA tensors and loads over a matching base model.

use std::fs;
use std::path::Path;

use nue_core::config::{parse_lines, render, KeyValue, LoraConfig, ModelConfig, TrainConfig};
use nue_core::lora;
use nue_core::model::{AsrModel, LoraState};
use nue_core::tokenizer::Vocab;
use nue_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AsrError, IoContext, Result};

pub const MAGIC: [u8; 4] = *b"NUEA";
pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Full,
    Adapters,
}

impl Kind {
    fn as_str(self) -> &'static str {
        match self {
            Kind::Full => "full",
            Kind::Adapters => "adapters",
        }
    }
}

/// A decoded file before it is bound to a model.
#[derive(Clone, Debug)]
pub struct Contents {
    pub kind: Kind,
    pub model: ModelConfig,
    pub vocab: Vocab,
    pub lora: LoraState,
    pub train: Option<TrainConfig>,
    pub params: Vec<(String, Tensor<f32>)>,
}

/// A loaded full checkpoint.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub model: AsrModel<f32>,
    pub train: Option<TrainConfig>,
}

fn snapshot(kind: Kind, model: &AsrModel<f32>, train: Option<&TrainConfig>) -> String {
    let mut e = vec![("checkpoint.kind".to_string(), kind.as_str().to_string())];
    let state = match &model.lora {
        LoraState::Plain => "plain",
        LoraState::Attached(_) => "attached",
        LoraState::Merged => "merged",
    };
    e.push(("checkpoint.lora".into(), state.into()));
    e.extend(model.config.entries());
    if let LoraState::Attached(lc) = &model.lora {
        e.extend(lc.entries());
    }
    if let Some(t) = train {
        e.extend(t.entries());
    }
    render(&e)
}

fn encode(kind: Kind, model: &AsrModel<f32>, train: Option<&TrainConfig>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    let put_str = |out: &mut Vec<u8>, s: &str| {
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        out.extend_from_slice(s.as_bytes());
    };
    put_str(&mut out, &snapshot(kind, model, train));
    put_str(&mut out, &model.vocab.char_string());
    let adapters = lora::adapter_ids(model);
    let ids: Vec<_> = match kind {
        Kind::Full => model.store.ids().collect(),
        Kind::Adapters => adapters,
    };
    out.extend_from_slice(&(ids.len() as u32).to_le_bytes());
    for id in ids {
        let p = model.store.param(id);
        put_str(&mut out, &p.name);
        out.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Serialises every parameter of `model`.
pub fn to_bytes(model: &AsrModel<f32>, train: Option<&TrainConfig>) -> Vec<u8> {
    encode(Kind::Full, model, train)
}

/// Serialises only the adapter tensors of `model`.
pub fn adapters_to_bytes(model: &AsrModel<f32>, train: Option<&TrainConfig>) -> Result<Vec<u8>> {
    if !matches!(model.lora, LoraState::Attached(_)) {
        return Err(AsrError::Config("model carries no adapters to save".into()));
    }
    Ok(encode(Kind::Adapters, model, train))
}

pub fn save_checkpoint(
    model: &AsrModel<f32>,
    train: Option<&TrainConfig>,
    path: &Path,
) -> Result<()> {
    fs::write(path, to_bytes(model, train)).at(path)
}

pub fn save_adapters(
    model: &AsrModel<f32>,
    train: Option<&TrainConfig>,
    path: &Path,
) -> Result<()> {
    fs::write(path, adapters_to_bytes(model, train)?).at(path)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(AsrError::CorruptCheckpoint(format!(
                "truncated while reading {what}"
            )));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn str(&mut self, what: &str) -> Result<&'a str> {
        let n = self.u32(what)? as usize;
        std::str::from_utf8(self.take(n, what)?)
            .map_err(|_| AsrError::CorruptCheckpoint(format!("{what} is not valid UTF-8")))
    }
}

fn bad(what: impl std::fmt::Display) -> AsrError {
    AsrError::CorruptCheckpoint(what.to_string())
}

/// Parses checkpoint bytes without building a model.
pub fn decode(bytes: &[u8]) -> Result<Contents> {
    let mut r = Reader { buf: bytes };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(AsrError::IncompatibleCheckpoint(format!(
            "bad magic {magic:?}"
        )));
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(AsrError::IncompatibleCheckpoint(format!(
            "format version {version}, expected {VERSION}"
        )));
    }
    let config = r.str("config")?;
    let mut kind = None;
    let mut state = None;
    let mut model = ModelConfig::default();
    let mut lc = LoraConfig::default();
    let mut train = TrainConfig::default();
    let mut has_train = false;
    for (k, v) in parse_lines(config).map_err(bad)? {
        match k.as_str() {
            "checkpoint.kind" => {
                kind = Some(match v.as_str() {
                    "full" => Kind::Full,
                    "adapters" => Kind::Adapters,
                    _ => return Err(bad(format!("unknown checkpoint kind `{v}`"))),
                })
            }
            "checkpoint.lora" => state = Some(v),
            _ if k.starts_with("train.") => {
                has_train = true;
                if !train.set_key(&k, &v).map_err(bad)? {
                    return Err(bad(format!("unknown config key `{k}`")));
                }
            }
            _ => {
                if !(model.set_key(&k, &v).map_err(bad)? || lc.set_key(&k, &v).map_err(bad)?) {
                    return Err(bad(format!("unknown config key `{k}`")));
                }
            }
        }
    }
    let kind = kind.ok_or_else(|| bad("config has no checkpoint kind"))?;
    let lora = match state.as_deref() {
        Some("plain") => LoraState::Plain,
        Some("attached") => LoraState::Attached(lc),
        Some("merged") => LoraState::Merged,
        _ => return Err(bad("config has no valid adapter state")),
    };
    let chars: Vec<char> = r.str("vocabulary")?.chars().collect();
    let vocab = Vocab::from_chars(chars);
    let n = r.u32("record count")? as usize;
    let mut params = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let name = r.str("parameter name")?.to_string();
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dims")? as usize);
        }
        let len = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| bad("dims overflow"))?;
        let payload = r.take(
            len.checked_mul(4).ok_or_else(|| bad("dims overflow"))?,
            &name,
        )?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.push((name, Tensor::new(dims, data).map_err(bad)?));
    }
    if !r.buf.is_empty() {
        return Err(bad(format!("{} trailing bytes", r.buf.len())));
    }
    Ok(Contents {
        kind,
        model,
        vocab,
        lora,
        train: has_train.then_some(train),
        params,
    })
}

/// Rebuilds the model a full checkpoint describes.
pub fn from_bytes(bytes: &[u8]) -> Result<Loaded> {
    let c = decode(bytes)?;
    if c.kind != Kind::Full {
        return Err(AsrError::Config(
            "this is an adapter checkpoint; load it over a base model".into(),
        ));
    }
    let mut model = AsrModel::<f32>::new(c.model, c.vocab).map_err(bad)?;
    if let LoraState::Attached(lc) = &c.lora {
        lora::attach(&mut model, lc, &mut ChaCha8Rng::seed_from_u64(0)).map_err(bad)?;
    }
    if c.params.len() != model.store.len() {
        return Err(bad(format!(
            "{} parameter records for a model with {}",
            c.params.len(),
            model.store.len()
        )));
    }
    for (name, value) in c.params {
        let id = model
            .store
            .id(&name)
            .ok_or_else(|| bad(format!("unknown parameter `{name}`")))?;
        let expected = model.store.get(id).shape().to_vec();
        if value.shape() != expected.as_slice() {
            return Err(AsrError::ShapeMismatch {
                name,
                expected,
                got: value.shape().to_vec(),
            });
        }
        *model.store.get_mut(id) = value;
    }
    match c.lora {
        LoraState::Merged => {
            model.set_default_trainability();
            model.lora = LoraState::Merged;
        }
        LoraState::Plain => model.set_default_trainability(),
        LoraState::Attached(_) => {}
    }
    Ok(Loaded {
        model,
        train: c.train,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Loaded> {
    from_bytes(&fs::read(path).at(path)?)
}

/// Attaches the adapters in `bytes` to `base`, whose own weights stay
/// untouched.
pub fn apply_adapters(base: &mut AsrModel<f32>, bytes: &[u8]) -> Result<()> {
    let c = decode(bytes)?;
    let LoraState::Attached(lc) = (match c.kind {
        Kind::Adapters => c.lora,
        Kind::Full => {
            return Err(AsrError::Config(
                "expected an adapter checkpoint, found a full one".into(),
            ))
        }
    }) else {
        return Err(bad("adapter checkpoint without adapter config"));
    };
    if c.vocab != base.vocab {
        return Err(AsrError::ShapeMismatch {
            name: "vocabulary".into(),
            expected: vec![base.vocab.lm_size()],
            got: vec![c.vocab.lm_size()],
        });
    }
    // Adapter shapes must fit the base linears they wrap.
    for (name, value) in &c.params {
        let (layer, part) = name
            .rsplit_once('.')
            .filter(|(_, p)| *p == "lora_a" || *p == "lora_b")
            .ok_or_else(|| bad(format!("`{name}` is not an adapter tensor")))?;
        let weight = format!("{layer}.weight");
        let base_shape = base
            .store
            .id(&weight)
            .map(|id| base.store.get(id).shape().to_vec());
        let got = value.shape().to_vec();
        let expected = match (&base_shape, got.as_slice()) {
            (Some(w), [r, _]) if part == "lora_a" && w.len() == 2 => vec![*r, w[1]],
            (Some(w), [_, r]) if part == "lora_b" && w.len() == 2 => vec![w[0], *r],
            (Some(w), _) => w.clone(),
            (None, _) => Vec::new(),
        };
        if expected != got || got.len() != 2 || got[if part == "lora_a" { 0 } else { 1 }] != lc.rank
        {
            return Err(AsrError::ShapeMismatch {
                name: name.clone(),
                expected,
                got,
            });
        }
    }
    let mut model = base.clone();
    lora::attach(&mut model, &lc, &mut ChaCha8Rng::seed_from_u64(0))?;
    let names = lora::adapter_names(&model);
    if names.len() != c.params.len() {
        return Err(bad(format!(
            "{} adapter records for {} adapter tensors",
            c.params.len(),
            names.len()
        )));
    }
    for (name, value) in c.params {
        if !names.contains(&name) {
            return Err(bad(format!("`{name}` is not an adapter of this model")));
        }
        model.store.assign(&name, value)?;
    }
    *base = model;
    Ok(())
}

pub fn load_adapters(base: &mut AsrModel<f32>, path: &Path) -> Result<()> {
    apply_adapters(base, &fs::read(path).at(path)?)
}
