//! Named parameter storage shared by every model component.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<R = f32> {
    pub name: String,
    pub value: Tensor<R>,
    pub trainable: bool,
}

/// Ordered store of named tensors. Insertion order is the canonical order used
/// by checkpoints and the optimizer.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<R = f32> {
    params: Vec<Param<R>>,
    by_name: BTreeMap<String, usize>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<R>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name `{name}`");
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, trainable: true });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<R> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<R> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<R> {
        &self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.params.iter_mut().for_each(|p| p.trainable = trainable);
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<R>)> + '_ {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replaces a tensor by name, checking that the shape is unchanged.
    pub fn assign(&mut self, name: &str, value: Tensor<R>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::UnknownParameter(name.into()))?;
        let slot = &mut self.params[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                name: name.into(),
                expected: slot.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    /// Drops the named parameters, preserving the order of the rest.
    /// Returns the id remapping (old index → new id).
    pub fn remove(&mut self, names: &[&str]) -> Vec<Option<ParamId>> {
        let mut remap = Vec::with_capacity(self.params.len());
        let mut kept = Vec::with_capacity(self.params.len());
        for p in self.params.drain(..) {
            if names.contains(&p.name.as_str()) {
                remap.push(None);
            } else {
                remap.push(Some(ParamId(kept.len())));
                kept.push(p);
            }
        }
        self.params = kept;
        self.by_name = self.params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        remap
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), trainable: p.trainable })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

impl ParamStore<f32> {
    /// SHA-256 over names, shapes and little-endian payloads of the selected
    /// parameters, in store order.
    pub fn fingerprint(&self, mut select: impl FnMut(&Param<f32>) -> bool) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| select(p)) {
            h.update(p.name.as_bytes());
            h.update([0u8]);
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}
