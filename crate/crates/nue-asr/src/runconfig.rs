//! `key = value` run configuration over every config section.

use std::path::Path;

use nue_core::config::{parse_lines, DecodeConfig, KeyValue, LoraConfig, ModelConfig, TrainConfig};

use crate::error::{AsrError, IoContext, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub lora: LoraConfig,
}

impl RunConfig {
    /// Sets one key; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let known = self.model.set_key(key, value)?
            || self.train.set_key(key, value)?
            || self.decode.set_key(key, value)?
            || self.lora.set_key(key, value)?;
        if !known {
            return Err(AsrError::Config(format!("unknown key `{key}`")));
        }
        Ok(())
    }

    /// Applies every line of a config text, in order.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_lines(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).at(path)?;
        self.apply_text(&text)
            .map_err(|e| AsrError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| AsrError::Config(format!("override `{kv}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let mut e = self.model.entries();
        e.extend(self.train.entries());
        e.extend(self.decode.entries());
        e.extend(self.lora.entries());
        e
    }
}
