#![allow(dead_code)]


use nue_asr::runconfig::RunConfig;
use nue_core::config::ModelConfig;
use nue_core::model::AsrModel;
use nue_core::tokenizer::Vocab;

/// Fresh per-test scratch directory.
pub fn scratch(name: &str) -> tempfile::TempDir {
    tempfile::Builder::new()
        .prefix(&format!("nue-asr-{name}-"))
        .tempdir()
        .unwrap()
}

pub const TINY_CONFIG: &str = "\
encoder.conv_channels = 4,4,4,4,4,4,4
encoder.n_layers = 1
encoder.d_model = 16
encoder.n_heads = 2
encoder.d_ff = 32
lm.n_layers = 1
lm.d_model = 16
lm.n_heads = 2
lm.d_ff = 32
train.epochs = 1
train.batch_size = 4
train.grad_accum = 1
train.peak_lr = 0.002
decode.max_new_tokens = 8
";

pub fn tiny_config() -> ModelConfig {
    let mut rc = RunConfig::default();
    rc.apply_text(TINY_CONFIG).unwrap();
    rc.model
}

pub fn tiny_model(seed: u64) -> AsrModel<f32> {
    let mut cfg = tiny_config();
    cfg.seed = seed;
    AsrModel::new(cfg, Vocab::build(["abcdefgh"]).unwrap()).unwrap()
}
