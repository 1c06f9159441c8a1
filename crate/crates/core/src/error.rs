use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("input too short: got {got} samples/frames, need at least {min}")]
    InputTooShort { got: usize, min: usize },
    #[error("token id {0} is out of range for the vocabulary")]
    InvalidId(u32),
    #[error("target of length {target_len} needs at least {needed} frames, got {frames}")]
    InfeasibleAlignment { target_len: usize, needed: usize, frames: usize },
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("sequence of length {len} exceeds the {max} positions the model supports")]
    ContextOverflow { len: usize, max: usize },
    #[error("LoRA target not found: {0}")]
    InvalidTarget(String),
    #[error("adapters are already merged")]
    AlreadyMerged,
    #[error("shape mismatch for `{name}`: expected {expected:?}, got {got:?}")]
    ShapeMismatch { name: String, expected: alloc::vec::Vec<usize>, got: alloc::vec::Vec<usize> },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("non-finite loss at step {step} (utterances {utterances:?})")]
    NonFiniteLoss { step: usize, utterances: alloc::vec::Vec<String> },
}
