use alloc::string::String;

/// Errors produced by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("non-finite input")]
    NonFinite,
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error("channel count {channels} not divisible into rotary groups ({reason})")]
    RopeGroups {
        channels: usize,
        reason: &'static str,
    },
    #[error("invalid prompt layout: {0}")]
    Layout(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing trace entry: step {step}, layer {layer}, field {field}")]
    MissingTrace {
        step: usize,
        layer: usize,
        field: &'static str,
    },
    #[error("cache budget exceeded admitting step {step}, layer {layer}: {needed} bytes needed, budget {budget}")]
    CacheBudgetExceeded {
        step: usize,
        layer: usize,
        needed: u64,
        budget: u64,
    },
    #[error("cache entry (step {step}, layer {layer}) is outside the injection schedule")]
    NotScheduled { step: usize, layer: usize },
    #[error("missing cache entry: step {step}, layer {layer}")]
    MissingCache { step: usize, layer: usize },
    #[error("hook contract violation: {0}")]
    HookContract(String),
    #[error("index {index} out of range for length {len}")]
    OutOfRange { index: usize, len: usize },
    #[error("empty background region")]
    EmptyBackground,
    #[error("match scope mismatch")]
    ScopeMismatch,
    #[error("rectangle out of bounds: {0}")]
    OutOfBounds(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_err(
    context: &'static str,
    expected: impl core::fmt::Debug,
    got: impl core::fmt::Debug,
) -> Error {
    Error::Shape {
        context,
        expected: alloc::format!("{expected:?}"),
        got: alloc::format!("{got:?}"),
    }
}
