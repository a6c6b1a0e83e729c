use crate::error::Result;
use crate::tensor::Tensor;

/// Which quantities a hook wants to observe at one `(step, layer)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Capture {
    pub v2t: bool,
    pub attn_out: bool,
    pub kv: bool,
}

impl Capture {
    pub const NONE: Self = Self {
        v2t: false,
        attn_out: false,
        kv: false,
    };

    pub fn any(&self) -> bool {
        self.v2t || self.attn_out || self.kv
    }
}

/// Read-only view of one block's attention internals.
#[derive(Debug)]
pub struct LayerTap<'a> {
    pub step: usize,
    pub layer: usize,
    /// Head-averaged video-to-text weights, `THW × L_text`.
    pub v2t: Option<&'a Tensor>,
    /// Head-concatenated attention output of the video tokens, `THW × C`.
    pub attn_out: Option<&'a Tensor>,
    /// Keys before rotary encoding, `(THW + L_text) × C`.
    pub keys: Option<&'a Tensor>,
    /// Values, `(THW + L_text) × C`.
    pub values: Option<&'a Tensor>,
}

/// Extra key/value rows appended after the block's own sequence.
///
/// `keys` must already carry their rotary encoding. `mask` is the additive
/// mask over all `seq_len + keys.rows()` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Injection {
    pub keys: Tensor,
    pub values: Tensor,
    pub mask: Tensor,
}

/// Observation and injection points of the denoising loop.
pub trait Hooks {
    fn capture(&self, _step: usize, _layer: usize) -> Capture {
        Capture::NONE
    }

    fn observe(&mut self, _tap: &LayerTap<'_>) -> Result<()> {
        Ok(())
    }

    fn inject(&mut self, _step: usize, _layer: usize) -> Result<Option<Injection>> {
        Ok(None)
    }
}

/// Hooks that observe nothing and inject nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoHooks;

impl Hooks for NoHooks {}
