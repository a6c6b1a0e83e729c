use alloc::format;

use crate::error::{Error, Result};
use crate::numerics::RopeSpec;
use crate::tensor::GridDims;

/// Scalar knobs shaping the toy model's weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dynamics {
    /// Multiplier on the query projection; sharpens attention.
    pub logit_gain: f32,
    /// Residual gate of the attention branch.
    pub attn_gate: f32,
    /// Residual gate of the MLP branch.
    pub mlp_gate: f32,
    /// Scale of the random perturbation around identity projections.
    pub jitter: f32,
    /// RMS magnitude of each layer's watermark bias before gating.
    pub watermark: f32,
    /// Content gain of query/key channels rotating at least one radian per
    /// grid step; those channels then mostly carry position.
    pub fast_rotary_gain: f32,
}

impl Default for Dynamics {
    fn default() -> Self {
        Self {
            logit_gain: 1.6,
            attn_gate: 0.5,
            mlp_gate: 0.1,
            jitter: 0.25,
            watermark: 3.0,
            fast_rotary_gain: 0.2,
        }
    }
}

/// Shape, seed and schedule length of a toy model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub depth: usize,
    pub channels: usize,
    pub heads: usize,
    pub grid: GridDims,
    pub text_len: usize,
    pub steps: usize,
    pub seed: u64,
    pub rope_axis_ratio: [usize; 3],
    pub rope_base: f64,
    pub dynamics: Dynamics,
}

impl ModelConfig {
    /// Fast desk-scale profile used by the tests.
    pub fn desk8() -> Self {
        Self {
            depth: 8,
            channels: 48,
            heads: 2,
            grid: GridDims::new(4, 8, 8),
            text_len: 16,
            steps: 50,
            seed: 0xbac4,
            rope_axis_ratio: [1, 1, 1],
            rope_base: 10_000.0,
            dynamics: Dynamics::default(),
        }
    }

    /// 42-layer profile whose layer axis mirrors the reference model.
    pub fn paper42() -> Self {
        Self {
            depth: 42,
            ..Self::desk8()
        }
    }

    pub fn profile(name: &str) -> Option<Self> {
        match name {
            "desk8" => Some(Self::desk8()),
            "paper42" => Some(Self::paper42()),
            _ => None,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn rope(&self) -> RopeSpec {
        RopeSpec {
            head_dim: self.head_dim(),
            axis_ratio: self.rope_axis_ratio,
            base: self.rope_base,
        }
    }

    /// Length of the joint sequence, `T·H·W + L_text`.
    pub fn seq_len(&self) -> usize {
        self.grid.len() + self.text_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.grid.is_empty() {
            return Err(Error::Config("latent grid must be nonempty".into()));
        }
        self.rope().group_sizes()?;
        Ok(())
    }

    /// FNV-1a of the debug rendering; identifies the config in analysis outputs.
    pub fn fingerprint(&self) -> u64 {
        let text = format!("{self:?}");
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for b in text.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }
}
