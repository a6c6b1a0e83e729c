use alloc::format;
use alloc::vec::Vec;

use crate::dit::{ModelConfig, PromptLayout};
use crate::error::{Error, Result};
use crate::matching::MatchScope;
use crate::select::from_reference_numbering;

/// Default cache budget, 1 GiB.
pub const DEFAULT_BUDGET_BYTES: u64 = 1 << 30;

/// Every knob of an identity/frame run. Layer indices are 0-based and
/// step indices count from the noisiest step.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub layout: PromptLayout,
    pub mask_layers: Vec<usize>,
    pub tau_mask: usize,
    pub match_layers: Vec<usize>,
    pub tau_match: usize,
    pub kv_layers: Vec<usize>,
    /// First injected step; injection covers `tau_inject..steps`.
    pub tau_inject: usize,
    pub match_scope: MatchScope,
    /// Re-derive the frame mask before every injected step from the
    /// previous step's attention instead of once at `tau_mask`.
    pub recompute_mask_per_step: bool,
    /// Frame runs reuse the identity run's noise seed.
    pub share_seed: bool,
    pub kv_budget_bytes: Option<u64>,
    /// First sigma of the linear schedule.
    pub sigma_max: f32,
    pub scorer: alloc::string::String,
    /// `|L_kv|` picked by vital-layer selection.
    pub vital_k: usize,
}

impl RunConfig {
    pub fn desk8() -> Self {
        Self {
            model: ModelConfig::desk8(),
            layout: PromptLayout::new(4, 4, 4, 4).expect("valid layout"),
            mask_layers: (0..4).collect(),
            tau_mask: 10,
            match_layers: (0..4).collect(),
            tau_match: 10,
            kv_layers: (0..8).collect(),
            tau_inject: 11,
            match_scope: MatchScope::PerFrame,
            recompute_mask_per_step: false,
            share_seed: false,
            kv_budget_bytes: Some(DEFAULT_BUDGET_BYTES),
            sigma_max: 1.0,
            scorer: "variance-proxy".into(),
            vital_k: 4,
        }
    }

    /// Layer sets and steps of the reference model on the 42-layer profile.
    pub fn paper42() -> Self {
        const AES: [usize; 15] = [1, 2, 12, 13, 14, 15, 16, 18, 20, 21, 22, 24, 30, 35, 42];
        Self {
            model: ModelConfig::paper42(),
            mask_layers: from_reference_numbering(&(6..=20).collect::<Vec<_>>()),
            match_layers: from_reference_numbering(&(2..=16).collect::<Vec<_>>()),
            kv_layers: from_reference_numbering(&AES),
            vital_k: 15,
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

    /// `max(tau_mask, tau_match) + 1`.
    pub fn default_tau_inject(&self) -> usize {
        self.tau_mask.max(self.tau_match) + 1
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.layout.validate()?;
        if self.layout.text_len() != self.model.text_len {
            return Err(Error::Config(format!(
                "prompt layout has {} tokens, model expects {}",
                self.layout.text_len(),
                self.model.text_len
            )));
        }
        let depth = self.model.depth;
        for (name, set) in [
            ("mask", &self.mask_layers),
            ("match", &self.match_layers),
            ("kv", &self.kv_layers),
        ] {
            if let Some(l) = set.iter().find(|&&l| l >= depth) {
                return Err(Error::Config(format!(
                    "{name} layer {l} outside depth {depth}"
                )));
            }
        }
        if self.mask_layers.is_empty() || self.match_layers.is_empty() {
            return Err(Error::Config(
                "mask and match layer sets must be nonempty".into(),
            ));
        }
        let steps = self.model.steps;
        if self.tau_mask >= steps || self.tau_match >= steps {
            return Err(Error::Config(format!(
                "tau_mask {} / tau_match {} must be below {steps} steps",
                self.tau_mask, self.tau_match
            )));
        }
        if self.tau_inject < self.default_tau_inject() {
            return Err(Error::Config(format!(
                "injection cannot start at step {} before mask and map exist (step {})",
                self.tau_inject,
                self.default_tau_inject()
            )));
        }
        if self.sigma_max.is_nan() || self.sigma_max <= 0.0 {
            return Err(Error::Config("sigma_max must be positive".into()));
        }
        if self.vital_k > depth {
            return Err(Error::Config(format!(
                "vital_k {} exceeds depth {depth}",
                self.vital_k
            )));
        }
        Ok(())
    }

    /// Steps at which identity keys/values are cached and injected.
    pub fn injection_steps(&self) -> core::ops::Range<usize> {
        self.tau_inject.min(self.model.steps)..self.model.steps
    }
}
