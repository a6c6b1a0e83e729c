use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Noise levels `σ_0 > σ_1 > … > σ_steps = 0`.
///
/// Step `s` denoises from `sigmas[s]` to `sigmas[s + 1]`; `s = 0` is the
/// noisiest step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSchedule {
    sigmas: Vec<f32>,
}

impl StepSchedule {
    /// Linear ramp from `sigma_max` down to zero.
    pub fn linear(steps: usize, sigma_max: f32) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let sigmas = (0..=steps)
            .map(|s| sigma_max * (steps - s) as f32 / steps as f32)
            .collect();
        Self::new(sigmas)
    }

    pub fn new(sigmas: Vec<f32>) -> Result<Self> {
        if sigmas.len() < 2 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if *sigmas.last().unwrap() != 0.0 {
            return Err(Error::Config("schedule must end at sigma 0".into()));
        }
        if sigmas
            .windows(2)
            .any(|w| w[0].partial_cmp(&w[1]) != Some(core::cmp::Ordering::Greater))
        {
            return Err(Error::Config("sigmas must decrease strictly".into()));
        }
        Ok(Self { sigmas })
    }

    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn sigma(&self, step: usize) -> f32 {
        self.sigmas[step]
    }

    pub fn sigmas(&self) -> &[f32] {
        &self.sigmas
    }
}
