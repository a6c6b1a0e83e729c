//! Instrumented miniature video diffusion transformer.
//!
//! The crate is `no_std` (with `alloc`) and contains every algorithmic piece:
//! dense attention kernels with additive masking, 3-axis rotary encoding, a
//! deterministic toy DiT whose denoising loop exposes per-layer attention
//! internals, foreground-mask extraction from video-to-text attention,
//! cross-generation point matching from attention outputs, vital-layer
//! selection by layer skipping, and identity key/value injection.
//!
//! File formats, exports and the command-line driver live in the `bachkit`
//! crate.

#![cfg_attr(not(test), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod dit;
pub mod error;
pub mod inject;
pub mod mask;
pub mod matching;
pub mod numerics;
pub mod pipeline;
mod rng;
pub mod select;
pub mod tensor;
pub mod vital;

pub use error::{Error, Result};
pub use tensor::{GridDims, GridPosition, Tensor};
