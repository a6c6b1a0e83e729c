//! Miniature video diffusion transformer with instrumented attention.
//!
//! The denoiser runs full self-attention over the joint sequence
//! `[video tokens (T·H·W) | text tokens (L_text)]`. Every block exposes its
//! head-averaged video-to-text weights, attention outputs and pre-rotary
//! keys/values to a [`Hooks`] implementation, which may also append extra
//! key/value rows under an additive mask.

mod config;
mod decode;
mod hooks;
mod model;
pub(crate) mod prompt;
mod schedule;
mod trace;

pub use config::{Dynamics, ModelConfig};
pub use decode::{DecodedVideo, Frame, PatchDecoder};
pub use hooks::{Capture, Hooks, Injection, LayerTap, NoHooks};
pub use model::{denoise, denoise_traced, Init, Model};
pub use prompt::{embed_prompt, PromptLayout, Signatures};
pub use schedule::StepSchedule;
pub use trace::{AttentionTrace, CapturePlan, CellSet, Field, TraceKey, TraceRecorder};
