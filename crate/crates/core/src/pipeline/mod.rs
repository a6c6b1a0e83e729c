//! End-to-end orchestration: identity run, cached keys/values, consistent
//! frame runs, planted-scene ground truth and desk-scale evaluation.

mod config;
mod eval;
mod run;
mod scene;
mod study;

pub use config::{RunConfig, DEFAULT_BUDGET_BYTES};
pub use eval::{psnr_bg, DECODED_MAX};
pub use run::{
    run_frame, run_group, run_identity, FrameDiagnostics, FrameOutcome, FrameReport, Generation,
    GroupReport, GroupSpec, IdentityBundle, InjectionRecord, Prompt, VanillaReport,
};
pub use scene::{make_scene, PlantedScene, Rect, SceneParams, SyntheticScene, Variant};
pub use study::{mask_grid, match_grid, mean_grid, noise_group, planted_group, IDENTITY_ACTION};
