//! Standard generation groups and the traced layer × step analyses.

use alloc::vec::Vec;

use super::config::RunConfig;
use super::run::{Generation, GroupSpec, Prompt};
use super::scene::{PlantedScene, Variant};
use crate::dit::{denoise_traced, CapturePlan, CellSet, Init, Model, Signatures, StepSchedule};
use crate::error::{Error, Result};
use crate::mask::sweep_mask_grid;
use crate::matching::sweep_match_grid;
use crate::select::AnalysisGrid;

/// Action seed of the identity prompt; frame `i` uses `IDENTITY_ACTION + 1 + i`.
pub const IDENTITY_ACTION: u64 = 100;

fn prompt(signatures: &Signatures, seed: u64, action_seed: u64) -> Prompt {
    Prompt {
        signatures: Some(signatures.clone()),
        prompt_seed: seed,
        action_seed,
    }
}

fn identity_latent_seed(seed: u64) -> u64 {
    1000 + seed
}

fn frame_latent_seed(seed: u64, i: usize) -> u64 {
    2000 + 100 * i as u64 + seed
}

/// Identity from the scene's identity variant, `frames` runs from its frame
/// variant; all prompts share the scene signatures and differ in action.
pub fn planted_group(scene: &PlantedScene, seed: u64, frames: usize, ablate: bool) -> GroupSpec {
    let sig = &scene.scene.signatures;
    GroupSpec {
        identity: Generation {
            prompt: prompt(sig, seed, IDENTITY_ACTION),
            init: Init::Latent(
                scene
                    .scene
                    .latent(Variant::Identity, identity_latent_seed(seed)),
            ),
        },
        frames: (0..frames)
            .map(|i| Generation {
                prompt: prompt(sig, seed, IDENTITY_ACTION + 1 + i as u64),
                init: Init::Latent(
                    scene
                        .scene
                        .latent(Variant::Frame, frame_latent_seed(seed, i)),
                ),
            })
            .collect(),
        ablate,
    }
}

/// Pure-noise group with shared signatures drawn from `seed`.
pub fn noise_group(channels: usize, seed: u64, frames: usize, ablate: bool) -> GroupSpec {
    let sig = Signatures::random(seed, channels);
    GroupSpec {
        identity: Generation {
            prompt: prompt(&sig, seed, IDENTITY_ACTION),
            init: Init::Noise(identity_latent_seed(seed)),
        },
        frames: (0..frames)
            .map(|i| Generation {
                prompt: prompt(&sig, seed, IDENTITY_ACTION + 1 + i as u64),
                init: Init::Noise(frame_latent_seed(seed, i)),
            })
            .collect(),
        ablate,
    }
}

fn traced(
    model: &Model,
    cfg: &RunConfig,
    generation: &Generation,
    plan: CapturePlan,
) -> Result<crate::dit::AttentionTrace> {
    let text = generation.prompt.embed(cfg)?;
    let schedule = StepSchedule::linear(cfg.model.steps, cfg.sigma_max)?;
    Ok(denoise_traced(model, &text, &schedule, &generation.init, plan, None)?.1)
}

fn all_layers(cfg: &RunConfig) -> CellSet {
    CellSet::all(cfg.model.depth)
}

/// Mask IoU of the identity run of `planted_group(scene, seed, ..)` against
/// the planted identity mask, at every `(step, layer)`.
pub fn mask_grid(
    model: &Model,
    cfg: &RunConfig,
    scene: &PlantedScene,
    seed: u64,
) -> Result<AnalysisGrid> {
    let group = planted_group(scene, seed, 0, false);
    let plan = CapturePlan {
        v2t: all_layers(cfg),
        ..CapturePlan::nothing()
    };
    let trace = traced(model, cfg, &group.identity, plan)?;
    let m = &cfg.model;
    Ok(
        sweep_mask_grid(&trace, &cfg.layout, &scene.identity_mask, m.steps, m.depth)?
            .with_fingerprint(m.fingerprint()),
    )
}

/// Matching MSE over the frame character between the identity run and the
/// first frame run, at every `(step, layer)`.
pub fn match_grid(
    model: &Model,
    cfg: &RunConfig,
    scene: &PlantedScene,
    seed: u64,
) -> Result<AnalysisGrid> {
    let group = planted_group(scene, seed, 1, false);
    let plan = CapturePlan {
        attn_out: all_layers(cfg),
        ..CapturePlan::nothing()
    };
    let id = traced(model, cfg, &group.identity, plan.clone())?;
    let frm = traced(model, cfg, &group.frames[0], plan)?;
    let gt = crate::matching::MatchMap::new(
        scene.map.grid,
        cfg.match_scope,
        scene.map.target().to_vec(),
    )?;
    let m = &cfg.model;
    Ok(
        sweep_match_grid(&frm, &id, &gt, Some(&scene.frame_mask), m.steps, m.depth)?
            .with_fingerprint(m.fingerprint()),
    )
}

/// Cellwise mean of equally shaped grids.
pub fn mean_grid(grids: &[AnalysisGrid]) -> Result<AnalysisGrid> {
    let first = grids
        .first()
        .ok_or_else(|| Error::Config("no grids to average".into()))?;
    if grids
        .iter()
        .any(|g| (g.steps, g.depth) != (first.steps, first.depth))
    {
        return Err(Error::Config("grids to average differ in shape".into()));
    }
    let n = grids.len() as f64;
    let values: Vec<f64> = (0..first.values().len())
        .map(|i| grids.iter().map(|g| g.values()[i]).sum::<f64>() / n)
        .collect();
    Ok(
        AnalysisGrid::new(first.steps, first.depth, first.metric.clone(), values)?
            .with_fingerprint(first.fingerprint),
    )
}
