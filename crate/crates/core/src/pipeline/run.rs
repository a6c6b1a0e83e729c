use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use super::config::RunConfig;
use super::eval::psnr_bg;
use crate::dit::{
    denoise, embed_prompt, AttentionTrace, Capture, DecodedVideo, Field, Hooks, Init, Injection,
    LayerTap, Model, PatchDecoder, Signatures, StepSchedule,
};
use crate::error::{Error, Result};
use crate::inject::{
    build_injection, derive_region_indices, entry_bytes, injection, map_identity_indices, KvCache,
    RegionIndices,
};
use crate::mask::{aggregate_mask, ForegroundMask};
use crate::matching::{aggregate_similarity, match_argmax, MatchMap};
use crate::tensor::Tensor;

/// Text conditioning of one generation.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    /// Background/character signatures shared by a prompt group; `None`
    /// draws unrelated segments from `prompt_seed`.
    pub signatures: Option<Signatures>,
    pub prompt_seed: u64,
    pub action_seed: u64,
}

impl Prompt {
    pub fn embed(&self, cfg: &RunConfig) -> Result<Tensor> {
        embed_prompt(
            &cfg.layout,
            cfg.model.channels,
            self.signatures.as_ref(),
            self.prompt_seed,
            self.action_seed,
        )
    }
}

/// A prompt together with its starting latent.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub prompt: Prompt,
    pub init: Init,
}

/// Everything a frame run needs from the identity run.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityBundle {
    pub fingerprint: u64,
    /// Clean latent, `T×H×W×C`.
    pub latent: Tensor,
    pub cache: KvCache,
    pub mask: ForegroundMask,
    /// Head-concatenated attention outputs at `(tau_match, l ∈ match_layers)`
    /// and video-to-text weights at `(tau_mask, l ∈ mask_layers)`.
    pub trace: AttentionTrace,
}

/// Identity-run hooks: capture the mask and matching inputs, fill the cache.
struct IdentityHooks<'a> {
    cfg: &'a RunConfig,
    trace: AttentionTrace,
    cache: KvCache,
}

impl Hooks for IdentityHooks<'_> {
    fn capture(&self, step: usize, layer: usize) -> Capture {
        Capture {
            v2t: step == self.cfg.tau_mask && self.cfg.mask_layers.contains(&layer),
            attn_out: step == self.cfg.tau_match && self.cfg.match_layers.contains(&layer),
            kv: self.cache.is_scheduled(step, layer),
        }
    }

    fn observe(&mut self, tap: &LayerTap<'_>) -> Result<()> {
        let want = self.capture(tap.step, tap.layer);
        if let (true, Some(w)) = (want.v2t, tap.v2t) {
            self.trace
                .insert(tap.step, tap.layer, Field::V2t, w.clone());
        }
        if let (true, Some(o)) = (want.attn_out, tap.attn_out) {
            self.trace
                .insert(tap.step, tap.layer, Field::AttnOut, o.clone());
        }
        if let (true, Some(k), Some(v)) = (want.kv, tap.keys, tap.values) {
            self.cache.put(tap.step, tap.layer, k.clone(), v.clone())?;
        }
        Ok(())
    }
}

fn schedule(cfg: &RunConfig) -> Result<StepSchedule> {
    StepSchedule::linear(cfg.model.steps, cfg.sigma_max)
}

fn check_model(model: &Model, cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    if model.config() != &cfg.model {
        return Err(Error::Config(
            "model was built from a different configuration".into(),
        ));
    }
    Ok(())
}

/// Fails before any compute when the scheduled cache cannot fit the budget,
/// naming the first cell that would overflow.
fn preflight_budget(cache: &KvCache) -> Result<()> {
    let Some(budget) = cache.budget() else {
        return Ok(());
    };
    let per = entry_bytes(cache.rows(), cache.channels());
    let mut needed = 0u64;
    for &step in cache.steps() {
        for &layer in cache.layers() {
            needed += per;
            if needed > budget {
                return Err(Error::CacheBudgetExceeded {
                    step,
                    layer,
                    needed,
                    budget,
                });
            }
        }
    }
    Ok(())
}

/// Denoises the identity generation, caching keys/values over
/// `injection_steps × kv_layers` and extracting its foreground mask.
pub fn run_identity(
    model: &Model,
    cfg: &RunConfig,
    generation: &Generation,
) -> Result<IdentityBundle> {
    check_model(model, cfg)?;
    let text = generation.prompt.embed(cfg)?;
    let cache = KvCache::new(
        cfg.injection_steps(),
        cfg.kv_layers.iter().copied(),
        cfg.model.seq_len(),
        cfg.model.channels,
        cfg.kv_budget_bytes,
    );
    preflight_budget(&cache)?;
    let mut hooks = IdentityHooks {
        cfg,
        trace: AttentionTrace::new(),
        cache,
    };
    let latent = denoise(
        model,
        &text,
        &schedule(cfg)?,
        &generation.init,
        &mut hooks,
        None,
    )?;
    let mask = aggregate_mask(
        &hooks.trace,
        cfg.tau_mask,
        &cfg.mask_layers,
        &cfg.layout,
        cfg.model.grid,
    )?;
    Ok(IdentityBundle {
        fingerprint: cfg.model.fingerprint(),
        latent,
        cache: hooks.cache,
        mask,
        trace: hooks.trace,
    })
}

/// One injected `(step, layer)` cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InjectionRecord {
    pub step: usize,
    pub layer: usize,
    pub fg_tokens: usize,
    pub bg_tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameDiagnostics {
    /// Frame mask used by the last injected step (the `tau_mask` mask
    /// unless recomputed per step).
    pub mask: ForegroundMask,
    pub map: MatchMap,
    pub injections: Vec<InjectionRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutcome {
    /// Clean latent, `T×H×W×C`.
    pub latent: Tensor,
    pub diagnostics: FrameDiagnostics,
}

struct FrameHooks<'a> {
    cfg: &'a RunConfig,
    bundle: &'a IdentityBundle,
    trace: AttentionTrace,
    mask: Option<(usize, ForegroundMask)>,
    map: Option<MatchMap>,
    regions: Option<(usize, RegionIndices)>,
    log: Vec<InjectionRecord>,
}

impl FrameHooks<'_> {
    fn wants_v2t(&self, step: usize) -> bool {
        step == self.cfg.tau_mask
            || (self.cfg.recompute_mask_per_step && step + 1 >= self.cfg.tau_inject)
    }

    /// Step whose attention defines the frame mask used at `step`.
    fn mask_source(&self, step: usize) -> usize {
        if self.cfg.recompute_mask_per_step {
            step - 1
        } else {
            self.cfg.tau_mask
        }
    }

    fn ensure_map(&mut self) -> Result<()> {
        if self.map.is_none() {
            let cfg = self.cfg;
            let s = aggregate_similarity(
                &self.trace,
                &self.bundle.trace,
                cfg.tau_match,
                &cfg.match_layers,
                cfg.model.grid,
                cfg.match_scope,
            )?;
            self.map = Some(match_argmax(&s));
        }
        Ok(())
    }

    fn ensure_mask(&mut self, source: usize) -> Result<()> {
        if self.mask.as_ref().map(|(s, _)| *s) != Some(source) {
            let cfg = self.cfg;
            let m = aggregate_mask(
                &self.trace,
                source,
                &cfg.mask_layers,
                &cfg.layout,
                cfg.model.grid,
            )?;
            self.mask = Some((source, m));
            self.regions = None;
        }
        Ok(())
    }

    fn regions(&mut self, step: usize) -> Result<RegionIndices> {
        self.ensure_map()?;
        let source = self.mask_source(step);
        self.ensure_mask(source)?;
        if self.regions.is_none() {
            let (_, m_frm) = self.mask.as_ref().expect("mask computed above");
            let (fg, bg) = derive_region_indices(&self.bundle.mask, m_frm)?;
            let idx =
                map_identity_indices(self.map.as_ref().expect("map computed above"), &fg, &bg)?;
            self.regions = Some((source, idx));
        }
        Ok(self
            .regions
            .as_ref()
            .expect("regions computed above")
            .1
            .clone())
    }
}

impl Hooks for FrameHooks<'_> {
    fn capture(&self, step: usize, layer: usize) -> Capture {
        Capture {
            v2t: self.wants_v2t(step) && self.cfg.mask_layers.contains(&layer),
            attn_out: step == self.cfg.tau_match && self.cfg.match_layers.contains(&layer),
            kv: false,
        }
    }

    fn observe(&mut self, tap: &LayerTap<'_>) -> Result<()> {
        let want = self.capture(tap.step, tap.layer);
        if let (true, Some(w)) = (want.v2t, tap.v2t) {
            self.trace
                .insert(tap.step, tap.layer, Field::V2t, w.clone());
        }
        if let (true, Some(o)) = (want.attn_out, tap.attn_out) {
            self.trace
                .insert(tap.step, tap.layer, Field::AttnOut, o.clone());
        }
        Ok(())
    }

    fn inject(&mut self, step: usize, layer: usize) -> Result<Option<Injection>> {
        let cfg = self.cfg;
        if step < cfg.tau_inject || !cfg.kv_layers.contains(&layer) {
            return Ok(None);
        }
        let entry = self.bundle.cache.get(step, layer)?;
        let idx = self.regions(step)?;
        self.log.push(InjectionRecord {
            step,
            layer,
            fg_tokens: idx.frm_fg.len(),
            bg_tokens: idx.frm_bg.len(),
        });
        if idx.frm_fg.is_empty() && idx.frm_bg.is_empty() {
            return Ok(None);
        }
        let blocks = build_injection(entry, &idx, cfg.model.grid, &cfg.model.rope())?;
        let (_, m_frm) = self.mask.as_ref().expect("regions imply a mask");
        injection(blocks, m_frm, &cfg.layout).map(Some)
    }
}

/// Denoises a frame generation, injecting the identity run's keys/values at
/// `kv_layers` from `tau_inject` on.
pub fn run_frame(
    model: &Model,
    cfg: &RunConfig,
    generation: &Generation,
    bundle: &IdentityBundle,
) -> Result<FrameOutcome> {
    check_model(model, cfg)?;
    if bundle.fingerprint != cfg.model.fingerprint()
        || *bundle.cache.layers() != cfg.kv_layers.iter().copied().collect::<BTreeSet<_>>()
        || bundle
            .cache
            .steps()
            .iter()
            .copied()
            .ne(cfg.injection_steps())
    {
        return Err(Error::Config(
            "identity bundle was produced under a different configuration".into(),
        ));
    }
    let text = generation.prompt.embed(cfg)?;
    let mut hooks = FrameHooks {
        cfg,
        bundle,
        trace: AttentionTrace::new(),
        mask: None,
        map: None,
        regions: None,
        log: Vec::new(),
    };
    let latent = denoise(
        model,
        &text,
        &schedule(cfg)?,
        &generation.init,
        &mut hooks,
        None,
    )?;
    if hooks.mask.is_none() {
        // Nothing was injected; report the mask of the capture step.
        hooks.ensure_mask(cfg.tau_mask)?;
    }
    hooks.ensure_map()?;
    let (_, mask) = hooks.mask.expect("computed above");
    Ok(FrameOutcome {
        latent,
        diagnostics: FrameDiagnostics {
            mask,
            map: hooks.map.expect("computed above"),
            injections: hooks.log,
        },
    })
}

/// One identity generation and its frame generations.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSpec {
    pub identity: Generation,
    pub frames: Vec<Generation>,
    /// Also run every frame without injection.
    pub ablate: bool,
}

impl GroupSpec {
    /// Frame generation `i`; with `share_seed` a noise start takes the
    /// identity run's noise seed.
    pub fn frame(&self, i: usize, share_seed: bool) -> Result<Generation> {
        let generation = self.frames.get(i).ok_or(Error::OutOfRange {
            index: i,
            len: self.frames.len(),
        })?;
        Ok(match (&self.identity.init, &generation.init, share_seed) {
            (Init::Noise(seed), Init::Noise(_), true) => Generation {
                init: Init::Noise(*seed),
                ..generation.clone()
            },
            _ => generation.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameReport {
    pub outcome: FrameOutcome,
    pub video: DecodedVideo,
    /// Pixels that are background in both the identity and this frame run.
    pub background: ForegroundMask,
    pub psnr_bg: f64,
    pub vanilla: Option<VanillaReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VanillaReport {
    pub latent: Tensor,
    pub video: DecodedVideo,
    pub psnr_bg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub bundle: IdentityBundle,
    pub identity_video: DecodedVideo,
    pub frames: Vec<FrameReport>,
}

/// Identity run followed by every frame run, in order.
pub fn run_group(model: &Model, cfg: &RunConfig, group: &GroupSpec) -> Result<GroupReport> {
    if group.frames.is_empty() {
        return Err(Error::Config(
            "a group needs at least one frame prompt".into(),
        ));
    }
    let decoder = PatchDecoder::new(cfg.model.channels, cfg.model.seed);
    let grid = cfg.model.grid;
    let bundle = run_identity(model, cfg, &group.identity)?;
    let identity_video = decoder.decode(&bundle.latent, grid)?;
    let vanilla_cfg = RunConfig {
        kv_layers: Vec::new(),
        ..cfg.clone()
    };
    let vanilla_bundle = IdentityBundle {
        cache: KvCache::new(
            vanilla_cfg.injection_steps(),
            [],
            cfg.model.seq_len(),
            cfg.model.channels,
            None,
        ),
        ..bundle.clone()
    };
    let mut frames = Vec::with_capacity(group.frames.len());
    for i in 0..group.frames.len() {
        let generation = group.frame(i, cfg.share_seed)?;
        let outcome = run_frame(model, cfg, &generation, &bundle)?;
        let video = decoder.decode(&outcome.latent, grid)?;
        let background = bundle.mask.union(&outcome.diagnostics.mask)?.not();
        let psnr = psnr_bg(&identity_video, &video, &background)?;
        let vanilla = if group.ablate {
            let plain = run_frame(model, &vanilla_cfg, &generation, &vanilla_bundle)?;
            let video = decoder.decode(&plain.latent, grid)?;
            Some(VanillaReport {
                psnr_bg: psnr_bg(&identity_video, &video, &background)?,
                latent: plain.latent,
                video,
            })
        } else {
            None
        };
        frames.push(FrameReport {
            outcome,
            video,
            background,
            psnr_bg: psnr,
            vanilla,
        });
    }
    Ok(GroupReport {
        bundle,
        identity_video,
        frames,
    })
}
