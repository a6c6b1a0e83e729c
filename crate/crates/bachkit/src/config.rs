//! TOML run configuration.
//!
//! Every key is optional and overrides the chosen profile:
//!
//! ```toml
//! profile = "desk8"            # or "paper42"
//! seed = 7                     # base generation seed
//! planted = true               # generate planted scenes instead of pure noise
//!
//! [model]
//! depth = 8
//! channels = 48
//! heads = 2
//! grid = [4, 8, 8]             # T, H, W
//! text_len = 16
//! steps = 50
//! seed = 47812
//! rope_axis_ratio = [1, 1, 1]
//! rope_base = 10000.0
//!
//! [model.dynamics]
//! logit_gain = 1.6
//! attn_gate = 0.5
//! mlp_gate = 0.1
//! jitter = 0.25
//! watermark = 3.0
//! fast_rotary_gain = 0.2
//!
//! [prompt]
//! bg = 4
//! fg = 4
//! act = 4
//! pad = 4
//!
//! [layers]                     # 0-based
//! mask = [0, 1, 2, 3]
//! match = [0, 1, 2, 3]
//! kv = [0, 1, 2, 3, 4, 5, 6, 7]
//!
//! [steps]
//! tau_mask = 10
//! tau_match = 10
//! tau_inject = 11
//! sigma_max = 1.0
//!
//! [run]
//! match_scope = "per-frame"    # or "global"
//! recompute_mask_per_step = false
//! share_seed = false
//! kv_budget_bytes = 1073741824 # 0 disables the budget
//! scorer = "variance-proxy"    # "constant", "variance-proxy" or "planted"
//! vital_k = 4
//!
//! [scene]                      # planted scene geometry
//! rect = [2, 1, 3, 3]          # top, left, height, width
//! velocity = [0, 0]
//! shift = [0, 2]
//! noise_sigma = 0.05
//! fg_texture = 0.8
//! bg_texture = 0.5
//! ```

use std::path::Path;

use anyhow::{bail, Context};
use bachkit_core::dit::{Dynamics, PromptLayout};
use bachkit_core::matching::MatchScope;
use bachkit_core::pipeline::{Rect, RunConfig, SceneParams};
use bachkit_core::GridDims;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub profile: Option<String>,
    pub seed: Option<u64>,
    pub planted: Option<bool>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub prompt: PromptSection,
    #[serde(default)]
    pub layers: LayerSection,
    #[serde(default)]
    pub steps: StepSection,
    #[serde(default)]
    pub run: RunSection,
    pub scene: Option<SceneSection>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub depth: Option<usize>,
    pub channels: Option<usize>,
    pub heads: Option<usize>,
    pub grid: Option<[usize; 3]>,
    pub text_len: Option<usize>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub rope_axis_ratio: Option<[usize; 3]>,
    pub rope_base: Option<f64>,
    #[serde(default)]
    pub dynamics: DynamicsSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsSection {
    pub logit_gain: Option<f32>,
    pub attn_gate: Option<f32>,
    pub mlp_gate: Option<f32>,
    pub jitter: Option<f32>,
    pub watermark: Option<f32>,
    pub fast_rotary_gain: Option<f32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSection {
    pub bg: Option<usize>,
    pub fg: Option<usize>,
    pub act: Option<usize>,
    pub pad: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSection {
    pub mask: Option<Vec<usize>>,
    #[serde(rename = "match")]
    pub match_: Option<Vec<usize>>,
    pub kv: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSection {
    pub tau_mask: Option<usize>,
    pub tau_match: Option<usize>,
    pub tau_inject: Option<usize>,
    pub sigma_max: Option<f32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub match_scope: Option<String>,
    pub recompute_mask_per_step: Option<bool>,
    pub share_seed: Option<bool>,
    pub kv_budget_bytes: Option<u64>,
    pub scorer: Option<String>,
    pub vital_k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSection {
    pub rect: Option<[i64; 4]>,
    pub velocity: Option<[i64; 2]>,
    pub shift: Option<[i64; 2]>,
    pub noise_sigma: Option<f32>,
    pub fg_texture: Option<f32>,
    pub bg_texture: Option<f32>,
}

/// A resolved configuration: run settings plus generation inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub run: RunConfig,
    pub seed: u64,
    pub planted: bool,
    pub scene: SceneParams,
}

pub fn scope_name(scope: MatchScope) -> &'static str {
    match scope {
        MatchScope::PerFrame => "per-frame",
        MatchScope::Global => "global",
    }
}

fn parse_scope(name: &str) -> anyhow::Result<MatchScope> {
    match name {
        "per-frame" => Ok(MatchScope::PerFrame),
        "global" => Ok(MatchScope::Global),
        other => bail!("unknown match_scope {other:?} (expected \"per-frame\" or \"global\")"),
    }
}

impl ConfigFile {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Applies the overrides on top of `profile` (or the file's own profile).
    pub fn resolve(&self, profile: Option<&str>) -> anyhow::Result<Settings> {
        let name = profile.or(self.profile.as_deref()).unwrap_or("desk8");
        let Some(mut run) = RunConfig::profile(name) else {
            bail!("unknown profile {name:?} (expected \"desk8\" or \"paper42\")");
        };
        let m = &self.model;
        let model = &mut run.model;
        set(&mut model.depth, m.depth);
        set(&mut model.channels, m.channels);
        set(&mut model.heads, m.heads);
        if let Some([t, h, w]) = m.grid {
            model.grid = GridDims::new(t, h, w);
        }
        set(&mut model.text_len, m.text_len);
        set(&mut model.steps, m.steps);
        set(&mut model.seed, m.seed);
        set(&mut model.rope_axis_ratio, m.rope_axis_ratio);
        set(&mut model.rope_base, m.rope_base);
        let d = &m.dynamics;
        let dy: &mut Dynamics = &mut model.dynamics;
        set(&mut dy.logit_gain, d.logit_gain);
        set(&mut dy.attn_gate, d.attn_gate);
        set(&mut dy.mlp_gate, d.mlp_gate);
        set(&mut dy.jitter, d.jitter);
        set(&mut dy.watermark, d.watermark);
        set(&mut dy.fast_rotary_gain, d.fast_rotary_gain);

        let p = &self.prompt;
        let l = run.layout;
        run.layout = PromptLayout::new(
            p.bg.unwrap_or(l.bg),
            p.fg.unwrap_or(l.fg),
            p.act.unwrap_or(l.act),
            p.pad.unwrap_or(l.pad),
        )?;
        if p != &PromptSection::default() && m.text_len.is_none() {
            run.model.text_len = run.layout.text_len();
        }

        set(&mut run.mask_layers, self.layers.mask.clone());
        set(&mut run.match_layers, self.layers.match_.clone());
        set(&mut run.kv_layers, self.layers.kv.clone());

        let s = &self.steps;
        set(&mut run.tau_mask, s.tau_mask);
        set(&mut run.tau_match, s.tau_match);
        run.tau_inject = s.tau_inject.unwrap_or_else(|| run.default_tau_inject());
        set(&mut run.sigma_max, s.sigma_max);

        let r = &self.run;
        if let Some(scope) = &r.match_scope {
            run.match_scope = parse_scope(scope)?;
        }
        set(&mut run.recompute_mask_per_step, r.recompute_mask_per_step);
        set(&mut run.share_seed, r.share_seed);
        if let Some(b) = r.kv_budget_bytes {
            run.kv_budget_bytes = (b > 0).then_some(b);
        }
        set(&mut run.scorer, r.scorer.clone());
        set(&mut run.vital_k, r.vital_k);

        let mut scene = SceneParams::desk(run.model.grid, run.model.channels);
        if let Some(sc) = &self.scene {
            if let Some([top, left, h, w]) = sc.rect {
                if h <= 0 || w <= 0 {
                    bail!("scene rect needs a positive height and width");
                }
                scene.rect = Rect {
                    top: top as isize,
                    left: left as isize,
                    height: h as usize,
                    width: w as usize,
                };
            }
            if let Some([dh, dw]) = sc.velocity {
                scene.velocity = (dh as isize, dw as isize);
            }
            if let Some([dh, dw]) = sc.shift {
                scene.shift = (dh as isize, dw as isize);
            }
            set(&mut scene.noise_sigma, sc.noise_sigma);
            set(&mut scene.fg_texture, sc.fg_texture);
            set(&mut scene.bg_texture, sc.bg_texture);
        }
        run.validate()?;
        Ok(Settings {
            run,
            seed: self.seed.unwrap_or(1),
            planted: self.planted.unwrap_or(self.scene.is_some()),
            scene,
        })
    }

    /// The file that resolves to exactly `settings`.
    pub fn from_settings(settings: &Settings) -> Self {
        let run = &settings.run;
        let m = &run.model;
        let d = m.dynamics;
        let sc = &settings.scene;
        Self {
            profile: None,
            seed: Some(settings.seed),
            planted: Some(settings.planted),
            model: ModelSection {
                depth: Some(m.depth),
                channels: Some(m.channels),
                heads: Some(m.heads),
                grid: Some([m.grid.t, m.grid.h, m.grid.w]),
                text_len: Some(m.text_len),
                steps: Some(m.steps),
                seed: Some(m.seed),
                rope_axis_ratio: Some(m.rope_axis_ratio),
                rope_base: Some(m.rope_base),
                dynamics: DynamicsSection {
                    logit_gain: Some(d.logit_gain),
                    attn_gate: Some(d.attn_gate),
                    mlp_gate: Some(d.mlp_gate),
                    jitter: Some(d.jitter),
                    watermark: Some(d.watermark),
                    fast_rotary_gain: Some(d.fast_rotary_gain),
                },
            },
            prompt: PromptSection {
                bg: Some(run.layout.bg),
                fg: Some(run.layout.fg),
                act: Some(run.layout.act),
                pad: Some(run.layout.pad),
            },
            layers: LayerSection {
                mask: Some(run.mask_layers.clone()),
                match_: Some(run.match_layers.clone()),
                kv: Some(run.kv_layers.clone()),
            },
            steps: StepSection {
                tau_mask: Some(run.tau_mask),
                tau_match: Some(run.tau_match),
                tau_inject: Some(run.tau_inject),
                sigma_max: Some(run.sigma_max),
            },
            run: RunSection {
                match_scope: Some(scope_name(run.match_scope).into()),
                recompute_mask_per_step: Some(run.recompute_mask_per_step),
                share_seed: Some(run.share_seed),
                kv_budget_bytes: Some(run.kv_budget_bytes.unwrap_or(0)),
                scorer: Some(run.scorer.clone()),
                vital_k: Some(run.vital_k),
            },
            scene: Some(SceneSection {
                rect: Some([
                    sc.rect.top as i64,
                    sc.rect.left as i64,
                    sc.rect.height as i64,
                    sc.rect.width as i64,
                ]),
                velocity: Some([sc.velocity.0 as i64, sc.velocity.1 as i64]),
                shift: Some([sc.shift.0 as i64, sc.shift.1 as i64]),
                noise_sigma: Some(sc.noise_sigma),
                fg_texture: Some(sc.fg_texture),
                bg_texture: Some(sc.bg_texture),
            }),
        }
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
