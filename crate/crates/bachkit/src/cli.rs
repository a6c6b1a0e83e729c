//! Command-line driver.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use bachkit_core::dit::{Model, PatchDecoder, StepSchedule};
use bachkit_core::mask::{select_mask_layers, select_tau_mask};
use bachkit_core::matching::{select_match_layers, select_tau_match, MatchScope};
use bachkit_core::pipeline::{
    make_scene, mask_grid, match_grid, noise_group, planted_group, run_frame, run_group,
    run_identity, GroupSpec,
};
use bachkit_core::vital::{
    scorer_by_name, select_vital_layers, FrameScorer, PlantedScorer, SkipSweep, PLANTED_MARGIN,
};
use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigFile, Settings};
use crate::report::{self, GroupSummary};
use crate::{bvtr, export};

#[derive(Debug, Parser)]
#[command(
    name = "bachkit",
    version,
    about = "Consistent multi-shot generation on a miniature video DiT"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base profile, overriding the file's.
    #[arg(long, global = true, value_parser = ["desk8", "paper42"])]
    pub profile: Option<String>,
    /// Generation seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Key/value cache budget; 0 disables it.
    #[arg(long, global = true)]
    pub kv_budget_bytes: Option<u64>,
    /// Match against every identity frame instead of the same frame.
    #[arg(long, global = true)]
    pub global_match: bool,
    /// Re-derive the frame mask before every injected step.
    #[arg(long, global = true)]
    pub recompute_mask_per_step: bool,
    /// Start from planted scenes instead of pure noise.
    #[arg(long, global = true)]
    pub planted: bool,
    /// Frame runs reuse the identity noise seed.
    #[arg(long, global = true)]
    pub share_seed: bool,
    /// Also run every frame without injection.
    #[arg(long, global = true)]
    pub ablate: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Identity run: latent, trace, key/value cache and mask.
    GenIdentity {
        #[arg(long)]
        out: PathBuf,
    },
    /// One frame run against a saved identity run.
    GenFrame {
        /// Directory written by `gen-identity`.
        #[arg(long)]
        identity: PathBuf,
        /// Frame prompt index within the group.
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Identity run followed by frame runs, with a report.
    RunGroup {
        #[arg(long, default_value_t = 1)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Layer × step and layer-skip analyses.
    #[command(subcommand)]
    Analyze(Analyze),
    /// Selection rules over analysis outputs; prints a config fragment.
    #[command(subcommand)]
    Select(Select),
    /// Lists the entries of a BVTR container.
    DumpTrace { path: PathBuf },
    /// Recomputes and prints the report of a `run-group` directory.
    Report { dir: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum Analyze {
    /// Mask IoU grid on the planted scene.
    Mask {
        #[arg(long)]
        out: PathBuf,
    },
    /// Matching MSE grid on the planted scene.
    Match {
        #[arg(long)]
        out: PathBuf,
    },
    /// Layer-skip scores of the identity generation.
    Vital {
        #[arg(long)]
        out: PathBuf,
        /// Layers rigged into the `planted` scorer.
        #[arg(long, value_delimiter = ',')]
        planted_layers: Vec<usize>,
    },
}

#[derive(Debug, Subcommand)]
pub enum Select {
    /// Highest mean IoU layers of a mask grid.
    MaskLayers {
        grid: PathBuf,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Lowest mean MSE layers of a match grid.
    MatchLayers {
        grid: PathBuf,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Extraction step of a mask (iou) or match (mse) grid over `layers`.
    Tau {
        grid: PathBuf,
        /// Defaults to the configured mask or match layers.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
    },
    /// Largest-drop layers of a layer report.
    Vital {
        report: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        /// Also write the fragment here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl GlobalArgs {
    /// Profile, then config file (or `fallback` when no file is given), then flags.
    pub fn settings(&self, fallback: Option<&Path>) -> anyhow::Result<Settings> {
        let file = match (&self.config, fallback) {
            (Some(p), _) => ConfigFile::load(p)?,
            (None, Some(dir)) if self.profile.is_none() => {
                ConfigFile::load(&dir.join(report::CONFIG_FILE))?
            }
            _ => ConfigFile::default(),
        };
        let mut s = file.resolve(self.profile.as_deref())?;
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        if let Some(b) = self.kv_budget_bytes {
            s.run.kv_budget_bytes = (b > 0).then_some(b);
        }
        if self.global_match {
            s.run.match_scope = MatchScope::Global;
        }
        s.run.recompute_mask_per_step |= self.recompute_mask_per_step;
        s.run.share_seed |= self.share_seed;
        s.planted |= self.planted;
        s.run.validate()?;
        Ok(s)
    }
}

/// The group of `frames` frame prompts the settings describe.
pub fn group(settings: &Settings, frames: usize, ablate: bool) -> anyhow::Result<GroupSpec> {
    let m = &settings.run.model;
    Ok(if settings.planted {
        planted_group(
            &make_scene(settings.seed, settings.scene.clone())?,
            settings.seed,
            frames,
            ablate,
        )
    } else {
        noise_group(m.channels, settings.seed, frames, ablate)
    })
}

fn model(settings: &Settings) -> anyhow::Result<Model> {
    Ok(Model::new(settings.run.model.clone())?)
}

fn create_parent(path: &Path) -> anyhow::Result<fs::File> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::File::create(path).with_context(|| format!("creating {}", path.display()))
}

pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::GenIdentity { out: dir } => {
            let s = g.settings(None)?;
            let bundle = run_identity(&model(&s)?, &s.run, &group(&s, 0, false)?.identity)?;
            report::write_identity(&dir, &s, &bundle)?;
            writeln!(
                out,
                "identity: {} foreground pixels, {} cached cells ({} bytes)",
                bundle.mask.count(),
                bundle.cache.len(),
                bundle.cache.bytes()
            )?;
        }
        Command::GenFrame {
            identity,
            frame,
            out: dir,
        } => {
            let s = g.settings(Some(&identity))?;
            let bundle = report::load_identity(&identity, &s.run)?;
            let generation = group(&s, frame + 1, false)?.frame(frame, s.run.share_seed)?;
            let outcome = run_frame(&model(&s)?, &s.run, &generation, &bundle)?;
            report::write_frame(&dir, frame, &outcome)?;
            writeln!(
                out,
                "frame {frame}: {} foreground pixels, {} injected cells",
                outcome.diagnostics.mask.count(),
                outcome.diagnostics.injections.len()
            )?;
        }
        Command::RunGroup { frames, out: dir } => {
            let s = g.settings(None)?;
            let result = run_group(&model(&s)?, &s.run, &group(&s, frames, g.ablate)?)?;
            report::write_group(&dir, &s, &result)?;
            out.write_all(
                GroupSummary::from_report(&s.run, &result)
                    .render()
                    .as_bytes(),
            )?;
        }
        Command::Analyze(a) => analyze(g, a, out)?,
        Command::Select(sel) => select(g, sel, out)?,
        Command::DumpTrace { path } => {
            let records = bvtr::parse(
                &fs::read(&path).with_context(|| format!("reading {}", path.display()))?,
            )?;
            writeln!(out, "step  layer  field    dims")?;
            for r in records {
                let field = bachkit_core::dit::Field::from_tag(r.tag).map_or_else(
                    || {
                        if r.tag == bvtr::LATENT_TAG {
                            "latent".to_string()
                        } else {
                            format!("tag{}", r.tag)
                        }
                    },
                    |f| f.name().to_string(),
                );
                writeln!(
                    out,
                    "{:<4}  {:<5}  {field:<7}  {:?}",
                    r.step,
                    r.layer,
                    r.tensor.dims()
                )?;
            }
        }
        Command::Report { dir } => {
            out.write_all(GroupSummary::from_dir(&dir)?.render().as_bytes())?
        }
    }
    Ok(())
}

fn analyze(g: &GlobalArgs, a: Analyze, out: &mut dyn Write) -> anyhow::Result<()> {
    let s = g.settings(None)?;
    let model = model(&s)?;
    match a {
        Analyze::Mask { out: path } => {
            let scene = make_scene(s.seed, s.scene.clone())?;
            let grid = mask_grid(&model, &s.run, &scene, s.seed)?;
            export::write_grid_csv(create_parent(&path)?, &grid)?;
            writeln!(
                out,
                "mask grid: {} steps × {} layers -> {}",
                grid.steps,
                grid.depth,
                path.display()
            )?;
        }
        Analyze::Match { out: path } => {
            let scene = make_scene(s.seed, s.scene.clone())?;
            let grid = match_grid(&model, &s.run, &scene, s.seed)?;
            export::write_grid_csv(create_parent(&path)?, &grid)?;
            writeln!(
                out,
                "match grid: {} steps × {} layers -> {}",
                grid.steps,
                grid.depth,
                path.display()
            )?;
        }
        Analyze::Vital {
            out: path,
            planted_layers,
        } => {
            let generation = group(&s, 0, false)?.identity;
            let text = generation.prompt.embed(&s.run)?;
            let schedule = StepSchedule::linear(s.run.model.steps, s.run.sigma_max)?;
            let decoder = PatchDecoder::new(s.run.model.channels, s.run.model.seed);
            let sweep = SkipSweep::generate(&model, &text, &schedule, &generation.init, &decoder)?;
            let scorer: Box<dyn FrameScorer> = if s.run.scorer == "planted" {
                if planted_layers.is_empty() {
                    bail!("the planted scorer needs --planted-layers");
                }
                Box::new(PlantedScorer::calibrate(
                    &model,
                    &decoder,
                    &sweep.baseline,
                    &planted_layers,
                    PLANTED_MARGIN,
                )?)
            } else {
                scorer_by_name(&s.run.scorer)?
            };
            let report = sweep.aesthetic_report(scorer.as_ref())?;
            export::write_layer_report_csv(create_parent(&path)?, &report)?;
            writeln!(
                out,
                "layer report: {} layers ({}) -> {}",
                report.depth(),
                s.run.scorer,
                path.display()
            )?;
        }
    }
    Ok(())
}

fn read_grid(path: &Path) -> anyhow::Result<bachkit_core::select::AnalysisGrid> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    export::read_grid_csv(f).with_context(|| format!("reading {}", path.display()))
}

fn select(g: &GlobalArgs, sel: Select, out: &mut dyn Write) -> anyhow::Result<()> {
    let s = g.settings(None)?;
    let run = &s.run;
    match sel {
        Select::MaskLayers { grid, k } => {
            let layers =
                select_mask_layers(&read_grid(&grid)?, k.unwrap_or(run.mask_layers.len()))?;
            out.write_all(export::layers_fragment("mask", &layers).as_bytes())?;
        }
        Select::MatchLayers { grid, k } => {
            let layers =
                select_match_layers(&read_grid(&grid)?, k.unwrap_or(run.match_layers.len()))?;
            out.write_all(export::layers_fragment("match", &layers).as_bytes())?;
        }
        Select::Tau { grid, layers } => {
            let grid = read_grid(&grid)?;
            let (key, default_layers) = match grid.metric.as_str() {
                "iou" => ("tau_mask", &run.mask_layers),
                "mse" => ("tau_match", &run.match_layers),
                other => bail!("no tau rule for metric {other:?}"),
            };
            let layers = if layers.is_empty() {
                default_layers.clone()
            } else {
                layers
            };
            if let Some(l) = layers.iter().find(|&&l| l >= grid.depth) {
                bail!("layer {l} outside the grid's {} layers", grid.depth);
            }
            let curve = grid.step_curve(&layers);
            let tau = if key == "tau_mask" {
                select_tau_mask(&curve)?
            } else {
                select_tau_match(&curve)?
            };
            writeln!(out, "[steps]\n{key} = {tau}")?;
        }
        Select::Vital {
            report,
            k,
            out: path,
        } => {
            let f =
                fs::File::open(&report).with_context(|| format!("opening {}", report.display()))?;
            let r = export::read_layer_report_csv(f)?;
            let fragment = export::kv_fragment(&select_vital_layers(&r, k.unwrap_or(run.vital_k))?);
            if let Some(path) = path {
                create_parent(&path)?.write_all(fragment.as_bytes())?;
            }
            out.write_all(fragment.as_bytes())?;
        }
    }
    Ok(())
}
