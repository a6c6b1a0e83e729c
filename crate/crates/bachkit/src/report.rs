//! Run output directories and the plain-text group report.
//!
//! A group directory holds:
//!
//! ```text
//! config.toml                    resolved settings of the run
//! identity.bvtr                  identity latent plus captured trace
//! cache.bvtr                     cached identity keys/values
//! identity_mask.csv, _tN.pgm     identity foreground mask
//! frameI.bvtr                    frame latent
//! frameI_vanilla.bvtr            frame latent without injection (ablation only)
//! frameI_mask.csv, _tN.pgm       frame foreground mask
//! frameI_match.csv               frame → identity matching map
//! frameI_injections.csv          injected (step, layer) cells
//! report.txt                     group report
//! ```

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use bachkit_core::dit::PatchDecoder;
use bachkit_core::inject::KvCache;
use bachkit_core::mask::{aggregate_mask, ForegroundMask};
use bachkit_core::pipeline::{
    psnr_bg, FrameOutcome, GroupReport, IdentityBundle, RunConfig, DECODED_MAX,
};
use bachkit_core::Tensor;

use crate::bvtr::{self, Record, LATENT_TAG};
use crate::config::{ConfigFile, Settings};
use crate::export;

pub const CONFIG_FILE: &str = "config.toml";
pub const IDENTITY_FILE: &str = "identity.bvtr";
pub const CACHE_FILE: &str = "cache.bvtr";
pub const REPORT_FILE: &str = "report.txt";

fn create(path: &Path) -> anyhow::Result<BufWriter<fs::File>> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn read(path: &Path) -> anyhow::Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

pub fn write_settings(dir: &Path, settings: &Settings) -> anyhow::Result<()> {
    let text = ConfigFile::from_settings(settings).to_toml()?;
    fs::write(dir.join(CONFIG_FILE), text)?;
    Ok(())
}

pub fn load_settings(dir: &Path) -> anyhow::Result<Settings> {
    ConfigFile::load(&dir.join(CONFIG_FILE))?.resolve(None)
}

/// `<stem>.csv` plus one `<stem>_t<N>.pgm` per frame.
pub fn write_mask(dir: &Path, stem: &str, mask: &ForegroundMask) -> anyhow::Result<()> {
    export::write_mask_csv(create(&dir.join(format!("{stem}.csv")))?, mask)?;
    for t in 0..mask.grid.t {
        fs::write(
            dir.join(format!("{stem}_t{t}.pgm")),
            export::mask_pgm(mask, t),
        )?;
    }
    Ok(())
}

pub fn read_mask(dir: &Path, stem: &str, cfg: &RunConfig) -> anyhow::Result<ForegroundMask> {
    let path = dir.join(format!("{stem}.csv"));
    export::read_mask_csv(&read(&path)?[..], cfg.model.grid)
        .with_context(|| format!("reading {}", path.display()))
}

fn write_latent(path: &Path, latent: &Tensor) -> anyhow::Result<()> {
    bvtr::write(create(path)?, &[bvtr::latent_record(latent)])?;
    Ok(())
}

fn take_latent(records: &mut Vec<Record>, path: &Path) -> anyhow::Result<Tensor> {
    let Some(i) = records.iter().position(|r| r.tag == LATENT_TAG) else {
        bail!("{} holds no latent", path.display());
    };
    Ok(records.remove(i).tensor)
}

pub fn read_latent(path: &Path) -> anyhow::Result<Tensor> {
    let mut records =
        bvtr::parse(&read(path)?).with_context(|| format!("parsing {}", path.display()))?;
    take_latent(&mut records, path)
}

pub fn write_identity(
    dir: &Path,
    settings: &Settings,
    bundle: &IdentityBundle,
) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    write_settings(dir, settings)?;
    let mut records = vec![bvtr::latent_record(&bundle.latent)];
    records.extend(bvtr::trace_records(&bundle.trace)?);
    bvtr::write(create(&dir.join(IDENTITY_FILE))?, &records)?;
    bvtr::write(
        create(&dir.join(CACHE_FILE))?,
        &bvtr::cache_records(&bundle.cache)?,
    )?;
    write_mask(dir, "identity_mask", &bundle.mask)
}

/// Rebuilds the identity bundle written by [`write_identity`] under `cfg`.
pub fn load_identity(dir: &Path, cfg: &RunConfig) -> anyhow::Result<IdentityBundle> {
    let path = dir.join(IDENTITY_FILE);
    let mut records =
        bvtr::parse(&read(&path)?).with_context(|| format!("parsing {}", path.display()))?;
    let latent = take_latent(&mut records, &path)?;
    let trace = bvtr::trace_from_records(records);
    let mut cache = KvCache::new(
        cfg.injection_steps(),
        cfg.kv_layers.iter().copied(),
        cfg.model.seq_len(),
        cfg.model.channels,
        cfg.kv_budget_bytes,
    );
    let path = dir.join(CACHE_FILE);
    bvtr::fill_cache(&mut cache, bvtr::parse(&read(&path)?)?)
        .with_context(|| format!("loading {}", path.display()))?;
    let mask = aggregate_mask(
        &trace,
        cfg.tau_mask,
        &cfg.mask_layers,
        &cfg.layout,
        cfg.model.grid,
    )?;
    Ok(IdentityBundle {
        fingerprint: cfg.model.fingerprint(),
        latent,
        cache,
        mask,
        trace,
    })
}

fn frame_path(dir: &Path, i: usize, suffix: &str) -> PathBuf {
    dir.join(format!("frame{i}{suffix}"))
}

pub fn write_frame(dir: &Path, i: usize, outcome: &FrameOutcome) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    let d = &outcome.diagnostics;
    write_latent(&frame_path(dir, i, ".bvtr"), &outcome.latent)?;
    write_mask(dir, &format!("frame{i}_mask"), &d.mask)?;
    export::write_match_csv(create(&frame_path(dir, i, "_match.csv"))?, &d.map)?;
    let mut out = csv::Writer::from_writer(create(&frame_path(dir, i, "_injections.csv"))?);
    out.write_record(["step", "layer", "fg_tokens", "bg_tokens"])?;
    for r in &d.injections {
        out.serialize((r.step, r.layer, r.fg_tokens, r.bg_tokens))?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_group(dir: &Path, settings: &Settings, report: &GroupReport) -> anyhow::Result<()> {
    write_identity(dir, settings, &report.bundle)?;
    for (i, f) in report.frames.iter().enumerate() {
        write_frame(dir, i, &f.outcome)?;
        if let Some(v) = &f.vanilla {
            write_latent(&frame_path(dir, i, "_vanilla.bvtr"), &v.latent)?;
        }
    }
    let summary = GroupSummary::from_report(&settings.run, report);
    fs::write(dir.join(REPORT_FILE), summary.render())?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSummary {
    pub psnr_bg: f64,
    pub vanilla_psnr_bg: Option<f64>,
    pub fg_pixels: usize,
    pub bg_pixels: usize,
    pub injected_cells: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    pub fingerprint: u64,
    pub depth: usize,
    pub steps: usize,
    pub kv_layers: Vec<usize>,
    pub tau_inject: usize,
    pub identity_fg: usize,
    pub pixels: usize,
    pub frames: Vec<FrameSummary>,
}

fn db(x: f64) -> String {
    if x.is_infinite() {
        "inf".into()
    } else {
        format!("{x:.4}")
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

impl GroupSummary {
    fn header(cfg: &RunConfig, identity: &ForegroundMask) -> Self {
        Self {
            fingerprint: cfg.model.fingerprint(),
            depth: cfg.model.depth,
            steps: cfg.model.steps,
            kv_layers: cfg.kv_layers.clone(),
            tau_inject: cfg.tau_inject,
            identity_fg: identity.count(),
            pixels: identity.len(),
            frames: Vec::new(),
        }
    }

    pub fn from_report(cfg: &RunConfig, report: &GroupReport) -> Self {
        let mut s = Self::header(cfg, &report.bundle.mask);
        s.frames = report
            .frames
            .iter()
            .map(|f| FrameSummary {
                psnr_bg: f.psnr_bg,
                vanilla_psnr_bg: f.vanilla.as_ref().map(|v| v.psnr_bg),
                fg_pixels: f.outcome.diagnostics.mask.count(),
                bg_pixels: f.background.count(),
                injected_cells: f.outcome.diagnostics.injections.len(),
            })
            .collect();
        s
    }

    /// Recomputes the summary from a directory written by [`write_group`].
    pub fn from_dir(dir: &Path) -> anyhow::Result<Self> {
        let cfg = load_settings(dir)?.run;
        let decoder = PatchDecoder::new(cfg.model.channels, cfg.model.seed);
        let grid = cfg.model.grid;
        let identity = decoder.decode(&read_latent(&dir.join(IDENTITY_FILE))?, grid)?;
        let id_mask = read_mask(dir, "identity_mask", &cfg)?;
        let mut s = Self::header(&cfg, &id_mask);
        for i in 0.. {
            let path = frame_path(dir, i, ".bvtr");
            if !path.exists() {
                break;
            }
            let video = decoder.decode(&read_latent(&path)?, grid)?;
            let mask = read_mask(dir, &format!("frame{i}_mask"), &cfg)?;
            let background = id_mask.union(&mask)?.not();
            let vanilla_path = frame_path(dir, i, "_vanilla.bvtr");
            let vanilla_psnr_bg = if vanilla_path.exists() {
                let v = decoder.decode(&read_latent(&vanilla_path)?, grid)?;
                Some(psnr_bg(&identity, &v, &background)?)
            } else {
                None
            };
            let injections = csv::Reader::from_path(frame_path(dir, i, "_injections.csv"))?
                .records()
                .count();
            s.frames.push(FrameSummary {
                psnr_bg: psnr_bg(&identity, &video, &background)?,
                vanilla_psnr_bg,
                fg_pixels: mask.count(),
                bg_pixels: background.count(),
                injected_cells: injections,
            });
        }
        if s.frames.is_empty() {
            bail!("{} holds no frame runs", dir.display());
        }
        Ok(s)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("bachkit group report\n");
        out.push_str(&format!(
            "model {:016x}: depth {}, {} steps; kv layers {:?} from step {}\n",
            self.fingerprint, self.depth, self.steps, self.kv_layers, self.tau_inject
        ));
        out.push_str(&format!(
            "PSNR-BG in dB against the identity video, decoded range [0, {DECODED_MAX}], over pixels that are background in both runs\n"
        ));
        out.push_str(&format!(
            "identity: {} of {} pixels foreground\n\n",
            self.identity_fg, self.pixels
        ));
        out.push_str("frame  psnr_bg  vanilla  fg_px  bg_px  injected\n");
        for (i, f) in self.frames.iter().enumerate() {
            out.push_str(&format!(
                "{i:<5}  {:>7}  {:>7}  {:>5}  {:>5}  {:>8}\n",
                db(f.psnr_bg),
                f.vanilla_psnr_bg.map_or("-".into(), db),
                f.fg_pixels,
                f.bg_pixels,
                f.injected_cells
            ));
        }
        out.push_str(&format!(
            "mean   {:>7}",
            db(mean(self.frames.iter().map(|f| f.psnr_bg)))
        ));
        if self.frames.iter().all(|f| f.vanilla_psnr_bg.is_some()) {
            let v = mean(self.frames.iter().filter_map(|f| f.vanilla_psnr_bg));
            out.push_str(&format!("  {:>7}", db(v)));
        }
        out.push('\n');
        out
    }
}
