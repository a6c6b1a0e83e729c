//! Layer-skip sweeps and vital-layer selection.
//!
//! Each layer is bypassed in turn, the resulting video is scored frame by
//! frame, and the layers whose removal costs the most score are vital.

use alloc::boxed::Box;
use alloc::vec::Vec;

use crate::dit::{denoise, DecodedVideo, Frame, Init, Model, NoHooks, PatchDecoder, StepSchedule};
use crate::error::{shape_err, Error, Result};
use crate::rng::{normals, Role};
use crate::select::top_k;
use crate::tensor::{dot, Tensor};

/// Per-frame quality score.
pub trait FrameScorer {
    fn score(&self, frame: Frame<'_>) -> f64;
}

/// Scores every frame `value`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantScorer(pub f64);

impl FrameScorer for ConstantScorer {
    fn score(&self, _: Frame<'_>) -> f64 {
        self.0
    }
}

/// Population variance of all samples of a frame; within `[0, 0.25]` for
/// samples in `[0, 1]`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct VarianceScorer;

impl FrameScorer for VarianceScorer {
    fn score(&self, frame: Frame<'_>) -> f64 {
        let n = frame.data.len() as f64;
        if n == 0.0 {
            return 0.0;
        }
        let mean = frame.data.iter().map(|&x| f64::from(x)).sum::<f64>() / n;
        frame
            .data
            .iter()
            .map(|&x| {
                let d = f64::from(x) - mean;
                d * d
            })
            .sum::<f64>()
            / n
    }
}

/// Detects the watermarks of a chosen layer set.
///
/// A frame is re-encoded to latent pixels and projected on each planted
/// layer's watermark direction; a layer counts as present while its mean
/// projection stays above the calibration video's lowest per-frame value
/// minus `margin`. The score is the present fraction, within `[0, 1]`.
#[derive(Debug, Clone)]
pub struct PlantedScorer {
    decoder: PatchDecoder,
    directions: Vec<Vec<f32>>,
    thresholds: Vec<f64>,
}

/// Default detection margin of [`PlantedScorer`], in latent units.
pub const PLANTED_MARGIN: f64 = 0.6;

impl PlantedScorer {
    pub fn calibrate(
        model: &Model,
        decoder: &PatchDecoder,
        baseline: &DecodedVideo,
        planted: &[usize],
        margin: f64,
    ) -> Result<Self> {
        if let Some(&l) = planted.iter().find(|&&l| l >= model.depth()) {
            return Err(Error::OutOfRange {
                index: l,
                len: model.depth(),
            });
        }
        if baseline.frames == 0 {
            return Err(Error::Config("calibration video has no frames".into()));
        }
        let mut scorer = Self {
            decoder: decoder.clone(),
            directions: planted
                .iter()
                .map(|&l| model.watermark_direction(l))
                .collect(),
            thresholds: Vec::new(),
        };
        let mut lowest = alloc::vec![f64::INFINITY; planted.len()];
        for frame in baseline.frames() {
            for (lo, p) in lowest.iter_mut().zip(scorer.projections(frame)) {
                *lo = lo.min(p);
            }
        }
        scorer.thresholds = lowest.into_iter().map(|p| p - margin).collect();
        Ok(scorer)
    }

    fn projections(&self, frame: Frame<'_>) -> Vec<f64> {
        let video = DecodedVideo {
            frames: 1,
            height: frame.height,
            width: frame.width,
            channels: frame.channels,
            data: frame.data.to_vec(),
        };
        let Ok(latent) = self.decoder.encode(&video) else {
            return alloc::vec![f64::NEG_INFINITY; self.directions.len()];
        };
        let rows = latent.rows().max(1) as f64;
        self.directions
            .iter()
            .map(|d| {
                (0..latent.rows())
                    .map(|i| f64::from(dot(latent.row(i), d)))
                    .sum::<f64>()
                    / rows
            })
            .collect()
    }
}

impl FrameScorer for PlantedScorer {
    fn score(&self, frame: Frame<'_>) -> f64 {
        if self.directions.is_empty() {
            return 1.0;
        }
        let present = self
            .projections(frame)
            .iter()
            .zip(&self.thresholds)
            .filter(|(p, t)| p >= t)
            .count();
        present as f64 / self.directions.len() as f64
    }
}

/// Maps a frame to a unit-norm feature vector.
pub trait FrameEmbedder {
    fn embed(&self, frame: Frame<'_>) -> Result<Vec<f32>>;
}

/// Fixed Gaussian projection followed by L2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionEmbedder {
    proj: Tensor,
}

impl ProjectionEmbedder {
    pub fn new(input_len: usize, dim: usize, seed: u64) -> Self {
        let s = 1.0 / libm::sqrtf(input_len.max(1) as f32);
        let data = normals(seed, 0, Role::Embedder, input_len * dim)
            .into_iter()
            .map(|x| x * s)
            .collect();
        Self {
            proj: Tensor::matrix(input_len, dim, data).expect("projection dims"),
        }
    }

    /// Embedder sized for the frames of `video`.
    pub fn for_video(video: &DecodedVideo, dim: usize, seed: u64) -> Self {
        Self::new(video.frame_len(), dim, seed)
    }
}

impl FrameEmbedder for ProjectionEmbedder {
    fn embed(&self, frame: Frame<'_>) -> Result<Vec<f32>> {
        if frame.data.len() != self.proj.rows() {
            return Err(shape_err("embed frame", self.proj.rows(), frame.data.len()));
        }
        let x = Tensor::matrix(1, frame.data.len(), frame.data.to_vec())?;
        let mut e = x.matmul(&self.proj)?.into_data();
        let n = libm::sqrtf(dot(&e, &e));
        if n > 0.0 {
            e.iter_mut().for_each(|v| *v /= n);
        }
        Ok(e)
    }
}

/// Skip-sweep scores, one entry per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub baseline: f64,
    pub score_skip: Vec<f64>,
}

impl LayerReport {
    pub fn new(baseline: f64, score_skip: Vec<f64>) -> Result<Self> {
        if !baseline.is_finite() || score_skip.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self {
            baseline,
            score_skip,
        })
    }

    pub fn depth(&self) -> usize {
        self.score_skip.len()
    }

    /// `baseline − score_skip[l]` per layer.
    pub fn drops(&self) -> Vec<f64> {
        self.score_skip.iter().map(|s| self.baseline - s).collect()
    }
}

/// Denoises with block `skip` bypassed (or none) and decodes.
pub fn generate(
    model: &Model,
    text: &Tensor,
    schedule: &StepSchedule,
    init: &Init,
    decoder: &PatchDecoder,
    skip: Option<usize>,
) -> Result<DecodedVideo> {
    let z = denoise(model, text, schedule, init, &mut NoHooks, skip)?;
    decoder.decode(&z, model.config().grid)
}

/// The video generated with layer `layer` bypassed.
pub fn generate_skipped(
    model: &Model,
    text: &Tensor,
    schedule: &StepSchedule,
    init: &Init,
    decoder: &PatchDecoder,
    layer: usize,
) -> Result<DecodedVideo> {
    generate(model, text, schedule, init, decoder, Some(layer))
}

/// Mean frame score.
pub fn aesthetic_score(video: &DecodedVideo, scorer: &dyn FrameScorer) -> Result<f64> {
    if video.frames == 0 {
        return Err(Error::Config("video has no frames".into()));
    }
    Ok(shifted_mean(video.frames().map(|f| scorer.score(f))))
}

/// Mean taken relative to the first value, so constant inputs are reproduced exactly.
fn shifted_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut values = values.peekable();
    let Some(&first) = values.peek() else {
        return 0.0;
    };
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + (v - first), n + 1));
    first + sum / n as f64
}

/// Mean per-frame cosine similarity of embeddings.
pub fn embed_similarity_score(
    z: &DecodedVideo,
    z_ref: &DecodedVideo,
    embedder: &dyn FrameEmbedder,
) -> Result<f64> {
    if z.frames != z_ref.frames {
        return Err(shape_err("frame count", z_ref.frames, z.frames));
    }
    if z.frames == 0 {
        return Err(Error::Config("video has no frames".into()));
    }
    let mut total = 0.0f64;
    for (a, b) in z.frames().zip(z_ref.frames()) {
        total += f64::from(dot(&embedder.embed(a)?, &embedder.embed(b)?));
    }
    Ok(total / z.frames as f64)
}

/// Every layer-skipped video of one generation, in layer order.
#[derive(Debug, Clone)]
pub struct SkipSweep {
    pub baseline: DecodedVideo,
    pub skipped: Vec<DecodedVideo>,
}

impl SkipSweep {
    pub fn generate(
        model: &Model,
        text: &Tensor,
        schedule: &StepSchedule,
        init: &Init,
        decoder: &PatchDecoder,
    ) -> Result<Self> {
        let baseline = generate(model, text, schedule, init, decoder, None)?;
        let skipped = (0..model.depth())
            .map(|l| generate_skipped(model, text, schedule, init, decoder, l))
            .collect::<Result<_>>()?;
        Ok(Self { baseline, skipped })
    }

    pub fn aesthetic_report(&self, scorer: &dyn FrameScorer) -> Result<LayerReport> {
        let scores = self
            .skipped
            .iter()
            .map(|v| aesthetic_score(v, scorer))
            .collect::<Result<_>>()?;
        LayerReport::new(aesthetic_score(&self.baseline, scorer)?, scores)
    }

    /// Similarity of each skipped video to the unskipped one.
    pub fn similarity_report(&self, embedder: &dyn FrameEmbedder) -> Result<LayerReport> {
        let scores = self
            .skipped
            .iter()
            .map(|v| embed_similarity_score(v, &self.baseline, embedder))
            .collect::<Result<_>>()?;
        LayerReport::new(
            embed_similarity_score(&self.baseline, &self.baseline, embedder)?,
            scores,
        )
    }
}

/// Aesthetic-score skip sweep over every layer.
pub fn sweep_layers(
    model: &Model,
    text: &Tensor,
    schedule: &StepSchedule,
    init: &Init,
    decoder: &PatchDecoder,
    scorer: &dyn FrameScorer,
) -> Result<LayerReport> {
    SkipSweep::generate(model, text, schedule, init, decoder)?.aesthetic_report(scorer)
}

/// Embedding-similarity skip sweep over every layer.
pub fn sweep_layers_similarity(
    model: &Model,
    text: &Tensor,
    schedule: &StepSchedule,
    init: &Init,
    decoder: &PatchDecoder,
    embedder: &dyn FrameEmbedder,
) -> Result<LayerReport> {
    SkipSweep::generate(model, text, schedule, init, decoder)?.similarity_report(embedder)
}

/// The `k` layers with the largest drop, ascending; ties prefer lower layers.
pub fn select_vital_layers(report: &LayerReport, k: usize) -> Result<Vec<usize>> {
    top_k(&report.drops(), k, true)
}

/// Scorer by name: `constant`, `variance-proxy`; `planted` needs calibration
/// and is built with [`PlantedScorer::calibrate`].
pub fn scorer_by_name(name: &str) -> Result<Box<dyn FrameScorer>> {
    match name {
        "constant" => Ok(Box::new(ConstantScorer(1.0))),
        "variance-proxy" => Ok(Box::new(VarianceScorer)),
        other => Err(Error::Config(alloc::format!("unknown scorer {other:?}"))),
    }
}
