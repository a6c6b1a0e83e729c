//! Matching points between a frame generation and the identity generation.
//!
//! Attention outputs of both runs are cosine-normalised per pixel and
//! compared frame by frame (or over the whole clip with
//! [`MatchScope::Global`]); each frame-video pixel maps to its most similar
//! identity-video pixel.

use alloc::vec::Vec;

use crate::dit::{AttentionTrace, Field};
use crate::error::{shape_err, Error, Result};
use crate::mask::ForegroundMask;
use crate::numerics::cosine_normalize_rows;
use crate::select::{top_k, AnalysisGrid};
use crate::tensor::{GridDims, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatchScope {
    /// Frame `t` of the frame video is compared with frame `t` of the identity video only.
    #[default]
    PerFrame,
    /// Every pixel against every pixel (`THW × THW`).
    Global,
}

/// Similarity blocks; `T` blocks of `HW × HW` per frame, or one `THW × THW` block.
#[derive(Debug, Clone, PartialEq)]
pub struct Similarity {
    pub grid: GridDims,
    pub scope: MatchScope,
    pub blocks: Vec<Tensor>,
}

impl Similarity {
    fn block_len(&self) -> usize {
        match self.scope {
            MatchScope::PerFrame => self.grid.frame_len(),
            MatchScope::Global => self.grid.len(),
        }
    }

    /// Row of frame-video pixel `j` and the flat index of its first column.
    pub fn row(&self, j: usize) -> (usize, &[f32]) {
        let n = self.block_len();
        let (b, r) = (j / n, j % n);
        (b * n, self.blocks[b].row(r))
    }

    /// Identity-video pixel with maximal similarity to frame pixel `j`.
    pub fn argmax(&self, j: usize) -> usize {
        let (offset, row) = self.row(j);
        offset + argmax_first(row)
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }
}

fn argmax_first(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Cosine similarity between frame and identity attention outputs.
pub fn similarity(
    o_frm: &Tensor,
    o_id: &Tensor,
    grid: GridDims,
    scope: MatchScope,
) -> Result<Similarity> {
    if o_frm.rows() != grid.len() || o_id.rows() != grid.len() || o_frm.cols() != o_id.cols() {
        return Err(shape_err(
            "similarity",
            (grid.len(), o_frm.cols()),
            (o_id.rows(), o_id.cols()),
        ));
    }
    let (a, b) = (cosine_normalize_rows(o_frm), cosine_normalize_rows(o_id));
    let blocks = match scope {
        MatchScope::Global => alloc::vec![a.matmul_t(&b)?],
        MatchScope::PerFrame => {
            let hw = grid.frame_len();
            (0..grid.t)
                .map(|t| {
                    a.slice_rows(t * hw..(t + 1) * hw)
                        .matmul_t(&b.slice_rows(t * hw..(t + 1) * hw))
                })
                .collect::<Result<_>>()?
        }
    };
    Ok(Similarity {
        grid,
        scope,
        blocks,
    })
}

/// Per-frame cosine similarity blocks.
pub fn framewise_similarity(o_frm: &Tensor, o_id: &Tensor, grid: GridDims) -> Result<Similarity> {
    similarity(o_frm, o_id, grid, MatchScope::PerFrame)
}

/// Sum over `layers` of the per-layer normalised similarities at step `tau`.
pub fn aggregate_similarity(
    trace_frm: &AttentionTrace,
    trace_id: &AttentionTrace,
    tau: usize,
    layers: &[usize],
    grid: GridDims,
    scope: MatchScope,
) -> Result<Similarity> {
    let mut total: Option<Similarity> = None;
    for &l in layers {
        let s = similarity(
            trace_frm.get(tau, l, Field::AttnOut)?,
            trace_id.get(tau, l, Field::AttnOut)?,
            grid,
            scope,
        )?;
        match total.as_mut() {
            None => total = Some(s),
            Some(t) => t.add_assign(&s),
        }
    }
    total.ok_or_else(|| Error::Config("empty matching layer set".into()))
}

/// For each frame-video pixel, the flat index of its matched identity-video pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchMap {
    pub grid: GridDims,
    pub scope: MatchScope,
    target: Vec<usize>,
}

impl MatchMap {
    pub fn new(grid: GridDims, scope: MatchScope, target: Vec<usize>) -> Result<Self> {
        if target.len() != grid.len() {
            return Err(shape_err("MatchMap", grid.len(), target.len()));
        }
        let hw = grid.frame_len();
        for (j, &k) in target.iter().enumerate() {
            if k >= grid.len() {
                return Err(Error::OutOfRange {
                    index: k,
                    len: grid.len(),
                });
            }
            if scope == MatchScope::PerFrame && k / hw != j / hw {
                return Err(Error::Config(alloc::format!(
                    "per-frame match {j} -> {k} crosses frames"
                )));
            }
        }
        Ok(Self {
            grid,
            scope,
            target,
        })
    }

    pub fn identity(grid: GridDims, scope: MatchScope) -> Self {
        Self {
            grid,
            scope,
            target: (0..grid.len()).collect(),
        }
    }

    pub fn target(&self) -> &[usize] {
        &self.target
    }

    pub fn get(&self, j: usize) -> usize {
        self.target[j]
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }
}

/// Row-wise argmax; ties resolve to the lowest index.
pub fn match_argmax(s: &Similarity) -> MatchMap {
    MatchMap {
        grid: s.grid,
        scope: s.scope,
        target: (0..s.grid.len()).map(|j| s.argmax(j)).collect(),
    }
}

/// Mean squared coordinate error with `h` normalised by `H` and `w` by `W`.
///
/// Only pixels set in `eval` count (all pixels when `None`); an empty
/// evaluation set scores 0. In global scope a frame mismatch adds `(Δt/T)²`.
pub fn match_mse(m: &MatchMap, gt: &MatchMap, eval: Option<&ForegroundMask>) -> Result<f64> {
    if m.scope != gt.scope || m.grid != gt.grid {
        return Err(Error::ScopeMismatch);
    }
    if let Some(e) = eval {
        if e.len() != m.len() {
            return Err(shape_err("match_mse eval mask", m.len(), e.len()));
        }
    }
    let g = m.grid;
    let (mut sum, mut count) = (0.0f64, 0usize);
    for j in 0..m.len() {
        if eval.is_some_and(|e| !e.get(j)) {
            continue;
        }
        let (p, q) = (g.position(m.target[j]), g.position(gt.target[j]));
        let d = |a: usize, b: usize, n: usize| {
            let x = (a as f64 - b as f64) / n as f64;
            x * x
        };
        sum += d(p.h, q.h, g.h) + d(p.w, q.w, g.w) + d(p.t, q.t, g.t);
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Matching MSE of the single-layer map at every `(step, layer)`.
pub fn sweep_match_grid(
    trace_frm: &AttentionTrace,
    trace_id: &AttentionTrace,
    gt: &MatchMap,
    eval: Option<&ForegroundMask>,
    steps: usize,
    depth: usize,
) -> Result<AnalysisGrid> {
    let mut values = Vec::with_capacity(steps * depth);
    for s in 0..steps {
        for l in 0..depth {
            let sim = aggregate_similarity(trace_frm, trace_id, s, &[l], gt.grid, gt.scope)?;
            values.push(match_mse(&match_argmax(&sim), gt, eval)?);
        }
    }
    AnalysisGrid::new(steps, depth, "mse", values)
}

/// The `k` layers with the lowest step-averaged MSE.
pub fn select_match_layers(grid: &AnalysisGrid, k: usize) -> Result<Vec<usize>> {
    top_k(&grid.layer_means(), k, false)
}

/// First step whose MSE is within 105% of the curve's minimum.
pub fn select_tau_match(curve: &[f64]) -> Result<usize> {
    let min = curve
        .iter()
        .copied()
        .reduce(f64::min)
        .ok_or_else(|| Error::Config("empty MSE curve".into()))?;
    let threshold = 1.05 * min;
    Ok(curve.iter().position(|&v| v <= threshold).unwrap_or(0))
}
