//! Foreground masks from video-to-text attention segments.
//!
//! A latent pixel is foreground when its mean attention to the character
//! tokens is at least its mean attention to the background tokens. The
//! robust mask sums those per-layer means over a layer set at one step
//! before comparing.

use alloc::vec::Vec;

use crate::dit::{AttentionTrace, Field, PromptLayout};
use crate::error::{shape_err, Error, Result};
use crate::select::{top_k, AnalysisGrid};
use crate::tensor::{GridDims, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForegroundMask {
    pub grid: GridDims,
    bits: Vec<bool>,
}

impl ForegroundMask {
    pub fn new(grid: GridDims, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != grid.len() {
            return Err(shape_err("ForegroundMask", grid.len(), bits.len()));
        }
        Ok(Self { grid, bits })
    }

    pub fn filled(grid: GridDims, value: bool) -> Self {
        Self {
            grid,
            bits: alloc::vec![value; grid.len()],
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Indices of foreground pixels, ascending.
    pub fn ones(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.bits[i]).collect()
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        if self.len() != other.len() {
            return Err(shape_err("mask union", self.len(), other.len()));
        }
        let bits = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(a, b)| *a || *b)
            .collect();
        Self::new(self.grid, bits)
    }

    pub fn not(&self) -> Self {
        Self {
            grid: self.grid,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }
}

/// Background and character column blocks of the video-to-text weights.
pub fn extract_segments(v2t: &Tensor, layout: &PromptLayout) -> Result<(Tensor, Tensor)> {
    layout.validate()?;
    if v2t.cols() != layout.text_len() {
        return Err(Error::Layout(alloc::format!(
            "layout covers {} tokens but weights have {} columns",
            layout.text_len(),
            v2t.cols()
        )));
    }
    Ok((
        v2t.slice_cols(layout.bg_range())?,
        v2t.slice_cols(layout.fg_range())?,
    ))
}

fn row_means(x: &Tensor) -> Vec<f64> {
    let inv = 1.0 / x.cols() as f64;
    (0..x.rows())
        .map(|i| x.row(i).iter().fold(0.0f64, |s, &v| s + f64::from(v)) * inv)
        .collect()
}

/// Per-pixel verdict `mean(W_bg) ≤ mean(W_fg)`; ties are foreground.
pub fn mask_from_segments(w_bg: &Tensor, w_fg: &Tensor, grid: GridDims) -> Result<ForegroundMask> {
    if w_bg.rows() != w_fg.rows() {
        return Err(shape_err("mask_from_segments", w_bg.rows(), w_fg.rows()));
    }
    let bits = row_means(w_bg)
        .into_iter()
        .zip(row_means(w_fg))
        .map(|(b, f)| b <= f)
        .collect();
    ForegroundMask::new(grid, bits)
}

/// Robust mask at step `tau`: sums of per-layer segment means over `layers`.
pub fn aggregate_mask(
    trace: &AttentionTrace,
    tau: usize,
    layers: &[usize],
    layout: &PromptLayout,
    grid: GridDims,
) -> Result<ForegroundMask> {
    let mut bg_sum = alloc::vec![0.0f64; grid.len()];
    let mut fg_sum = alloc::vec![0.0f64; grid.len()];
    for &l in layers {
        let (bg, fg) = extract_segments(trace.get(tau, l, Field::V2t)?, layout)?;
        if bg.rows() != grid.len() {
            return Err(shape_err("aggregate_mask rows", grid.len(), bg.rows()));
        }
        for (acc, m) in bg_sum.iter_mut().zip(row_means(&bg)) {
            *acc += m;
        }
        for (acc, m) in fg_sum.iter_mut().zip(row_means(&fg)) {
            *acc += m;
        }
    }
    let bits = bg_sum.iter().zip(&fg_sum).map(|(b, f)| b <= f).collect();
    ForegroundMask::new(grid, bits)
}

/// Intersection over union; two empty masks score 1.
pub fn iou(m: &ForegroundMask, gt: &ForegroundMask) -> Result<f64> {
    if m.len() != gt.len() {
        return Err(shape_err("iou", gt.len(), m.len()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in m.bits.iter().zip(&gt.bits) {
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// IoU of the single-cell mask at every `(step, layer)` against `gt`.
pub fn sweep_mask_grid(
    trace: &AttentionTrace,
    layout: &PromptLayout,
    gt: &ForegroundMask,
    steps: usize,
    depth: usize,
) -> Result<AnalysisGrid> {
    let mut values = Vec::with_capacity(steps * depth);
    for s in 0..steps {
        for l in 0..depth {
            let (bg, fg) = extract_segments(trace.get(s, l, Field::V2t)?, layout)?;
            values.push(iou(&mask_from_segments(&bg, &fg, gt.grid)?, gt)?);
        }
    }
    AnalysisGrid::new(steps, depth, "iou", values)
}

/// The `k` layers with the highest step-averaged IoU.
pub fn select_mask_layers(grid: &AnalysisGrid, k: usize) -> Result<Vec<usize>> {
    top_k(&grid.layer_means(), k, true)
}

/// First step whose IoU exceeds 95% of the curve's maximum.
///
/// A curve with no positive entry has no such step; the first maximum is
/// returned instead.
pub fn select_tau_mask(curve: &[f64]) -> Result<usize> {
    let max = curve
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or_else(|| Error::Config("empty IoU curve".into()))?;
    let threshold = 0.95 * max;
    Ok(curve
        .iter()
        .position(|&v| v > threshold)
        .unwrap_or_else(|| curve.iter().position(|&v| v == max).unwrap_or(0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn layout(bg: usize, fg: usize, act: usize, pad: usize) -> PromptLayout {
        PromptLayout::new(bg, fg, act, pad).unwrap()
    }

    #[test]
    fn segment_shapes() {
        let v2t = Tensor::zeros(&[8, 7]);
        let (bg, fg) = extract_segments(&v2t, &layout(3, 2, 1, 1)).unwrap();
        assert_eq!(bg.dims(), &[8, 3]);
        assert_eq!(fg.dims(), &[8, 2]);
        assert!(extract_segments(&v2t, &layout(3, 2, 1, 0)).is_err());
    }

    #[test]
    fn single_bg_token_is_column_zero() {
        let v2t = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let (bg, _) = extract_segments(&v2t, &layout(1, 1, 1, 0)).unwrap();
        assert_eq!(bg.data(), &[0.1, 0.4]);
    }

    #[test]
    fn mask_rules() {
        let g = GridDims::new(1, 1, 3);
        let bg = Tensor::matrix(3, 1, vec![0.1; 3]).unwrap();
        let fg = Tensor::matrix(3, 1, vec![0.9; 3]).unwrap();
        assert_eq!(mask_from_segments(&bg, &fg, g).unwrap().count(), 3);
        let tie = Tensor::matrix(3, 2, vec![0.2, 0.4, 0.3, 0.3, 0.0, 0.6]).unwrap();
        let fg = Tensor::matrix(3, 1, vec![0.3; 3]).unwrap();
        assert_eq!(
            mask_from_segments(&tie, &fg, g).unwrap().bits(),
            &[true, true, true]
        );
        assert!(mask_from_segments(&bg, &Tensor::zeros(&[2, 1]), g).is_err());
    }

    #[test]
    fn aggregate_follows_summed_means() {
        // Layer 0 says foreground (0.9 vs 0.1), layer 1 background (0.9 vs 0.0):
        // sums are bg 1.0 vs fg 0.9, so the aggregate is background.
        let g = GridDims::new(1, 1, 1);
        let lay = layout(1, 1, 0, 0);
        let mut trace = AttentionTrace::new();
        trace.insert(
            10,
            0,
            Field::V2t,
            Tensor::matrix(1, 2, vec![0.1, 0.9]).unwrap(),
        );
        trace.insert(
            10,
            1,
            Field::V2t,
            Tensor::matrix(1, 2, vec![0.9, 0.0]).unwrap(),
        );
        assert!(aggregate_mask(&trace, 10, &[0], &lay, g).unwrap().get(0));
        assert!(!aggregate_mask(&trace, 10, &[1], &lay, g).unwrap().get(0));
        assert!(!aggregate_mask(&trace, 10, &[0, 1], &lay, g).unwrap().get(0));
        assert!(aggregate_mask(&trace, 9, &[0], &lay, g).is_err());
    }

    #[test]
    fn iou_examples() {
        let g = GridDims::new(1, 1, 4);
        let m = |b: [bool; 4]| ForegroundMask::new(g, b.to_vec()).unwrap();
        let a = m([true, true, false, false]);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &m([false, false, true, true])).unwrap(), 0.0);
        assert_eq!(iou(&a, &m([true; 4])).unwrap(), 0.5);
        assert_eq!(iou(&m([false; 4]), &m([false; 4])).unwrap(), 1.0);
        assert!(iou(&a, &ForegroundMask::filled(GridDims::new(1, 1, 3), true)).is_err());
    }

    #[test]
    fn tau_mask_rule() {
        assert_eq!(select_tau_mask(&[0.4, 0.4, 0.4]).unwrap(), 0);
        assert_eq!(select_tau_mask(&[0.1, 0.5, 0.96, 1.0, 0.9]).unwrap(), 2);
        assert_eq!(select_tau_mask(&[0.0, 0.0]).unwrap(), 0);
        assert!(select_tau_mask(&[]).is_err());
    }

    #[test]
    fn layer_selection() {
        let mut values = vec![0.2; 3 * 4];
        for s in 0..3 {
            values[s * 4 + 2] = 0.9;
        }
        let g = AnalysisGrid::new(3, 4, "iou", values).unwrap();
        assert_eq!(select_mask_layers(&g, 1).unwrap(), vec![2]);
        assert_eq!(select_mask_layers(&g, 4).unwrap(), vec![0, 1, 2, 3]);
    }
}
