//! Attention kernels shared by every other module.
//!
//! There is exactly one attention implementation, [`joint_attention`]; the
//! toy DiT, the injection path and all oracles in the tests go through it.
//! Reductions run left to right so results are bit-reproducible.

use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{dot, GridPosition, Tensor};

/// Additive masking constant standing in for `log(0)`.
pub const NEG: f32 = -1.0e9;

/// Inputs at or below this are treated as masked and receive exactly zero weight.
const MASKED_BELOW: f32 = NEG * 0.5;

/// Row-wise softmax with per-row max subtraction.
///
/// Entries carrying [`NEG`] are flushed to exactly `0.0`. A row made only of
/// masked entries degenerates to uniform weights.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let mut out = x.as_matrix();
    if out.cols() == 0 {
        return Ok(out);
    }
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i))?;
    }
    Ok(out)
}

fn softmax_in_place(row: &mut [f32]) -> Result<()> {
    let mut max = f32::NEG_INFINITY;
    for &v in row.iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite);
        }
        max = max.max(v);
    }
    let all_masked = max <= MASKED_BELOW;
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        let e = if !all_masked && *v <= MASKED_BELOW {
            0.0
        } else {
            libm::expf(*v - max)
        };
        *v = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
    Ok(())
}

/// Scaled dot-product attention `W = softmax(QKᵀ/√C + mask)`, `O = W·V`.
///
/// Returns `(W, O)`.
pub fn joint_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    add_mask: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    let c = q.cols();
    if k.cols() != c {
        return Err(shape_err("joint_attention keys", c, k.cols()));
    }
    if v.rows() != k.rows() {
        return Err(shape_err("joint_attention values", k.rows(), v.rows()));
    }
    let (n, m) = (q.rows(), k.rows());
    if let Some(mask) = add_mask {
        if mask.rows() != n || mask.cols() != m {
            return Err(shape_err(
                "joint_attention mask",
                (n, m),
                (mask.rows(), mask.cols()),
            ));
        }
    }
    let scale = 1.0 / libm::sqrtf(c as f32);
    let mut w = Vec::with_capacity(n * m);
    for i in 0..n {
        let qi = q.row(i);
        for j in 0..m {
            w.push(dot(qi, k.row(j)) * scale);
        }
        if let Some(mask) = add_mask {
            let row = &mut w[i * m..];
            for (x, &b) in row.iter_mut().zip(mask.row(i)) {
                *x += b;
            }
        }
        softmax_in_place(&mut w[i * m..(i + 1) * m])?;
    }
    let w = Tensor::matrix(n, m, w)?;
    let o = w.matmul(v)?;
    Ok((w, o))
}

/// Channel layout of the 3-axis rotary encoding.
///
/// Each attention head of width `head_dim` is split into three contiguous
/// channel groups for the `t`, `h` and `w` axes with sizes proportional to
/// `axis_ratio`. Within a group, channels `(2j, 2j+1)` are rotated by
/// `coord · base^(-2j/group)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RopeSpec {
    pub head_dim: usize,
    pub axis_ratio: [usize; 3],
    pub base: f64,
}

impl RopeSpec {
    pub fn new(head_dim: usize) -> Self {
        Self {
            head_dim,
            axis_ratio: [1, 1, 1],
            base: 10_000.0,
        }
    }

    /// Sizes of the `(t, h, w)` channel groups within one head.
    pub fn group_sizes(&self) -> Result<[usize; 3]> {
        let total: usize = self.axis_ratio.iter().sum();
        if total == 0 || !self.head_dim.is_multiple_of(total) {
            return Err(Error::RopeGroups {
                channels: self.head_dim,
                reason: "head width not divisible by the axis ratio",
            });
        }
        let unit = self.head_dim / total;
        let sizes = self.axis_ratio.map(|r| r * unit);
        if sizes.iter().any(|s| s % 2 != 0) {
            return Err(Error::RopeGroups {
                channels: self.head_dim,
                reason: "axis group sizes must be even",
            });
        }
        Ok(sizes)
    }

    /// Angular frequency of every channel of one head, in group order.
    pub fn channel_frequencies(&self) -> Result<Vec<f64>> {
        let tables = self.tables()?;
        Ok(tables
            .freqs
            .iter()
            .flat_map(|f| f.iter().flat_map(|&x| [x, x]))
            .collect())
    }

    fn tables(&self) -> Result<RopeTables> {
        let sizes = self.group_sizes()?;
        let mut freqs = [Vec::new(), Vec::new(), Vec::new()];
        for (axis, &g) in sizes.iter().enumerate() {
            freqs[axis] = (0..g / 2)
                .map(|j| libm::pow(self.base, -2.0 * j as f64 / g as f64))
                .collect();
        }
        Ok(RopeTables { sizes, freqs })
    }
}

struct RopeTables {
    sizes: [usize; 3],
    freqs: [Vec<f64>; 3],
}

impl RopeTables {
    fn rotate_head(&self, head: &mut [f32], pos: GridPosition) {
        let coords = [pos.t, pos.h, pos.w];
        let mut offset = 0;
        for ((&coord, freqs), size) in coords.iter().zip(&self.freqs).zip(self.sizes) {
            let coord = coord as f64;
            for (j, &f) in freqs.iter().enumerate() {
                let (s, c) = libm::sincos(coord * f);
                let (s, c) = (s as f32, c as f32);
                let a = offset + 2 * j;
                let (x, y) = (head[a], head[a + 1]);
                head[a] = x * c - y * s;
                head[a + 1] = x * s + y * c;
            }
            offset += size;
        }
    }
}

/// Rotary encoding of each row at its grid position.
///
/// Rows are split into heads of `spec.head_dim` channels and every head is
/// rotated independently.
pub fn rope_encode(x: &Tensor, positions: &[GridPosition], spec: &RopeSpec) -> Result<Tensor> {
    let mut out = x.as_matrix();
    rope_in_place(&mut out, 0, positions, spec)?;
    Ok(out)
}

/// Rotates rows `first..first + positions.len()` of `x` in place.
pub fn rope_in_place(
    x: &mut Tensor,
    first: usize,
    positions: &[GridPosition],
    spec: &RopeSpec,
) -> Result<()> {
    let c = x.cols();
    if spec.head_dim == 0 || !c.is_multiple_of(spec.head_dim) {
        return Err(Error::RopeGroups {
            channels: c,
            reason: "row width not a multiple of the head width",
        });
    }
    if first + positions.len() > x.rows() {
        return Err(shape_err(
            "rope_encode positions",
            x.rows(),
            first + positions.len(),
        ));
    }
    let tables = spec.tables()?;
    for (r, &p) in positions.iter().enumerate() {
        let row = x.row_mut(first + r);
        for head in row.chunks_exact_mut(spec.head_dim) {
            tables.rotate_head(head, p);
        }
    }
    Ok(())
}

/// Scales each nonzero row to unit L2 norm; zero rows stay zero.
pub fn cosine_normalize_rows(x: &Tensor) -> Tensor {
    let mut out = x.as_matrix();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let norm = libm::sqrtf(dot(row, row));
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    out
}
