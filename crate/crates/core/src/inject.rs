//! Identity key/value cache and region-restricted injection into frame runs.
//!
//! The cache holds pre-rotary keys, so re-positioning an identity token at a
//! frame pixel is a single forward rotary encoding at that pixel.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::ops::Range;

use crate::dit::{Injection, PromptLayout};
use crate::error::{shape_err, Error, Result};
use crate::mask::ForegroundMask;
use crate::matching::MatchMap;
use crate::numerics::{joint_attention, rope_encode, RopeSpec, NEG};
use crate::tensor::{GridDims, Tensor};

/// Bytes of one cached `(K, V)` pair of `rows × channels` f32 matrices.
pub fn entry_bytes(rows: usize, channels: usize) -> u64 {
    2 * rows as u64 * channels as u64 * 4
}

/// Closed-form cache size for `steps × layers` entries.
pub fn cache_bytes(steps: usize, layers: usize, rows: usize, channels: usize) -> u64 {
    steps as u64 * layers as u64 * entry_bytes(rows, channels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvEntry {
    pub keys: Tensor,
    pub values: Tensor,
}

/// Pre-rotary keys and values of the identity run at scheduled `(step, layer)` cells.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    steps: BTreeSet<usize>,
    layers: BTreeSet<usize>,
    rows: usize,
    channels: usize,
    budget: Option<u64>,
    bytes: u64,
    entries: BTreeMap<(usize, usize), KvEntry>,
}

impl KvCache {
    /// Empty cache accepting `(s, l)` for `s ∈ steps`, `l ∈ layers`, each entry
    /// `rows × channels`. `budget` caps the byte counter.
    pub fn new(
        steps: impl IntoIterator<Item = usize>,
        layers: impl IntoIterator<Item = usize>,
        rows: usize,
        channels: usize,
        budget: Option<u64>,
    ) -> Self {
        Self {
            steps: steps.into_iter().collect(),
            layers: layers.into_iter().collect(),
            rows,
            channels,
            budget,
            bytes: 0,
            entries: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> &BTreeSet<usize> {
        &self.steps
    }

    pub fn layers(&self) -> &BTreeSet<usize> {
        &self.layers
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn budget(&self) -> Option<u64> {
        self.budget
    }

    pub fn is_scheduled(&self, step: usize, layer: usize) -> bool {
        self.steps.contains(&step) && self.layers.contains(&layer)
    }

    /// Current byte counter.
    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    /// Bytes the cache reaches once every scheduled cell is admitted.
    pub fn projected_bytes(&self) -> u64 {
        cache_bytes(
            self.steps.len(),
            self.layers.len(),
            self.rows,
            self.channels,
        )
    }

    /// Fails when admitting one more entry at `(step, layer)` would exceed the budget.
    pub fn budget_check(&self, step: usize, layer: usize) -> Result<()> {
        let needed = self.bytes + entry_bytes(self.rows, self.channels);
        match self.budget {
            Some(budget) if needed > budget => Err(Error::CacheBudgetExceeded {
                step,
                layer,
                needed,
                budget,
            }),
            _ => Ok(()),
        }
    }

    /// Admits an entry; replacing an existing cell leaves the counter unchanged.
    pub fn put(&mut self, step: usize, layer: usize, keys: Tensor, values: Tensor) -> Result<()> {
        if !self.is_scheduled(step, layer) {
            return Err(Error::NotScheduled { step, layer });
        }
        let want = [self.rows, self.channels];
        for t in [&keys, &values] {
            if t.dims() != want {
                return Err(shape_err("KvCache::put", want, t.dims()));
            }
        }
        let fresh = !self.entries.contains_key(&(step, layer));
        if fresh {
            self.budget_check(step, layer)?;
            self.bytes += entry_bytes(self.rows, self.channels);
        }
        self.entries.insert((step, layer), KvEntry { keys, values });
        Ok(())
    }

    pub fn get(&self, step: usize, layer: usize) -> Result<&KvEntry> {
        self.entries
            .get(&(step, layer))
            .ok_or(Error::MissingCache { step, layer })
    }

    pub fn contains(&self, step: usize, layer: usize) -> bool {
        self.entries.contains_key(&(step, layer))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), &KvEntry)> {
        self.entries.iter().map(|(&k, v)| (k, v))
    }
}

/// Frame-side and identity-side pixel indices of the injected regions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RegionIndices {
    pub frm_fg: Vec<usize>,
    pub frm_bg: Vec<usize>,
    pub id_fg: Vec<usize>,
    pub id_bg: Vec<usize>,
}

/// Frame foreground pixels, and pixels that are background in both videos.
pub fn derive_region_indices(
    m_id: &ForegroundMask,
    m_frm: &ForegroundMask,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let union = m_id.union(m_frm)?;
    let fg = m_frm.ones();
    let bg = (0..union.len()).filter(|&i| !union.get(i)).collect();
    Ok((fg, bg))
}

/// Identity-side counterparts: matched pixels for the foreground, the same
/// pixels for the background.
pub fn map_identity_indices(
    map: &MatchMap,
    frm_fg: &[usize],
    frm_bg: &[usize],
) -> Result<RegionIndices> {
    let n = map.len();
    if let Some(&i) = frm_fg.iter().chain(frm_bg).find(|&&i| i >= n) {
        return Err(Error::OutOfRange { index: i, len: n });
    }
    Ok(RegionIndices {
        frm_fg: frm_fg.to_vec(),
        frm_bg: frm_bg.to_vec(),
        id_fg: frm_fg.iter().map(|&j| map.get(j)).collect(),
        id_bg: frm_bg.to_vec(),
    })
}

/// Identity keys and values re-positioned at frame pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionBlocks {
    pub k_fg: Tensor,
    pub k_bg: Tensor,
    pub v_fg: Tensor,
    pub v_bg: Tensor,
}

/// Gathers cached video rows at the identity indices and rotary-encodes the
/// keys at the corresponding frame positions.
pub fn build_injection(
    entry: &KvEntry,
    idx: &RegionIndices,
    grid: GridDims,
    rope: &RopeSpec,
) -> Result<InjectionBlocks> {
    if idx.id_fg.len() != idx.frm_fg.len() || idx.id_bg.len() != idx.frm_bg.len() {
        return Err(shape_err(
            "region indices",
            (idx.frm_fg.len(), idx.frm_bg.len()),
            (idx.id_fg.len(), idx.id_bg.len()),
        ));
    }
    let n = grid.len();
    if let Some(&i) = idx
        .id_fg
        .iter()
        .chain(&idx.id_bg)
        .chain(&idx.frm_fg)
        .chain(&idx.frm_bg)
        .find(|&&i| i >= n)
    {
        return Err(Error::OutOfRange { index: i, len: n });
    }
    let positions = |ix: &[usize]| ix.iter().map(|&i| grid.position(i)).collect::<Vec<_>>();
    Ok(InjectionBlocks {
        k_fg: rope_encode(
            &entry.keys.gather_rows(&idx.id_fg)?,
            &positions(&idx.frm_fg),
            rope,
        )?,
        k_bg: rope_encode(
            &entry.keys.gather_rows(&idx.id_bg)?,
            &positions(&idx.frm_bg),
            rope,
        )?,
        v_fg: entry.values.gather_rows(&idx.id_fg)?,
        v_bg: entry.values.gather_rows(&idx.id_bg)?,
    })
}

/// Row ranges of the fused key/value sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusedLayout {
    pub frame: Range<usize>,
    pub fg: Range<usize>,
    pub bg: Range<usize>,
}

impl FusedLayout {
    pub fn len(&self) -> usize {
        self.bg.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn injected(&self) -> usize {
        self.len() - self.frame.len()
    }
}

/// `[frame | identity fg | identity bg]` row concatenation.
pub fn fuse_kv(
    k_frm: &Tensor,
    v_frm: &Tensor,
    blocks: &InjectionBlocks,
) -> Result<(Tensor, Tensor, FusedLayout)> {
    let c = k_frm.cols();
    if k_frm.rows() != v_frm.rows() {
        return Err(shape_err("fuse_kv frame rows", k_frm.rows(), v_frm.rows()));
    }
    for t in [
        v_frm,
        &blocks.k_fg,
        &blocks.k_bg,
        &blocks.v_fg,
        &blocks.v_bg,
    ] {
        if t.cols() != c {
            return Err(shape_err("fuse_kv width", c, t.cols()));
        }
    }
    if blocks.k_fg.rows() != blocks.v_fg.rows() || blocks.k_bg.rows() != blocks.v_bg.rows() {
        return Err(shape_err(
            "fuse_kv blocks",
            (blocks.k_fg.rows(), blocks.k_bg.rows()),
            (blocks.v_fg.rows(), blocks.v_bg.rows()),
        ));
    }
    let n = k_frm.rows();
    let fg = n..n + blocks.k_fg.rows();
    let bg = fg.end..fg.end + blocks.k_bg.rows();
    let k = Tensor::concat_rows(&[k_frm, &blocks.k_fg, &blocks.k_bg])?;
    let v = Tensor::concat_rows(&[v_frm, &blocks.v_fg, &blocks.v_bg])?;
    Ok((
        k,
        v,
        FusedLayout {
            frame: 0..n,
            fg,
            bg,
        },
    ))
}

/// Additive mask over the fused sequence.
///
/// Frame foreground pixels may attend the frame sequence and the identity
/// foreground block, frame background pixels the frame sequence and the
/// identity background block, and text tokens only the frame sequence.
pub fn build_region_mask(
    fused: &FusedLayout,
    m_frm: &ForegroundMask,
    prompt: &PromptLayout,
) -> Result<Tensor> {
    let n = fused.frame.len();
    let thw = m_frm.len();
    if thw + prompt.text_len() != n {
        return Err(shape_err("region mask rows", n, thw + prompt.text_len()));
    }
    let cols = fused.len();
    let mut data = alloc::vec![0.0f32; n * cols];
    for (i, row) in data.chunks_exact_mut(cols).enumerate() {
        let allowed = match i {
            i if i >= thw => None,
            i if m_frm.get(i) => Some(&fused.fg),
            _ => Some(&fused.bg),
        };
        for (j, x) in row.iter_mut().enumerate().skip(n) {
            if allowed.is_none_or(|r| !r.contains(&j)) {
                *x = NEG;
            }
        }
    }
    Tensor::matrix(n, cols, data)
}

/// Attention of frame queries over the fused sequence under `mask`.
pub fn injected_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &Tensor,
) -> Result<(Tensor, Tensor)> {
    joint_attention(q, k, v, Some(mask))
}

/// Packs injection blocks and their region mask for a model hook.
pub fn injection(
    blocks: InjectionBlocks,
    m_frm: &ForegroundMask,
    prompt: &PromptLayout,
) -> Result<Injection> {
    let n = m_frm.len() + prompt.text_len();
    let fg = n..n + blocks.k_fg.rows();
    let fused = FusedLayout {
        frame: 0..n,
        bg: fg.end..fg.end + blocks.k_bg.rows(),
        fg,
    };
    let mask = build_region_mask(&fused, m_frm, prompt)?;
    Ok(Injection {
        keys: Tensor::concat_rows(&[&blocks.k_fg, &blocks.k_bg])?,
        values: Tensor::concat_rows(&[&blocks.v_fg, &blocks.v_bg])?,
        mask,
    })
}
