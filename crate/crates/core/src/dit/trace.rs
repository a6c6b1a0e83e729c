use alloc::collections::{BTreeMap, BTreeSet};
use core::ops::Range;

use super::hooks::{Capture, Hooks, LayerTap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Kind of captured quantity; the discriminant is the on-disk field tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum Field {
    V2t = 1,
    AttnOut = 2,
    Key = 3,
    Value = 4,
}

impl Field {
    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Self::V2t),
            2 => Some(Self::AttnOut),
            3 => Some(Self::Key),
            4 => Some(Self::Value),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::V2t => "v2t",
            Self::AttnOut => "attn_out",
            Self::Key => "key",
            Self::Value => "value",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TraceKey {
    pub step: usize,
    pub layer: usize,
    pub field: Field,
}

/// Captured attention internals keyed by `(step, layer, field)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionTrace {
    entries: BTreeMap<TraceKey, Tensor>,
}

impl AttentionTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, step: usize, layer: usize, field: Field, value: Tensor) {
        self.entries.insert(TraceKey { step, layer, field }, value);
    }

    pub fn get(&self, step: usize, layer: usize, field: Field) -> Result<&Tensor> {
        self.entries
            .get(&TraceKey { step, layer, field })
            .ok_or(Error::MissingTrace {
                step,
                layer,
                field: field.name(),
            })
    }

    pub fn contains(&self, step: usize, layer: usize, field: Field) -> bool {
        self.entries.contains_key(&TraceKey { step, layer, field })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TraceKey, &Tensor)> {
        self.entries.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &TraceKey> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn remove(&mut self, step: usize, layer: usize, field: Field) -> Option<Tensor> {
        self.entries.remove(&TraceKey { step, layer, field })
    }

    /// Moves every entry of `other` into `self`.
    pub fn merge(&mut self, other: Self) {
        self.entries.extend(other.entries);
    }
}

/// A rectangle of `(step, layer)` cells.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CellSet {
    pub steps: Range<usize>,
    pub layers: BTreeSet<usize>,
}

impl CellSet {
    pub fn empty() -> Self {
        Self {
            steps: 0..0,
            layers: BTreeSet::new(),
        }
    }

    pub fn new(steps: Range<usize>, layers: impl IntoIterator<Item = usize>) -> Self {
        Self {
            steps,
            layers: layers.into_iter().collect(),
        }
    }

    pub fn at_step(step: usize, layers: impl IntoIterator<Item = usize>) -> Self {
        Self::new(step..step + 1, layers)
    }

    /// Every step and every layer below `depth`.
    pub fn all(depth: usize) -> Self {
        Self::new(0..usize::MAX, 0..depth)
    }

    pub fn contains(&self, step: usize, layer: usize) -> bool {
        self.steps.contains(&step) && self.layers.contains(&layer)
    }

    pub fn union(&self, other: &Self) -> Self {
        if self.layers.is_empty() || self.steps.is_empty() {
            return other.clone();
        }
        if other.layers.is_empty() || other.steps.is_empty() {
            return self.clone();
        }
        Self {
            steps: self.steps.start.min(other.steps.start)..self.steps.end.max(other.steps.end),
            layers: self.layers.union(&other.layers).copied().collect(),
        }
    }
}

/// Which cells retain which fields.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CapturePlan {
    pub v2t: CellSet,
    pub attn_out: CellSet,
    pub kv: CellSet,
}

impl CapturePlan {
    pub fn nothing() -> Self {
        Self {
            v2t: CellSet::empty(),
            attn_out: CellSet::empty(),
            kv: CellSet::empty(),
        }
    }

    /// Everything at every cell; used by the analysis sweeps.
    pub fn everything(depth: usize) -> Self {
        Self {
            v2t: CellSet::all(depth),
            attn_out: CellSet::all(depth),
            kv: CellSet::all(depth),
        }
    }

    pub fn capture(&self, step: usize, layer: usize) -> Capture {
        Capture {
            v2t: self.v2t.contains(step, layer),
            attn_out: self.attn_out.contains(step, layer),
            kv: self.kv.contains(step, layer),
        }
    }
}

/// Hooks that copy the planned quantities into an [`AttentionTrace`].
#[derive(Debug, Clone, Default)]
pub struct TraceRecorder {
    pub plan: CapturePlan,
    pub trace: AttentionTrace,
}

impl TraceRecorder {
    pub fn new(plan: CapturePlan) -> Self {
        Self {
            plan,
            trace: AttentionTrace::new(),
        }
    }

    pub fn into_trace(self) -> AttentionTrace {
        self.trace
    }
}

impl Hooks for TraceRecorder {
    fn capture(&self, step: usize, layer: usize) -> Capture {
        self.plan.capture(step, layer)
    }

    fn observe(&mut self, tap: &LayerTap<'_>) -> Result<()> {
        let want = self.plan.capture(tap.step, tap.layer);
        let mut put = |field, t: Option<&Tensor>| {
            if let Some(t) = t {
                self.trace.insert(tap.step, tap.layer, field, t.clone());
            }
        };
        if want.v2t {
            put(Field::V2t, tap.v2t);
        }
        if want.attn_out {
            put(Field::AttnOut, tap.attn_out);
        }
        if want.kv {
            put(Field::Key, tap.keys);
            put(Field::Value, tap.values);
        }
        Ok(())
    }
}
