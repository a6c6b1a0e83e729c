use alloc::format;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::rng::{normals, Role};
use crate::tensor::Tensor;

/// Token counts of a `[Background],[Character],[Action]` prompt plus padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptLayout {
    pub bg: usize,
    pub fg: usize,
    pub act: usize,
    pub pad: usize,
}

impl PromptLayout {
    pub fn new(bg: usize, fg: usize, act: usize, pad: usize) -> Result<Self> {
        let l = Self { bg, fg, act, pad };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bg == 0 || self.fg == 0 {
            return Err(Error::Layout(format!(
                "background and character segments need at least one token (got {}, {})",
                self.bg, self.fg
            )));
        }
        Ok(())
    }

    /// `L_text`.
    pub fn text_len(&self) -> usize {
        self.bg + self.fg + self.act + self.pad
    }

    pub fn bg_range(&self) -> Range<usize> {
        0..self.bg
    }

    pub fn fg_range(&self) -> Range<usize> {
        self.bg..self.bg + self.fg
    }

    pub fn act_range(&self) -> Range<usize> {
        self.bg + self.fg..self.bg + self.fg + self.act
    }
}

/// Unit background/character signature vectors shared by a prompt group.
#[derive(Debug, Clone, PartialEq)]
pub struct Signatures {
    pub bg: Vec<f32>,
    pub fg: Vec<f32>,
}

impl Signatures {
    /// Random unit signatures with `fg` orthogonalised against `bg`.
    pub fn random(seed: u64, channels: usize) -> Self {
        let bg = unit(normals(seed, 0, Role::Signature, channels));
        let mut fg = normals(seed, 1, Role::Signature, channels);
        let proj: f32 = fg.iter().zip(&bg).map(|(a, b)| a * b).sum();
        for (f, b) in fg.iter_mut().zip(&bg) {
            *f -= proj * b;
        }
        Self { bg, fg: unit(fg) }
    }
}

pub(crate) fn unit(mut v: Vec<f32>) -> Vec<f32> {
    let n = libm::sqrtf(v.iter().map(|x| x * x).sum());
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

const TOKEN_JITTER: f32 = 0.05;

/// Synthetic text embedding `L_text × C`.
///
/// Background and character rows carry the scene signatures (or signatures
/// drawn from `prompt_seed` when no scene is given), action rows are drawn
/// from `action_seed`, padding rows are zero. Rows have norm close to `√C`.
pub fn embed_prompt(
    layout: &PromptLayout,
    channels: usize,
    scene: Option<&Signatures>,
    prompt_seed: u64,
    action_seed: u64,
) -> Result<Tensor> {
    layout.validate()?;
    let own;
    let sig = match scene {
        Some(s) => {
            if s.bg.len() != channels || s.fg.len() != channels {
                return Err(crate::error::shape_err(
                    "embed_prompt signature",
                    channels,
                    s.bg.len(),
                ));
            }
            s
        }
        None => {
            own = Signatures::random(prompt_seed, channels);
            &own
        }
    };
    let action = unit(normals(action_seed, 0, Role::Action, channels));
    let scale = libm::sqrtf(channels as f32);
    let mut data = Vec::with_capacity(layout.text_len() * channels);
    let segments: [(&[f32], usize, u64); 3] = [
        (&sig.bg, layout.bg, 0),
        (&sig.fg, layout.fg, 1),
        (&action, layout.act, 2),
    ];
    for (base, count, seg) in segments {
        let seed = if seg == 2 { action_seed } else { prompt_seed };
        for tok in 0..count {
            let jitter = normals(seed, (seg << 32) | tok as u64, Role::Action, channels);
            let row: Vec<f32> = base
                .iter()
                .zip(&jitter)
                .map(|(b, j)| b + TOKEN_JITTER * j / scale)
                .collect();
            data.extend(unit(row).into_iter().map(|x| x * scale));
        }
    }
    data.resize(layout.text_len() * channels, 0.0);
    Tensor::matrix(layout.text_len(), channels, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dot;

    #[test]
    fn layout_validation() {
        assert!(PromptLayout::new(0, 2, 1, 0).is_err());
        assert!(PromptLayout::new(2, 0, 1, 0).is_err());
        let l = PromptLayout::new(3, 2, 4, 1).unwrap();
        assert_eq!(l.text_len(), 10);
        assert_eq!(l.fg_range(), 3..5);
    }

    #[test]
    fn padding_rows_are_zero() {
        let l = PromptLayout::new(2, 2, 2, 3).unwrap();
        let e = embed_prompt(&l, 12, None, 1, 2).unwrap();
        for i in 6..9 {
            assert!(e.row(i).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn scene_rows_follow_signatures() {
        let l = PromptLayout::new(3, 3, 2, 0).unwrap();
        let sig = Signatures::random(5, 24);
        let e = embed_prompt(&l, 24, Some(&sig), 1, 2).unwrap();
        for i in l.fg_range() {
            let r = e.row(i);
            let cos = dot(r, &sig.fg) / libm::sqrtf(dot(r, r));
            assert!(cos >= 0.99, "cos {cos}");
        }
        assert!(dot(&sig.bg, &sig.fg).abs() < 1e-6);
    }

    #[test]
    fn deterministic() {
        let l = PromptLayout::new(2, 2, 2, 2).unwrap();
        assert_eq!(
            embed_prompt(&l, 12, None, 4, 5),
            embed_prompt(&l, 12, None, 4, 5)
        );
        assert_ne!(
            embed_prompt(&l, 12, None, 4, 5),
            embed_prompt(&l, 12, None, 4, 6)
        );
    }
}
