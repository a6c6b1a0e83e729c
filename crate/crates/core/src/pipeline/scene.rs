use alloc::vec::Vec;

use crate::dit::{prompt::unit, Signatures};
use crate::error::{Error, Result};
use crate::mask::ForegroundMask;
use crate::matching::{MatchMap, MatchScope};
use crate::rng::{normals, Role};
use crate::tensor::{GridDims, GridPosition, Tensor};

/// Axis-aligned rectangle in latent pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: isize,
    pub left: isize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, h: usize, w: usize) -> bool {
        let (h, w) = (h as isize, w as isize);
        h >= self.top
            && h < self.top + self.height as isize
            && w >= self.left
            && w < self.left + self.width as isize
    }

    fn offset(&self, dh: isize, dw: isize) -> Self {
        Self {
            top: self.top + dh,
            left: self.left + dw,
            ..*self
        }
    }

    fn inside(&self, grid: GridDims) -> bool {
        self.top >= 0
            && self.left >= 0
            && self.top + self.height as isize <= grid.h as isize
            && self.left + self.width as isize <= grid.w as isize
    }
}

/// Parameters of a planted scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub grid: GridDims,
    pub channels: usize,
    /// Character rectangle in frame 0 of the identity video.
    pub rect: Rect,
    /// Per-frame displacement `(dh, dw)` of the character.
    pub velocity: (isize, isize),
    /// Displacement `(dh, dw)` of the character in the frame-video variant.
    pub shift: (isize, isize),
    /// Standard deviation of per-run Gaussian perturbation of the latent.
    pub noise_sigma: f32,
    /// Relative strength of the per-pixel character texture.
    pub fg_texture: f32,
    /// Relative strength of the per-pixel background texture.
    pub bg_texture: f32,
}

impl SceneParams {
    /// A 3×3 character on the desk8 grid, shifted two columns in the frame video.
    pub fn desk(grid: GridDims, channels: usize) -> Self {
        Self {
            grid,
            channels,
            rect: Rect {
                top: 2,
                left: 1,
                height: 3,
                width: 3,
            },
            velocity: (0, 0),
            shift: (0, 2),
            noise_sigma: 0.0,
            fg_texture: 0.8,
            bg_texture: 0.5,
        }
    }
}

/// Which of the two generations a latent or mask belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Identity,
    Frame,
}

/// Scene with planted background/character content and known correspondences.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub params: SceneParams,
    pub signatures: Signatures,
}

/// A scene together with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedScene {
    pub scene: SyntheticScene,
    pub identity_mask: ForegroundMask,
    pub frame_mask: ForegroundMask,
    /// Frame-video pixel → identity-video pixel.
    pub map: MatchMap,
}

impl SyntheticScene {
    pub fn rect(&self, t: usize, variant: Variant) -> Rect {
        let p = &self.params;
        let moved = p
            .rect
            .offset(p.velocity.0 * t as isize, p.velocity.1 * t as isize);
        match variant {
            Variant::Identity => moved,
            Variant::Frame => moved.offset(p.shift.0, p.shift.1),
        }
    }

    pub fn mask(&self, variant: Variant) -> ForegroundMask {
        let g = self.params.grid;
        let bits = (0..g.len())
            .map(|i| {
                let p = g.position(i);
                self.rect(p.t, variant).contains(p.h, p.w)
            })
            .collect();
        ForegroundMask::new(g, bits).expect("grid-sized")
    }

    /// Translation inside the character, identity on the background.
    pub fn ground_truth_map(&self) -> MatchMap {
        let g = self.params.grid;
        let (dh, dw) = self.params.shift;
        let target = (0..g.len())
            .map(|j| {
                let p = g.position(j);
                if self.rect(p.t, Variant::Frame).contains(p.h, p.w) {
                    g.index(GridPosition::new(
                        p.t,
                        (p.h as isize - dh) as usize,
                        (p.w as isize - dw) as usize,
                    ))
                } else {
                    j
                }
            })
            .collect();
        MatchMap::new(g, MatchScope::PerFrame, target).expect("translation stays in frame")
    }

    /// Planted `T×H×W×C` latent plus `noise_sigma` Gaussian noise from `run_seed`.
    pub fn latent(&self, variant: Variant, run_seed: u64) -> Tensor {
        let p = &self.params;
        let (g, c) = (p.grid, p.channels);
        let scale = libm::sqrtf(c as f32);
        let noise = normals(run_seed, self.seed, Role::SceneNoise, g.len() * c);
        let mut data = Vec::with_capacity(g.len() * c);
        for i in 0..g.len() {
            let pos = g.position(i);
            let rect = self.rect(pos.t, variant);
            let (base, tex, strength) = if rect.contains(pos.h, pos.w) {
                let oy = (pos.h as isize - rect.top) as u64;
                let ox = (pos.w as isize - rect.left) as u64;
                let tex = normals(self.seed, (1 << 40) | (oy << 20) | ox, Role::Texture, c);
                (&self.signatures.fg, tex, p.fg_texture)
            } else {
                let tex = normals(
                    self.seed,
                    ((pos.h as u64) << 20) | pos.w as u64,
                    Role::Texture,
                    c,
                );
                (&self.signatures.bg, tex, p.bg_texture)
            };
            let tex = unit(tex);
            let row = unit(
                base.iter()
                    .zip(&tex)
                    .map(|(b, t)| b + strength * t)
                    .collect(),
            );
            data.extend(row.into_iter().map(|x| x * scale));
        }
        for (x, n) in data.iter_mut().zip(noise) {
            *x += p.noise_sigma * n;
        }
        Tensor::new(alloc::vec![g.t, g.h, g.w, c], data).expect("latent dims")
    }
}

/// Builds a planted scene and its ground truth; the character must stay on
/// the grid in every frame of both variants.
pub fn make_scene(seed: u64, params: SceneParams) -> Result<PlantedScene> {
    let g = params.grid;
    if params.rect.height == 0 || params.rect.width == 0 {
        return Err(Error::OutOfBounds(alloc::format!(
            "empty rectangle {:?}",
            params.rect
        )));
    }
    let scene = SyntheticScene {
        seed,
        signatures: Signatures::random(seed, params.channels),
        params,
    };
    for t in 0..g.t {
        for v in [Variant::Identity, Variant::Frame] {
            let r = scene.rect(t, v);
            if !r.inside(g) {
                return Err(Error::OutOfBounds(alloc::format!("{v:?} frame {t}: {r:?}")));
            }
        }
    }
    Ok(PlantedScene {
        identity_mask: scene.mask(Variant::Identity),
        frame_mask: scene.mask(Variant::Frame),
        map: scene.ground_truth_map(),
        scene,
    })
}
