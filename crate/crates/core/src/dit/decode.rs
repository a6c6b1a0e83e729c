use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::rng::{normals, Role};
use crate::tensor::{GridDims, Tensor};

/// Fixed invertible latent-to-pixel map standing in for a VAE decoder.
///
/// Each latent pixel expands to a `patch × patch × channels` block through an
/// orthogonal channel mix followed by `0.5 + 0.25·x`. `patch² · channels` equals
/// the latent width.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDecoder {
    pub patch: usize,
    pub channels: usize,
    mix: Tensor,
}

const OFFSET: f32 = 0.5;
const GAIN: f32 = 0.25;

impl PatchDecoder {
    pub fn new(latent_channels: usize, seed: u64) -> Self {
        let (patch, channels) = match latent_channels % 3 {
            0 => {
                let p = libm::sqrt((latent_channels / 3) as f64) as usize;
                if p * p * 3 == latent_channels {
                    (p, 3)
                } else {
                    (1, latent_channels)
                }
            }
            _ => (1, latent_channels),
        };
        Self {
            patch,
            channels,
            mix: orthogonal(latent_channels, seed),
        }
    }

    pub fn latent_channels(&self) -> usize {
        self.mix.rows()
    }

    /// Decodes a `T×H×W×C` latent.
    pub fn decode(&self, latent: &Tensor, grid: GridDims) -> Result<DecodedVideo> {
        let c = self.latent_channels();
        if latent.len() != grid.len() * c {
            return Err(shape_err("decode", grid.len() * c, latent.len()));
        }
        let rows = latent.as_matrix().matmul(&self.mix)?;
        let (p, ch) = (self.patch, self.channels);
        let (height, width) = (grid.h * p, grid.w * p);
        let mut data = vec![0.0f32; grid.t * height * width * ch];
        for idx in 0..grid.len() {
            let pos = grid.position(idx);
            for (k, &x) in rows.row(idx).iter().enumerate() {
                let (dy, dx, cc) = (k / (p * ch), (k / ch) % p, k % ch);
                let (y, xx) = (pos.h * p + dy, pos.w * p + dx);
                data[((pos.t * height + y) * width + xx) * ch + cc] = OFFSET + GAIN * x;
            }
        }
        Ok(DecodedVideo {
            frames: grid.t,
            height,
            width,
            channels: ch,
            data,
        })
    }

    /// Inverse of [`decode`](Self::decode); returns `THW × C` rows.
    pub fn encode(&self, video: &DecodedVideo) -> Result<Tensor> {
        let (p, ch, c) = (self.patch, self.channels, self.latent_channels());
        if video.channels != ch || !video.height.is_multiple_of(p) || !video.width.is_multiple_of(p)
        {
            return Err(shape_err("encode", (p, ch), (video.height, video.channels)));
        }
        let grid = GridDims::new(video.frames, video.height / p, video.width / p);
        let mut rows = vec![0.0f32; grid.len() * c];
        for idx in 0..grid.len() {
            let pos = grid.position(idx);
            for k in 0..c {
                let (dy, dx, cc) = (k / (p * ch), (k / ch) % p, k % ch);
                let (y, x) = (pos.h * p + dy, pos.w * p + dx);
                let v = video.data[((pos.t * video.height + y) * video.width + x) * ch + cc];
                rows[idx * c + k] = (v - OFFSET) / GAIN;
            }
        }
        Tensor::matrix(grid.len(), c, rows)?.matmul(&self.mix.transpose())
    }
}

fn orthogonal(n: usize, seed: u64) -> Tensor {
    let raw = normals(seed, 0, Role::Decoder, n * n);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut v: Vec<f64> = raw[i * n..(i + 1) * n]
            .iter()
            .map(|&x| f64::from(x))
            .collect();
        for _ in 0..2 {
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let norm = libm::sqrt(v.iter().map(|x| x * x).sum());
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    let data = basis.into_iter().flatten().map(|x| x as f32).collect();
    Tensor::matrix(n, n, data).expect("square")
}

/// Decoded video, `frames × height × width × channels`, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedVideo {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

/// One decoded frame, `height × width × channels`.
#[derive(Debug, Clone, Copy)]
pub struct Frame<'a> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: &'a [f32],
}

impl DecodedVideo {
    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn frame(&self, t: usize) -> Frame<'_> {
        let n = self.frame_len();
        Frame {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: &self.data[t * n..(t + 1) * n],
        }
    }

    pub fn frames(&self) -> impl Iterator<Item = Frame<'_>> {
        (0..self.frames).map(|t| self.frame(t))
    }
}
