//! Counter-based deterministic streams for weights, scenes and noise.

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

/// What a stream is used for; part of the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub(crate) enum Role {
    Query = 1,
    Key,
    Value,
    Out,
    MlpIn,
    MlpOut,
    Gate,
    Watermark,
    Head,
    Decoder,
    InitNoise,
    Signature,
    Texture,
    Action,
    Embedder,
    SceneNoise,
}

/// Keyed stream: ChaCha8 with the key built from `(seed, index, role)`.
pub(crate) fn stream(seed: u64, index: u64, role: Role) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&index.to_le_bytes());
    key[16..20].copy_from_slice(&(role as u32).to_le_bytes());
    key[20..24].copy_from_slice(b"BVid");
    ChaCha8Rng::from_seed(key)
}

pub(crate) fn normals(seed: u64, index: u64, role: Role, n: usize) -> Vec<f32> {
    let mut rng = stream(seed, index, role);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

pub(crate) fn uniforms(seed: u64, index: u64, role: Role, n: usize) -> Vec<f32> {
    let mut rng = stream(seed, index, role);
    (0..n)
        .map(|_| {
            rand_distr::Uniform::new(0.0f32, 1.0)
                .unwrap()
                .sample(&mut rng)
        })
        .collect()
}
