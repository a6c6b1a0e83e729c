use alloc::vec;
use alloc::vec::Vec;

use super::config::ModelConfig;
use super::hooks::{Hooks, LayerTap};
use super::schedule::StepSchedule;
use super::trace::{AttentionTrace, CapturePlan, TraceRecorder};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{joint_attention, rope_in_place, RopeSpec};
use crate::rng::{normals, uniforms, Role};
use crate::tensor::{dot, GridPosition, Tensor};

const NORM_EPS: f32 = 1e-6;

#[derive(Debug, Clone)]
struct Block {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    w1: Tensor,
    w2: Tensor,
    attn_slope: f32,
    mlp_slope: f32,
    watermark: Vec<f32>,
}

/// Immutable toy DiT; shareable across concurrent denoising runs.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    rope: RopeSpec,
    positions: Vec<GridPosition>,
    blocks: Vec<Block>,
    out_proj: Tensor,
}

/// Starting latent of a denoising run.
#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    /// Gaussian noise scaled by the schedule's first sigma.
    Noise(u64),
    /// An explicit `T×H×W×C` latent, e.g. a planted scene.
    Latent(Tensor),
}

/// `σ·I + jitter·R/√C` with `R` standard normal from the `(seed, layer, role)` stream.
fn near_identity(seed: u64, layer: usize, role: Role, c: usize, gain: f32, jitter: f32) -> Tensor {
    let r = normals(seed, layer as u64, role, c * c);
    let s = jitter / libm::sqrtf(c as f32);
    let mut data: Vec<f32> = r.iter().map(|x| x * s).collect();
    for i in 0..c {
        data[i * c + i] += 1.0;
    }
    data.iter_mut().for_each(|x| *x *= gain);
    Tensor::matrix(c, c, data).expect("square")
}

fn dense(seed: u64, layer: usize, role: Role, rows: usize, cols: usize) -> Tensor {
    let s = 1.0 / libm::sqrtf(rows as f32);
    let data = normals(seed, layer as u64, role, rows * cols)
        .into_iter()
        .map(|x| x * s)
        .collect();
    Tensor::matrix(rows, cols, data).expect("dense")
}

/// Per-layer watermark biases; mutually orthonormal while `depth ≤ C`.
fn watermarks(seed: u64, depth: usize, c: usize, magnitude: f32) -> Vec<Vec<f32>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(depth);
    let mut out = Vec::with_capacity(depth);
    for l in 0..depth {
        let mut v: Vec<f64> = normals(seed, l as u64, Role::Watermark, c)
            .into_iter()
            .map(f64::from)
            .collect();
        if basis.len() < c {
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = libm::sqrt(v.iter().map(|x| x * x).sum());
        v.iter_mut().for_each(|x| *x /= n);
        let scale = f64::from(magnitude) * libm::sqrt(c as f64);
        out.push(v.iter().map(|x| (x * scale) as f32).collect());
        if basis.len() < c {
            basis.push(v);
        }
    }
    out
}

/// Per-channel output gain: `gain` on channels rotating at least one radian
/// per grid step, 1 elsewhere.
fn rotary_gains(config: &ModelConfig, gain: f32) -> Result<Vec<f32>> {
    let per_head = config.rope().channel_frequencies()?;
    Ok((0..config.heads)
        .flat_map(|_| per_head.iter().map(|&f| if f >= 1.0 { gain } else { 1.0 }))
        .collect())
}

fn scale_columns(mut m: Tensor, gains: &[f32]) -> Tensor {
    let cols = m.cols();
    for (i, x) in m.data_mut().iter_mut().enumerate() {
        *x *= gains[i % cols];
    }
    m
}

pub(crate) fn rms_norm_rows(x: &Tensor) -> Tensor {
    let mut out = x.as_matrix();
    let c = out.cols() as f32;
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let ms = dot(row, row) / c;
        if ms > 0.0 {
            let inv = 1.0 / libm::sqrtf(ms + NORM_EPS);
            row.iter_mut().for_each(|v| *v *= inv);
        }
    }
    out
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::tanhf(0.797_884_6 * (x + 0.044_715 * x * x * x)))
}

impl Model {
    /// Builds every weight from counter-based streams keyed by `(seed, layer, role)`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (c, seed, dy) = (config.channels, config.seed, config.dynamics);
        let marks = watermarks(seed, config.depth, c, dy.watermark);
        let rotary_gain = rotary_gains(&config, dy.fast_rotary_gain)?;
        let blocks = marks
            .into_iter()
            .enumerate()
            .map(|(l, watermark)| {
                let slopes = uniforms(seed, l as u64, Role::Gate, 2);
                Block {
                    wq: scale_columns(
                        near_identity(seed, l, Role::Query, c, dy.logit_gain, dy.jitter),
                        &rotary_gain,
                    ),
                    wk: scale_columns(
                        near_identity(seed, l, Role::Key, c, 1.0, dy.jitter),
                        &rotary_gain,
                    ),
                    wv: near_identity(seed, l, Role::Value, c, 1.0, dy.jitter),
                    wo: near_identity(seed, l, Role::Out, c, 1.0, dy.jitter),
                    w1: dense(seed, l, Role::MlpIn, c, 2 * c),
                    w2: dense(seed, l, Role::MlpOut, 2 * c, c),
                    attn_slope: slopes[0] - 0.5,
                    mlp_slope: slopes[1] - 0.5,
                    watermark,
                }
            })
            .collect();
        let out_proj = near_identity(seed, usize::MAX, Role::Head, c, 1.0, dy.jitter * 0.2);
        Ok(Self {
            rope: config.rope(),
            positions: config.grid.all_positions(),
            blocks,
            out_proj,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    /// Checksum over every weight, for determinism checks.
    pub fn weight_checksum(&self) -> u64 {
        let mut h = self.out_proj.checksum();
        for b in &self.blocks {
            for t in [&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2] {
                h = h.rotate_left(5) ^ t.checksum();
            }
        }
        h
    }

    /// Unit direction of layer `l`'s watermark bias.
    pub fn watermark_direction(&self, layer: usize) -> Vec<f32> {
        super::prompt::unit(self.blocks[layer].watermark.clone())
    }

    /// Initial latent for `init`, shaped `T×H×W×C`.
    pub fn initial_latent(&self, init: &Init, schedule: &StepSchedule) -> Result<Tensor> {
        let g = self.config.grid;
        let dims = vec![g.t, g.h, g.w, self.config.channels];
        match init {
            Init::Noise(seed) => {
                let s0 = schedule.sigma(0);
                let data = normals(*seed, 0, Role::InitNoise, g.len() * self.config.channels)
                    .into_iter()
                    .map(|x| x * s0)
                    .collect();
                Tensor::new(dims, data)
            }
            Init::Latent(t) => {
                if t.len() != g.len() * self.config.channels || t.cols() != self.config.channels {
                    return Err(shape_err("initial latent", dims, t.dims()));
                }
                t.clone().reshape(dims)
            }
        }
    }

    /// One denoiser evaluation at step `step` with noise level `sigma`.
    ///
    /// Returns the noise prediction `(z − D(z)) / σ` where `D` is the
    /// clean-latent estimate read off the final hidden state. With `skip =
    /// Some(l)` block `l` is bypassed by its residual connection.
    pub fn forward(
        &self,
        z_video: &Tensor,
        z_text: &Tensor,
        step: usize,
        sigma: f32,
        hooks: &mut dyn Hooks,
        skip: Option<usize>,
    ) -> Result<Tensor> {
        let cfg = &self.config;
        let (c, thw) = (cfg.channels, cfg.grid.len());
        if z_video.cols() != c || z_video.rows() != thw {
            return Err(shape_err(
                "forward video",
                (thw, c),
                (z_video.rows(), z_video.cols()),
            ));
        }
        if z_text.cols() != c || z_text.rows() != cfg.text_len {
            return Err(shape_err(
                "forward text",
                (cfg.text_len, c),
                (z_text.rows(), z_text.cols()),
            ));
        }
        if let Some(l) = skip {
            if l >= cfg.depth {
                return Err(Error::OutOfRange {
                    index: l,
                    len: cfg.depth,
                });
            }
        }
        if sigma.is_nan() || sigma <= 0.0 {
            return Err(Error::Config("forward needs sigma > 0".into()));
        }
        let mut h = Tensor::concat_rows(&[&z_video.as_matrix(), z_text])?;
        for (l, block) in self.blocks.iter().enumerate() {
            if skip == Some(l) {
                continue;
            }
            self.block_forward(block, l, &mut h, step, sigma, hooks)?;
        }
        let clean = rms_norm_rows(&h.slice_rows(0..thw)).matmul(&self.out_proj)?;
        let inv = 1.0 / sigma;
        let data = z_video
            .data()
            .iter()
            .zip(clean.data())
            .map(|(z, d)| (z - d) * inv)
            .collect();
        Tensor::matrix(thw, c, data)
    }

    fn block_forward(
        &self,
        b: &Block,
        layer: usize,
        h: &mut Tensor,
        step: usize,
        sigma: f32,
        hooks: &mut dyn Hooks,
    ) -> Result<()> {
        let cfg = &self.config;
        let (c, thw, n) = (cfg.channels, cfg.grid.len(), cfg.seq_len());
        let (heads, hd) = (cfg.heads, cfg.head_dim());
        let want = hooks.capture(step, layer);

        let normed = rms_norm_rows(h);
        let mut q = normed.matmul(&b.wq)?;
        let mut k = normed.matmul(&b.wk)?;
        let v = normed.matmul(&b.wv)?;
        let keys_pre = want.kv.then(|| k.clone());
        rope_in_place(&mut q, 0, &self.positions, &self.rope)?;
        rope_in_place(&mut k, 0, &self.positions, &self.rope)?;

        let injection = hooks.inject(step, layer)?;
        let (k_all, v_all, mask) = match injection {
            None => (k, v.clone(), None),
            Some(inj) => {
                let extra = inj.keys.rows();
                if inj.keys.cols() != c || inj.values.cols() != c || inj.values.rows() != extra {
                    return Err(Error::HookContract(alloc::format!(
                        "injected keys {:?} and values {:?} must share {extra} rows of width {c}",
                        inj.keys.dims(),
                        inj.values.dims()
                    )));
                }
                if inj.mask.rows() != n || inj.mask.cols() != n + extra {
                    return Err(Error::HookContract(alloc::format!(
                        "mask {:?} inconsistent with {extra} injected rows over {n} tokens",
                        inj.mask.dims()
                    )));
                }
                (
                    Tensor::concat_rows(&[&k, &inj.keys])?,
                    Tensor::concat_rows(&[&v, &inj.values])?,
                    Some(inj.mask),
                )
            }
        };

        let mut out = vec![0.0f32; n * c];
        let mut v2t = want.v2t.then(|| vec![0.0f32; thw * cfg.text_len]);
        for head in 0..heads {
            let cols = head * hd..(head + 1) * hd;
            let (w, o) = joint_attention(
                &q.slice_cols(cols.clone())?,
                &k_all.slice_cols(cols.clone())?,
                &v_all.slice_cols(cols.clone())?,
                mask.as_ref(),
            )?;
            for i in 0..n {
                out[i * c + cols.start..i * c + cols.end].copy_from_slice(o.row(i));
            }
            if let Some(acc) = v2t.as_mut() {
                for i in 0..thw {
                    let src = &w.row(i)[thw..n];
                    for (a, &x) in acc[i * cfg.text_len..(i + 1) * cfg.text_len]
                        .iter_mut()
                        .zip(src)
                    {
                        *a += x;
                    }
                }
            }
        }
        let out = Tensor::matrix(n, c, out)?;

        if want.any() {
            let v2t = match v2t {
                Some(mut acc) => {
                    let inv = 1.0 / heads as f32;
                    acc.iter_mut().for_each(|x| *x *= inv);
                    Some(Tensor::matrix(thw, cfg.text_len, acc)?)
                }
                None => None,
            };
            let attn_out = want.attn_out.then(|| out.slice_rows(0..thw));
            hooks.observe(&LayerTap {
                step,
                layer,
                v2t: v2t.as_ref(),
                attn_out: attn_out.as_ref(),
                keys: keys_pre.as_ref(),
                values: want.kv.then_some(&v),
            })?;
        }

        let centered = sigma - 0.5;
        let attn_gate = cfg.dynamics.attn_gate * (1.0 + b.attn_slope * centered);
        let update = out.matmul(&b.wo)?;
        for (x, u) in h.data_mut().iter_mut().zip(update.data()) {
            *x += attn_gate * u;
        }

        let mlp_gate = cfg.dynamics.mlp_gate * (1.0 + b.mlp_slope * centered);
        let mut hidden = rms_norm_rows(h).matmul(&b.w1)?;
        hidden.data_mut().iter_mut().for_each(|x| *x = gelu(*x));
        let update = hidden.matmul(&b.w2)?;
        for i in 0..n {
            let mark = (i < thw).then_some(&b.watermark);
            let (row, u) = (h.row_mut(i), update.row(i));
            for j in 0..c {
                let bias = mark.map_or(0.0, |m| m[j]);
                row[j] += mlp_gate * (u[j] + bias);
            }
        }
        Ok(())
    }
}

/// Runs the full explicit-Euler denoising loop and returns the clean latent.
///
/// Step `s` moves `z` from `σ_s` to `σ_{s+1}` along the predicted noise.
pub fn denoise(
    model: &Model,
    z_text: &Tensor,
    schedule: &StepSchedule,
    init: &Init,
    hooks: &mut dyn Hooks,
    skip: Option<usize>,
) -> Result<Tensor> {
    let mut z = model.initial_latent(init, schedule)?;
    let dims = z.dims().to_vec();
    for s in 0..schedule.steps() {
        let sigma = schedule.sigma(s);
        let eps = model.forward(&z, z_text, s, sigma, hooks, skip)?;
        let dt = schedule.sigma(s + 1) - sigma;
        for (x, e) in z.data_mut().iter_mut().zip(eps.data()) {
            *x += dt * e;
        }
    }
    z.reshape(dims)
}

/// [`denoise`] with a [`TraceRecorder`] following `plan`.
pub fn denoise_traced(
    model: &Model,
    z_text: &Tensor,
    schedule: &StepSchedule,
    init: &Init,
    plan: CapturePlan,
    skip: Option<usize>,
) -> Result<(Tensor, AttentionTrace)> {
    let mut rec = TraceRecorder::new(plan);
    let z = denoise(model, z_text, schedule, init, &mut rec, skip)?;
    Ok((z, rec.into_trace()))
}
