use crate::dit::DecodedVideo;
use crate::error::{shape_err, Error, Result};
use crate::mask::ForegroundMask;

/// Dynamic range of decoded videos used for PSNR.
pub const DECODED_MAX: f64 = 1.0;

/// PSNR in dB over the decoded pixels covered by `background`.
///
/// `background` is on the latent grid; each latent pixel covers a
/// `patch × patch` block of decoded pixels with all channels. Identical
/// backgrounds give `f64::INFINITY`.
pub fn psnr_bg(a: &DecodedVideo, b: &DecodedVideo, background: &ForegroundMask) -> Result<f64> {
    let dims = |v: &DecodedVideo| (v.frames, v.height, v.width, v.channels);
    if dims(a) != dims(b) || a.data.len() != b.data.len() {
        return Err(shape_err("psnr_bg videos", dims(a), dims(b)));
    }
    let g = background.grid;
    if g.t != a.frames
        || g.h == 0
        || g.w == 0
        || !a.height.is_multiple_of(g.h)
        || !a.width.is_multiple_of(g.w)
        || a.height / g.h != a.width / g.w
    {
        return Err(shape_err(
            "psnr_bg mask grid",
            (a.frames, a.height, a.width),
            (g.t, g.h, g.w),
        ));
    }
    let p = a.height / g.h;
    let ch = a.channels;
    let (mut sum, mut count) = (0.0f64, 0usize);
    for idx in background.ones() {
        let pos = g.position(idx);
        for dy in 0..p {
            let y = pos.h * p + dy;
            let start = ((pos.t * a.height + y) * a.width + pos.w * p) * ch;
            let end = start + p * ch;
            for (x, z) in a.data[start..end].iter().zip(&b.data[start..end]) {
                let d = f64::from(*x) - f64::from(*z);
                sum += d * d;
            }
            count += p * ch;
        }
    }
    if count == 0 {
        return Err(Error::EmptyBackground);
    }
    let mse = sum / count as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * libm::log10(DECODED_MAX * DECODED_MAX / mse)
    })
}
