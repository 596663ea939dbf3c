//! Conversion of external RGB frames to the encoder's grayscale input.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// ITU-R 601 luma of a `[3, H, W]` RGB frame, in integer arithmetic with
/// round-half-up.
pub fn luma_601(rgb: &[u8], h: usize, w: usize) -> Result<Vec<u8>> {
    let n = h * w;
    if rgb.len() != 3 * n {
        return Err(Error::dim("luma_601", &[3, h, w], &[rgb.len()]));
    }
    let (r, rest) = rgb.split_at(n);
    let (g, b) = rest.split_at(n);
    Ok((0..n)
        .map(|i| {
            let y = 299 * r[i] as u32 + 587 * g[i] as u32 + 114 * b[i] as u32;
            ((y + 500) / 1000) as u8
        })
        .collect())
}

/// Area-averaging resize of one `[H, W]` plane: every output pixel is the mean
/// of the input it covers, with fractional edge weights, rounded to nearest.
pub fn resize_area(src: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Result<Vec<u8>> {
    if src.len() != h * w || oh == 0 || ow == 0 || h == 0 || w == 0 {
        return Err(Error::dim("resize_area", &[h, w], &[src.len(), oh, ow]));
    }
    let weights = |n_in: usize, n_out: usize| -> Vec<Vec<(usize, f64)>> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let lo = o as f64 * scale;
                let hi = lo + scale;
                let mut v = Vec::new();
                let mut i = lo as usize;
                while (i as f64) < hi && i < n_in {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)) / scale;
                    if overlap > 0.0 {
                        v.push((i, overlap));
                    }
                    i += 1;
                }
                v
            })
            .collect()
    };
    let wy = weights(h, oh);
    let wx = weights(w, ow);
    let mut out = vec![0u8; oh * ow];
    for (oy, ys) in wy.iter().enumerate() {
        for (ox, xs) in wx.iter().enumerate() {
            let mut acc = 0.0;
            for &(y, fy) in ys {
                for &(x, fx) in xs {
                    acc += fy * fx * src[y * w + x] as f64;
                }
            }
            out[oy * ow + ox] = libm::round(acc).clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}
