//! Separable Catmull-Rom resampling with pixel-center alignment.
//!
//! Source coordinate for output pixel `i` is `(i + 0.5) / scale - 0.5`.
//! When shrinking, the kernel is stretched by `1 / scale` so every output
//! pixel integrates its whole footprint (the usual antialiased "bicubic"
//! downsampling). Taps outside the grid are clamped to the border.

use super::FeatureMap;
use crate::error::{Error, Result};

pub const CATMULL_ROM_A: f64 = -0.5;

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn cubic_weight(t: f64) -> f64 {
    let a = CATMULL_ROM_A;
    let t = t.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

/// Tap list `(source index, weight)` per output index along one axis.
struct AxisWeights {
    taps: Vec<Vec<(usize, f64)>>,
}

impl AxisWeights {
    fn new(in_len: usize, out_len: usize) -> Self {
        let scale = out_len as f64 / in_len as f64;
        let stretch = if scale < 1.0 { 1.0 / scale } else { 1.0 };
        let support = 2.0 * stretch;
        let taps = (0..out_len)
            .map(|i| {
                let center = (i as f64 + 0.5) / scale - 0.5;
                let lo = (center - support).floor() as isize;
                let hi = (center + support).ceil() as isize;
                let mut taps: Vec<(usize, f64)> = Vec::new();
                let mut total = 0.0;
                for j in lo..=hi {
                    let w = cubic_weight((j as f64 - center) / stretch);
                    if w == 0.0 {
                        continue;
                    }
                    total += w;
                    let src = j.clamp(0, in_len as isize - 1) as usize;
                    match taps.iter_mut().find(|(s, _)| *s == src) {
                        Some(t) => t.1 += w,
                        None => taps.push((src, w)),
                    }
                }
                for t in &mut taps {
                    t.1 /= total;
                }
                taps
            })
            .collect();
        Self { taps }
    }
}

pub fn bicubic_resize(f: &FeatureMap, out_h: usize, out_w: usize) -> Result<FeatureMap> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidDimensions(format!(
            "resample target {out_h}x{out_w}"
        )));
    }
    let (c, h, w) = f.shape();
    if (out_h, out_w) == (h, w) {
        return Ok(f.clone());
    }
    let wx = AxisWeights::new(w, out_w);
    let wy = AxisWeights::new(h, out_h);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    let mut rows = vec![0.0; h * out_w];
    for ch in 0..c {
        let plane = f.channel(ch);
        for y in 0..h {
            let src = &plane[y * w..(y + 1) * w];
            for (x, taps) in wx.taps.iter().enumerate() {
                rows[y * out_w + x] = taps.iter().map(|&(s, wt)| wt * src[s]).sum();
            }
        }
        for taps in &wy.taps {
            for x in 0..out_w {
                out.push(taps.iter().map(|&(s, wt)| wt * rows[s * out_w + x]).sum());
            }
        }
    }
    Ok(FeatureMap::from_raw(c, out_h, out_w, out))
}

/// Resamples by a real factor; the target size is `round(h * scale)`.
pub fn bicubic_scale(f: &FeatureMap, scale: f64) -> Result<FeatureMap> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "scale {scale} must be positive"
        )));
    }
    let oh = (f.height() as f64 * scale).round() as usize;
    let ow = (f.width() as f64 * scale).round() as usize;
    bicubic_resize(f, oh, ow)
}

pub(crate) fn nearest_mask(
    mask: &[bool],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<bool> {
    let pick = |i: usize, inp: usize, out: usize| -> usize {
        (((i as f64 + 0.5) * inp as f64 / out as f64).floor() as usize).min(inp - 1)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = pick(y, h, out_h);
        for x in 0..out_w {
            out.push(mask[sy * w + pick(x, w, out_w)]);
        }
    }
    out
}
