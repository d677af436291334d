//! Stride-1 3x3 patch extraction and the count-normalized overlap-add fold.

use super::FeatureMap;
use crate::error::{Error, Result};

pub const PATCH_SIZE: usize = 3;
const TAPS: usize = PATCH_SIZE * PATCH_SIZE;

/// One flattened 3x3 patch per pixel, row-major by center position.
///
/// Each vector is laid out channel-major, then 3x3 row-major, so entry
/// `c * 9 + dy * 3 + dx` holds channel `c` at offset `(dy - 1, dx - 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    channels: usize,
    height: usize,
    width: usize,
    vectors: Vec<f64>,
}

impl PatchSet {
    pub fn new(channels: usize, height: usize, width: usize, vectors: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidDimensions(format!(
                "patch set {channels}x{height}x{width}"
            )));
        }
        let expected = height * width * channels * TAPS;
        if vectors.len() != expected {
            return Err(Error::shape(
                format!("{expected} patch values"),
                format!("{}", vectors.len()),
            ));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("patch set"));
        }
        Ok(Self {
            channels,
            height,
            width,
            vectors,
        })
    }

    #[inline]
    pub fn count(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.channels * TAPS
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn patch(&self, index: usize) -> &[f64] {
        let d = self.dim();
        &self.vectors[index * d..(index + 1) * d]
    }

    #[inline]
    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }
}

#[inline]
fn clamp_offset(pos: usize, offset: usize, len: usize) -> usize {
    (pos + offset).saturating_sub(1).min(len - 1)
}

pub fn extract_patches(f: &FeatureMap) -> PatchSet {
    let (c, h, w) = f.shape();
    let dim = c * TAPS;
    let mut vectors = vec![0.0; h * w * dim];
    for y in 0..h {
        for x in 0..w {
            let out = &mut vectors[(y * w + x) * dim..(y * w + x + 1) * dim];
            for ch in 0..c {
                let plane = f.channel(ch);
                for dy in 0..PATCH_SIZE {
                    let sy = clamp_offset(y, dy, h);
                    for dx in 0..PATCH_SIZE {
                        let sx = clamp_offset(x, dx, w);
                        out[ch * TAPS + dy * PATCH_SIZE + dx] = plane[sy * w + sx];
                    }
                }
            }
        }
    }
    PatchSet {
        channels: c,
        height: h,
        width: w,
        vectors,
    }
}

/// Overlap-adds every patch at its source location and divides each pixel by
/// its contribution count, using the same replicate geometry as extraction.
///
/// The per-pixel average is accumulated as a running mean in patch order, so
/// a pixel whose contributions are all equal reproduces that value exactly
/// and `fold_patches(&extract_patches(f)) == f` holds bit for bit.
pub fn fold_patches(p: &PatchSet) -> FeatureMap {
    let (c, h, w) = (p.channels, p.height, p.width);
    let n = h * w;
    let mut mean = vec![0.0; c * n];
    let mut count = vec![0u32; n];
    for y in 0..h {
        for x in 0..w {
            let patch = p.patch(y * w + x);
            for dy in 0..PATCH_SIZE {
                let ty = clamp_offset(y, dy, h);
                for dx in 0..PATCH_SIZE {
                    let tx = clamp_offset(x, dx, w);
                    let pix = ty * w + tx;
                    count[pix] += 1;
                    let k = f64::from(count[pix]);
                    for ch in 0..c {
                        let m = &mut mean[ch * n + pix];
                        *m += (patch[ch * TAPS + dy * PATCH_SIZE + dx] - *m) / k;
                    }
                }
            }
        }
    }
    FeatureMap::from_raw(c, h, w, mean)
}
