//! Fixed filter-bank encoders for the RGB and depth streams.

use crate::error::{Error, Result};
use crate::grid::{bicubic_resize, conv2d, ConvKernel, DepthMap, FeatureMap, RgbImage};

const STANDARDIZE_EPS: f64 = 1e-8;

/// Stencils in bank order: identity, Gaussian, Sobel x, Sobel y, Laplacian,
/// 45 and 135 degree edges, box. Derivative stencils are normalized so a
/// unit ramp gives a unit response.
pub const BANK_SIZE: usize = 8;

fn bank_stencils() -> [[f64; 9]; BANK_SIZE] {
    let gauss = {
        let e = (-0.5f64).exp();
        let taps = [e * e, e, e * e, e, 1.0, e, e * e, e, e * e];
        let total: f64 = taps.iter().sum();
        taps.map(|t| t / total)
    };
    [
        [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
        gauss,
        [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0].map(|t| t / 8.0),
        [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0].map(|t| t / 8.0),
        [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0],
        [-2.0, -1.0, 0.0, -1.0, 0.0, 1.0, 0.0, 1.0, 2.0].map(|t| t / 8.0),
        [0.0, -1.0, -2.0, 1.0, 0.0, -1.0, 2.0, 1.0, 0.0].map(|t| t / 8.0),
        [1.0 / 9.0; 9],
    ]
}

pub fn filter_bank(channels: usize) -> Result<ConvKernel> {
    if channels == 0 || channels > BANK_SIZE {
        return Err(Error::InvalidArgument(format!(
            "encoder channels must be in 1..={BANK_SIZE}, got {channels}"
        )));
    }
    let stencils = bank_stencils();
    let refs: Vec<&[f64]> = stencils[..channels].iter().map(|s| &s[..]).collect();
    ConvKernel::bank(3, &refs)
}

/// Grayscale, antialiased bicubic downsampling by `scale`, per-image
/// standardization, then the first `channels` filters of the bank.
pub fn encode_rgb(img: &RgbImage, scale: usize, channels: usize) -> Result<FeatureMap> {
    if scale == 0 || !img.height().is_multiple_of(scale) || !img.width().is_multiple_of(scale) {
        return Err(Error::InvalidDimensions(format!(
            "rgb {}x{} not divisible by scale {scale}",
            img.height(),
            img.width()
        )));
    }
    let gray = img.to_gray();
    let low = bicubic_resize(&gray, img.height() / scale, img.width() / scale)?;
    conv2d(
        &low.standardize(STANDARDIZE_EPS),
        &filter_bank(channels)?,
        1,
    )
}

/// Same bank on the (already low-resolution) depth. Invalid pixels are
/// filled with the mean valid depth first.
pub fn encode_depth(d: &DepthMap, channels: usize) -> Result<FeatureMap> {
    let n = d.valid_count();
    let fill = if n == 0 {
        0.0
    } else {
        d.depth()
            .iter()
            .zip(d.valid())
            .filter(|(_, &v)| v)
            .map(|(&z, _)| z)
            .sum::<f64>()
            / n as f64
    };
    let values = d
        .depth()
        .iter()
        .zip(d.valid())
        .map(|(&z, &v)| if v { z } else { fill })
        .collect();
    let map = FeatureMap::new(1, d.height(), d.width(), values)?;
    conv2d(
        &map.standardize(STANDARDIZE_EPS),
        &filter_bank(channels)?,
        1,
    )
}
