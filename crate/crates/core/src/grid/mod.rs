//! Dense grids shared by every stage of the pipeline.
//!
//! [`FeatureMap`] is the channel-major `c x h x w` carrier for features,
//! gradient maps, Hessian norms and descriptors. [`DepthMap`] adds a
//! validity mask to a single depth plane in meters. [`RgbImage`] holds the
//! 8-bit guidance image.
//!
//! Border handling is replicate padding throughout.

pub mod conv;
pub mod netpbm;
pub mod patches;
pub mod resample;
pub mod shuffle;

use std::fmt;

use crate::error::{Error, Result};

pub use conv::{conv2d, ConvKernel};
pub use patches::{extract_patches, fold_patches, PatchSet, PATCH_SIZE};
pub use resample::{bicubic_resize, bicubic_scale, cubic_weight, CATMULL_ROM_A};
pub use shuffle::{pixel_shuffle, space_to_depth};

/// Copy of an `h x w` plane with `r` replicated pixels on every side.
pub(crate) fn pad_replicate(plane: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let mut out = Vec::with_capacity(ph * pw);
    for py in 0..ph {
        let y = py.saturating_sub(r).min(h - 1);
        let row = &plane[y * w..(y + 1) * w];
        out.extend(std::iter::repeat_n(row[0], r));
        out.extend_from_slice(row);
        out.extend(std::iter::repeat_n(row[w - 1], r));
    }
    out
}

/// Channel-major real-valued grid. All entries are finite.
#[derive(Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl fmt::Debug for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeatureMap")
            .field("channels", &self.channels)
            .field("height", &self.height)
            .field("width", &self.width)
            .finish_non_exhaustive()
    }
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidDimensions(format!(
                "feature map {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(
                format!("{} values", channels * height * width),
                format!("{} values", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map"));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Unchecked constructor for operator outputs. Overflow can make values
    /// non-finite; the pipeline checks at step boundaries.
    pub(crate) fn from_raw(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "empty feature map");
        assert!(value.is_finite());
        Self::from_raw(
            channels,
            height,
            width,
            vec![value; channels * height * width],
        )
    }

    /// Builds a map by evaluating `f(channel, y, x)`. Panics on non-finite output.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "empty feature map");
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    let v = f(c, y, x);
                    assert!(v.is_finite(), "non-finite value at ({c}, {y}, {x})");
                    data.push(v);
                }
            }
        }
        Self::from_raw(channels, height, width, data)
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
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Replicate-padded read.
    #[inline]
    pub fn get_clamped(&self, c: usize, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.get(c, y, x)
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_map(&self, c: usize) -> FeatureMap {
        Self::from_raw(1, self.height, self.width, self.channel(c).to_vec())
    }

    pub fn ensure_shape(&self, expected: (usize, usize, usize)) -> Result<()> {
        if self.shape() != expected {
            return Err(Error::shape(
                format!("{:?}", expected),
                format!("{:?}", self.shape()),
            ));
        }
        Ok(())
    }

    /// Applies `f` to every entry. Panics if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> FeatureMap {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        assert!(
            data.iter().all(|v| v.is_finite()),
            "map produced non-finite value"
        );
        Self::from_raw(self.channels, self.height, self.width, data)
    }

    pub fn zip_map(&self, other: &FeatureMap, f: impl Fn(f64, f64) -> f64) -> Result<FeatureMap> {
        other.ensure_shape(self.shape())?;
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("zip_map"));
        }
        Ok(Self::from_raw(self.channels, self.height, self.width, data))
    }

    /// Multiplies every channel by a single-channel gate of the same spatial size.
    pub fn broadcast_mul(&self, gate: &FeatureMap) -> Result<FeatureMap> {
        gate.ensure_shape((1, self.height, self.width))?;
        let n = self.plane_len();
        let g = gate.channel(0);
        let mut data = self.data.clone();
        for plane in data.chunks_exact_mut(n) {
            for (v, &w) in plane.iter_mut().zip(g) {
                *v *= w;
            }
        }
        Ok(Self::from_raw(self.channels, self.height, self.width, data))
    }

    /// Stacks maps along the channel axis.
    pub fn concat(maps: &[&FeatureMap]) -> Result<FeatureMap> {
        let first = maps
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero maps".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        let mut channels = 0;
        for m in maps {
            if (m.height, m.width) != (h, w) {
                return Err(Error::shape(
                    format!("{h}x{w}"),
                    format!("{}x{}", m.height, m.width),
                ));
            }
            channels += m.channels;
            data.extend_from_slice(&m.data);
        }
        Ok(Self::from_raw(channels, h, w, data))
    }

    pub fn mean_abs_diff(&self, other: &FeatureMap) -> Result<f64> {
        other.ensure_shape(self.shape())?;
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    /// Per-channel spatial standardization `(x - mean) / (std + eps)`.
    pub fn standardize(&self, eps: f64) -> FeatureMap {
        let n = self.plane_len() as f64;
        let mut data = self.data.clone();
        for plane in data.chunks_exact_mut(self.plane_len()) {
            let mean = plane.iter().sum::<f64>() / n;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let denom = var.sqrt() + eps;
            for v in plane.iter_mut() {
                *v = (*v - mean) / denom;
            }
        }
        Self::from_raw(self.channels, self.height, self.width, data)
    }
}

/// Single depth plane in meters with a per-pixel validity mask.
///
/// Valid pixels hold finite, strictly positive depth. Invalid pixels may
/// hold any finite value (predictions keep their raw value; decoded files
/// store 0).
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    depth: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, depth: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidDimensions(format!(
                "depth map {height}x{width}"
            )));
        }
        let n = height * width;
        if depth.len() != n || valid.len() != n {
            return Err(Error::shape(
                format!("{n} depth and mask values"),
                format!("{} depth, {} mask", depth.len(), valid.len()),
            ));
        }
        if depth.iter().any(|d| !d.is_finite()) {
            return Err(Error::NonFinite("depth map"));
        }
        if depth.iter().zip(&valid).any(|(&d, &v)| v && d <= 0.0) {
            return Err(Error::InvalidArgument(
                "valid depth pixel with non-positive depth".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            depth,
            valid,
        })
    }

    /// Derives validity from the values: finite and positive is valid.
    /// Non-finite values are replaced by 0.
    pub fn from_depth(height: usize, width: usize, depth: Vec<f64>) -> Result<Self> {
        let valid: Vec<bool> = depth.iter().map(|&d| d.is_finite() && d > 0.0).collect();
        let depth = depth
            .into_iter()
            .map(|d| if d.is_finite() { d } else { 0.0 })
            .collect();
        Self::new(height, width, depth, valid)
    }

    /// Keeps every value; a pixel stays valid only if `mask` allows it and
    /// the value is positive.
    pub fn with_mask(height: usize, width: usize, depth: Vec<f64>, mask: &[bool]) -> Result<Self> {
        let valid = depth
            .iter()
            .zip(mask)
            .map(|(&d, &m)| m && d.is_finite() && d > 0.0)
            .collect();
        Self::new(height, width, depth, valid)
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
    pub fn len(&self) -> usize {
        self.depth.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }

    #[inline]
    pub fn depth(&self) -> &[f64] {
        &self.depth
    }

    #[inline]
    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.depth[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn max_valid_depth(&self) -> Option<f64> {
        self.depth
            .iter()
            .zip(&self.valid)
            .filter(|(_, &v)| v)
            .map(|(&d, _)| d)
            .fold(None, |acc, d| Some(acc.map_or(d, |m: f64| m.max(d))))
    }

    /// Depth values as a one-channel map (invalid pixels keep their stored value).
    pub fn to_feature_map(&self) -> FeatureMap {
        FeatureMap::from_raw(1, self.height, self.width, self.depth.clone())
    }

    pub fn ensure_same_shape(&self, other: &DepthMap) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        Ok(())
    }

    /// Catmull-Rom resampling of the depth values; the mask is resampled by
    /// nearest neighbour.
    pub fn resize(&self, out_h: usize, out_w: usize) -> Result<DepthMap> {
        let values = bicubic_resize(&self.to_feature_map(), out_h, out_w)?;
        let mask = resample::nearest_mask(&self.valid, self.height, self.width, out_h, out_w);
        DepthMap::with_mask(out_h, out_w, values.into_data(), &mask)
    }
}

/// Interleaved 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidDimensions(format!(
                "rgb image {height}x{width}"
            )));
        }
        if data.len() != 3 * height * width {
            return Err(Error::shape(
                format!("{} bytes", 3 * height * width),
                format!("{} bytes", data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
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
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Three-channel map with values in `[0, 1]`.
    pub fn to_feature_map(&self) -> FeatureMap {
        FeatureMap::from_fn(3, self.height, self.width, |c, y, x| {
            f64::from(self.data[3 * (y * self.width + x) + c]) / 255.0
        })
    }

    /// Rec. 601 luma in `[0, 1]`.
    pub fn to_gray(&self) -> FeatureMap {
        FeatureMap::from_fn(1, self.height, self.width, |_, y, x| {
            let [r, g, b] = self.pixel(y, x);
            (0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b)) / 255.0
        })
    }
}
