use super::{pad_replicate, FeatureMap};
use crate::error::{Error, Result};

/// Dense cross-correlation kernel, weights laid out `[out][in][ky][kx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    out_channels: usize,
    in_channels: usize,
    size: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ConvKernel {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        size: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if size.is_multiple_of(2) {
            return Err(Error::EvenKernel(size));
        }
        if out_channels == 0 || in_channels == 0 {
            return Err(Error::InvalidDimensions("kernel with zero channels".into()));
        }
        let expected = out_channels * in_channels * size * size;
        if weights.len() != expected || bias.len() != out_channels {
            return Err(Error::shape(
                format!("{expected} weights and {out_channels} biases"),
                format!("{} weights and {} biases", weights.len(), bias.len()),
            ));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kernel"));
        }
        Ok(Self {
            out_channels,
            in_channels,
            size,
            weights,
            bias,
        })
    }

    /// Single-input, single-output kernel without bias.
    pub fn single(size: usize, taps: &[f64]) -> Result<Self> {
        Self::new(1, 1, size, taps.to_vec(), vec![0.0])
    }

    /// Applies one spatial stencil per output channel to a single input channel.
    pub fn bank(size: usize, stencils: &[&[f64]]) -> Result<Self> {
        let weights = stencils.iter().flat_map(|s| s.iter().copied()).collect();
        Self::new(stencils.len(), 1, size, weights, vec![0.0; stencils.len()])
    }

    pub fn identity(channels: usize) -> Self {
        let mut weights = vec![0.0; channels * channels * 9];
        for c in 0..channels {
            weights[(c * channels + c) * 9 + 4] = 1.0;
        }
        Self::new(channels, channels, 3, weights, vec![0.0; channels]).expect("valid identity")
    }

    #[inline]
    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    #[inline]
    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    fn tap(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((o * self.in_channels + i) * self.size + ky) * self.size + kx]
    }
}

/// Cross-correlation with replicate padding. Output pixel `(y, x)` is
/// centered on input pixel `(y * stride, x * stride)`, so the output is
/// `ceil(h / stride) x ceil(w / stride)`.
pub fn conv2d(f: &FeatureMap, kernel: &ConvKernel, stride: usize) -> Result<FeatureMap> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    if kernel.size.is_multiple_of(2) {
        return Err(Error::EvenKernel(kernel.size));
    }
    if f.channels() != kernel.in_channels {
        return Err(Error::shape(
            format!("{} input channels", kernel.in_channels),
            format!("{}", f.channels()),
        ));
    }
    let (c, h, w) = f.shape();
    let oh = h.div_ceil(stride);
    let ow = w.div_ceil(stride);
    let r = kernel.size / 2;
    let pw = w + 2 * r;
    let padded: Vec<Vec<f64>> = (0..c)
        .map(|i| pad_replicate(f.channel(i), h, w, r))
        .collect();
    let mut out = vec![0.0; kernel.out_channels * oh * ow];
    // Each pixel accumulates bias, then channels, then taps in row-major
    // order; the loops below only hoist the tap out of the pixel loop.
    for (o, plane) in out.chunks_exact_mut(oh * ow).enumerate() {
        plane.fill(kernel.bias[o]);
        for (i, src) in padded.iter().enumerate() {
            for ky in 0..kernel.size {
                for kx in 0..kernel.size {
                    let t = kernel.tap(o, i, ky, kx);
                    if t == 0.0 {
                        continue;
                    }
                    for (oy, row) in plane.chunks_exact_mut(ow).enumerate() {
                        let base = (oy * stride + ky) * pw + kx;
                        for (ox, v) in row.iter_mut().enumerate() {
                            *v += t * src[base + ox * stride];
                        }
                    }
                }
            }
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("conv2d output"));
    }
    Ok(FeatureMap::from_raw(kernel.out_channels, oh, ow, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];

    fn textured(c: usize, h: usize, w: usize, seed: f64) -> FeatureMap {
        FeatureMap::from_fn(c, h, w, |ch, y, x| {
            ((ch as f64 + 1.0) * seed + y as f64 * 0.7 + x as f64 * 1.3).sin()
        })
    }

    #[test]
    fn identity_kernel_is_identity() {
        let f = textured(3, 5, 7, 0.4);
        assert_eq!(conv2d(&f, &ConvKernel::identity(3), 1).unwrap(), f);
    }

    #[test]
    fn box_filter_preserves_constant() {
        let f = FeatureMap::filled(1, 4, 4, 2.5);
        let k = ConvKernel::single(3, &[1.0 / 9.0; 9]).unwrap();
        let out = conv2d(&f, &k, 1).unwrap();
        assert!(out.data().iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn sobel_x_on_ramp_is_constant_in_interior() {
        let f = FeatureMap::from_fn(1, 6, 6, |_, _, x| x as f64);
        let out = conv2d(&f, &ConvKernel::single(3, &SOBEL_X).unwrap(), 1).unwrap();
        for y in 0..6 {
            for x in 1..5 {
                // (1 + 2 + 1) * (x + 1 - (x - 1))
                assert_eq!(out.get(0, y, x), 8.0);
            }
        }
    }

    #[test]
    fn rejects_even_kernel() {
        assert!(matches!(
            ConvKernel::single(2, &[0.25; 4]),
            Err(Error::EvenKernel(2))
        ));
    }

    #[test]
    fn strided_output_size_is_ceil() {
        let f = textured(1, 7, 5, 0.1);
        let out = conv2d(&f, &ConvKernel::identity(1), 2).unwrap();
        assert_eq!(out.shape(), (1, 4, 3));
        assert_eq!(out.get(0, 3, 2), f.get(0, 6, 4));
    }

    #[test]
    fn conv_is_linear() {
        let f = textured(2, 6, 6, 0.3);
        let g = textured(2, 6, 6, 1.7);
        let weights: Vec<f64> = (0..3 * 2 * 9).map(|i| ((i as f64) * 0.61).cos()).collect();
        let k = ConvKernel::new(3, 2, 3, weights, vec![0.0; 3]).unwrap();
        let (a, b) = (1.5, -0.75);
        let combo = f.zip_map(&g, |u, v| a * u + b * v).unwrap();
        let lhs = conv2d(&combo, &k, 1).unwrap();
        let cf = conv2d(&f, &k, 1).unwrap();
        let cg = conv2d(&g, &k, 1).unwrap();
        let rhs = cf.zip_map(&cg, |u, v| a * u + b * v).unwrap();
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            assert!((l - r).abs() <= 1e-6 * r.abs().max(1.0));
        }
    }
}
