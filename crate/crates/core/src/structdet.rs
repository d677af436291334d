//! Hessian-eigenvalue structure detector.
//!
//! The input features are standardized per channel and averaged into one
//! channel. At every pixel the Hessian eigenvalues `|l1| >= |l2|` give a
//! descriptor
//!
//! ```text
//! S = (1 - exp(-|l1| / (alpha + eps))) * exp(-|l1 * l2| / (beta + eps)) * [l2 < 0]
//! ```
//!
//! which is high on ridge-like structure (one strong curvature), low on
//! corners and texture (two strong curvatures) and zero on flat areas. A
//! small fixed convolutional refinement turns `S` into a sigmoid gate that
//! multiplies every input channel.

use crate::diffops::{eigenvalues, hessian_field, EigenField};
use crate::error::{Error, Result};
use crate::grid::{conv2d, ConvKernel, FeatureMap};

pub const EPSILON: f64 = 1e-8;

/// Three 3x3 convolutions (1 -> 4 -> 4 -> 1) with ReLU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineNet {
    pub conv1: ConvKernel,
    pub conv2: ConvKernel,
    pub conv3: ConvKernel,
}

fn gaussian3(sigma: f64) -> [f64; 9] {
    let g = |d: f64| (-d * d / (2.0 * sigma * sigma)).exp();
    let mut taps = [0.0; 9];
    for (i, t) in taps.iter_mut().enumerate() {
        let (dy, dx) = ((i / 3) as f64 - 1.0, (i % 3) as f64 - 1.0);
        *t = g(dy) * g(dx);
    }
    let total: f64 = taps.iter().sum();
    taps.map(|t| t / total)
}

impl Default for RefineNet {
    /// Smoothing bank at several widths, identity mixing, then a summing
    /// output layer. All biases are zero, so `S = 0` maps to a gate of 0.5.
    fn default() -> Self {
        let mut delta = [0.0; 9];
        delta[4] = 1.0;
        let box3 = [1.0 / 9.0; 9];
        let (g1, g2) = (gaussian3(0.6), gaussian3(1.0));
        let conv1 = ConvKernel::bank(3, &[&delta, &g1, &g2, &box3]).expect("valid bank");
        let conv2 = ConvKernel::identity(4);
        let mut w3 = vec![0.0; 4 * 9];
        for c in 0..4 {
            w3[c * 9 + 4] = 1.0;
        }
        let conv3 = ConvKernel::new(1, 4, 3, w3, vec![0.0]).expect("valid output layer");
        Self {
            conv1,
            conv2,
            conv3,
        }
    }
}

impl RefineNet {
    pub fn gate(&self, s: &FeatureMap) -> Result<FeatureMap> {
        let relu = |v: f64| v.max(0.0);
        let a = conv2d(s, &self.conv1, 1)?.map(relu);
        let b = conv2d(&a, &self.conv2, 1)?.map(relu);
        Ok(conv2d(&b, &self.conv3, 1)?.map(sigmoid))
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorParams {
    /// Structure-awareness scale.
    pub alpha_det: f64,
    /// Texture-suppression scale.
    pub beta: f64,
    pub refine: RefineNet,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            alpha_det: 1.0,
            beta: 1.0,
            refine: RefineNet::default(),
        }
    }
}

impl DetectorParams {
    pub fn new(alpha_det: f64, beta: f64) -> Result<Self> {
        let p = Self {
            alpha_det,
            beta,
            ..Self::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_det > 0.0 && self.alpha_det.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "alpha_det must be positive, got {}",
                self.alpha_det
            )));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Single-channel descriptor with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureDescriptor {
    pub s: FeatureMap,
}

pub fn normalize_and_compress(f: &FeatureMap) -> FeatureMap {
    let norm = f.standardize(EPSILON);
    let (c, h, w) = norm.shape();
    let n = h * w;
    let mut out = vec![0.0; n];
    for ch in 0..c {
        for (o, &v) in out.iter_mut().zip(norm.channel(ch)) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= c as f64;
    }
    FeatureMap::from_raw(1, h, w, out)
}

#[inline]
pub fn descriptor_value(l1: f64, l2: f64, alpha_det: f64, beta: f64) -> f64 {
    if l2 >= 0.0 {
        return 0.0;
    }
    let awareness = 1.0 - (-l1.abs() / (alpha_det + EPSILON)).exp();
    let suppression = (-(l1 * l2).abs() / (beta + EPSILON)).exp();
    awareness * suppression
}

pub fn structure_descriptor(eig: &EigenField, p: &DetectorParams) -> StructureDescriptor {
    let s = eig
        .lambda1
        .zip_map(&eig.lambda2, |l1, l2| {
            descriptor_value(l1, l2, p.alpha_det, p.beta)
        })
        .expect("eigen maps share a shape");
    StructureDescriptor { s }
}

/// Descriptor of a feature map: normalize, compress, Hessian, eigenvalues.
pub fn describe(f: &FeatureMap, p: &DetectorParams) -> StructureDescriptor {
    let comp = normalize_and_compress(f);
    structure_descriptor(&eigenvalues(&hessian_field(&comp)), p)
}

/// Structure-gated features: `RefineNet(S) * f` broadcast over channels.
pub fn detect(f: &FeatureMap, p: &DetectorParams) -> Result<FeatureMap> {
    let gate = p.refine.gate(&describe(f, p).s)?;
    f.broadcast_mul(&gate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compress_examples() {
        let flat = normalize_and_compress(&FeatureMap::filled(3, 4, 4, 2.0));
        assert!(flat.data().iter().all(|&v| v == 0.0));

        let f = FeatureMap::from_fn(1, 4, 5, |_, y, x| (y * 5 + x) as f64);
        assert_eq!(normalize_and_compress(&f), f.standardize(EPSILON));

        let two = FeatureMap::from_fn(2, 4, 5, |c, y, x| {
            let v = ((y * 5 + x) as f64).sin();
            if c == 0 {
                v
            } else {
                -v
            }
        });
        assert!(normalize_and_compress(&two)
            .data()
            .iter()
            .all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn descriptor_examples() {
        assert_eq!(descriptor_value(0.0, 0.0, 1.0, 1.0), 0.0);
        assert_eq!(descriptor_value(0.0, -0.0, 1.0, 1.0), 0.0);

        let corner = descriptor_value(-5.0, -4.0, 1.0, 1.0);
        let expected =
            (1.0 - (-5.0f64 / (1.0 + EPSILON)).exp()) * (-20.0f64 / (1.0 + EPSILON)).exp();
        assert!((corner - expected).abs() < 1e-15);
        assert!(corner < 2.1e-9);

        let ridge = descriptor_value(-5.0, -0.01, 1.0, 1.0);
        assert!((ridge - 0.944_8).abs() < 1e-4, "{ridge}");
        // ≈ (1 - e^-5) e^-0.05
        assert!((ridge - (1.0 - (-5.0f64).exp()) * (-0.05f64).exp()).abs() < 1e-6);

        assert_eq!(descriptor_value(-5.0, 0.0, 1.0, 1.0), 0.0);
        assert_eq!(descriptor_value(5.0, 0.3, 1.0, 1.0), 0.0);
    }

    #[test]
    fn descriptor_is_monotone_on_grids() {
        let (a, b) = (0.7, 1.3);
        // |l1| up with |l1 l2| fixed.
        let product = 2.0;
        let mut prev = -1.0;
        for i in 1..200 {
            let l1 = -(i as f64) * 0.05 - 1.5;
            let l2 = -product / l1.abs();
            if l2.abs() > l1.abs() {
                continue;
            }
            let s = descriptor_value(l1, l2, a, b);
            assert!(s >= prev);
            prev = s;
        }
        // |l1 l2| up with l1 fixed.
        let mut prev = 2.0;
        for i in 1..200 {
            let s = descriptor_value(-4.0, -(i as f64) * 0.02, a, b);
            assert!(s <= prev);
            prev = s;
        }
    }

    #[test]
    fn zero_descriptor_gives_half_gate() {
        let f = FeatureMap::from_fn(2, 5, 6, |c, y, x| (c + y + x) as f64);
        let s = FeatureMap::zeros(1, 5, 6);
        let gate = RefineNet::default().gate(&s).unwrap();
        assert!(gate.data().iter().all(|&g| g == 0.5));
        let out = f.broadcast_mul(&gate).unwrap();
        assert_eq!(out, f.map(|v| 0.5 * v));
    }

    #[test]
    fn detect_never_amplifies() {
        let f = FeatureMap::from_fn(3, 9, 9, |c, y, x| {
            ((c + 1) as f64 * 0.9 * y as f64).sin() * (x as f64 * 0.7).cos() * 3.0
        });
        let out = detect(&f, &DetectorParams::default()).unwrap();
        for (o, i) in out.data().iter().zip(f.data()) {
            assert!(o.abs() <= i.abs());
        }
    }

    #[test]
    fn detect_equals_gate_times_input() {
        let f = FeatureMap::from_fn(2, 7, 7, |c, y, x| ((c * 7 + y * 3 + x) as f64 * 0.4).sin());
        let p = DetectorParams::new(0.5, 2.0).unwrap();
        let gate = p.refine.gate(&describe(&f, &p).s).unwrap();
        let expected = f.broadcast_mul(&gate).unwrap();
        let got = detect(&f, &p).unwrap();
        for (a, b) in got.data().iter().zip(expected.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn params_must_be_positive() {
        assert!(DetectorParams::new(0.0, 1.0).is_err());
        assert!(DetectorParams::new(1.0, -1.0).is_err());
        assert!(DetectorParams::new(f64::NAN, 1.0).is_err());
    }
}
