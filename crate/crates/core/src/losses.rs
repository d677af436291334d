//! Reconstruction, gradient and Hessian losses, RMSE and noise injection.
//!
//! Every loss is an L1 sum over the pixels where the ground truth is valid;
//! the count of those pixels travels with the result so callers can
//! normalize. Gradient and Hessian maps are computed on the full depth
//! planes (invalid pixels included) and masked afterwards.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffops::{gradient_magnitude, hessian_norm_map};
use crate::error::{Error, Result};
use crate::grid::DepthMap;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub l_rec: f64,
    pub l_grad: f64,
    pub l_hes: f64,
    pub l_total: f64,
    pub valid_count: usize,
}

impl LossReport {
    pub fn combine(
        l_rec: f64,
        l_grad: f64,
        l_hes: f64,
        alpha_loss: f64,
        valid_count: usize,
    ) -> Self {
        Self {
            l_rec,
            l_grad,
            l_hes,
            l_total: l_rec + l_grad + alpha_loss * l_hes,
            valid_count,
        }
    }
}

/// Ground truth with its gradient and Hessian maps precomputed, for
/// evaluating many predictions against the same target.
#[derive(Clone, Debug)]
pub struct LossTarget {
    gt: DepthMap,
    grad: Vec<f64>,
    hes: Vec<f64>,
}

fn masked_l1(a: &[f64], b: &[f64], valid: &[bool]) -> f64 {
    let mut sum = 0.0;
    for ((x, y), &v) in a.iter().zip(b).zip(valid) {
        if v {
            sum += (x - y).abs();
        }
    }
    sum
}

impl LossTarget {
    pub fn new(gt: &DepthMap) -> Result<Self> {
        if gt.valid_count() == 0 {
            return Err(Error::EmptyValidSet);
        }
        let f = gt.to_feature_map();
        Ok(Self {
            gt: gt.clone(),
            grad: gradient_magnitude(&f).into_data(),
            hes: hessian_norm_map(&f).into_data(),
        })
    }

    pub fn gt(&self) -> &DepthMap {
        &self.gt
    }

    pub fn valid_count(&self) -> usize {
        self.gt.valid_count()
    }

    pub fn rec(&self, pred: &DepthMap) -> Result<f64> {
        self.gt.ensure_same_shape(pred)?;
        Ok(masked_l1(self.gt.depth(), pred.depth(), self.gt.valid()))
    }

    pub fn grad(&self, pred: &DepthMap) -> Result<f64> {
        self.gt.ensure_same_shape(pred)?;
        let g = gradient_magnitude(&pred.to_feature_map());
        Ok(masked_l1(&self.grad, g.data(), self.gt.valid()))
    }

    pub fn hes(&self, pred: &DepthMap) -> Result<f64> {
        self.gt.ensure_same_shape(pred)?;
        let h = hessian_norm_map(&pred.to_feature_map());
        Ok(masked_l1(&self.hes, h.data(), self.gt.valid()))
    }

    pub fn report(&self, pred: &DepthMap, alpha_loss: f64) -> Result<LossReport> {
        Ok(LossReport::combine(
            self.rec(pred)?,
            self.grad(pred)?,
            self.hes(pred)?,
            alpha_loss,
            self.valid_count(),
        ))
    }

    pub fn rmse_cm(&self, pred: &DepthMap) -> Result<f64> {
        rmse_cm(&self.gt, pred)
    }
}

pub fn loss_rec(gt: &DepthMap, pred: &DepthMap) -> Result<f64> {
    gt.ensure_same_shape(pred)?;
    if gt.valid_count() == 0 {
        return Err(Error::EmptyValidSet);
    }
    Ok(masked_l1(gt.depth(), pred.depth(), gt.valid()))
}

pub fn loss_grad(gt: &DepthMap, pred: &DepthMap) -> Result<f64> {
    gt.ensure_same_shape(pred)?;
    LossTarget::new(gt)?.grad(pred)
}

pub fn loss_hes(gt: &DepthMap, pred: &DepthMap) -> Result<f64> {
    gt.ensure_same_shape(pred)?;
    LossTarget::new(gt)?.hes(pred)
}

/// `l_rec + l_grad + alpha_loss * l_hes`.
pub fn loss_total(gt: &DepthMap, pred: &DepthMap, alpha_loss: f64) -> Result<LossReport> {
    gt.ensure_same_shape(pred)?;
    LossTarget::new(gt)?.report(pred, alpha_loss)
}

/// Root mean square error over the valid ground-truth pixels, in cm.
pub fn rmse_cm(gt: &DepthMap, pred: &DepthMap) -> Result<f64> {
    gt.ensure_same_shape(pred)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((g, p), &v) in gt.depth().iter().zip(pred.depth()).zip(gt.valid()) {
        if v {
            let e = 100.0 * (g - p);
            sum += e * e;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyValidSet);
    }
    Ok((sum / n as f64).sqrt())
}

/// Adds zero-mean Gaussian noise with standard deviation `sigma` in units of
/// the largest valid depth (so depth scaled to `[0, 1]`). Only valid pixels
/// are touched; one sample is drawn per valid pixel in row-major order. A
/// pixel pushed to non-positive depth becomes invalid.
pub fn add_noise(d: &DepthMap, sigma: f64, seed: u64) -> Result<DepthMap> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise sigma must be non-negative, got {sigma}"
        )));
    }
    let Some(max) = d.max_valid_depth() else {
        return Ok(d.clone());
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = d
        .depth()
        .iter()
        .zip(d.valid())
        .map(|(&z, &v)| {
            if v {
                let n: f64 = StandardNormal.sample(&mut rng);
                z + max * sigma * n
            } else {
                z
            }
        })
        .collect();
    DepthMap::with_mask(d.height(), d.width(), depth, d.valid())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffops::partials;
    use crate::grid::FeatureMap;

    fn map(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> DepthMap {
        let v = (0..h * w).map(|i| f(i / w, i % w)).collect();
        DepthMap::from_depth(h, w, v).unwrap()
    }

    fn scene(h: usize, w: usize) -> DepthMap {
        map(h, w, |y, x| {
            2.0 + 0.3 * (x as f64 * 0.9).sin()
                + 0.2 * (y as f64 * 0.6).cos()
                + 0.01 * (x * y) as f64
        })
    }

    #[test]
    fn identical_maps_have_zero_loss() {
        let gt = scene(6, 7);
        let r = loss_total(&gt, &gt, 0.001).unwrap();
        assert_eq!(
            (r.l_rec, r.l_grad, r.l_hes, r.l_total),
            (0.0, 0.0, 0.0, 0.0)
        );
        assert_eq!(r.valid_count, 42);
        assert_eq!(rmse_cm(&gt, &gt).unwrap(), 0.0);
    }

    #[test]
    fn reconstruction_sum_in_meters() {
        let gt = map(2, 2, |_, _| 1.0);
        let pred = DepthMap::from_depth(2, 2, vec![1.01, 0.98, 1.03, 0.96]).unwrap();
        assert!((loss_rec(&gt, &pred).unwrap() - 0.10).abs() < 1e-12);
    }

    #[test]
    fn invalid_pixels_are_excluded() {
        let gt = DepthMap::from_depth(1, 3, vec![1.0, 0.0, 1.0]).unwrap();
        let pred = DepthMap::from_depth(1, 3, vec![1.0, 5.0, 1.5]).unwrap();
        assert_eq!(loss_rec(&gt, &pred).unwrap(), 0.5);
        let none = DepthMap::from_depth(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(loss_rec(&none, &none), Err(Error::EmptyValidSet)));
        assert!(matches!(rmse_cm(&none, &none), Err(Error::EmptyValidSet)));
    }

    #[test]
    fn constant_offset_only_costs_reconstruction() {
        let gt = scene(8, 8);
        let pred = map(8, 8, |y, x| gt.get(y, x) + 0.25);
        let r = loss_total(&gt, &pred, 0.001).unwrap();
        assert!((r.l_rec - 16.0).abs() < 1e-9);
        assert!(r.l_grad < 1e-12 && r.l_hes < 1e-12, "{r:?}");
    }

    #[test]
    fn planar_offset_is_invisible_to_hessian() {
        let gt = map(8, 8, |y, x| {
            3.0 + 0.1 * (x * x) as f64 / 8.0 + 0.05 * y as f64
        });
        let pred = map(8, 8, |y, x| {
            gt.get(y, x) + 0.02 * x as f64 + 0.01 * y as f64
        });
        let r = loss_total(&gt, &pred, 0.001).unwrap();
        assert!(r.l_grad > 0.0);
        // Replicate borders bend the ramp on the outer ring only.
        let hp = hessian_norm_map(&pred.to_feature_map());
        let hg = hessian_norm_map(&gt.to_feature_map());
        for y in 1..7 {
            for x in 1..7 {
                assert!((hp.get(0, y, x) - hg.get(0, y, x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn total_combines_components() {
        let r = LossReport::combine(1.0, 0.5, 2.0, 0.001, 1);
        assert!((r.l_total - 1.502).abs() < 1e-12);
        assert_eq!(LossReport::combine(1.0, 0.5, 2.0, 0.0, 1).l_total, 1.5);
    }

    #[test]
    fn total_is_linear_in_alpha() {
        let gt = scene(7, 6);
        let pred = map(7, 6, |y, x| {
            gt.get(y, x) + 0.05 * ((x * 3 + y) as f64).sin()
        });
        let a = loss_total(&gt, &pred, 0.0).unwrap();
        let b = loss_total(&gt, &pred, 0.5).unwrap();
        assert!(((b.l_total - a.l_total) / 0.5 - a.l_hes).abs() <= 1e-9 * a.l_hes.max(1.0));
    }

    #[test]
    fn rmse_examples() {
        let gt = map(2, 2, |_, _| 2.0);
        assert!((rmse_cm(&gt, &map(2, 2, |_, _| 2.01)).unwrap() - 1.0).abs() < 1e-9);
        let gt = map(1, 2, |_, _| 1.0);
        let pred = DepthMap::from_depth(1, 2, vec![1.0, 1.02]).unwrap();
        assert!((rmse_cm(&gt, &pred).unwrap() - 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn noise_statistics_and_determinism() {
        let d = map(64, 64, |y, x| 1.0 + ((x + y) % 7) as f64 * 0.1);
        assert_eq!(add_noise(&d, 0.0, 3).unwrap(), d);
        let a = add_noise(&d, 0.07, 11).unwrap();
        assert_eq!(a, add_noise(&d, 0.07, 11).unwrap());
        assert_ne!(a, add_noise(&d, 0.07, 12).unwrap());
        let max = d.max_valid_depth().unwrap();
        let noise: Vec<f64> = a
            .depth()
            .iter()
            .zip(d.depth())
            .map(|(x, y)| (x - y) / max)
            .collect();
        let mean = noise.iter().sum::<f64>() / noise.len() as f64;
        let var = noise.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (noise.len() - 1) as f64;
        assert!((var.sqrt() - 0.07).abs() < 0.007, "{}", var.sqrt());
        assert!(add_noise(&d, -0.1, 0).is_err());
    }

    #[test]
    fn noise_skips_invalid_pixels() {
        let d = DepthMap::from_depth(1, 3, vec![1.0, 0.0, 2.0]).unwrap();
        let n = add_noise(&d, 0.1, 5).unwrap();
        assert_eq!(n.depth()[1], 0.0);
        assert!(!n.valid()[1]);
    }

    /// Analytic subgradient of `l_total` by chain rule through the linear
    /// derivative stencils, whose Jacobians are read off impulse responses.
    fn analytic_gradient(gt: &DepthMap, pred: &DepthMap, alpha: f64) -> Vec<f64> {
        let (h, w) = (gt.height(), gt.width());
        let n = h * w;
        let fp = pred.to_feature_map();
        let fg = gt.to_feature_map();
        let (gxp, gyp) = partials(&fp);
        let grad_p = gradient_magnitude(&fp);
        let grad_g = gradient_magnitude(&fg);
        let hp = crate::diffops::hessian_field(&fp);
        let hes_p = hessian_norm_map(&fp);
        let hes_g = hessian_norm_map(&fg);
        let sign = |v: f64| if v > 0.0 { 1.0 } else { -1.0 };
        let mut out = vec![0.0; n];
        for q in 0..n {
            let impulse =
                FeatureMap::from_fn(1, h, w, |_, y, x| if y * w + x == q { 1.0 } else { 0.0 });
            let (jx, jy) = partials(&impulse);
            let jh = crate::diffops::hessian_field(&impulse);
            let mut g = 0.0;
            for p in 0..n {
                if !gt.valid()[p] {
                    continue;
                }
                if p == q {
                    g += sign(pred.depth()[p] - gt.depth()[p]);
                }
                let m = grad_p.data()[p];
                let dm = (gxp.data()[p] * jx.data()[p] + gyp.data()[p] * jy.data()[p]) / m;
                g += sign(m - grad_g.data()[p]) * dm;
                let (a, d, b) = (hp.dxx.data()[p], hp.dyy.data()[p], hp.dxy.data()[p]);
                let hn = hes_p.data()[p];
                let dh =
                    (a * jh.dxx.data()[p] + d * jh.dyy.data()[p] + 2.0 * b * jh.dxy.data()[p]) / hn;
                g += alpha * sign(hn - hes_g.data()[p]) * dh;
            }
            out[q] = g;
        }
        out
    }

    #[test]
    fn finite_differences_match_analytic_subgradient() {
        let (h, w) = (5, 6);
        let gt = map(h, w, |y, x| {
            1.5 + 0.4 * ((x * 7 + y * 3) as f64 * 0.77).sin()
        });
        let pred = map(h, w, |y, x| {
            gt.get(y, x) + 0.3 * ((x * 5 + y * 11) as f64 * 1.31).cos()
        });
        let alpha = 0.5;
        let target = LossTarget::new(&gt).unwrap();
        let total = |d: &DepthMap| target.report(d, alpha).unwrap().l_total;
        // The comparison is only meaningful away from kinks.
        let fp = pred.to_feature_map();
        let gaps = [
            masked_gaps(gt.depth(), pred.depth()),
            masked_gaps(&target.grad, gradient_magnitude(&fp).data()),
            masked_gaps(&target.hes, hessian_norm_map(&fp).data()),
        ];
        assert!(gaps.iter().all(|&g| g > 1e-3), "{gaps:?}");

        let analytic = analytic_gradient(&gt, &pred, alpha);
        let eps = 1e-6;
        for q in 0..h * w {
            let bump = |delta: f64| {
                let mut v = pred.depth().to_vec();
                v[q] += delta;
                DepthMap::from_depth(h, w, v).unwrap()
            };
            let fd = (total(&bump(eps)) - total(&bump(-eps))) / (2.0 * eps);
            assert!(
                (fd - analytic[q]).abs() < 1e-5,
                "pixel {q}: fd {fd} vs {}",
                analytic[q]
            );
        }
    }

    fn masked_gaps(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(f64::INFINITY, f64::min)
    }
}
