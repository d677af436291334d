//! Visualizations and text reports written by the commands.

use std::fmt::Write as _;

use multiorder::losses::LossReport;
use multiorder::{DepthMap, FeatureMap, Result, RgbImage};

/// Error (cm) that saturates the error map.
pub const ERROR_MAP_FULL_SCALE_CM: f64 = 50.0;

/// Black to red to yellow to white; brightness never decreases with `t`.
pub fn hot(t: f64) -> [u8; 3] {
    let t = if t.is_nan() { 1.0 } else { t.clamp(0.0, 1.0) };
    let ramp = |v: f64| (255.0 * v.clamp(0.0, 1.0)).round() as u8;
    [ramp(3.0 * t), ramp(3.0 * t - 1.0), ramp(3.0 * t - 2.0)]
}

/// Per-pixel `|pred - gt|` in cm through [`hot`], saturating at
/// [`ERROR_MAP_FULL_SCALE_CM`]. Pixels without valid ground truth are black.
pub fn error_map(pred: &DepthMap, gt: &DepthMap) -> Result<RgbImage> {
    gt.ensure_same_shape(pred)?;
    let mut data = Vec::with_capacity(3 * gt.len());
    for ((&p, &g), &v) in pred.depth().iter().zip(gt.depth()).zip(gt.valid()) {
        let rgb = if v {
            hot(100.0 * (p - g).abs() / ERROR_MAP_FULL_SCALE_CM)
        } else {
            [0, 0, 0]
        };
        data.extend_from_slice(&rgb);
    }
    RgbImage::new(gt.height(), gt.width(), data)
}

/// Gray image of a single-channel map with values in `[0, 1]`.
pub fn unit_gray(f: &FeatureMap) -> Result<RgbImage> {
    let (_, h, w) = f.shape();
    let data = f
        .channel(0)
        .iter()
        .flat_map(|&v| {
            let g = (255.0 * v.clamp(0.0, 1.0)).round() as u8;
            [g, g, g]
        })
        .collect();
    RgbImage::new(h, w, data)
}

pub fn loss_lines(r: &LossReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "l_rec = {}", r.l_rec);
    let _ = writeln!(s, "l_grad = {}", r.l_grad);
    let _ = writeln!(s, "l_hes = {}", r.l_hes);
    let _ = writeln!(s, "l_total = {}", r.l_total);
    let _ = writeln!(s, "valid_pixels = {}", r.valid_count);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hot_is_monotone_in_brightness() {
        let mut last = 0u32;
        for i in 0..=1000 {
            let [r, g, b] = hot(i as f64 / 1000.0);
            let sum = u32::from(r) + u32::from(g) + u32::from(b);
            assert!(sum >= last);
            last = sum;
        }
        assert_eq!(hot(0.0), [0, 0, 0]);
        assert_eq!(hot(1.0), [255, 255, 255]);
        assert_eq!(hot(7.0), [255, 255, 255]);
    }

    #[test]
    fn error_map_blacks_out_invalid_ground_truth() {
        let gt = DepthMap::from_depth(1, 3, vec![1.0, 0.0, 1.0]).unwrap();
        let pred = DepthMap::from_depth(1, 3, vec![1.0, 2.0, 1.5]).unwrap();
        let img = error_map(&pred, &gt).unwrap();
        assert_eq!(img.pixel(0, 0), [0, 0, 0]);
        assert_eq!(img.pixel(0, 1), [0, 0, 0]);
        assert_eq!(img.pixel(0, 2), [255, 255, 255]);
    }

    #[test]
    fn gray_rounds_and_clamps() {
        let f = FeatureMap::new(1, 1, 3, vec![-1.0, 0.5, 2.0]).unwrap();
        let img = unit_gray(&f).unwrap();
        assert_eq!(img.data(), &[0, 0, 0, 128, 128, 128, 255, 255, 255]);
    }
}
