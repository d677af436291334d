use super::FeatureMap;
use crate::error::{Error, Result};

/// Depth-to-space: `out(c, y*s + dy, x*s + dx) = in(c*s*s + dy*s + dx, y, x)`.
pub fn pixel_shuffle(f: &FeatureMap, s: usize) -> Result<FeatureMap> {
    let (c, h, w) = f.shape();
    if s == 0 || c % (s * s) != 0 {
        return Err(Error::InvalidArgument(format!(
            "{c} channels not divisible by scale^2 = {}",
            s * s
        )));
    }
    let oc = c / (s * s);
    let (oh, ow) = (h * s, w * s);
    let mut out = vec![0.0; oc * oh * ow];
    for co in 0..oc {
        for dy in 0..s {
            for dx in 0..s {
                let plane = f.channel(co * s * s + dy * s + dx);
                for y in 0..h {
                    for x in 0..w {
                        out[(co * oh + y * s + dy) * ow + x * s + dx] = plane[y * w + x];
                    }
                }
            }
        }
    }
    Ok(FeatureMap::from_raw(oc, oh, ow, out))
}

/// Space-to-depth, the inverse of [`pixel_shuffle`].
pub fn space_to_depth(f: &FeatureMap, s: usize) -> Result<FeatureMap> {
    let (c, h, w) = f.shape();
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::InvalidArgument(format!(
            "{h}x{w} not divisible by scale {s}"
        )));
    }
    let (oh, ow) = (h / s, w / s);
    let mut out = vec![0.0; c * s * s * oh * ow];
    for ci in 0..c {
        for dy in 0..s {
            for dx in 0..s {
                let oc = ci * s * s + dy * s + dx;
                for y in 0..oh {
                    for x in 0..ow {
                        out[(oc * oh + y) * ow + x] = f.get(ci, y * s + dy, x * s + dx);
                    }
                }
            }
        }
    }
    Ok(FeatureMap::from_raw(c * s * s, oh, ow, out))
}
