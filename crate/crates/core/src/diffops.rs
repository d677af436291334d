//! First- and second-order differential operators on feature maps.
//!
//! All derivatives use unit-spaced central differences with replicate
//! borders, so they are exact on affine (gradient) and quadratic (Hessian)
//! images away from the border.

use crate::grid::{pad_replicate, FeatureMap};

/// Per-channel second derivatives. The single `dxy` map serves both
/// off-diagonal entries, so the matrix is symmetric by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct HessianField {
    pub dxx: FeatureMap,
    pub dyy: FeatureMap,
    pub dxy: FeatureMap,
}

/// Eigenvalue pair per pixel with `|lambda1| >= |lambda2|`.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenField {
    pub lambda1: FeatureMap,
    pub lambda2: FeatureMap,
}

/// Replicate-padded 3x3 neighbourhood of one pixel.
struct Window([f64; 9]);

impl Window {
    #[inline(always)]
    fn at(&self, dy: isize, dx: isize) -> f64 {
        self.0[((dy + 1) * 3 + dx + 1) as usize]
    }
}

/// Evaluates a stencil at every pixel of every channel.
fn per_pixel(f: &FeatureMap, op: impl Fn(&Window) -> f64) -> FeatureMap {
    let (c, h, w) = f.shape();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let padded = pad_replicate(f.channel(ch), h, w, 1);
        let pw = w + 2;
        for y in 0..h {
            let rows = [
                &padded[y * pw..],
                &padded[(y + 1) * pw..],
                &padded[(y + 2) * pw..],
            ];
            for x in 0..w {
                let win = Window([
                    rows[0][x],
                    rows[0][x + 1],
                    rows[0][x + 2],
                    rows[1][x],
                    rows[1][x + 1],
                    rows[1][x + 2],
                    rows[2][x],
                    rows[2][x + 1],
                    rows[2][x + 2],
                ]);
                out.push(op(&win));
            }
        }
    }
    FeatureMap::from_raw(c, h, w, out)
}

/// Central-difference partials `(d/dx, d/dy)`.
pub fn partials(f: &FeatureMap) -> (FeatureMap, FeatureMap) {
    let gx = per_pixel(f, |n| (n.at(0, 1) - n.at(0, -1)) / 2.0);
    let gy = per_pixel(f, |n| (n.at(1, 0) - n.at(-1, 0)) / 2.0);
    (gx, gy)
}

/// `sqrt(fx^2 + fy^2)` per channel.
pub fn gradient_magnitude(f: &FeatureMap) -> FeatureMap {
    per_pixel(f, |n| {
        let gx = (n.at(0, 1) - n.at(0, -1)) / 2.0;
        let gy = (n.at(1, 0) - n.at(-1, 0)) / 2.0;
        gx.hypot(gy)
    })
}

pub fn hessian_field(f: &FeatureMap) -> HessianField {
    HessianField {
        dxx: per_pixel(f, |n| n.at(0, 1) - 2.0 * n.at(0, 0) + n.at(0, -1)),
        dyy: per_pixel(f, |n| n.at(1, 0) - 2.0 * n.at(0, 0) + n.at(-1, 0)),
        dxy: per_pixel(f, |n| {
            (n.at(1, 1) - n.at(1, -1) - n.at(-1, 1) + n.at(-1, -1)) / 4.0
        }),
    }
}

/// Frobenius norm `sqrt(dxx^2 + dyy^2 + 2 dxy^2)`.
pub fn hessian_norm(hf: &HessianField) -> FeatureMap {
    let (c, h, w) = hf.dxx.shape();
    let data = hf
        .dxx
        .data()
        .iter()
        .zip(hf.dyy.data())
        .zip(hf.dxy.data())
        .map(|((&a, &d), &b)| (a * a + d * d + 2.0 * b * b).sqrt())
        .collect();
    FeatureMap::from_raw(c, h, w, data)
}

/// `hessian_norm(hessian_field(f))` without keeping the intermediate field.
pub fn hessian_norm_map(f: &FeatureMap) -> FeatureMap {
    per_pixel(f, |n| {
        let c = n.at(0, 0);
        let a = n.at(0, 1) - 2.0 * c + n.at(0, -1);
        let d = n.at(1, 0) - 2.0 * c + n.at(-1, 0);
        let b = (n.at(1, 1) - n.at(1, -1) - n.at(-1, 1) + n.at(-1, -1)) / 4.0;
        (a * a + d * d + 2.0 * b * b).sqrt()
    })
}

/// Eigenvalues of `[[a, b], [b, d]]`, ordered by magnitude (larger first);
/// a magnitude tie puts the algebraically larger value first.
pub fn symmetric_eigenvalues(a: f64, b: f64, d: f64) -> (f64, f64) {
    let trace = a + d;
    let det = a * d - b * b;
    let disc = (a - d).hypot(2.0 * b);
    // The root with the trace's sign has no cancellation; the other follows
    // from the determinant.
    let big = if trace >= 0.0 {
        (trace + disc) / 2.0
    } else {
        (trace - disc) / 2.0
    };
    let small = if big != 0.0 {
        det / big
    } else {
        (trace - big) / 2.0
    };
    let (l1, l2) = match small.abs().partial_cmp(&big.abs()) {
        Some(std::cmp::Ordering::Greater) => (small, big),
        Some(std::cmp::Ordering::Equal) => (small.max(big), small.min(big)),
        _ => (big, small),
    };
    (l1, l2)
}

pub fn eigenvalues(hf: &HessianField) -> EigenField {
    let (c, h, w) = hf.dxx.shape();
    let n = c * h * w;
    let mut l1 = Vec::with_capacity(n);
    let mut l2 = Vec::with_capacity(n);
    for i in 0..n {
        let (a, b) = symmetric_eigenvalues(hf.dxx.data()[i], hf.dxy.data()[i], hf.dyy.data()[i]);
        l1.push(a);
        l2.push(b);
    }
    EigenField {
        lambda1: FeatureMap::from_raw(c, h, w, l1),
        lambda2: FeatureMap::from_raw(c, h, w, l2),
    }
}
