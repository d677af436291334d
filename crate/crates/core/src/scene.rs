//! Procedural RGB-D scenes with a known camera misalignment.
//!
//! Geometry is an analytic depth function over the image plane, so depth
//! and RGB can be sampled at arbitrary (shifted, rotated) positions. The
//! RGB camera sees the scene point `R (p - c) + c + (dx, dy)` at pixel `p`,
//! where `c` is the image center. Intensity grows with depth (far is
//! bright) and is modulated by a seeded value-noise texture fixed to the
//! scene, so it moves with the geometry.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{DepthMap, RgbImage};
use crate::losses::add_noise;

pub const MAX_ROTATION_DEG: f64 = 10.0;

/// Lattice spacing of the texture, in pixels.
const TEXTURE_CELL: f64 = 6.0;
const TEXTURE_AMPLITUDE: f64 = 0.06;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Three slanted planes meeting along two creases.
    Planes,
    /// Curved, tilted boxes in front of a gently curved wall.
    Boxes,
    /// A single elongated Gaussian groove on a flat wall.
    Ridge,
    /// Checkerboard of two depth levels.
    Checker,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::Planes,
        Preset::Boxes,
        Preset::Ridge,
        Preset::Checker,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Planes => "planes",
            Preset::Boxes => "boxes",
            Preset::Ridge => "ridge",
            Preset::Checker => "checker",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown preset '{s}'")))
    }

    /// Depth range used for shading.
    fn depth_range(self) -> (f64, f64) {
        match self {
            Preset::Planes => (1.5, 4.5),
            Preset::Boxes => (1.5, 4.8),
            Preset::Ridge => (3.8, 4.9),
            Preset::Checker => (2.8, 3.6),
        }
    }

    /// Depth in meters at normalized image coordinates (`u` along the
    /// width, `v` along the height, both in `[0, 1]` inside the frame).
    pub fn depth_at(self, u: f64, v: f64) -> f64 {
        match self {
            Preset::Planes => {
                if v > 0.65 + 0.1 * u {
                    1.8 + 1.2 * (1.0 - v) + 0.2 * u
                } else if u < 0.4 + 0.15 * v {
                    3.0 - 1.5 * u + 0.4 * v
                } else {
                    2.2 + 1.4 * u - 0.3 * v
                }
            }
            Preset::Boxes => {
                let inside =
                    |u0: f64, u1: f64, v0: f64, v1: f64| u >= u0 && u < u1 && v >= v0 && v < v1;
                if inside(0.15, 0.45, 0.18, 0.50) {
                    2.0 + 0.6 * u - 0.3 * v + 1.5 * sq(u - 0.3) + 1.0 * sq(v - 0.34)
                } else if inside(0.55, 0.85, 0.20, 0.45) {
                    2.6 - 0.5 * u + 0.8 * v - 1.2 * sq(u - 0.7) + 0.9 * sq(v - 0.32)
                } else if inside(0.30, 0.75, 0.60, 0.85) {
                    1.8 + 0.4 * u + 0.5 * v + 1.0 * sq(u - 0.5) - 0.8 * sq(v - 0.7)
                } else {
                    4.5 - 0.1 * u - 0.05 * v + 0.15 * sq(u - 0.5) + 0.1 * sq(v - 0.5)
                }
            }
            Preset::Ridge => {
                let (a, b) = ridge_coords(u, v);
                4.0 + 0.8
                    * (-a * a / (2.0 * RIDGE_WIDTH * RIDGE_WIDTH)).exp()
                    * (-b * b / (2.0 * RIDGE_LENGTH * RIDGE_LENGTH)).exp()
            }
            Preset::Checker => {
                let (i, j) = ((u * 8.0).floor() as i64, (v * 8.0).floor() as i64);
                if (i + j).rem_euclid(2) == 0 {
                    3.0
                } else {
                    3.4
                }
            }
        }
    }
}

fn sq(t: f64) -> f64 {
    t * t
}

/// Cross-section and length scales of the ridge, in normalized units.
pub const RIDGE_WIDTH: f64 = 0.03;
pub const RIDGE_LENGTH: f64 = 0.3;

/// Signed distances across and along the ridge axis, which runs through
/// the center at 30 degrees.
pub fn ridge_coords(u: f64, v: f64) -> (f64, f64) {
    let (du, dv) = (u - 0.5, v - 0.5);
    let (s, c) = 30f64.to_radians().sin_cos();
    (-s * du + c * dv, c * du + s * dv)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub scale: usize,
    /// Misalignment of the RGB camera in HR pixels.
    pub dx: f64,
    pub dy: f64,
    pub rotation_deg: f64,
    pub seed: u64,
    /// Noise for the extra noisy LR depth; 0 disables it.
    pub sigma: f64,
    pub preset: Preset,
}

impl SceneSpec {
    /// `16 s` square boxes scene with RGB shifted by (4, 3) pixels.
    pub fn default_for_scale(scale: usize) -> Self {
        Self {
            width: 16 * scale,
            height: 16 * scale,
            scale,
            dx: 4.0,
            dy: 3.0,
            rotation_deg: 0.0,
            seed: 7,
            sigma: 0.0,
            preset: Preset::Boxes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::InvalidDimensions(format!(
                "scene {}x{} at scale {}",
                self.height, self.width, self.scale
            )));
        }
        if !self.width.is_multiple_of(self.scale) || !self.height.is_multiple_of(self.scale) {
            return Err(Error::InvalidDimensions(format!(
                "scene {}x{} not divisible by scale {}",
                self.height, self.width, self.scale
            )));
        }
        if !(self.rotation_deg.abs() <= MAX_ROTATION_DEG) {
            return Err(Error::InvalidArgument(format!(
                "rotation {} exceeds {MAX_ROTATION_DEG} degrees",
                self.rotation_deg
            )));
        }
        if !(self.dx.is_finite() && self.dy.is_finite()) {
            return Err(Error::NonFinite("scene shift"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma must be non-negative, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    /// Plain `key = value` record of the scene, including the misalignment.
    pub fn metadata(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "preset = {}", self.preset.name());
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "height = {}", self.height);
        let _ = writeln!(s, "scale = {}", self.scale);
        let _ = writeln!(s, "dx = {}", self.dx);
        let _ = writeln!(s, "dy = {}", self.dy);
        let _ = writeln!(s, "rotation_deg = {}", self.rotation_deg);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "sigma = {}", self.sigma);
        s
    }

    /// Inverse of [`SceneSpec::metadata`]. Unknown keys are rejected and
    /// missing keys keep the defaults of the recorded scale.
    pub fn from_metadata(text: &str) -> Result<Self> {
        let mut fields = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                message: format!("expected 'key = value', found '{line}'"),
            })?;
            fields.push((i + 1, k.trim(), v.trim()));
        }
        fn num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config {
                line,
                message: format!("bad value '{v}' for {key}"),
            })
        }
        let scale = match fields.iter().find(|f| f.1 == "scale") {
            Some(&(line, k, v)) => num(line, k, v)?,
            None => 4,
        };
        let mut spec = Self::default_for_scale(scale);
        for (line, k, v) in fields {
            match k {
                "preset" => spec.preset = Preset::parse(v)?,
                "width" => spec.width = num(line, k, v)?,
                "height" => spec.height = num(line, k, v)?,
                "scale" => {}
                "dx" => spec.dx = num(line, k, v)?,
                "dy" => spec.dy = num(line, k, v)?,
                "rotation_deg" => spec.rotation_deg = num(line, k, v)?,
                "seed" => spec.seed = num(line, k, v)?,
                "sigma" => spec.sigma = num(line, k, v)?,
                _ => {
                    return Err(Error::Config {
                        line,
                        message: format!("unknown key '{k}'"),
                    })
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Normalized scene position `(u, v)` seen by RGB pixel `(x, y)`.
    pub fn rgb_position(&self, x: usize, y: usize) -> (f64, f64) {
        let (px, py) = camera(self)(x as f64, y as f64);
        (px / self.width as f64, py / self.height as f64)
    }
}

/// RGB-pixel masks of the ridge crest (within half a width of the axis,
/// inside its length) and of the flat background (beyond four widths).
pub fn ridge_masks(spec: &SceneSpec) -> (Vec<bool>, Vec<bool>) {
    let n = spec.width * spec.height;
    let mut crest = Vec::with_capacity(n);
    let mut background = Vec::with_capacity(n);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let (u, v) = spec.rgb_position(x, y);
            let (across, along) = ridge_coords(u, v);
            crest.push(across.abs() < 0.5 * RIDGE_WIDTH && along.abs() < RIDGE_LENGTH);
            background.push(across.abs() > 4.0 * RIDGE_WIDTH);
        }
    }
    (crest, background)
}

/// Seeded value noise on a square lattice covering a bounded region.
struct Texture {
    origin: f64,
    side: usize,
    values: Vec<f64>,
}

impl Texture {
    fn new(seed: u64, lo: f64, hi: f64) -> Self {
        let origin = (lo / TEXTURE_CELL).floor() - 1.0;
        let side = ((hi / TEXTURE_CELL).ceil() - origin) as usize + 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..side * side)
            .map(|_| rng.gen_range(-1.0..=1.0))
            .collect();
        Self {
            origin,
            side,
            values,
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let gx = x / TEXTURE_CELL - self.origin;
        let gy = y / TEXTURE_CELL - self.origin;
        let max = (self.side - 2) as f64;
        let (gx, gy) = (gx.clamp(0.0, max), gy.clamp(0.0, max));
        let (i, j) = (gx.floor() as usize, gy.floor() as usize);
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (smooth(gx - i as f64), smooth(gy - j as f64));
        let v = |a: usize, b: usize| self.values[b * self.side + a];
        let top = v(i, j) * (1.0 - tx) + v(i + 1, j) * tx;
        let bottom = v(i, j + 1) * (1.0 - tx) + v(i + 1, j + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

/// Everything a scene produces.
#[derive(Clone, Debug)]
pub struct Scene {
    pub spec: SceneSpec,
    pub rgb: RgbImage,
    pub d_gt: DepthMap,
    pub d_lr: DepthMap,
    pub d_lr_noisy: Option<DepthMap>,
}

/// Depth sampled at pixel positions offset by `(dx, dy)`, no rotation.
pub fn render_depth(
    preset: Preset,
    width: usize,
    height: usize,
    dx: f64,
    dy: f64,
) -> Result<DepthMap> {
    let mut depth = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + dx, y as f64 + dy);
            depth.push(preset.depth_at(px / width as f64, py / height as f64));
        }
    }
    DepthMap::from_depth(height, width, depth)
}

/// Maps RGB pixel `(x, y)` to the scene position the camera sees there.
fn camera(spec: &SceneSpec) -> impl Fn(f64, f64) -> (f64, f64) {
    let (sin, cos) = spec.rotation_deg.to_radians().sin_cos();
    let (cx, cy) = (
        (spec.width as f64 - 1.0) / 2.0,
        (spec.height as f64 - 1.0) / 2.0,
    );
    let (dx, dy) = (spec.dx, spec.dy);
    move |x, y| {
        let (rx, ry) = (x - cx, y - cy);
        (cos * rx - sin * ry + cx + dx, sin * rx + cos * ry + cy + dy)
    }
}

pub fn render_rgb(spec: &SceneSpec) -> Result<RgbImage> {
    spec.validate()?;
    let (w, h) = (spec.width as f64, spec.height as f64);
    let reach =
        spec.dx.abs().max(spec.dy.abs()) + w.max(h) * MAX_ROTATION_DEG.to_radians().sin() + 2.0;
    let texture = Texture::new(spec.seed, -reach, w.max(h) + reach);
    let (lo, hi) = spec.preset.depth_range();
    let view = camera(spec);
    let mut data = Vec::with_capacity(3 * spec.width * spec.height);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let (px, py) = view(x as f64, y as f64);
            let z = spec.preset.depth_at(px / w, py / h);
            let t = ((z - lo) / (hi - lo)).clamp(0.0, 1.0);
            let base = (30.0 + 200.0 * t) * (1.0 + TEXTURE_AMPLITUDE * texture.at(px, py));
            let quantize = |v: f64| v.round().clamp(0.0, 255.0) as u8;
            data.extend_from_slice(&[
                quantize(base),
                quantize(0.9 * base + 10.0),
                quantize(0.8 * base + 20.0),
            ]);
        }
    }
    RgbImage::new(spec.height, spec.width, data)
}

pub fn render(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let d_gt = render_depth(spec.preset, spec.width, spec.height, 0.0, 0.0)?;
    let d_lr = d_gt.resize(spec.height / spec.scale, spec.width / spec.scale)?;
    let d_lr_noisy = if spec.sigma > 0.0 {
        Some(add_noise(&d_lr, spec.sigma, spec.seed)?)
    } else {
        None
    };
    Ok(Scene {
        spec: spec.clone(),
        rgb: render_rgb(spec)?,
        d_gt,
        d_lr,
        d_lr_noisy,
    })
}
