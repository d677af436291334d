//! Minimal Netpbm codecs: 16-bit PGM for millimeter depth, 8-bit PPM for
//! guidance images, and PFM for floating-point depth and features.
//!
//! Writers always emit a canonical header (`magic\nW H\nMAX\n`); decoding
//! and re-encoding a canonical file reproduces it byte for byte.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::{DepthMap, FeatureMap, RgbImage};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("unsupported maxval {0}")]
    UnsupportedMaxval(u32),
    #[error("cannot convert image: {0}")]
    Conversion(String),
}

type Result<T> = std::result::Result<T, ImageError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageKind {
    Pgm16,
    Ppm8,
    Pfm,
}

/// Big-endian 16-bit grayscale samples (maxval 65535).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray16Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u16>,
}

/// One- or three-channel float image, interleaved, rows top to bottom.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Image {
    Gray16(Gray16Image),
    Rgb8(RgbImage),
    Float(FloatImage),
}

impl Image {
    pub fn kind(&self) -> ImageKind {
        match self {
            Image::Gray16(_) => ImageKind::Pgm16,
            Image::Rgb8(_) => ImageKind::Ppm8,
            Image::Float(_) => ImageKind::Pfm,
        }
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self, what: &str) -> Result<&'a str> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(ImageError::MalformedHeader(format!("missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| ImageError::MalformedHeader(format!("non-ascii {what}")))
    }

    fn dimension(&mut self, what: &str) -> Result<usize> {
        let tok = self.token(what)?;
        match tok.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(ImageError::MalformedHeader(format!("bad {what} '{tok}'"))),
        }
    }

    /// Consumes the single whitespace byte that terminates the header.
    fn payload(self) -> Result<&'a [u8]> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(&self.bytes[self.pos + 1..]),
            _ => Err(ImageError::MalformedHeader(
                "header not terminated by whitespace".into(),
            )),
        }
    }
}

fn take_payload(payload: &[u8], expected: usize) -> Result<&[u8]> {
    if payload.len() < expected {
        return Err(ImageError::Truncated {
            expected,
            actual: payload.len(),
        });
    }
    Ok(&payload[..expected])
}

pub fn decode(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 {
        return Err(ImageError::MalformedHeader("missing magic".into()));
    }
    let magic = &bytes[..2];
    let mut header = Header { bytes, pos: 2 };
    match magic {
        b"P5" | b"P6" => {
            let width = header.dimension("width")?;
            let height = header.dimension("height")?;
            let tok = header.token("maxval")?;
            let maxval: u32 = tok
                .parse()
                .map_err(|_| ImageError::MalformedHeader(format!("bad maxval '{tok}'")))?;
            let payload = header.payload()?;
            if magic == b"P5" {
                if maxval != 65535 {
                    return Err(ImageError::UnsupportedMaxval(maxval));
                }
                let raw = take_payload(payload, 2 * width * height)?;
                let data = raw
                    .chunks_exact(2)
                    .map(|b| u16::from_be_bytes([b[0], b[1]]))
                    .collect();
                Ok(Image::Gray16(Gray16Image {
                    height,
                    width,
                    data,
                }))
            } else {
                if maxval != 255 {
                    return Err(ImageError::UnsupportedMaxval(maxval));
                }
                let raw = take_payload(payload, 3 * width * height)?;
                let img = RgbImage::new(height, width, raw.to_vec())
                    .map_err(|e| ImageError::Conversion(e.to_string()))?;
                Ok(Image::Rgb8(img))
            }
        }
        b"Pf" | b"PF" => {
            let channels = if magic == b"PF" { 3 } else { 1 };
            let width = header.dimension("width")?;
            let height = header.dimension("height")?;
            let tok = header.token("scale")?;
            let scale: f32 = tok
                .parse()
                .map_err(|_| ImageError::MalformedHeader(format!("bad scale '{tok}'")))?;
            if scale == 0.0 || !scale.is_finite() {
                return Err(ImageError::MalformedHeader(format!("bad scale '{tok}'")));
            }
            let little = scale < 0.0;
            let payload = header.payload()?;
            let row_len = channels * width;
            let raw = take_payload(payload, 4 * row_len * height)?;
            let mut data = vec![0f32; row_len * height];
            // PFM scanlines run bottom to top.
            for (file_row, chunk) in raw.chunks_exact(4 * row_len).enumerate() {
                let y = height - 1 - file_row;
                for (i, b) in chunk.chunks_exact(4).enumerate() {
                    let b = [b[0], b[1], b[2], b[3]];
                    data[y * row_len + i] = if little {
                        f32::from_le_bytes(b)
                    } else {
                        f32::from_be_bytes(b)
                    };
                }
            }
            Ok(Image::Float(FloatImage {
                channels,
                height,
                width,
                data,
            }))
        }
        _ => Err(ImageError::MalformedHeader(format!(
            "unknown magic {:?}",
            String::from_utf8_lossy(magic)
        ))),
    }
}

pub fn encode(image: &Image) -> Vec<u8> {
    match image {
        Image::Gray16(g) => {
            let mut out = format!("P5\n{} {}\n65535\n", g.width, g.height).into_bytes();
            out.reserve(2 * g.data.len());
            for v in &g.data {
                out.extend_from_slice(&v.to_be_bytes());
            }
            out
        }
        Image::Rgb8(rgb) => {
            let mut out = format!("P6\n{} {}\n255\n", rgb.width(), rgb.height()).into_bytes();
            out.extend_from_slice(rgb.data());
            out
        }
        Image::Float(f) => {
            let magic = if f.channels == 3 { "PF" } else { "Pf" };
            let mut out = format!("{magic}\n{} {}\n-1.0\n", f.width, f.height).into_bytes();
            let row_len = f.channels * f.width;
            out.reserve(4 * f.data.len());
            for y in (0..f.height).rev() {
                for v in &f.data[y * row_len..(y + 1) * row_len] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            out
        }
    }
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    decode(&fs::read(path)?)
}

pub fn write_image(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    fs::write(path, encode(image))?;
    Ok(())
}

impl Gray16Image {
    /// Millimeter encoding: 0 marks an invalid pixel.
    pub fn from_depth(d: &DepthMap) -> Self {
        let data = d
            .depth()
            .iter()
            .zip(d.valid())
            .map(|(&m, &v)| {
                if v {
                    (m * 1000.0).round().clamp(1.0, 65535.0) as u16
                } else {
                    0
                }
            })
            .collect();
        Self {
            height: d.height(),
            width: d.width(),
            data,
        }
    }

    pub fn to_depth(&self) -> DepthMap {
        let depth = self.data.iter().map(|&mm| f64::from(mm) / 1000.0).collect();
        DepthMap::from_depth(self.height, self.width, depth).expect("decoded dimensions are valid")
    }
}

impl FloatImage {
    pub fn from_feature_map(f: &FeatureMap) -> Result<Self> {
        let (c, h, w) = f.shape();
        if c != 1 && c != 3 {
            return Err(ImageError::Conversion(format!(
                "PFM holds 1 or 3 channels, map has {c}"
            )));
        }
        let mut data = Vec::with_capacity(c * h * w);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f.get(ch, y, x) as f32);
                }
            }
        }
        Ok(Self {
            channels: c,
            height: h,
            width: w,
            data,
        })
    }

    pub fn to_feature_map(&self) -> Result<FeatureMap> {
        let (c, h, w) = (self.channels, self.height, self.width);
        let mut planar = vec![0.0; c * h * w];
        for (i, &v) in self.data.iter().enumerate() {
            let (pix, ch) = (i / c, i % c);
            planar[ch * h * w + pix] = f64::from(v);
        }
        FeatureMap::new(c, h, w, planar).map_err(|e| ImageError::Conversion(e.to_string()))
    }

    /// Depth in meters; invalid pixels are written as 0.
    pub fn from_depth(d: &DepthMap) -> Self {
        let data = d
            .depth()
            .iter()
            .zip(d.valid())
            .map(|(&m, &v)| if v { m as f32 } else { 0.0 })
            .collect();
        Self {
            channels: 1,
            height: d.height(),
            width: d.width(),
            data,
        }
    }

    /// Non-positive or non-finite samples become invalid pixels.
    pub fn to_depth(&self) -> Result<DepthMap> {
        if self.channels != 1 {
            return Err(ImageError::Conversion(format!(
                "depth needs one channel, PFM has {}",
                self.channels
            )));
        }
        let depth = self.data.iter().map(|&v| f64::from(v)).collect();
        DepthMap::from_depth(self.height, self.width, depth)
            .map_err(|e| ImageError::Conversion(e.to_string()))
    }
}

/// Reads depth from a 16-bit PGM (millimeters) or a one-channel PFM (meters).
pub fn read_depth(path: impl AsRef<Path>) -> Result<DepthMap> {
    match read_image(path)? {
        Image::Gray16(g) => Ok(g.to_depth()),
        Image::Float(f) => f.to_depth(),
        Image::Rgb8(_) => Err(ImageError::Conversion("expected depth, found PPM".into())),
    }
}

pub fn write_depth_pfm(path: impl AsRef<Path>, d: &DepthMap) -> Result<()> {
    write_image(path, &Image::Float(FloatImage::from_depth(d)))
}

pub fn read_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    match read_image(path)? {
        Image::Rgb8(rgb) => Ok(rgb),
        other => Err(ImageError::Conversion(format!(
            "expected PPM, found {:?}",
            other.kind()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pgm16_millimeter_encoding() {
        let mut bytes = b"P5\n2 2\n65535\n".to_vec();
        for v in [0u16, 1000, 2000, 65535] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        let Image::Gray16(g) = decode(&bytes).unwrap() else {
            panic!("expected gray16");
        };
        let d = g.to_depth();
        assert_eq!(d.valid(), &[false, true, true, true]);
        assert_eq!(&d.depth()[1..], &[1.0, 2.0, 65.535]);
        assert_eq!(encode(&Image::Gray16(Gray16Image::from_depth(&d))), bytes);
    }

    #[test]
    fn ppm_header_with_comment() {
        let mut bytes = b"P6\n# guidance\n2 2\n255\n".to_vec();
        bytes.extend((0u8..12).collect::<Vec<_>>());
        let Image::Rgb8(img) = decode(&bytes).unwrap() else {
            panic!("expected rgb");
        };
        assert_eq!((img.height(), img.width()), (2, 2));
        assert_eq!(img.pixel(1, 1), [9, 10, 11]);
    }

    #[test]
    fn distinct_errors() {
        assert!(matches!(
            decode(b"P5\n2 x\n65535\n"),
            Err(ImageError::MalformedHeader(_))
        ));
        assert!(matches!(
            decode(b"P3\n1 1\n255\n"),
            Err(ImageError::MalformedHeader(_))
        ));
        assert!(matches!(
            decode(b"P5\n2 2\n255\n\0\0\0\0"),
            Err(ImageError::UnsupportedMaxval(255))
        ));
        assert!(matches!(
            decode(b"P6\n1 1\n65535\n\0\0\0"),
            Err(ImageError::UnsupportedMaxval(65535))
        ));
        assert!(matches!(
            decode(b"P5\n2 2\n65535\n\0\0\0"),
            Err(ImageError::Truncated {
                expected: 8,
                actual: 3
            })
        ));
        assert!(matches!(
            decode(b"Pf\n1 1\n0\n\0\0\0\0"),
            Err(ImageError::MalformedHeader(_))
        ));
        assert!(matches!(
            decode(b"Pf\n1 1\n-1.0\n\0\0"),
            Err(ImageError::Truncated { .. })
        ));
    }

    #[test]
    fn pfm_rows_are_bottom_up() {
        let img = FloatImage {
            channels: 1,
            height: 2,
            width: 1,
            data: vec![1.0, 2.0],
        };
        let bytes = encode(&Image::Float(img));
        let header = b"Pf\n1 2\n-1.0\n".len();
        assert_eq!(&bytes[header..header + 4], &2.0f32.to_le_bytes());
    }

    #[test]
    fn big_endian_pfm_is_read() {
        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&0.5f32.to_be_bytes());
        let Image::Float(f) = decode(&bytes).unwrap() else {
            panic!()
        };
        assert_eq!(f.data, vec![0.5]);
    }

    proptest! {
        #[test]
        fn pfm_round_trip_is_bit_exact(
            w in 1usize..6, h in 1usize..6, three in any::<bool>(),
            bits in proptest::collection::vec(any::<u32>(), 90),
        ) {
            let channels = if three { 3 } else { 1 };
            let data: Vec<f32> = bits.iter().cycle().take(channels * w * h)
                .map(|&b| f32::from_bits(b)).collect();
            let img = Image::Float(FloatImage { channels, height: h, width: w, data });
            let bytes = encode(&img);
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(encode(&back), bytes);
        }

        #[test]
        fn pgm_and_ppm_round_trip(
            w in 1usize..6, h in 1usize..6,
            raw in proptest::collection::vec(any::<u16>(), 36),
        ) {
            let g = Image::Gray16(Gray16Image { height: h, width: w, data: raw[..w * h].to_vec() });
            prop_assert_eq!(decode(&encode(&g)).unwrap(), g);
            let bytes: Vec<u8> = raw.iter().flat_map(|v| v.to_le_bytes()).cycle().take(3 * w * h).collect();
            let rgb = Image::Rgb8(RgbImage::new(h, w, bytes).unwrap());
            prop_assert_eq!(decode(&encode(&rgb)).unwrap(), rgb);
        }
    }
}
