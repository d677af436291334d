//! Pipeline configuration and its plain-text `key = value` form.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::encoder::BANK_SIZE;
use crate::error::{Error, Result};
use crate::matcher::{MatchOrder, DEFAULT_BLOCK_ROWS};
use crate::structdet::DetectorParams;

pub const SUPPORTED_SCALES: [usize; 3] = [4, 8, 16];
pub const DEFAULT_CHANNELS: usize = 8;
pub const DEFAULT_K: usize = 4;
pub const DEFAULT_MOMA_ITERS: usize = 3;
pub const TINY_MOMA_ITERS: usize = 2;
pub const DEFAULT_ALPHA_LOSS: f64 = 0.001;

/// Which matching orders feed the aggregation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OrderFlags {
    pub zero: bool,
    pub first: bool,
    pub second: bool,
}

impl OrderFlags {
    pub const ALL: OrderFlags = OrderFlags {
        zero: true,
        first: true,
        second: true,
    };
    pub const NONE: OrderFlags = OrderFlags {
        zero: false,
        first: false,
        second: false,
    };

    pub fn enabled(&self, order: MatchOrder) -> bool {
        match order {
            MatchOrder::Zero => self.zero,
            MatchOrder::First => self.first,
            MatchOrder::Second => self.second,
        }
    }

    /// All eight subsets, from none to all (bit 0 = zero order).
    pub fn subsets() -> impl Iterator<Item = OrderFlags> {
        (0..8u8).map(|bits| OrderFlags {
            zero: bits & 1 != 0,
            first: bits & 2 != 0,
            second: bits & 4 != 0,
        })
    }

    /// Parses a subset of the letters `z`, `f`, `s`, or `none`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let mut flags = OrderFlags::NONE;
        if s == "none" {
            return Ok(flags);
        }
        if s.is_empty() {
            return Err(Error::InvalidArgument("empty order list".into()));
        }
        for c in s.chars().filter(|c| *c != ',') {
            match MatchOrder::from_letter(c) {
                Some(MatchOrder::Zero) => flags.zero = true,
                Some(MatchOrder::First) => flags.first = true,
                Some(MatchOrder::Second) => flags.second = true,
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown order '{c}' (expected z, f, s or none)"
                    )))
                }
            }
        }
        Ok(flags)
    }
}

impl std::fmt::Display for OrderFlags {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let letters: String = MatchOrder::ALL
            .iter()
            .filter(|o| self.enabled(**o))
            .map(|o| o.letter())
            .collect();
        if letters.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&letters)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub scale: usize,
    pub channels: usize,
    pub k: usize,
    pub moma_iters: usize,
    pub orders: OrderFlags,
    pub detector: bool,
    pub alpha_det: f64,
    pub beta: f64,
    /// Fusion projection, `channels x 4*channels`, row-major by output.
    pub w_f: Vec<f64>,
    /// Reconstruction head, `scale^2 x channels`, row-major by output.
    pub w_h: Vec<f64>,
    pub alpha_loss: f64,
    /// Correlation rows materialized at once during retrieval.
    pub block_rows: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::new(4, DEFAULT_CHANNELS)
    }
}

/// `[I | 0 | 0 | 0]`: the fused features equal the incoming depth features.
pub fn skip_fusion_weights(channels: usize) -> Vec<f64> {
    let mut w = vec![0.0; channels * 4 * channels];
    for c in 0..channels {
        w[c * 4 * channels + c] = 1.0;
    }
    w
}

impl PipelineConfig {
    /// Defaults for the given scale and width: skip fusion weights and a
    /// zero head (pure bicubic output until fitted).
    pub fn new(scale: usize, channels: usize) -> Self {
        Self {
            scale,
            channels,
            k: DEFAULT_K,
            moma_iters: DEFAULT_MOMA_ITERS,
            orders: OrderFlags::ALL,
            detector: true,
            alpha_det: 1.0,
            beta: 1.0,
            w_f: skip_fusion_weights(channels),
            w_h: vec![0.0; scale * scale * channels],
            alpha_loss: DEFAULT_ALPHA_LOSS,
            block_rows: DEFAULT_BLOCK_ROWS,
        }
    }

    /// Quarter width and two aggregation iterations.
    pub fn tiny(scale: usize) -> Self {
        Self {
            moma_iters: TINY_MOMA_ITERS,
            ..Self::new(scale, (DEFAULT_CHANNELS / 4).max(1))
        }
    }

    /// Changes scale and width, resetting the weights if their shapes change.
    pub fn reshape(&mut self, scale: usize, channels: usize) {
        if self.channels != channels {
            self.w_f = skip_fusion_weights(channels);
        }
        if self.channels != channels || self.scale != scale {
            self.w_h = vec![0.0; scale * scale * channels];
        }
        self.scale = scale;
        self.channels = channels;
    }

    pub fn detector_params(&self) -> Result<DetectorParams> {
        DetectorParams::new(self.alpha_det, self.beta)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !SUPPORTED_SCALES.contains(&self.scale) {
            return bad(format!("scale must be one of 4, 8, 16; got {}", self.scale));
        }
        if self.channels == 0 || self.channels > BANK_SIZE {
            return bad(format!(
                "channels must be in 1..={BANK_SIZE}; got {}",
                self.channels
            ));
        }
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        if self.moma_iters == 0 {
            return bad("moma_iters must be at least 1".into());
        }
        if self.block_rows == 0 {
            return bad("block_rows must be positive".into());
        }
        let c = self.channels;
        if self.w_f.len() != 4 * c * c {
            return bad(format!(
                "w_f needs {} values, has {}",
                4 * c * c,
                self.w_f.len()
            ));
        }
        let s2 = self.scale * self.scale;
        if self.w_h.len() != s2 * c {
            return bad(format!(
                "w_h needs {} values, has {}",
                s2 * c,
                self.w_h.len()
            ));
        }
        if self.w_f.iter().chain(&self.w_h).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pipeline weights"));
        }
        if !(self.alpha_loss >= 0.0 && self.alpha_loss.is_finite()) {
            return bad(format!(
                "alpha_loss must be non-negative; got {}",
                self.alpha_loss
            ));
        }
        self.detector_params().map(|_| ())
    }

    /// Canonical text form; `from_kv_str(to_kv_string())` is lossless and
    /// re-dumping gives identical bytes.
    pub fn to_kv_string(&self) -> String {
        let list = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        };
        let mut s = String::from("# multiorder pipeline configuration\n");
        let _ = writeln!(s, "scale = {}", self.scale);
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "k = {}", self.k);
        let _ = writeln!(s, "moma_iters = {}", self.moma_iters);
        let _ = writeln!(s, "orders = {}", self.orders);
        let _ = writeln!(s, "detector = {}", if self.detector { "on" } else { "off" });
        let _ = writeln!(s, "alpha_det = {}", self.alpha_det);
        let _ = writeln!(s, "beta = {}", self.beta);
        let _ = writeln!(s, "alpha_loss = {}", self.alpha_loss);
        let _ = writeln!(s, "block_rows = {}", self.block_rows);
        let _ = writeln!(s, "w_f = {}", list(&self.w_f));
        let _ = writeln!(s, "w_h = {}", list(&self.w_h));
        s
    }

    /// Parses `key = value` lines. `#` starts a comment; unknown or repeated
    /// keys are errors. Missing keys take their defaults, with weight
    /// defaults sized from `scale` and `channels`.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: line_no,
                message: format!("expected 'key = value', found '{line}'"),
            })?;
            let key = key.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(Error::Config {
                    line: line_no,
                    message: format!("unknown key '{key}'"),
                });
            }
            if entries.insert(key, (line_no, value.trim())).is_some() {
                return Err(Error::Config {
                    line: line_no,
                    message: format!("duplicate key '{key}'"),
                });
            }
        }

        fn parse<T: std::str::FromStr>(key: &str, (line, v): (usize, &str)) -> Result<T> {
            v.parse().map_err(|_| Error::Config {
                line,
                message: format!("bad value '{v}' for {key}"),
            })
        }
        let get = |key: &str| entries.get(key).copied();

        let scale = get("scale")
            .map(|e| parse("scale", e))
            .transpose()?
            .unwrap_or(4);
        let channels = get("channels")
            .map(|e| parse("channels", e))
            .transpose()?
            .unwrap_or(DEFAULT_CHANNELS);
        let mut cfg = Self::new(scale, channels);
        if let Some(e) = get("k") {
            cfg.k = parse("k", e)?;
        }
        if let Some(e) = get("moma_iters") {
            cfg.moma_iters = parse("moma_iters", e)?;
        }
        if let Some((line, v)) = get("orders") {
            cfg.orders = OrderFlags::parse(v).map_err(|e| Error::Config {
                line,
                message: e.to_string(),
            })?;
        }
        if let Some((line, v)) = get("detector") {
            cfg.detector = match v {
                "on" => true,
                "off" => false,
                _ => {
                    return Err(Error::Config {
                        line,
                        message: format!("detector must be on or off, found '{v}'"),
                    })
                }
            };
        }
        if let Some(e) = get("alpha_det") {
            cfg.alpha_det = parse("alpha_det", e)?;
        }
        if let Some(e) = get("beta") {
            cfg.beta = parse("beta", e)?;
        }
        if let Some(e) = get("alpha_loss") {
            cfg.alpha_loss = parse("alpha_loss", e)?;
        }
        if let Some(e) = get("block_rows") {
            cfg.block_rows = parse("block_rows", e)?;
        }
        let list = |key: &str, (line, v): (usize, &str)| -> Result<Vec<f64>> {
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|t| parse(key, (line, t.trim()))).collect()
        };
        if let Some(e) = get("w_f") {
            cfg.w_f = list("w_f", e)?;
        }
        if let Some(e) = get("w_h") {
            cfg.w_h = list("w_h", e)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

const KNOWN_KEYS: [&str; 12] = [
    "scale",
    "channels",
    "k",
    "moma_iters",
    "orders",
    "detector",
    "alpha_det",
    "beta",
    "alpha_loss",
    "block_rows",
    "w_f",
    "w_h",
];
