//! Multi-order aggregation, the iterative matching loop and reconstruction.
//!
//! One aggregation step matches the current depth features against the
//! fixed RGB features in every enabled order, gates the matched RGB
//! features with the structure detector, and fuses
//!
//! ```text
//! F_d' = W_f * [F_d | D(F_z) | sig(G') * D(F_f) | sig(H') * D(F_s)]
//! ```
//!
//! where `D` is the detector (or the identity when it is off) and disabled
//! orders contribute zero blocks. The output depth is the bicubic
//! upsampling of the input plus a pixel-shuffled residual `W_h * F_d`.

pub mod config;
pub mod encoder;

pub use config::{skip_fusion_weights, OrderFlags, PipelineConfig};
pub use encoder::{encode_depth, encode_rgb, filter_bank, BANK_SIZE};

use crate::error::{Error, Result};
use crate::grid::{pixel_shuffle, DepthMap, FeatureMap, RgbImage};
use crate::matcher::{match_order_with, MatchOrder, MatchResult, Retrieval, SourceMaps};
use crate::structdet::{detect, sigmoid, DetectorParams};

#[derive(Clone, Debug)]
pub struct FusionState {
    pub f_d: FeatureMap,
    /// RGB features; held fixed across iterations.
    pub f_r: FeatureMap,
    pub iteration: usize,
}

/// Match results of one step, indexed by [`MatchOrder::index`]; `None` for
/// disabled orders.
pub type StepMatches = [Option<MatchResult>; 3];

/// Every match result of a run, one entry per aggregation step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchPlan {
    pub steps: Vec<StepMatches>,
}

/// Applies a `rows x cols` 1x1 projection to a `cols`-channel map given as
/// blocks; `None` blocks are zero and skipped.
fn project(
    weights: &[f64],
    rows: usize,
    blocks: &[Option<&FeatureMap>],
    block_channels: usize,
) -> FeatureMap {
    let first = blocks
        .iter()
        .flatten()
        .next()
        .expect("depth block is always present");
    let (h, w) = (first.height(), first.width());
    let n = h * w;
    let cols = blocks.len() * block_channels;
    let mut out = vec![0.0; rows * n];
    for (o, plane) in out.chunks_exact_mut(n).enumerate() {
        let row = &weights[o * cols..(o + 1) * cols];
        for (b, block) in blocks.iter().enumerate() {
            let Some(block) = block else { continue };
            for ch in 0..block_channels {
                let wv = row[b * block_channels + ch];
                if wv == 0.0 {
                    continue;
                }
                for (acc, &v) in plane.iter_mut().zip(block.channel(ch)) {
                    *acc += wv * v;
                }
            }
        }
    }
    FeatureMap::from_raw(rows, h, w, out)
}

fn ensure_state_shapes(state: &FusionState, cfg: &PipelineConfig) -> Result<()> {
    let (c, h, w) = state.f_d.shape();
    if c != cfg.channels {
        return Err(Error::shape(
            format!("{} depth channels", cfg.channels),
            c.to_string(),
        ));
    }
    state.f_r.ensure_shape((c, h, w))
}

/// One step with precomputed RGB maps. `frozen` supplies fixed match
/// indices per order (rescored against the current features) instead of a
/// fresh search.
fn step_with(
    source: &SourceMaps,
    f_d: &FeatureMap,
    cfg: &PipelineConfig,
    detector: Option<&DetectorParams>,
    frozen: Option<&StepMatches>,
) -> Result<(FeatureMap, StepMatches)> {
    let shape = f_d.shape();
    let mut matches: StepMatches = [None, None, None];
    let mut blocks: [Option<FeatureMap>; 3] = [None, None, None];
    for order in MatchOrder::ALL {
        if !cfg.orders.enabled(order) {
            continue;
        }
        let retrieval = match frozen {
            Some(plan) => Retrieval::Frozen(plan[order.index()].as_ref().ok_or_else(|| {
                Error::InvalidArgument(format!("frozen plan lacks order {}", order.letter()))
            })?),
            None => Retrieval::Search {
                k: cfg.k,
                block_rows: cfg.block_rows,
            },
        };
        let om = match_order_with(source, f_d, order, retrieval)?;
        om.matched.ensure_shape(shape)?;
        let gated = match detector {
            Some(p) => detect(&om.matched, p)?,
            None => om.matched,
        };
        let block = match om.prior {
            Some(prior) => prior.zip_map(&gated, |g, f| sigmoid(g) * f)?,
            None => gated,
        };
        blocks[order.index()] = Some(block);
        matches[order.index()] = Some(om.result);
    }
    let refs = [
        Some(f_d),
        blocks[0].as_ref(),
        blocks[1].as_ref(),
        blocks[2].as_ref(),
    ];
    let fused = project(&cfg.w_f, cfg.channels, &refs, cfg.channels);
    if fused.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fused depth features"));
    }
    Ok((fused, matches))
}

fn detector_for(cfg: &PipelineConfig) -> Result<Option<DetectorParams>> {
    if cfg.detector {
        cfg.detector_params().map(Some)
    } else {
        Ok(None)
    }
}

/// One aggregation step.
pub fn moma_step(state: &FusionState, cfg: &PipelineConfig) -> Result<FusionState> {
    cfg.validate()?;
    ensure_state_shapes(state, cfg)?;
    let source = SourceMaps::new(&state.f_r);
    let detector = detector_for(cfg)?;
    let (f_d, _) = step_with(&source, &state.f_d, cfg, detector.as_ref(), None)?;
    Ok(FusionState {
        f_d,
        f_r: state.f_r.clone(),
        iteration: state.iteration + 1,
    })
}

/// `bicubic_up(d_lr) + pixel_shuffle(W_h * F_d)`; the mask is the
/// upsampled input mask.
pub fn reconstruct(f_d: &FeatureMap, d_lr: &DepthMap, cfg: &PipelineConfig) -> Result<DepthMap> {
    let base = d_lr.resize(d_lr.height() * cfg.scale, d_lr.width() * cfg.scale)?;
    reconstruct_on(f_d, &base, cfg)
}

fn reconstruct_on(f_d: &FeatureMap, base: &DepthMap, cfg: &PipelineConfig) -> Result<DepthMap> {
    let s = cfg.scale;
    let (c, h, w) = f_d.shape();
    if c != cfg.channels || base.height() != h * s || base.width() != w * s {
        return Err(Error::shape(
            format!("{} channels, {}x{} base", cfg.channels, h * s, w * s),
            format!("{c} channels, {}x{} base", base.height(), base.width()),
        ));
    }
    if cfg.w_h.len() != s * s * c {
        return Err(Error::shape(
            format!("{} head weights", s * s * c),
            cfg.w_h.len(),
        ));
    }
    let mut depth = base.depth().to_vec();
    if cfg.w_h.iter().any(|&v| v != 0.0) {
        let residual = pixel_shuffle(&project(&cfg.w_h, s * s, &[Some(f_d)], c), s)?;
        for (d, r) in depth.iter_mut().zip(residual.data()) {
            *d += r;
        }
    }
    if depth.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("reconstructed depth"));
    }
    DepthMap::with_mask(base.height(), base.width(), depth, base.valid())
}

/// Encoded inputs of a pipeline run, reusable across runs that share scale
/// and width.
#[derive(Clone, Debug)]
pub struct Prepared {
    scale: usize,
    channels: usize,
    source: SourceMaps,
    f_d0: FeatureMap,
    base: DepthMap,
}

/// Result of a traced run.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub d_hr: DepthMap,
    /// Depth features after the last step.
    pub features: FeatureMap,
    pub plan: MatchPlan,
}

impl Prepared {
    pub fn new(img: &RgbImage, d_lr: &DepthMap, cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.scale;
        if img.height() != d_lr.height() * s || img.width() != d_lr.width() * s {
            return Err(Error::shape(
                format!(
                    "rgb {}x{} (depth x{s})",
                    d_lr.height() * s,
                    d_lr.width() * s
                ),
                format!("{}x{}", img.height(), img.width()),
            ));
        }
        let f_r = encode_rgb(img, s, cfg.channels)?;
        let f_d0 = encode_depth(d_lr, cfg.channels)?;
        Ok(Self {
            scale: s,
            channels: cfg.channels,
            source: SourceMaps::new(&f_r),
            f_d0,
            base: d_lr.resize(d_lr.height() * s, d_lr.width() * s)?,
        })
    }

    pub fn rgb_features(&self) -> &FeatureMap {
        self.source.features()
    }

    pub fn initial_depth_features(&self) -> &FeatureMap {
        &self.f_d0
    }

    /// Bicubic upsampling of the input depth.
    pub fn base(&self) -> &DepthMap {
        &self.base
    }

    fn check(&self, cfg: &PipelineConfig) -> Result<()> {
        cfg.validate()?;
        if (cfg.scale, cfg.channels) != (self.scale, self.channels) {
            return Err(Error::InvalidArgument(format!(
                "prepared for scale {} / {} channels, config has {} / {}",
                self.scale, self.channels, cfg.scale, cfg.channels
            )));
        }
        Ok(())
    }

    /// Runs every aggregation step. With `frozen`, the plan's match indices
    /// are reused (and rescored) instead of searched; a plan recorded with
    /// the same config reproduces the searched run exactly.
    pub fn features(
        &self,
        cfg: &PipelineConfig,
        frozen: Option<&MatchPlan>,
    ) -> Result<(FeatureMap, MatchPlan)> {
        self.check(cfg)?;
        if let Some(plan) = frozen {
            if plan.steps.len() != cfg.moma_iters {
                return Err(Error::InvalidArgument(format!(
                    "frozen plan has {} steps, config runs {}",
                    plan.steps.len(),
                    cfg.moma_iters
                )));
            }
        }
        let detector = detector_for(cfg)?;
        let mut f_d = self.f_d0.clone();
        let mut plan = MatchPlan::default();
        for i in 0..cfg.moma_iters {
            let fixed = frozen.map(|p| &p.steps[i]);
            let (next, matches) = step_with(&self.source, &f_d, cfg, detector.as_ref(), fixed)?;
            f_d = next;
            plan.steps.push(matches);
        }
        Ok((f_d, plan))
    }

    pub fn reconstruct(&self, f_d: &FeatureMap, cfg: &PipelineConfig) -> Result<DepthMap> {
        self.check(cfg)?;
        reconstruct_on(f_d, &self.base, cfg)
    }

    pub fn run(&self, cfg: &PipelineConfig, frozen: Option<&MatchPlan>) -> Result<PipelineOutput> {
        let (features, plan) = self.features(cfg, frozen)?;
        let d_hr = self.reconstruct(&features, cfg)?;
        Ok(PipelineOutput {
            d_hr,
            features,
            plan,
        })
    }
}

/// Encode, run `moma_iters` aggregation steps, reconstruct.
pub fn run_pipeline(img: &RgbImage, d_lr: &DepthMap, cfg: &PipelineConfig) -> Result<DepthMap> {
    Ok(run_pipeline_traced(img, d_lr, cfg)?.d_hr)
}

pub fn run_pipeline_traced(
    img: &RgbImage,
    d_lr: &DepthMap,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    Prepared::new(img, d_lr, cfg)?.run(cfg, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(c: usize, h: usize, w: usize, seed: f64) -> FeatureMap {
        FeatureMap::from_fn(c, h, w, |ch, y, x| {
            ((ch as f64 + 1.0) * 0.83 * y as f64 + 1.37 * x as f64 + seed).sin()
                + 0.4 * ((x * y) as f64 * 0.21 + ch as f64 + seed).cos()
        })
    }

    fn rgb(h: usize, w: usize) -> RgbImage {
        let mut data = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let v = (128.0 + 100.0 * ((x as f64) * 0.3).sin() * ((y as f64) * 0.2).cos()) as u8;
                data.extend_from_slice(&[v, v / 2, 255 - v]);
            }
        }
        RgbImage::new(h, w, data).unwrap()
    }

    fn depth(h: usize, w: usize) -> DepthMap {
        DepthMap::from_depth(
            h,
            w,
            (0..h * w)
                .map(|i| 2.0 + ((i % w) as f64 * 0.4).sin() + (i / w) as f64 * 0.05)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn disabled_orders_with_skip_weights_keep_features() {
        let mut cfg = PipelineConfig::tiny(4);
        cfg.orders = OrderFlags::NONE;
        let state = FusionState {
            f_d: textured(2, 5, 6, 0.0),
            f_r: textured(2, 5, 6, 1.0),
            iteration: 0,
        };
        let next = moma_step(&state, &cfg).unwrap();
        assert_eq!(next.f_d, state.f_d);
        assert_eq!(next.iteration, 1);
    }

    #[test]
    fn first_order_block_is_gated_by_matched_gradient() {
        // A flat RGB map has zero gradient everywhere, so G' = 0 and the
        // first-order block is half the matched features.
        let c = 2;
        let mut cfg = PipelineConfig::tiny(4);
        cfg.orders = OrderFlags::parse("f").unwrap();
        cfg.detector = false;
        cfg.w_f = vec![0.0; 4 * c * c];
        for ch in 0..c {
            cfg.w_f[ch * 4 * c + 2 * c + ch] = 1.0;
        }
        let f_r = FeatureMap::filled(c, 4, 4, 3.0);
        let state = FusionState {
            f_d: textured(c, 4, 4, 0.5),
            f_r: f_r.clone(),
            iteration: 0,
        };
        let next = moma_step(&state, &cfg).unwrap();
        assert!(next.f_d.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn zero_head_reproduces_bicubic() {
        let d = depth(4, 5);
        let cfg = PipelineConfig::tiny(4);
        let out = reconstruct(&textured(2, 4, 5, 0.0), &d, &cfg).unwrap();
        assert_eq!(out, d.resize(16, 20).unwrap());
    }

    #[test]
    fn constant_input_gives_periodic_residual() {
        let s = 4;
        let d = DepthMap::from_depth(3, 3, vec![2.0; 9]).unwrap();
        let mut cfg = PipelineConfig::tiny(s);
        cfg.w_h = (0..cfg.w_h.len()).map(|i| 0.01 * i as f64).collect();
        let f = FeatureMap::filled(2, 3, 3, 0.5);
        let out = reconstruct(&f, &d, &cfg).unwrap();
        assert_eq!((out.height(), out.width()), (12, 12));
        for y in 0..12 {
            for x in 0..12 {
                let phase = (y % s) * s + x % s;
                let expected =
                    2.0 + 0.5 * 0.01 * (2 * phase) as f64 + 0.5 * 0.01 * (2 * phase + 1) as f64;
                assert!((out.get(y, x) - expected).abs() < 1e-12);
                assert!((out.get(y, x) - out.get(y % s, x % s)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pipeline_shape_and_determinism() {
        let mut cfg = PipelineConfig::tiny(4);
        cfg.w_h = (0..cfg.w_h.len())
            .map(|i| ((i as f64) * 0.7).sin() * 0.01)
            .collect();
        let (img, d) = (rgb(24, 32), depth(6, 8));
        let a = run_pipeline(&img, &d, &cfg).unwrap();
        let b = run_pipeline(&img, &d, &cfg).unwrap();
        assert_eq!((a.height(), a.width()), (24, 32));
        assert_eq!(a, b);
        assert!(run_pipeline(&rgb(24, 28), &d, &cfg).is_err());
    }

    #[test]
    fn ablated_pipeline_with_zero_head_is_bicubic() {
        let mut cfg = PipelineConfig::tiny(4);
        cfg.orders = OrderFlags::NONE;
        let (img, d) = (rgb(16, 16), depth(4, 4));
        assert_eq!(
            run_pipeline(&img, &d, &cfg).unwrap(),
            d.resize(16, 16).unwrap()
        );
    }

    #[test]
    fn frozen_plan_reproduces_search() {
        let mut cfg = PipelineConfig::tiny(4);
        cfg.w_f = (0..cfg.w_f.len())
            .map(|i| 0.3 + 0.1 * ((i as f64) * 1.3).cos())
            .collect();
        let prepared = Prepared::new(&rgb(24, 24), &depth(6, 6), &cfg).unwrap();
        let searched = prepared.run(&cfg, None).unwrap();
        let frozen = prepared.run(&cfg, Some(&searched.plan)).unwrap();
        assert_eq!(frozen.features, searched.features);
        assert_eq!(frozen.plan, searched.plan);
        assert_eq!(searched.plan.steps.len(), cfg.moma_iters);
    }

    #[test]
    fn shape_errors() {
        let cfg = PipelineConfig::tiny(4);
        let state = FusionState {
            f_d: textured(2, 4, 4, 0.0),
            f_r: textured(2, 4, 5, 0.0),
            iteration: 0,
        };
        assert!(matches!(
            moma_step(&state, &cfg),
            Err(Error::ShapeMismatch { .. })
        ));
        let wrong_c = FusionState {
            f_d: textured(3, 4, 4, 0.0),
            f_r: textured(3, 4, 4, 0.0),
            iteration: 0,
        };
        assert!(moma_step(&wrong_c, &cfg).is_err());
    }
}
