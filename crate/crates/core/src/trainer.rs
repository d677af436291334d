//! Finite-difference gradient descent on the small trainable set: fusion
//! weights, head weights and the two detector scales.
//!
//! Every step runs the full pipeline once (with a fresh match search) and
//! logs its loss. Gradient probes then reuse what does not depend on the
//! probed parameter: head-weight probes only re-run reconstruction on the
//! cached final features, and fusion/detector probes re-run the
//! aggregation steps with the step's match indices held fixed (their scores
//! are re-evaluated). At the unperturbed parameters such a frozen run is
//! bit-identical to the searched one.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fusion::{MatchPlan, PipelineConfig, Prepared};
use crate::grid::{DepthMap, FeatureMap, RgbImage};
use crate::losses::{LossReport, LossTarget};

pub const DEFAULT_FD_EPSILON: f64 = 1e-3;

/// Lower bound kept on the detector scales during descent.
const MIN_DETECTOR_SCALE: f64 = 1e-6;

/// Which parameter groups are trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamSelection {
    pub w_f: bool,
    pub w_h: bool,
    pub detector: bool,
}

impl ParamSelection {
    pub const NONE: ParamSelection = ParamSelection {
        w_f: false,
        w_h: false,
        detector: false,
    };

    /// Trained values in the order `w_f`, `w_h`, `alpha_det`, `beta`.
    pub fn get(&self, cfg: &PipelineConfig) -> Vec<f64> {
        let mut p = Vec::new();
        if self.w_f {
            p.extend_from_slice(&cfg.w_f);
        }
        if self.w_h {
            p.extend_from_slice(&cfg.w_h);
        }
        if self.detector {
            p.extend_from_slice(&[cfg.alpha_det, cfg.beta]);
        }
        p
    }

    pub fn set(&self, cfg: &mut PipelineConfig, params: &[f64]) {
        let mut rest = params;
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head
        };
        if self.w_f {
            let n = cfg.w_f.len();
            cfg.w_f.copy_from_slice(take(n));
        }
        if self.w_h {
            let n = cfg.w_h.len();
            cfg.w_h.copy_from_slice(take(n));
        }
        if self.detector {
            let d = take(2);
            cfg.alpha_det = d[0];
            cfg.beta = d[1];
        }
    }

    fn count(&self, cfg: &PipelineConfig) -> usize {
        self.get(cfg).len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub fd_epsilon: f64,
    pub params: ParamSelection,
    /// Seeds the optional initial jitter of the trained parameters.
    pub seed: u64,
    /// Standard deviation of a Gaussian jitter added to the trained
    /// parameters before the first step; 0 keeps the initial values.
    pub init_jitter: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            lr: 1.0,
            fd_epsilon: DEFAULT_FD_EPSILON,
            params: ParamSelection {
                w_f: true,
                w_h: true,
                detector: false,
            },
            seed: 0,
            init_jitter: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be non-negative, got {}",
                self.lr
            )));
        }
        if !(self.fd_epsilon > 0.0 && self.fd_epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "fd_epsilon must be positive, got {}",
                self.fd_epsilon
            )));
        }
        if !(self.init_jitter >= 0.0 && self.init_jitter.is_finite()) {
            return Err(Error::InvalidArgument(
                "init_jitter must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Central differences `(L(p + e) - L(p - e)) / 2e` per coordinate, probes
/// evaluated in parallel. Any non-finite probe loss is an error.
pub fn numeric_grad<F>(params: &[f64], epsilon: f64, loss: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    (0..params.len())
        .into_par_iter()
        .map(|i| {
            let mut p = params.to_vec();
            p[i] = params[i] + epsilon;
            let up = loss(&p)?;
            p[i] = params[i] - epsilon;
            let down = loss(&p)?;
            if !(up.is_finite() && down.is_finite()) {
                return Err(Error::NonFinite("loss at a gradient probe"));
            }
            Ok((up - down) / (2.0 * epsilon))
        })
        .collect()
}

/// One training scene: encoded inputs plus the loss target.
#[derive(Clone, Debug)]
pub struct SceneObjective {
    prepared: Prepared,
    target: LossTarget,
}

/// A full evaluation and what gradient probes need from it.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: LossReport,
    pub features: FeatureMap,
    pub plan: MatchPlan,
    pub d_hr: DepthMap,
}

impl SceneObjective {
    pub fn new(
        rgb: &RgbImage,
        d_lr: &DepthMap,
        d_gt: &DepthMap,
        cfg: &PipelineConfig,
    ) -> Result<Self> {
        let prepared = Prepared::new(rgb, d_lr, cfg)?;
        let target = LossTarget::new(d_gt)?;
        let base = prepared.base();
        if (base.height(), base.width()) != (d_gt.height(), d_gt.width()) {
            return Err(Error::shape(
                format!("ground truth {}x{}", base.height(), base.width()),
                format!("{}x{}", d_gt.height(), d_gt.width()),
            ));
        }
        Ok(Self { prepared, target })
    }

    pub fn target(&self) -> &LossTarget {
        &self.target
    }

    pub fn prepared(&self) -> &Prepared {
        &self.prepared
    }

    pub fn evaluate(&self, cfg: &PipelineConfig) -> Result<Evaluation> {
        let out = self.prepared.run(cfg, None)?;
        let report = self.target.report(&out.d_hr, cfg.alpha_loss)?;
        Ok(Evaluation {
            report,
            features: out.features,
            plan: out.plan,
            d_hr: out.d_hr,
        })
    }

    fn frozen_loss(&self, cfg: &PipelineConfig, plan: &MatchPlan) -> Result<f64> {
        let out = self.prepared.run(cfg, Some(plan))?;
        Ok(self.target.report(&out.d_hr, cfg.alpha_loss)?.l_total)
    }

    fn head_loss(&self, cfg: &PipelineConfig, features: &FeatureMap) -> Result<f64> {
        let d_hr = self.prepared.reconstruct(features, cfg)?;
        Ok(self.target.report(&d_hr, cfg.alpha_loss)?.l_total)
    }

    /// Finite-difference gradient of `l_total` for the selected parameters
    /// around `cfg`, using `eval` (a full evaluation at `cfg`) for caching.
    pub fn gradient(
        &self,
        cfg: &PipelineConfig,
        eval: &Evaluation,
        sel: ParamSelection,
        epsilon: f64,
    ) -> Result<Vec<f64>> {
        let mut grad = Vec::with_capacity(sel.count(cfg));
        if sel.w_f {
            let group = ParamSelection {
                w_f: true,
                ..ParamSelection::NONE
            };
            grad.extend(numeric_grad(&cfg.w_f, epsilon, |p| {
                let mut probe = cfg.clone();
                group.set(&mut probe, p);
                self.frozen_loss(&probe, &eval.plan)
            })?);
        }
        if sel.w_h {
            let group = ParamSelection {
                w_h: true,
                ..ParamSelection::NONE
            };
            grad.extend(numeric_grad(&cfg.w_h, epsilon, |p| {
                let mut probe = cfg.clone();
                group.set(&mut probe, p);
                self.head_loss(&probe, &eval.features)
            })?);
        }
        if sel.detector {
            let group = ParamSelection {
                detector: true,
                ..ParamSelection::NONE
            };
            let current = [cfg.alpha_det, cfg.beta];
            if cfg.detector {
                grad.extend(numeric_grad(&current, epsilon, |p| {
                    let mut probe = cfg.clone();
                    group.set(&mut probe, p);
                    self.frozen_loss(&probe, &eval.plan)
                })?);
            } else {
                grad.extend([0.0, 0.0]);
            }
        }
        Ok(grad)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogEntry {
    pub step: usize,
    pub report: LossReport,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Parameters with the lowest logged loss.
    pub config: PipelineConfig,
    pub best: LossReport,
    /// One entry per evaluated iterate: the initial parameters are step 0
    /// and the result of update `n` is step `n`.
    pub log: Vec<LogEntry>,
}

impl FitResult {
    pub fn initial(&self) -> &LossReport {
        &self.log[0].report
    }

    /// CSV with header `step,l_rec,l_grad,l_hes,l_total`.
    pub fn log_csv(&self) -> String {
        let mut s = String::from("step,l_rec,l_grad,l_hes,l_total\n");
        for e in &self.log {
            let r = &e.report;
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                e.step, r.l_rec, r.l_grad, r.l_hes, r.l_total
            ));
        }
        s
    }
}

fn jitter(params: &mut [f64], sd: f64, seed: u64) {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    if sd == 0.0 {
        return;
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sd).expect("finite non-negative sd");
    for p in params {
        *p += normal.sample(&mut rng);
    }
}

/// Plain gradient descent, `p -= lr * grad / valid_count`, keeping the best
/// iterate. The loss is a sum over valid pixels, so dividing by their count
/// makes the step size independent of the image size.
pub fn fit(
    objective: &SceneObjective,
    train: &TrainConfig,
    pipeline: &PipelineConfig,
) -> Result<FitResult> {
    train.validate()?;
    pipeline.validate()?;
    let sel = train.params;
    let mut cfg = pipeline.clone();
    let mut params = sel.get(&cfg);
    jitter(&mut params, train.init_jitter, train.seed);
    sel.set(&mut cfg, &params);

    let valid = objective.target().valid_count() as f64;
    let mut log = Vec::new();
    let mut best: Option<(LossReport, PipelineConfig)> = None;
    let last = if params.is_empty() { 0 } else { train.steps };
    for step in 0..=last {
        let eval = match objective.evaluate(&cfg) {
            Ok(e) if e.report.l_total.is_finite() => e,
            Ok(_) | Err(Error::NonFinite(_)) => return Err(Error::Divergence { step }),
            Err(e) => return Err(e),
        };
        log.push(LogEntry {
            step,
            report: eval.report,
        });
        if best
            .as_ref()
            .is_none_or(|(b, _)| eval.report.l_total < b.l_total)
        {
            best = Some((eval.report, cfg.clone()));
        }
        if step == last {
            break;
        }
        let grad = match objective.gradient(&cfg, &eval, sel, train.fd_epsilon) {
            Ok(g) => g,
            Err(Error::NonFinite(_)) => return Err(Error::Divergence { step }),
            Err(e) => return Err(e),
        };
        for (p, g) in params.iter_mut().zip(&grad) {
            *p -= train.lr * g / valid;
        }
        if sel.detector {
            let n = params.len();
            for p in &mut params[n - 2..] {
                *p = p.max(MIN_DETECTOR_SCALE);
            }
        }
        sel.set(&mut cfg, &params);
    }
    let (best, config) = best.expect("at least one evaluation");
    Ok(FitResult { config, best, log })
}
