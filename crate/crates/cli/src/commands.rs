//! One function per subcommand.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use multiorder::fusion::{encode_depth, encode_rgb, run_pipeline, PipelineConfig};
use multiorder::grid::netpbm::{
    read_depth, read_rgb, write_depth_pfm, write_image, FloatImage, Image,
};
use multiorder::losses::{add_noise, rmse_cm, LossTarget};
use multiorder::matcher::{
    dominant_displacement, match_order, standardized_distance, MatchOrder, Retrieval,
};
use multiorder::scene::{render as render_scene, ridge_masks, Preset, SceneSpec};
use multiorder::structdet::{describe, DetectorParams};
use multiorder::trainer::{fit as fit_scene, ParamSelection, SceneObjective, TrainConfig};
use multiorder::{DepthMap, FeatureMap, RgbImage};

use crate::render::{error_map, loss_lines, unit_gray};
use crate::{CliError, CliResult, DetectArgs, EvalArgs, FitArgs, MatchArgs, SrArgs, SynthArgs};

fn out_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn load_depth(path: &Path) -> CliResult<DepthMap> {
    read_depth(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn load_rgb(path: &Path) -> CliResult<RgbImage> {
    read_rgb(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_rgb(path: &Path, img: &RgbImage) -> CliResult<()> {
    Ok(write_image(path, &Image::Rgb8(img.clone()))?)
}

fn write_map(path: &Path, f: &FeatureMap) -> CliResult<()> {
    Ok(write_image(
        path,
        &Image::Float(FloatImage::from_feature_map(f)?),
    )?)
}

fn ensure_scaled(what: &str, hr: (usize, usize), lr: &DepthMap, s: usize) -> CliResult<()> {
    let expected = (lr.height() * s, lr.width() * s);
    if hr != expected {
        return Err(CliError::Usage(format!(
            "{what} is {}x{}, expected {}x{} for a {}x{} depth map at scale {s}",
            hr.0,
            hr.1,
            expected.0,
            expected.1,
            lr.height(),
            lr.width()
        )));
    }
    Ok(())
}

pub fn synth(a: &SynthArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut spec = SceneSpec {
        preset: Preset::parse(&a.preset)?,
        rotation_deg: a.rotation,
        seed: a.seed,
        sigma: a.sigma,
        ..SceneSpec::default_for_scale(a.scale)
    };
    if let Some(n) = a.size {
        spec.width = n;
        spec.height = n;
    }
    if let Some(dx) = a.dx {
        spec.dx = dx;
    }
    if let Some(dy) = a.dy {
        spec.dy = dy;
    }
    let scene = render_scene(&spec)?;
    out_dir(&a.out)?;
    write_rgb(&a.out.join("rgb.ppm"), &scene.rgb)?;
    write_depth_pfm(a.out.join("d_gt.pfm"), &scene.d_gt)?;
    write_depth_pfm(a.out.join("d_lr.pfm"), &scene.d_lr)?;
    if let Some(noisy) = &scene.d_lr_noisy {
        write_depth_pfm(a.out.join("d_lr_noisy.pfm"), noisy)?;
    }
    let meta = spec.metadata();
    write_text(&a.out.join("meta.txt"), &meta)?;
    write!(out, "{meta}")?;
    Ok(())
}

pub fn match_cmd(a: &MatchArgs, out: &mut dyn Write) -> CliResult<()> {
    let order = MatchOrder::from_letter(a.order)
        .ok_or_else(|| CliError::Usage(format!("unknown order '{}'", a.order)))?;
    let depth = load_depth(&a.depth)?;
    let target = encode_depth(&depth, a.channels)?;
    let source = match (&a.rgb, &a.source_depth) {
        (Some(path), _) => {
            let img = load_rgb(path)?;
            ensure_scaled("rgb image", (img.height(), img.width()), &depth, a.scale)?;
            encode_rgb(&img, a.scale, a.channels)?
        }
        (None, Some(path)) => {
            let other = load_depth(path)?;
            depth.ensure_same_shape(&other)?;
            encode_depth(&other, a.channels)?
        }
        (None, None) => return Err(CliError::Usage("need --rgb or --source-depth".into())),
    };
    let m = match_order(&source, &target, order, Retrieval::search(a.k))?;
    let (n, k) = (m.result.count(), m.result.k());
    let as_rows = |values: Vec<f64>| FeatureMap::new(1, n, k, values);
    let eta = as_rows(m.result.all_eta().iter().map(|&j| j as f64).collect())?;
    let psi = as_rows(m.result.all_psi().to_vec())?;

    let self_hits = (0..n).filter(|&i| m.result.top1(i) == i).count();
    let all = vec![true; n];
    let ((dy, dx), agree) = dominant_displacement(&m.result, depth.width(), &all);
    let mut stats = String::new();
    let _ = writeln!(stats, "order = {}", order.letter());
    let _ = writeln!(stats, "k = {k}");
    let _ = writeln!(stats, "patches = {n}");
    let _ = writeln!(
        stats,
        "self_match_fraction = {}",
        self_hits as f64 / n as f64
    );
    let _ = writeln!(
        stats,
        "matched_distance = {}",
        standardized_distance(&m.matched, &target)?
    );
    let _ = writeln!(
        stats,
        "unmatched_distance = {}",
        standardized_distance(&source, &target)?
    );
    let _ = writeln!(stats, "dominant_displacement = {dy} {dx}");
    let _ = writeln!(stats, "dominant_fraction = {agree}");

    out_dir(&a.out)?;
    write_map(&a.out.join("eta.pfm"), &eta)?;
    write_map(&a.out.join("psi.pfm"), &psi)?;
    write_text(&a.out.join("stats.txt"), &stats)?;
    write!(out, "{stats}")?;
    Ok(())
}

struct Inputs {
    rgb: RgbImage,
    d_lr: DepthMap,
    d_gt: DepthMap,
}

fn load_inputs(rgb: &Path, depth: &Path, gt: &Path, cfg: &PipelineConfig) -> CliResult<Inputs> {
    let rgb = load_rgb(rgb)?;
    let d_lr = load_depth(depth)?;
    let d_gt = load_depth(gt)?;
    ensure_scaled("rgb image", (rgb.height(), rgb.width()), &d_lr, cfg.scale)?;
    ensure_scaled(
        "ground truth",
        (d_gt.height(), d_gt.width()),
        &d_lr,
        cfg.scale,
    )?;
    Ok(Inputs { rgb, d_lr, d_gt })
}

fn bicubic(d_lr: &DepthMap, s: usize) -> CliResult<DepthMap> {
    Ok(d_lr.resize(d_lr.height() * s, d_lr.width() * s)?)
}

pub fn sr(a: &SrArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = a.pipeline.resolve()?;
    let inp = load_inputs(&a.rgb, &a.depth, &a.gt, &cfg)?;
    let d_hr = run_pipeline(&inp.rgb, &inp.d_lr, &cfg)?;
    let target = LossTarget::new(&inp.d_gt)?;
    let base = bicubic(&inp.d_lr, cfg.scale)?;

    let mut report = String::new();
    let _ = writeln!(report, "rmse_cm = {}", target.rmse_cm(&d_hr)?);
    let _ = writeln!(report, "bicubic_rmse_cm = {}", target.rmse_cm(&base)?);
    report.push_str(&loss_lines(&target.report(&d_hr, cfg.alpha_loss)?));

    out_dir(&a.out)?;
    write_depth_pfm(a.out.join("d_hr.pfm"), &d_hr)?;
    write_rgb(&a.out.join("error_map.ppm"), &error_map(&d_hr, &inp.d_gt)?)?;
    write_text(&a.out.join("report.txt"), &report)?;
    write!(out, "{report}")?;
    Ok(())
}

pub fn detect(a: &DetectArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut params = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            PipelineConfig::from_kv_str(&text)?.detector_params()?
        }
        None => DetectorParams::default(),
    };
    if let Some(v) = a.alpha_det {
        params.alpha_det = v;
    }
    if let Some(v) = a.beta {
        params.beta = v;
    }
    params.validate()?;
    let img = load_rgb(&a.rgb)?;
    let s = describe(&img.to_gray(), &params).s;
    let gate = params.refine.gate(&s)?;
    let n = s.data().len() as f64;
    let mut summary = String::new();
    let _ = writeln!(summary, "mean_s = {}", s.data().iter().sum::<f64>() / n);
    let _ = writeln!(
        summary,
        "max_s = {}",
        s.data().iter().copied().fold(0.0, f64::max)
    );
    let _ = writeln!(
        summary,
        "mean_gate = {}",
        gate.data().iter().sum::<f64>() / n
    );
    if let Some(path) = &a.meta {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let spec = SceneSpec::from_metadata(&text)?;
        if (spec.height, spec.width) != (img.height(), img.width()) {
            return Err(CliError::Usage(format!(
                "metadata describes a {}x{} scene, image is {}x{}",
                spec.height,
                spec.width,
                img.height(),
                img.width()
            )));
        }
        if spec.preset == Preset::Ridge {
            let (crest, background) = ridge_masks(&spec);
            let masked_mean = |mask: &[bool]| {
                let (sum, n) = s
                    .data()
                    .iter()
                    .zip(mask)
                    .filter(|(_, &m)| m)
                    .fold((0.0, 0usize), |(t, n), (&v, _)| (t + v, n + 1));
                sum / n.max(1) as f64
            };
            let (c, b) = (masked_mean(&crest), masked_mean(&background));
            let _ = writeln!(summary, "crest_mean_s = {c}");
            let _ = writeln!(summary, "background_mean_s = {b}");
            let _ = writeln!(summary, "crest_over_background = {}", c / b);
        }
    }

    out_dir(&a.out)?;
    write_map(&a.out.join("S.pfm"), &s)?;
    write_rgb(&a.out.join("gate.ppm"), &unit_gray(&gate)?)?;
    write!(out, "{summary}")?;
    Ok(())
}

pub fn eval(a: &EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let pred = load_depth(&a.pred)?;
    let gt = load_depth(&a.gt)?;
    gt.ensure_same_shape(&pred)?;
    let target = LossTarget::new(&gt)?;
    let mut report = format!("rmse_cm = {:.2}\n", rmse_cm(&gt, &pred)?);
    report.push_str(&loss_lines(
        &target.report(&pred, multiorder::fusion::config::DEFAULT_ALPHA_LOSS)?,
    ));
    write!(out, "{report}")?;
    Ok(())
}

fn parse_selection(s: &str) -> CliResult<ParamSelection> {
    let mut sel = ParamSelection::NONE;
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "w_f" => sel.w_f = true,
            "w_h" => sel.w_h = true,
            "detector" => sel.detector = true,
            "none" => {}
            other => {
                return Err(CliError::Usage(format!(
                    "unknown parameter group '{other}' (expected w_f, w_h, detector)"
                )))
            }
        }
    }
    Ok(sel)
}

pub fn fit(a: &FitArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = a.pipeline.resolve()?;
    let mut inp = load_inputs(&a.rgb, &a.depth, &a.gt, &cfg)?;
    if a.sigma > 0.0 {
        inp.d_lr = add_noise(&inp.d_lr, a.sigma, a.seed)?;
    }
    let defaults = TrainConfig::default();
    let train = TrainConfig {
        steps: a.steps,
        lr: a.lr.unwrap_or(defaults.lr),
        params: parse_selection(&a.train)?,
        seed: a.seed,
        init_jitter: a.jitter,
        ..defaults
    };
    train.validate()?;
    let objective = SceneObjective::new(&inp.rgb, &inp.d_lr, &inp.d_gt, &cfg)?;
    let result = fit_scene(&objective, &train, &cfg)?;
    let d_hr = objective.prepared().run(&result.config, None)?.d_hr;
    let target = objective.target();
    let initial = result.initial().l_total;

    let mut summary = String::new();
    let _ = writeln!(summary, "steps = {}", train.steps);
    let _ = writeln!(summary, "initial_l_total = {initial}");
    let _ = writeln!(summary, "best_l_total = {}", result.best.l_total);
    let _ = writeln!(summary, "ratio = {}", result.best.l_total / initial);
    let _ = writeln!(summary, "rmse_cm = {}", target.rmse_cm(&d_hr)?);
    let _ = writeln!(
        summary,
        "bicubic_rmse_cm = {}",
        target.rmse_cm(objective.prepared().base())?
    );

    out_dir(&a.out)?;
    write_text(&a.out.join("config.txt"), &result.config.to_kv_string())?;
    write_text(&a.out.join("loss_log.csv"), &result.log_csv())?;
    write!(out, "{summary}")?;
    Ok(())
}
