use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use multiorder::fusion::PipelineConfig;
use multiorder::grid::netpbm::{read_depth, read_image, write_depth_pfm, Image};
use multiorder::DepthMap;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_multiorder"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn value(text: &str, key: &str) -> f64 {
    let prefix = format!("{key} = ");
    text.lines()
        .find_map(|l| l.strip_prefix(&prefix))
        .unwrap_or_else(|| panic!("{key} missing in:\n{text}"))
        .parse()
        .unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn synth(dir: &Path, extra: &[&str]) {
    let out = p(dir, "");
    let mut args = vec!["synth", "--out", &out];
    args.extend_from_slice(extra);
    let o = bin(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synth_writes_scene_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["--sigma", "0.07"]);
    for f in [
        "rgb.ppm",
        "d_gt.pfm",
        "d_lr.pfm",
        "d_lr_noisy.pfm",
        "meta.txt",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let meta = fs::read_to_string(dir.path().join("meta.txt")).unwrap();
    assert_eq!(value(&meta, "dx"), 4.0);
    assert_eq!(value(&meta, "dy"), 3.0);
    let d_lr = read_depth(dir.path().join("d_lr.pfm")).unwrap();
    assert_eq!((d_lr.height(), d_lr.width()), (16, 16));

    let clean = tempfile::tempdir().unwrap();
    synth(clean.path(), &[]);
    assert!(!clean.path().join("d_lr_noisy.pfm").exists());
}

#[test]
fn synth_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth(a.path(), &["--sigma", "0.1", "--rotation", "-3"]);
    synth(b.path(), &["--sigma", "0.1", "--rotation", "-3"]);
    for f in [
        "rgb.ppm",
        "d_gt.pfm",
        "d_lr.pfm",
        "d_lr_noisy.pfm",
        "meta.txt",
    ] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn eval_reports_planted_errors() {
    let dir = tempfile::tempdir().unwrap();
    let gt = DepthMap::from_depth(4, 4, vec![2.0; 16]).unwrap();
    let uniform = DepthMap::from_depth(4, 4, vec![2.01; 16]).unwrap();
    let checker = DepthMap::from_depth(
        4,
        4,
        (0..16)
            .map(|i| if (i / 4 + i % 4) % 2 == 0 { 2.0 } else { 2.02 })
            .collect(),
    )
    .unwrap();
    for (name, d) in [("gt", &gt), ("uniform", &uniform), ("checker", &checker)] {
        write_depth_pfm(dir.path().join(format!("{name}.pfm")), d).unwrap();
    }
    let run = |pred: &str| {
        let o = bin(&[
            "eval",
            "--pred",
            &p(dir.path(), pred),
            "--gt",
            &p(dir.path(), "gt.pfm"),
        ]);
        assert!(o.status.success());
        stdout(&o)
    };
    assert!(run("gt.pfm").contains("rmse_cm = 0.00\n"));
    assert!(run("uniform.pfm").contains("rmse_cm = 1.00\n"));
    assert!(run("checker.pfm").contains("rmse_cm = 1.41\n"));
}

#[test]
fn sr_with_zero_head_matches_bicubic() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let o = bin(&[
        "sr",
        "--rgb",
        &p(dir.path(), "rgb.ppm"),
        "--depth",
        &p(dir.path(), "d_lr.pfm"),
        "--gt",
        &p(dir.path(), "d_gt.pfm"),
        "--out",
        &p(dir.path(), "sr"),
        "--tiny",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(dir.path().join("sr/report.txt")).unwrap();
    assert_eq!(value(&report, "rmse_cm"), value(&report, "bicubic_rmse_cm"));
    assert_eq!(report, stdout(&o));
    match read_image(dir.path().join("sr/error_map.ppm")).unwrap() {
        Image::Rgb8(img) => assert_eq!((img.height(), img.width()), (64, 64)),
        other => panic!("unexpected {:?}", other.kind()),
    }
    let d_hr = read_depth(dir.path().join("sr/d_hr.pfm")).unwrap();
    assert_eq!((d_hr.height(), d_hr.width()), (64, 64));
}

#[test]
fn sr_rejects_size_mismatch_and_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let args = |depth: &str, scale: &str| {
        vec![
            "sr".to_string(),
            "--rgb".into(),
            p(dir.path(), "rgb.ppm"),
            "--depth".into(),
            p(dir.path(), depth),
            "--gt".into(),
            p(dir.path(), "d_gt.pfm"),
            "--out".into(),
            p(dir.path(), "sr"),
            "--scale".into(),
            scale.into(),
        ]
    };
    let code = |a: Vec<String>| {
        let refs: Vec<&str> = a.iter().map(String::as_str).collect();
        bin(&refs).status.code()
    };
    assert_eq!(code(args("d_lr.pfm", "8")), Some(1));
    assert_eq!(code(args("missing.pfm", "4")), Some(2));
    assert_eq!(code(args("d_lr.pfm", "5")), Some(1));
    assert_eq!(bin(&["sr", "--bogus"]).status.code(), Some(1));
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn unreadable_config_is_an_io_error_and_bad_keys_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    fs::write(dir.path().join("bad.txt"), "scale = 4\nwidth = 3\n").unwrap();
    let run = |cfg: &str| {
        bin(&[
            "sr",
            "--rgb",
            &p(dir.path(), "rgb.ppm"),
            "--depth",
            &p(dir.path(), "d_lr.pfm"),
            "--gt",
            &p(dir.path(), "d_gt.pfm"),
            "--out",
            &p(dir.path(), "sr"),
            "--config",
            &p(dir.path(), cfg),
        ])
        .status
        .code()
    };
    assert_eq!(run("absent.txt"), Some(2));
    assert_eq!(run("bad.txt"), Some(1));
}

#[test]
fn non_finite_weights_are_numeric_failures() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let mut cfg = PipelineConfig::tiny(4);
    cfg.w_h[0] = 1e308;
    cfg.w_h[1] = 1e308;
    cfg.w_f = vec![1e308; cfg.w_f.len()];
    fs::write(dir.path().join("huge.txt"), cfg.to_kv_string()).unwrap();
    let o = bin(&[
        "sr",
        "--rgb",
        &p(dir.path(), "rgb.ppm"),
        "--depth",
        &p(dir.path(), "d_lr.pfm"),
        "--gt",
        &p(dir.path(), "d_gt.pfm"),
        "--out",
        &p(dir.path(), "sr"),
        "--config",
        &p(dir.path(), "huge.txt"),
    ]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn match_dumps_results_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let depth = p(dir.path(), "d_lr.pfm");
    let o = bin(&[
        "match",
        "--depth",
        &depth,
        "--source-depth",
        &depth,
        "--k",
        "1",
        "--out",
        &p(dir.path(), "self"),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(value(&stdout(&o), "self_match_fraction") >= 0.99);

    let o = bin(&[
        "match",
        "--depth",
        &depth,
        "--rgb",
        &p(dir.path(), "rgb.ppm"),
        "--order",
        "f",
        "--out",
        &p(dir.path(), "rgb"),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stats = fs::read_to_string(dir.path().join("rgb/stats.txt")).unwrap();
    assert!(value(&stats, "matched_distance") < value(&stats, "unmatched_distance"));
    match read_image(dir.path().join("rgb/eta.pfm")).unwrap() {
        Image::Float(f) => assert_eq!((f.height, f.width), (256, 4)),
        other => panic!("unexpected {:?}", other.kind()),
    }

    let o = bin(&[
        "match",
        "--depth",
        &depth,
        "--source-depth",
        &depth,
        "--k",
        "257",
        "--out",
        &p(dir.path(), "x"),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn detect_flat_and_ridge() {
    let dir = tempfile::tempdir().unwrap();
    let flat = Image::Rgb8(multiorder::RgbImage::new(16, 16, vec![128; 16 * 16 * 3]).unwrap());
    multiorder::grid::netpbm::write_image(dir.path().join("flat.ppm"), &flat).unwrap();
    let o = bin(&[
        "detect",
        "--rgb",
        &p(dir.path(), "flat.ppm"),
        "--out",
        &p(dir.path(), "flat"),
    ]);
    assert!(o.status.success());
    assert!(value(&stdout(&o), "max_s") < 1e-3);
    assert!(dir.path().join("flat/S.pfm").exists());
    assert!(dir.path().join("flat/gate.ppm").exists());

    let ridge = dir.path().join("ridge");
    synth(&ridge, &["--preset", "ridge"]);
    let checker = dir.path().join("checker");
    synth(&checker, &["--preset", "checker"]);
    let run = |d: &Path| {
        let o = bin(&[
            "detect",
            "--rgb",
            &p(d, "rgb.ppm"),
            "--out",
            &p(d, "det"),
            "--meta",
            &p(d, "meta.txt"),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    let r = run(&ridge);
    assert!(value(&r, "crest_over_background") >= 5.0, "{r}");
    let c = run(&checker);
    assert!(!c.contains("crest_mean_s"));
    assert!(value(&c, "mean_s") < value(&r, "crest_mean_s"));
}

#[test]
fn fit_writes_config_and_log() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let out = dir.path().join("fit");
    let o = bin(&[
        "fit",
        "--rgb",
        &p(dir.path(), "rgb.ppm"),
        "--depth",
        &p(dir.path(), "d_lr.pfm"),
        "--gt",
        &p(dir.path(), "d_gt.pfm"),
        "--out",
        &out.to_string_lossy(),
        "--steps",
        "3",
        "--tiny",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(out.join("loss_log.csv")).unwrap();
    assert!(log.starts_with("step,l_rec,l_grad,l_hes,l_total\n"));
    assert_eq!(log.lines().count(), 5);
    let text = fs::read_to_string(out.join("config.txt")).unwrap();
    let cfg = PipelineConfig::from_kv_str(&text).unwrap();
    assert_eq!(cfg.to_kv_string(), text);
    let summary = stdout(&o);
    assert!(value(&summary, "best_l_total") <= value(&summary, "initial_l_total"));

    let sr = bin(&[
        "sr",
        "--rgb",
        &p(dir.path(), "rgb.ppm"),
        "--depth",
        &p(dir.path(), "d_lr.pfm"),
        "--gt",
        &p(dir.path(), "d_gt.pfm"),
        "--out",
        &p(dir.path(), "sr"),
        "--config",
        &out.join("config.txt").to_string_lossy(),
    ]);
    assert!(sr.status.success());
    assert_eq!(value(&stdout(&sr), "rmse_cm"), value(&summary, "rmse_cm"));
}
