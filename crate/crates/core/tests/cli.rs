//! End-to-end checks of the command-line interface: synth -> normals ->
//! train -> inpaint -> eval, plus exit-code conventions.

use std::path::Path;
use std::process::{Command, Output};

use depthfill::io as dio;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_depthfill"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn depthfill");
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn synth_writes_scenes_masks_and_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    run_ok(&[
        "synth", "--n", "3", "--size", "32", "--hole", "10", "--seed", "5", "--out",
        out.to_str().unwrap(),
    ]);
    let scenes = dio::read_manifest(&out.join("scenes.txt")).unwrap();
    let masks = dio::read_manifest(&out.join("masks.txt")).unwrap();
    assert_eq!(scenes.len(), 3);
    assert_eq!(masks.len(), 3);
    for s in &scenes {
        let (d, scale) = dio::read_pgm16(s).unwrap();
        assert_eq!(scale, 256.0);
        assert_eq!((d.height(), d.width()), (32, 32));
    }
    // Flags are echoed into the header comments.
    let raw = std::fs::read_to_string(out.join("scenes.txt")).unwrap();
    assert!(raw.starts_with("# depthfill synth"));
}

#[test]
fn normals_of_flat_pgm_are_straight_up() {
    let dir = tempfile::tempdir().unwrap();
    let flat = depthfill::DisparityImage::constant(16, 16, 40.0);
    let pgm = dir.path().join("flat.pgm");
    dio::write_pgm16(&pgm, &flat, 256.0, &[]).unwrap();
    let pfm = dir.path().join("flat_normals.pfm");
    run_ok(&["normals", "--in", pgm.to_str().unwrap(), "--out", pfm.to_str().unwrap()]);
    let n = dio::read_pfm(&pfm).unwrap();
    assert_eq!(n.channels, 3);
    let plane = 16 * 16;
    for idx in 0..plane {
        assert_eq!(n.data[idx], 0.0);
        assert_eq!(n.data[plane + idx], 0.0);
        assert!((n.data[2 * plane + idx] - 1.0).abs() < 1e-6);
    }
}

fn train_small(dir: &Path, alpha: &str, seed: &str, out_name: &str) -> std::path::PathBuf {
    let ckpt = dir.join(out_name);
    run_ok(&[
        "train",
        "--steps",
        "4",
        "--size",
        "32",
        "--hole",
        "12",
        "--width",
        "4",
        "--alpha",
        alpha,
        "--seed",
        seed,
        "--no-surface-attention",
        "--no-surface-discrimination",
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    ckpt
}

#[test]
fn train_inpaint_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    run_ok(&[
        "synth", "--n", "2", "--size", "32", "--hole", "12", "--seed", "9", "--out",
        data.to_str().unwrap(),
    ]);
    let ckpt = train_small(dir.path(), "1.0", "3", "model.ckpt");
    assert!(ckpt.with_extension("log.csv").exists());

    let scene = data.join("scene_0000.pgm");
    let mask = data.join("mask_0000.pgm");
    let filled = dir.path().join("filled.pgm");
    run_ok(&[
        "inpaint",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--in",
        scene.to_str().unwrap(),
        "--mask",
        mask.to_str().unwrap(),
        "--attention",
        "argmax",
        "--out",
        filled.to_str().unwrap(),
    ]);
    assert!(filled.exists());

    let report_dir = dir.path().join("report");
    let out = run_ok(&[
        "eval",
        "--gt",
        scene.to_str().unwrap(),
        "--gen",
        filled.to_str().unwrap(),
        "--mask",
        mask.to_str().unwrap(),
        "--bins",
        "64",
        "--region",
        "hole",
        "--out",
        report_dir.to_str().unwrap(),
    ]);
    assert!(report_dir.join("pixel_metrics.csv").exists());
    assert!(report_dir.join("distances.csv").exists());
    assert!(report_dir.join("distances.md").exists());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("MSE"), "eval should summarise: {}", stdout);
    let csv = std::fs::read_to_string(report_dir.join("distances.csv")).unwrap();
    assert!(csv.starts_with("# depthfill eval"));
}

#[test]
fn inpaint_can_dump_attention_score_map() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    run_ok(&[
        "synth", "--n", "1", "--size", "32", "--hole", "10", "--seed", "4", "--out",
        data.to_str().unwrap(),
    ]);
    // Attention must be on for scores to exist.
    let ckpt = dir.path().join("sa.ckpt");
    run_ok(&[
        "train", "--steps", "2", "--size", "32", "--hole", "10", "--width", "4",
        "--no-surface-discrimination", "--out", ckpt.to_str().unwrap(),
    ]);
    let filled = dir.path().join("filled.pgm");
    let scores = dir.path().join("scores.pfm");
    run_ok(&[
        "inpaint",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--in",
        data.join("scene_0000.pgm").to_str().unwrap(),
        "--mask",
        data.join("mask_0000.pgm").to_str().unwrap(),
        "--dump-scores",
        scores.to_str().unwrap(),
        "--out",
        filled.to_str().unwrap(),
    ]);
    let pfm = dio::read_pfm(&scores).unwrap();
    assert_eq!((pfm.height, pfm.width, pfm.channels), (32, 32, 1));
    // Scores live in (0, 1] on the foreground and are 0 elsewhere.
    let positive = pfm.data.iter().filter(|&&v| v > 0.0).count();
    assert!(positive >= 100, "expected scored foreground pixels, got {}", positive);
    assert!(pfm.data.iter().all(|&v| (0.0..=1.0 + 1e-9).contains(&v)));
}

#[test]
fn eval_of_identical_images_reports_zero_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    run_ok(&[
        "synth", "--n", "1", "--size", "32", "--hole", "10", "--seed", "2", "--out",
        data.to_str().unwrap(),
    ]);
    let scene = data.join("scene_0000.pgm");
    let mask = data.join("mask_0000.pgm");
    let report = dir.path().join("r");
    run_ok(&[
        "eval",
        "--gt",
        scene.to_str().unwrap(),
        "--gen",
        scene.to_str().unwrap(),
        "--mask",
        mask.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    let csv = std::fs::read_to_string(report.join("pixel_metrics.csv")).unwrap();
    let row = csv.lines().last().unwrap();
    assert!(row.starts_with("mean,0.000000,0.000000"), "got row {:?}", row);
    let distances = std::fs::read_to_string(report.join("distances.csv")).unwrap();
    let row = distances.lines().last().unwrap();
    let fields: Vec<&str> = row.split(',').collect();
    // intersection columns sit at 7 and 8; identical images give 1.
    assert_eq!(fields[7], "1.000000");
    assert_eq!(fields[8], "1.000000");
}

#[test]
fn alpha_ablation_changes_only_vec_totals() {
    let dir = tempfile::tempdir().unwrap();
    let a0 = train_small(dir.path(), "0.0", "11", "a0.ckpt");
    let a1 = train_small(dir.path(), "1.0", "11", "a1.ckpt");
    let log0 = std::fs::read_to_string(a0.with_extension("log.csv")).unwrap();
    let log1 = std::fs::read_to_string(a1.with_extension("log.csv")).unwrap();

    let parse = |text: &str| -> Vec<Vec<f64>> {
        text.lines()
            .filter(|l| !l.starts_with('#') && !l.starts_with("step"))
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect()
    };
    let (r0, r1) = (parse(&log0), parse(&log1));
    assert_eq!(r0.len(), r1.len());
    // Column order: step, g_total, g_adv, g_l1, g_vec, d_total, d_gp.
    // First step: identical initial parameters and data, so the totals
    // differ exactly by alpha * g_vec of the alpha = 1 run.
    let (first0, first1) = (&r0[0], &r1[0]);
    assert_eq!(first0[4], 0.0, "alpha = 0 run reports no vectorial term");
    assert!(first1[4] > 0.0);
    let expected = first0[1] + 1.0 * first1[4];
    assert!(
        (first1[1] - expected).abs() < 1e-9,
        "totals must differ by exactly alpha * V: {} vs {}",
        first1[1],
        expected
    );
}

#[test]
fn unknown_flag_exits_2_and_missing_file_exits_3() {
    let out = bin().args(["train", "--nonsense"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--nonsense") || err.to_lowercase().contains("usage"));

    let out = bin()
        .args(["normals", "--in", "/definitely/not/here.pgm", "--out", "/tmp/x.pfm"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: "), "one-line error expected, got {:?}", err);
}

#[test]
fn config_file_fills_unset_train_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.cfg");
    std::fs::write(&cfg, "alpha=0.0\n# comment\nn_critic=2\n").unwrap();
    let ckpt = dir.path().join("c.ckpt");
    run_ok(&[
        "--config",
        cfg.to_str().unwrap(),
        "train",
        "--steps",
        "2",
        "--size",
        "32",
        "--hole",
        "12",
        "--width",
        "4",
        "--no-surface-attention",
        "--no-surface-discrimination",
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    let log = std::fs::read_to_string(ckpt.with_extension("log.csv")).unwrap();
    assert!(log.contains("--alpha 0 "), "config alpha should flow into the echo: {}", log);
    assert!(log.contains("--n-critic 2"));
}
