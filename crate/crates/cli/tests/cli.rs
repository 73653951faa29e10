//! End-to-end tests of the `fanet` binary on a miniature benchmark.

use std::path::Path;
use std::process::{Command, Output};

fn fanet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fanet"))
        .args(args)
        .env_remove("FANET_SEED")
        .output()
        .expect("binary runs")
}

fn gen_tiny(dir: &Path) {
    let out = fanet(&[
        "gen",
        "--persons",
        "4",
        "--cameras",
        "2",
        "--images_per_pair",
        "3",
        "--height",
        "64",
        "--width",
        "32",
        "--seed",
        "5",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn usage_errors_exit_2() {
    let out = fanet(&[]);
    assert_eq!(out.status.code(), Some(2));
    let out = fanet(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let out = fanet(&["gen", "--nonsense", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = fanet(&["gen"]); // missing --out
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let out = fanet(&["train", "--data", "/nonexistent-path", "--out", "/tmp/x-unused"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_row_count_matches_config_arithmetic() {
    let dir = tempfile::tempdir().unwrap();
    gen_tiny(dir.path());
    let manifest = std::fs::read_to_string(dir.path().join("manifest.tsv")).unwrap();
    // 4 persons x 2 cameras x 3 images + header
    assert_eq!(manifest.lines().count(), 1 + 4 * 2 * 3);
    assert!(dir.path().join("resolved.cfg").exists());
    assert!(dir.path().join("spec.txt").exists());
}

#[test]
fn train_eval_export_pipeline_runs() {
    let data = tempfile::tempdir().unwrap();
    gen_tiny(data.path());
    let run = tempfile::tempdir().unwrap();
    let out = fanet(&[
        "train",
        "--data",
        data.path().to_str().unwrap(),
        "--out",
        run.path().to_str().unwrap(),
        "--epochs",
        "2",
        "--warmup_epochs",
        "1",
        "--decay",
        "",
        "--batch_p",
        "2",
        "--batch_k",
        "2",
        "--k",
        "8",
        "--embed_dim",
        "8",
        "--lr_peak",
        "0.05",
        "--lr_start",
        "0.01",
        "--seed",
        "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["checkpoint.ckpt", "loss_trace.csv", "eval_report.tsv", "resolved.cfg"] {
        assert!(run.path().join(f).exists(), "missing {f}");
    }
    let report = std::fs::read_to_string(run.path().join("eval_report.tsv")).unwrap();
    assert!(report.contains("rank1\t"));
    assert!(report.contains("mAP\t"));

    // eval from the emitted resolved config alone
    let eval_out = tempfile::tempdir().unwrap();
    let out = fanet(&[
        "eval",
        "--config",
        run.path().join("resolved.cfg").to_str().unwrap(),
        "--checkpoint",
        run.path().join("checkpoint.ckpt").to_str().unwrap(),
        "--out",
        eval_out.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let eval_tsv = std::fs::read_to_string(eval_out.path().join("eval_report.tsv")).unwrap();
    // same checkpoint, same data: identical metrics
    assert_eq!(eval_tsv, report);

    // export attention maps for the test split
    let maps = tempfile::tempdir().unwrap();
    let out = fanet(&[
        "export-maps",
        "--config",
        run.path().join("resolved.cfg").to_str().unwrap(),
        "--checkpoint",
        run.path().join("checkpoint.ckpt").to_str().unwrap(),
        "--out",
        maps.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let n_maps = std::fs::read_dir(maps.path())
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "pgm")
        })
        .count();
    // 2 test persons x 2 cameras x 3 images, a zf and a zb file each
    assert_eq!(n_maps, 2 * 2 * 3 * 2);
}

#[test]
fn corrupted_checkpoint_is_rejected_with_crc_error() {
    let data = tempfile::tempdir().unwrap();
    gen_tiny(data.path());
    let run = tempfile::tempdir().unwrap();
    let out = fanet(&[
        "train",
        "--data",
        data.path().to_str().unwrap(),
        "--out",
        run.path().to_str().unwrap(),
        "--epochs",
        "1",
        "--warmup_epochs",
        "0",
        "--decay",
        "",
        "--batch_p",
        "2",
        "--batch_k",
        "2",
        "--k",
        "4",
        "--embed_dim",
        "4",
        "--lr_peak",
        "0.02",
        "--lr_start",
        "0.01",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run.path().join("checkpoint.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    std::fs::write(&ckpt, bytes).unwrap();
    let out = fanet(&[
        "eval",
        "--config",
        run.path().join("resolved.cfg").to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        run.path().join("eval2").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("CRC"), "stderr: {err}");
}

#[test]
fn seed_env_overrides_flags() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = |dir: &Path| {
        vec![
            "gen".to_string(),
            "--persons".into(),
            "2".into(),
            "--cameras".into(),
            "2".into(),
            "--images_per_pair".into(),
            "1".into(),
            "--height".into(),
            "64".into(),
            "--width".into(),
            "32".into(),
            "--seed".into(),
            "5".into(),
            "--out".into(),
            dir.to_str().unwrap().to_string(),
        ]
    };
    let out = Command::new(env!("CARGO_BIN_EXE_fanet"))
        .args(args(a.path()))
        .env("FANET_SEED", "99")
        .output()
        .unwrap();
    assert!(out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_fanet"))
        .args(args(b.path()))
        .env_remove("FANET_SEED")
        .env("FANET_SEED", "99")
        .output()
        .unwrap();
    assert!(out.status.success());
    // both runs used seed 99: identical bytes
    let ia = std::fs::read(a.path().join("images/p000_c00_i00.ppm")).unwrap();
    let ib = std::fs::read(b.path().join("images/p000_c00_i00.ppm")).unwrap();
    assert_eq!(ia, ib);
    let cfg = std::fs::read_to_string(a.path().join("resolved.cfg")).unwrap();
    assert!(cfg.contains("seed = 99"));
}
