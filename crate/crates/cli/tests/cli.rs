use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use expdate_core::pipeline::PipelineReport;
use expdate_core::synth::Bitmap;
use expdate_core::train::MetricsLog;

fn expdate(args: &[&str]) -> Output {
    expdate_in(Path::new("."), args)
}

fn expdate_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_expdate"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn expdate")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn gen(dir: &Path, kind: &str, count: usize, seed: u64, extra: &[&str]) {
    let (c, s) = (count.to_string(), seed.to_string());
    let mut args = vec!["gen-data", "--kind", kind, "--count", &c, "--seed", &s];
    let d = dir.to_str().unwrap();
    args.extend(["--out", d, "--height", "32", "--width", "128"]);
    args.extend(extra);
    ok(&expdate(&args));
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "input", "target"] {
        let mut names: Vec<_> = fs::read_dir(dir.join(sub))
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        for p in names {
            out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn gen_data_prints_manifest_and_count() {
    let tmp = tempfile::tempdir().unwrap();
    let out = expdate(&[
        "gen-data", "--kind", "realistic", "--count", "5", "--seed", "3", "--out",
        tmp.path().to_str().unwrap(), "--height", "32", "--width", "128",
    ]);
    let stdout = ok(&out);
    assert!(stdout.contains("5 realistic"), "{stdout}");
    assert!(stdout.contains("manifest.jsonl"), "{stdout}");
    let manifest = fs::read_to_string(tmp.path().join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 5);
    for line in manifest.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["input", "target", "label", "kind", "offset"] {
            assert!(v.get(key).is_some(), "{key} missing in {line}");
        }
        assert!(tmp.path().join(v["input"].as_str().unwrap()).is_file());
    }
}

#[test]
fn gen_data_rejects_zero_count() {
    let tmp = tempfile::tempdir().unwrap();
    let out = expdate(&["gen-data", "--kind", "realistic", "--count", "0", "--seed", "1", "--out", tmp.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(!tmp.path().join("manifest.jsonl").exists());
}

#[test]
fn gen_data_ignores_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a, "unrealistic", 12, 9, &["--threads", "1"]);
    gen(&b, "unrealistic", 12, 9, &["--threads", "3"]);
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn unknown_kind_and_missing_flags_are_usage_errors() {
    let out = expdate(&["gen-data", "--kind", "blurry", "--count", "1", "--seed", "1", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let out = expdate(&["train", "vae", "--scale", "toy", "--out", "x.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--data"));
    let out = expdate(&["train", "vae", "--scale", "toy", "--data", "d"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn dry_run_prints_tables_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(&expdate_in(tmp.path(), &["train", "vae", "--scale", "paper", "--dry-run"]));
    for needle in ["encoder", "decoder", "70,371,584", "68,765,121", "139,136,705", "(None, 32, 128, 64)"] {
        assert!(stdout.contains(needle), "{needle} missing:\n{stdout}");
    }
    let stdout = ok(&expdate_in(tmp.path(), &["train", "crnn", "--scale", "paper", "--dry-run"]));
    assert!(stdout.contains("24,920") && stdout.contains("(None, 64, 12)"), "{stdout}");
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn toy_vae_smoke_run_has_decreasing_losses() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("train");
    gen(&data, "unrealistic", 64, 1, &[]);
    let ckpt = tmp.path().join("vae.ckpt");
    ok(&expdate(&[
        "train", "vae", "--data", data.to_str().unwrap(), "--scale", "toy", "--epochs", "5", "--seed", "1",
        "--out", ckpt.to_str().unwrap(),
    ]));
    let log = MetricsLog::read(&tmp.path().join("vae.metrics.csv")).unwrap();
    let totals = log.totals();
    assert_eq!(totals.len(), 5);
    assert!(totals.windows(2).all(|p| p[1] < p[0]), "{totals:?}");
}

#[test]
fn train_eval_and_infer_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |name: &str| tmp.path().join(name).to_str().unwrap().to_string();
    gen(&tmp.path().join("train"), "unrealistic", 16, 1, &[]);
    gen(&tmp.path().join("test"), "realistic", 10, 2, &[]);
    for model in ["vae", "crnn"] {
        let stdout = ok(&expdate(&[
            "train", model, "--data", &p("train"), "--scale", "toy", "--epochs", "1", "--batch", "8",
            "--optimizer", "sgd-momentum", "--lr", "0.01", "--out", &p(&format!("{model}.ckpt")),
        ]));
        assert!(stdout.contains("epoch   1"), "{stdout}");
        assert!(tmp.path().join(format!("{model}.metrics.csv")).is_file());
    }

    let stdout = ok(&expdate(&[
        "eval", "--vae", &p("vae.ckpt"), "--crnn", &p("crnn.ckpt"), "--data", &p("test"), "--report",
        &p("out/report.json"), "--grid", &p("grid.png"), "--grid-rows", "3", "--ascii-digits",
    ]));
    assert!(stdout.contains("accuracy"), "{stdout}");
    let report = PipelineReport::from_json(&fs::read_to_string(p("out/report.json")).unwrap()).unwrap();
    assert_eq!(report.total, 10);
    assert!((0.0..=1.0).contains(&report.accuracy));
    assert_eq!(report.vae_checkpoint.path, p("vae.ckpt"));
    let grid = Bitmap::load_png(Path::new(&p("grid.png"))).unwrap();
    assert_eq!((grid.width, grid.height), (3 * 128 + 8, 3 * 32 + 4 * 2));

    let image = tmp.path().join("test/input/000000.png");
    let stdout = ok(&expdate(&[
        "infer", "--vae", &p("vae.ckpt"), "--crnn", &p("crnn.ckpt"), "--image", image.to_str().unwrap(),
        "--dump-reconstruction", &p("recon.png"), "--ascii-digits",
    ]));
    let line = stdout.trim_end_matches('\n');
    assert!(!line.contains('\n') && line.is_ascii(), "{stdout:?}");
    let recon = Bitmap::load_png(Path::new(&p("recon.png"))).unwrap();
    assert_eq!((recon.height, recon.width), (32, 128));

    // Swapped checkpoints and wrong-size images are rejected.
    let out = expdate(&["infer", "--vae", &p("crnn.ckpt"), "--crnn", &p("vae.ckpt"), "--image", image.to_str().unwrap()]);
    assert!(!out.status.success());
    let big = tmp.path().join("big.png");
    Bitmap::blank(64, 256).save_png(&big).unwrap();
    let out = expdate(&["infer", "--vae", &p("vae.ckpt"), "--crnn", &p("crnn.ckpt"), "--image", big.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("64x256") && err.contains("32x128"), "{err}");
}
