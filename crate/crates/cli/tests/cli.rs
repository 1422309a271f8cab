//! The `myopia` binary end to end on small synthetic cohorts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn myopia(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_myopia"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn myopia")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = myopia(dir, args);
    assert!(
        out.status.success(),
        "myopia {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn error_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {text}"))
}

const TINY: &str = "seed = 5\n[preprocess]\nside = 16\n[model]\nencoder = \"tiny\"\n";

/// synth → preprocess → split → train with the tiny model.
fn pipeline(dir: &Path) {
    std::fs::write(dir.join("run.toml"), TINY).unwrap();
    let c = ["--config", "run.toml"];
    ok(dir, &[&c[..], &["synth", "--subjects", "40", "--side", "32", "--out", "raw"]].concat());
    ok(dir, &[&c[..], &["preprocess", "--manifest", "raw/manifest.csv", "--out", "pre"]].concat());
    ok(dir, &[&c[..], &["split", "--manifest", "pre/manifest.csv", "--out", "pre"]].concat());
    ok(
        dir,
        &[
            &c[..],
            &["train", "--train", "pre/train.csv", "--val", "pre/val.csv", "--epochs", "1,1,1", "--out", "model"],
        ]
        .concat(),
    );
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn synth_is_byte_stable() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for d in [&a, &b] {
        ok(d.path(), &["synth", "--subjects", "12", "--seed", "7", "--side", "32", "--out", "raw"]);
    }
    assert_eq!(read(a.path().join("raw/manifest.csv")), read(b.path().join("raw/manifest.csv")));
    let imgs = |d: &TempDir| -> Vec<PathBuf> {
        let mut v: Vec<PathBuf> = std::fs::read_dir(d.path().join("raw/images"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        v.sort();
        v
    };
    let (ia, ib) = (imgs(&a), imgs(&b));
    assert_eq!(ia.len(), 12 * 6);
    for (x, y) in ia.iter().zip(&ib) {
        assert_eq!(read(x), read(y));
    }
    let toml = String::from_utf8(read(a.path().join("raw/resolved_config.toml"))).unwrap();
    assert!(toml.contains("tool_version = \"0.1.0\""));
    assert!(toml.contains("subjects = 12"));
}

#[test]
fn pipeline_outputs_and_reports() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    pipeline(d);
    for sub in ["raw", "pre", "model"] {
        assert!(d.join(sub).join("resolved_config.toml").is_file(), "{sub}");
    }
    let c = ["--config", "run.toml"];
    ok(
        d,
        &[
            &c[..],
            &[
                "eval", "--manifest", "pre/val.csv", "--checkpoint", "model/model.ckpt",
                "--baseline-train", "pre/train.csv", "--out", "eval",
            ],
        ]
        .concat(),
    );
    let metrics = String::from_utf8(read(d.join("eval/metrics.csv"))).unwrap();
    let header = metrics.lines().next().unwrap();
    assert!(header.starts_with("Model,N,MAE /D,R2,Myopia Trained Accuracy"));
    assert!(header.contains("High Myopia Trained AUC"));
    assert!(metrics.lines().nth(1).unwrap().starts_with("1p1,"));
    assert!(metrics.lines().nth(2).unwrap().starts_with("Baseline 1p1,"));

    ok(d, &["sweep", "--predictions", "eval/predictions_1p1.csv", "--grid", "-8:1:0.1", "--out", "sweep"]);
    let sweep = String::from_utf8(read(d.join("sweep/sweep.csv"))).unwrap();
    assert_eq!(sweep.lines().count(), 92);
    assert!(sweep.lines().any(|l| l.starts_with("-6.0,")));
    assert!(sweep.lines().any(|l| l.starts_with("-0.5,")));

    ok(d, &[&c[..], &["stats", "--train", "pre/train.csv", "--val", "pre/val.csv", "--out", "stats"]].concat());
    let stats = String::from_utf8(read(d.join("stats/stats.csv"))).unwrap();
    assert_eq!(stats.lines().count(), 1 + 2 * 15);

    ok(
        d,
        &[&c[..], &["explain", "--manifest", "pre/val.csv", "--checkpoint", "model/model.ckpt", "--limit", "1", "--out", "explain"]]
            .concat(),
    );
    let maps = String::from_utf8(read(d.join("explain/heatmaps.csv"))).unwrap();
    assert_eq!(maps.lines().count(), 3);
    assert!(maps.contains("gradcam") && maps.contains("guided"));
}

#[test]
fn parallel_inference_matches_serial() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    pipeline(d);
    let c = ["--config", "run.toml"];
    for (jobs, out) in [("1", "p1"), ("3", "p3")] {
        ok(
            d,
            &[&c[..], &["predict", "--manifest", "pre/manifest.csv", "--checkpoint", "model/model.ckpt", "--jobs", jobs, "--out", out]]
                .concat(),
        );
    }
    assert_eq!(read(d.join("p1/predictions.csv")), read(d.join("p3/predictions.csv")));
    ok(d, &[&c[..], &["preprocess", "--manifest", "raw/manifest.csv", "--jobs", "3", "--out", "pre3"]].concat());
    assert_eq!(read(d.join("pre/manifest.csv")), read(d.join("pre3/manifest.csv")));
    assert_eq!(read(d.join("pre/quality.csv")), read(d.join("pre3/quality.csv")));
    assert_eq!(read(d.join("pre/images/S0007_y3.png")), read(d.join("pre3/images/S0007_y3.png")));
}

#[test]
fn every_manifest_reader_reports_the_bad_row() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    pipeline(d);
    let good = String::from_utf8(read(d.join("pre/val.csv"))).unwrap();
    let mut lines: Vec<&str> = good.lines().collect();
    let broken = lines[3].replacen(",M,", ",Q,", 1).replacen(",F,", ",Q,", 1);
    lines[3] = &broken;
    std::fs::write(d.join("pre/bad.csv"), lines.join("\n") + "\n").unwrap();
    let cases: [&[&str]; 7] = [
        &["preprocess", "--manifest", "pre/bad.csv", "--images", "raw"],
        &["split", "--manifest", "pre/bad.csv"],
        &["stats", "--manifest", "pre/bad.csv"],
        &["train", "--train", "pre/bad.csv", "--epochs", "1,1,1"],
        &["eval", "--manifest", "pre/bad.csv", "--checkpoint", "model/model.ckpt"],
        &["predict", "--manifest", "pre/bad.csv", "--checkpoint", "model/model.ckpt"],
        &["explain", "--manifest", "pre/bad.csv", "--checkpoint", "model/model.ckpt"],
    ];
    for args in cases {
        let out = myopia(d, &[&["--config", "run.toml", "--out", "x"][..], args].concat());
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        let e = error_json(&out);
        assert_eq!(e["error"], "data", "{args:?}");
        assert_eq!(e["row"], 4, "{args:?}");
    }
}

#[test]
fn exit_codes_and_error_json() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let out = myopia(d, &["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "usage");

    let out = myopia(d, &["split", "--manifest", "missing.csv", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));

    let out = myopia(d, &["split", "--n", "4", "--m", "4", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));

    // A learning rate of 1e300 overflows on the first step.
    std::fs::write(
        d.join("run.toml"),
        format!(
            "{TINY}[schedule]\nbatch_train = 1\n[[schedule.phases]]\nlr = 1e300\nepochs = 1\nweight_decay = 0.0\n"
        ),
    )
    .unwrap();
    ok(d, &["--config", "run.toml", "synth", "--subjects", "12", "--side", "32", "--out", "raw"]);
    ok(d, &["--config", "run.toml", "preprocess", "--manifest", "raw/manifest.csv", "--out", "pre"]);
    let out = myopia(d, &["--config", "run.toml", "train", "--train", "pre/manifest.csv", "--out", "m"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let e = error_json(&out);
    assert_eq!(e["error"], "numerical");
    assert_eq!(e["epoch"], 1);
    assert!(!d.join("m/model.ckpt").exists());
}
