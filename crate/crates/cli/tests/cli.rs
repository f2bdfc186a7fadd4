use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn partseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_partseg"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = partseg(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn last_json(stdout: &str) -> Value {
    serde_json::from_str(stdout.lines().last().unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_train_infer_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = (dir.path().join("train"), dir.path().join("test"));
    let (models, preds) = (dir.path().join("models"), dir.path().join("preds"));
    ok(&[
        "synth",
        "--out",
        p(&train),
        "--count",
        "4",
        "--confusion",
        "0.5",
        "--seed",
        "1",
    ]);
    ok(&[
        "synth",
        "--out",
        p(&test),
        "--count",
        "2",
        "--noise",
        "0",
        "--seed",
        "2",
    ]);
    let t = last_json(&ok(&[
        "train",
        "--scenes",
        p(&train),
        "--out",
        p(&models),
        "--refiner-epochs",
        "3",
        "--pairwise-epochs",
        "20",
    ]));
    assert_eq!(t["scenes"], 4);
    let (refiner, model) = (models.join("refiner.conv"), models.join("pairwise.pair"));
    assert!(refiner.exists() && model.exists());

    for name in ["scene_0000", "scene_0001"] {
        let report = last_json(&ok(&[
            "infer",
            "--scene",
            p(&test.join(name)),
            "--refiner",
            p(&refiner),
            "--model",
            p(&model),
            "--out",
            p(&preds.join(name)),
            "--oracle",
        ]));
        assert!(!report["groups"].as_array().unwrap().is_empty());
        assert!(preds.join(name).join("object.lbl").exists());
    }
    let agg = last_json(&ok(&["eval", "--scenes", p(&test), "--preds", p(&preds)]));
    assert_eq!(agg["images"], 2);
    assert_eq!(agg["object_miou"], 1.0);

    let check = last_json(&ok(&[
        "oracle-check",
        "--scenes",
        p(&test),
        "--refiner",
        p(&refiner),
        "--model",
        p(&model),
        "--out",
        p(&dir.path().join("oracle")),
    ]));
    assert!(check["groups_checked"].as_u64().unwrap() > 0);
    assert_eq!(check["same_labels"], check["groups_checked"]);
}

#[test]
fn synth_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&[
            "--grammar",
            "quadrupeds",
            "synth",
            "--out",
            p(d),
            "--count",
            "2",
            "--seed",
            "5",
        ]);
    }
    for f in ["obj.ptm", "scp.ptm", "part_gt.lbl"] {
        let (x, y) = (a.join("scene_0001").join(f), b.join("scene_0001").join(f));
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let out = partseg(&["train", "--scenes", p(&missing), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("partseg: "));

    let out = partseg(&[
        "infer",
        "--refiner",
        "r",
        "--model",
        "m",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--scene"));

    let out = partseg(&["--grammar", p(&missing), "synth", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}
