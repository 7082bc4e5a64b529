use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_iidlab");

fn iidlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = iidlab(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Asserts exit code and a single `error[CODE]: ...` line on stderr.
fn fails(dir: &Path, args: &[&str], exit: i32, code: &str) {
    let out = iidlab(dir, args);
    assert_eq!(out.status.code(), Some(exit), "{args:?}");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error[{code}]: ")), "{err}");
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().into(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

const SMALL: &[&str] = &["--set", "synth.size=32", "--set", "model.input_size=32", "--set", "model.base_width=4"];

fn with<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    SMALL.iter().copied().chain(extra.iter().copied()).collect()
}

#[test]
fn synth_writes_triplets_and_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let out = ok(t.path(), &["--set", "paths.data_dir=a", "synth", "--count", "10"]);
    assert_eq!(out.trim(), Path::new("a").join("manifest.json").display().to_string());
    ok(t.path(), &["--set", "paths.data_dir=b", "synth", "--count", "10"]);
    let a = files(&t.path().join("a"));
    // image, reflectance, shading, segment labels and their sidecar, plus the manifest
    assert_eq!(a.len(), 10 * 5 + 1);
    assert_eq!(a, files(&t.path().join("b")));

    ok(t.path(), &["--set", "paths.data_dir=z", "synth", "--count", "0"]);
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(t.path().join("z/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["samples"].as_array().unwrap().len(), 0);
}

#[test]
fn priors_are_complete_and_idempotent() {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &with(&["--set", "paths.data_dir=d", "synth", "--count", "3"]));
    ok(t.path(), &["--set", "paths.data_dir=d", "priors"]);
    let first = files(&t.path().join("d/priors"));
    ok(t.path(), &["--set", "paths.data_dir=d", "priors"]);
    assert_eq!(first, files(&t.path().join("d/priors")));
    for i in 0..3 {
        let stem = format!("scene_{i:05}.");
        let pfm = first.iter().filter(|(n, _)| {
            let n = n.to_str().unwrap();
            n.starts_with(&stem) && n.ends_with(".pfm")
        });
        assert_eq!(pfm.count(), 7);
    }
    assert_eq!(first.len(), 3 * 14);
    fails(t.path(), &["priors", "--manifest", "missing.json"], 2, "MANIFEST");
}

#[test]
fn train_flags_and_errors() {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &with(&["--set", "paths.data_dir=d", "synth", "--count", "5"]));
    let run = |out: &str, flags: &[&str]| {
        let mut a = with(&["--set", "paths.data_dir=d", "--set", "train.max_iters=2", "--set"]);
        let out_dir = format!("paths.out_dir={out}");
        a.push(&out_dir);
        a.push("train");
        a.extend_from_slice(flags);
        iidlab(t.path(), &a)
    };
    assert!(run("np", &["--no-priors"]).status.success());
    let arch: serde_json::Value =
        serde_json::from_slice(&std::fs::read(t.path().join("np/architecture.json")).unwrap()).unwrap();
    assert_eq!(arch["global_encoders"].as_array().unwrap().len(), 1);
    let ckpt = iidlab::autodiff::Checkpoint::load(t.path().join("np/checkpoint.bin")).unwrap();
    assert_eq!(ckpt.header.meta["ablation"]["no_priors"], true);
    assert_eq!(ckpt.header.step, 2);

    let conflict = run("x", &["--no-edge-module", "--image-edges"]);
    assert_eq!(conflict.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&conflict.stderr).starts_with("error[CONFIG]"));

    // resuming with different flags than the checkpoint holds
    let mismatch = run("np", &["--resume"]);
    assert_eq!(mismatch.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&mismatch.stderr).starts_with("error[CHECKPOINT]"));
    assert_eq!(run("fresh", &["--resume"]).status.code(), Some(2));

    fails(t.path(), &["--set", "paths.data_dir=nowhere", "train"], 2, "MANIFEST");
    // a 64 pixel model cannot train on 32 pixel scenes
    fails(
        t.path(),
        &["--set", "paths.data_dir=d", "--set", "paths.out_dir=big", "--set", "train.max_iters=1", "train"],
        2,
        "SIZE",
    );
}

#[test]
fn eval_modes() {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &with(&["--set", "paths.data_dir=d", "synth", "--count", "10"]));
    let report: serde_json::Value =
        serde_json::from_str(&ok(t.path(), &["--set", "paths.data_dir=d", "eval", "--gt-bypass"])).unwrap();
    for (_, v) in report["aggregate"].as_object().unwrap() {
        assert_eq!(v.as_f64().unwrap(), 0.0);
    }
    assert_eq!(report["images"].as_array().unwrap().len(), 1);

    ok(
        t.path(),
        &with(&["--set", "paths.data_dir=d", "--set", "train.max_iters=2", "--set", "paths.out_dir=r", "train"]),
    );
    let args = ["--set", "paths.data_dir=d", "eval", "--checkpoint", "r/checkpoint.bin", "--split", "val"];
    let a = ok(t.path(), &args);
    assert_eq!(a, ok(t.path(), &args));
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
    keys.sort();
    assert_eq!(keys, ["aggregate", "arch_hash", "images", "split"]);

    let judgments = serde_json::json!({ "judgments": [
        { "x1": 1, "y1": 1, "x2": 20, "y2": 20, "darker": "1", "weight": 1.0 },
        { "x1": 5, "y1": 9, "x2": 30, "y2": 2, "darker": "E", "weight": 0.5 },
    ]});
    std::fs::write(t.path().join("j.json"), judgments.to_string()).unwrap();
    let w: serde_json::Value = serde_json::from_str(&ok(
        t.path(),
        &["eval", "--judgments", "j.json", "--reflectance", "d/scene_00000.reflectance.pfm"],
    ))
    .unwrap();
    assert_eq!(w.as_object().unwrap().len(), 1);
    let value = w["whdr"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&value));
    let w2: serde_json::Value = serde_json::from_str(&ok(
        t.path(),
        &["eval", "--judgments", "j.json", "--image", "d/scene_00000.png", "--checkpoint", "r/checkpoint.bin"],
    ))
    .unwrap();
    assert!(w2["whdr"].is_number());

    fails(t.path(), &["--set", "paths.data_dir=d", "eval"], 2, "USAGE");
    fails(t.path(), &["--set", "paths.data_dir=d", "eval", "--gt-bypass", "--split", "dev"], 2, "USAGE");
    fails(t.path(), &["--set", "paths.data_dir=d", "eval", "--checkpoint", "nope.bin"], 2, "CHECKPOINT");
    fails(t.path(), &["--set", "paths.data_dir=d", "eval", "--checkpoint", "d/manifest.json"], 2, "CHECKPOINT");
    fails(t.path(), &["eval", "--judgments", "missing.json", "--reflectance", "d/scene_00000.png"], 2, "INPUT");
}

#[test]
fn infer_writes_decomposition() {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &with(&["--set", "paths.data_dir=d", "synth", "--count", "2"]));
    ok(
        t.path(),
        &with(&["--set", "paths.data_dir=d", "--set", "train.max_iters=1", "--set", "paths.out_dir=r", "train"]),
    );
    ok(t.path(), &["infer", "--checkpoint", "r/checkpoint.bin", "--image", "d/scene_00001.png", "--out", "o"]);
    ok(
        t.path(),
        &[
            "infer",
            "--checkpoint",
            "r/checkpoint.bin",
            "--image",
            "d/scene_00001.png",
            "--segments",
            "d/scene_00001.segments.png",
            "--out",
            "o2",
        ],
    );
    for d in ["o", "o2"] {
        let names: Vec<_> = files(&t.path().join(d)).into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            [
                "scene_00001.reflectance.pfm",
                "scene_00001.reflectance.png",
                "scene_00001.shading.pfm",
                "scene_00001.shading.png"
            ]
            .map(PathBuf::from)
        );
    }
    // 64x64 scenes against a 32 pixel model
    ok(t.path(), &["--set", "paths.data_dir=big", "synth", "--count", "1"]);
    fails(
        t.path(),
        &["infer", "--checkpoint", "r/checkpoint.bin", "--image", "big/scene_00000.png", "--out", "o"],
        2,
        "SIZE",
    );
}

#[test]
fn config_errors_exit_with_two() {
    let t = tempfile::tempdir().unwrap();
    fails(t.path(), &["--set", "train.momentum=0.9", "synth", "--count", "1"], 2, "CONFIG");
    fails(t.path(), &["--set", "train.lr", "synth", "--count", "1"], 2, "CONFIG");
    fails(t.path(), &["--set", "synth.size=48", "synth", "--count", "1"], 2, "CONFIG");
    fails(t.path(), &["--config", "absent.json", "synth", "--count", "1"], 2, "CONFIG");
    std::fs::write(t.path().join("c.json"), r#"{"train": {"epochs": 1, "extra": 1}}"#).unwrap();
    fails(t.path(), &["--config", "c.json", "synth", "--count", "1"], 2, "CONFIG");
    std::fs::write(t.path().join("c.json"), r#"{"paths": {"data_dir": "fromfile"}}"#).unwrap();
    ok(t.path(), &["--config", "c.json", "synth", "--count", "1"]);
    assert!(t.path().join("fromfile/manifest.json").is_file());
    fails(t.path(), &["synth"], 2, "USAGE");
    fails(t.path(), &["frobnicate"], 2, "USAGE");
    assert!(ok(t.path(), &["--help"]).contains("gradcheck"));
}

#[test]
fn gradcheck_passes() {
    let t = tempfile::tempdir().unwrap();
    let out = ok(t.path(), &["gradcheck"]);
    assert!(out.contains("conv2d") && out.contains("dssim_loss"));
    assert!(!out.contains("[FAIL]"));
    assert!(out.trim_end().ends_with(" s"));
}
