use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_uglyduck");

fn run(dir: &Path, args: &[&str], ud_home: &Path) -> Output {
    Command::new(BIN).args(args).current_dir(dir).env("UD_HOME", ud_home).output().expect("binary runs")
}

fn manifest_hash(path: &Path) -> String {
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
    v["config_hash"].as_str().unwrap().to_string()
}

const FAST: &str = r#"{"segmenter": {"enabled": false}, "pipeline": {"mode": "scratch"}, "vae": {"scratch_epochs": 3}}"#;

#[test]
fn synth_analyze_eval_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("fast.json"), FAST).unwrap();
    let o = run(d, &["synth", "--patients", "2", "--n-common-min", "8", "--n-common-max", "12", "--out", "s"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("s/ground_truth.csv").exists() && d.join("s/manifest.json").exists());

    let o = run(d, &["analyze", "--config", "fast.json", "--image", "s", "--out", "r"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for pid in ["synth_000000", "synth_000001"] {
        for f in ["report.json", "annotated.png", "manifest.json"] {
            assert!(d.join("r").join(pid).join(f).exists(), "{pid}/{f}");
        }
    }

    let o = run(d, &["eval", "--reports", "r", "--match-boxes", "s", "--out", "e"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let result: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("e/eval.json")).unwrap()).unwrap();
    assert_eq!(result["counts"]["patients_total"], 2);
    assert!(result["map"].is_number());

    // the matched CSV is keyed by report ids and feeds --truth directly
    let o = run(d, &["eval", "--reports", "r", "--truth", "e/matched_truth.csv", "--out", "e2"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(d.join("e/eval.json")).unwrap(), std::fs::read(d.join("e2/eval.json")).unwrap());
}

#[test]
fn missing_base_checkpoint_fails_with_hint() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("ft.json"), r#"{"segmenter": {"enabled": false}}"#).unwrap();
    assert!(run(d, &["synth", "--patients", "1", "--n-common-min", "5", "--n-common-max", "6", "--out", "s"], d).status.success());
    let o = run(d, &["analyze", "--config", "ft.json", "--image", "s/synth_000000.png", "--out", "r"], &d.join("empty"));
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("vae-pretrain"), "{err}");
    assert!(!d.join("r/report.json").exists());
}

#[test]
fn usage_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(run(d.path(), &["analyze", "--bogus"], d.path()).status.code(), Some(2));
    assert_eq!(run(d.path(), &["frobnicate"], d.path()).status.code(), Some(2));
    assert_eq!(run(d.path(), &["synth", "--seed", "abc"], d.path()).status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_runtime_error() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("bad.json"), r#"{"tile_sise": 512}"#).unwrap();
    let o = run(d.path(), &["synth", "--config", "bad.json", "--patients", "1", "--out", "s"], d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tile_sise"));
}

#[test]
fn manifest_hash_changes_iff_config_changes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let synth = |cfg: &str, out: &str| {
        std::fs::write(d.join(format!("{out}.json")), cfg).unwrap();
        let cfg_arg = format!("{out}.json");
        let o = run(d, &["synth", "--config", &cfg_arg, "--patients", "1", "--n-common-min", "4", "--n-common-max", "5", "--out", out], d);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        manifest_hash(&d.join(out).join("manifest.json"))
    };
    let a = synth(r#"{"nms_iou": 0.45}"#, "a");
    // same content, different formatting
    let b = synth("{\n  \"nms_iou\" : 0.45\n}", "b");
    let c = synth(r#"{"nms_iou": 0.5}"#, "c");
    assert_eq!(a, b);
    assert_ne!(a, c);
    // --seed is part of the effective config
    let o = run(d, &["synth", "--config", "a.json", "--seed", "9", "--patients", "1", "--n-common-min", "4", "--n-common-max", "5", "--out", "s9"], d);
    assert!(o.status.success());
    assert_ne!(manifest_hash(&d.join("s9/manifest.json")), a);
}

#[test]
fn analyze_is_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("fast.json"), FAST).unwrap();
    assert!(run(d, &["synth", "--patients", "1", "--n-common-min", "8", "--n-common-max", "9", "--out", "s"], d).status.success());
    for out in ["r1", "r2"] {
        let o = run(d, &["analyze", "--config", "fast.json", "--image", "s/synth_000000.png", "--out", out], d);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(d.join("r1/report.json")).unwrap(), std::fs::read(d.join("r2/report.json")).unwrap());
    assert_eq!(std::fs::read(d.join("r1/annotated.png")).unwrap(), std::fs::read(d.join("r2/annotated.png")).unwrap());
}
