use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pcqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcqa"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = pcqa(args);
    assert!(
        out.status.success(),
        "pcqa {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TOY: &str = r#"
[backbone.encoder]
depth = 1
width = 16
heads = 2
mlp_ratio = 2

[backbone.decoder]
depth = 1
width = 16
heads = 2
mlp_ratio = 2

[view]
resolution = 32
crop = 32
splat_radius = 1

[pretrain]
views = 4
batch_size = 8

[finetune]
heads = 2
fused_width = 16
hidden = 8
batch_size = 8

[split]
folds = 1
ratio = [3, 1]
"#;

#[test]
fn evaluate_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("pred.csv");
    let mut text = String::from("sample_id,predicted_score,mos\n");
    for (i, m) in [0.2, 0.9, 0.4, 0.65, 0.1, 0.8, 0.33].iter().enumerate() {
        text.push_str(&format!("s{i},{m},{m}\n"));
    }
    fs::write(&csv, text).unwrap();
    let report = dir.path().join("out/report.json");
    let stdout = ok(&["evaluate", "--predictions", s(&csv), "--out", s(&report)]);
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert!((v["srocc"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!((v["plcc"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    assert!(v["rmse"].as_f64().unwrap() < 1e-3);
    let written: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(written, v);
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    let out = pcqa(&["evaluate", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[pretrain]\nalpha = 1.5\n").unwrap();
    let m = dir.path().join("manifest.jsonl");
    fs::write(&m, "").unwrap();
    let out = pcqa(&["pretrain", "--config", s(&cfg), "--manifest", s(&m), "--out", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pretrain.alpha"));

    fs::write(&cfg, "[pretrain]\nalhpa = 0.5\n").unwrap();
    let out = pcqa(&["pretrain", "--config", s(&cfg), "--manifest", s(&m), "--out", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = pcqa(&["evaluate", "--predictions", s(&dir.path().join("absent.csv"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn toy_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("toy.toml");
    fs::write(&cfg, TOY).unwrap();
    ok(&[
        "makedata", "--out", s(&root.join("data")), "--kinds", "sphere,cube", "--points", "800",
        "--levels", "2,6", "--seed", "1",
    ]);
    let manifest = root.join("data/manifest.jsonl");
    assert!(manifest.exists());

    let views = root.join("views");
    ok(&["render", "--config", s(&cfg), "--input", s(&root.join("data/clouds/sphere-00.ply")), "--out", s(&views)]);
    let pngs = fs::read_dir(&views)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 6);
    assert!(views.join("views.json").exists());

    let pre = root.join("pre");
    ok(&[
        "pretrain", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&pre), "--max-steps", "5",
    ]);
    for f in ["config.echo", "run.json", "metrics.json", "loss_log.csv", "checkpoints/pretrain_last.ckpt"] {
        assert!(pre.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(pre.join("loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 6);

    let ft = root.join("ft");
    ok(&[
        "finetune", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&ft),
        "--init", s(&pre.join("checkpoints/pretrain_last.ckpt")), "--max-steps", "6",
    ]);
    let preds = fs::read_to_string(ft.join("predictions.csv")).unwrap();
    assert!(preds.starts_with("fold,sample_id,predicted_score,mos"));
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(ft.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["selection"], "min-train-loss-epoch");

    let stdout = ok(&["evaluate", "--predictions", s(&ft.join("predictions.csv"))]);
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert!(v["srocc"].as_f64().unwrap().abs() <= 1.0);

    let score = ok(&["predict", "--checkpoint", s(&ft.join("checkpoints/fold0.ckpt")), "--input", s(&root.join("data/clouds/cube-00.ply"))]);
    assert!(score.trim().parse::<f64>().unwrap().is_finite());
}
