use std::path::Path;
use std::process::Command;

fn interlight(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_interlight")).args(args).env("RUST_LOG", "warn").output().expect("binary runs");
    assert!(out.status.success(), "interlight {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn end_to_end_on_toy_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy");
    let run = dir.path().join("run");
    interlight(&["toydata", "--out", s(&data), "--n", "4", "--seed", "3"]);
    assert_eq!(std::fs::read_dir(data.join("low")).unwrap().count(), 4);

    let cfg_text = String::from_utf8(interlight(&["config"]).stdout).unwrap();
    assert!(cfg_text.contains("lr = 0.0002"));
    let cfg = dir.path().join("cfg.toml");
    let cfg_text = cfg_text.replace("epochs = 50", "epochs = 1").replace("batch = 2", "batch = 1");
    std::fs::write(&cfg, format!("max_steps = 2\n{cfg_text}")).unwrap();
    interlight(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    let ckpt = run.join("checkpoint.safetensors");
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let enhanced = dir.path().join("enhanced");
    interlight(&["enhance", "--ckpt", s(&ckpt), "--in", s(&data.join("low")), "--out", s(&enhanced)]);
    assert_eq!(std::fs::read_dir(&enhanced).unwrap().count(), 4);

    let report = dir.path().join("report.json");
    interlight(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--report", s(&report), "--metric-space", "y"]);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["aggregate"]["count"], 4);
    assert_eq!(r["metric_space"], "y");

    let inspect = interlight(&["inspect", "--ckpt", s(&ckpt), "--image", s(&data.join("low").join("0000.png"))]);
    let v: serde_json::Value = serde_json::from_slice(&inspect.stdout).unwrap();
    let sum: f64 = v["prompt"]["coefficients"].as_array().unwrap().iter().map(|c| c.as_f64().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-4);
}

#[test]
fn bad_input_fails_cleanly() {
    let out = Command::new(env!("CARGO_BIN_EXE_interlight")).args(["eval", "--ckpt", "/nonexistent", "--data", ".", "--report", "x"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent"));
}
