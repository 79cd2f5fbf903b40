use std::path::Path;
use std::process::{Command, Output};

use respsed::cli::evaluate_files;
use respsed::config::RunConfig;

fn respsed(args: &[&str], cwd: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_respsed"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "respsed {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const SMALL: &str = r#"
[features]
n_bands = 64

[detector.model]
bands = 64
conv_channels = [4, 4, 4]
n_basis = 2
d_node = 8

[train]
epochs = 2
batch_size = 2
"#;

#[test]
fn synth_prepare_train_predict_evaluate_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("small.toml"), SMALL).unwrap();
    respsed(&["synth", "--n", "3", "--out-dir", "data", "--seed", "1"], d);
    respsed(&["synth", "--n", "1", "--split", "val", "--out-dir", "data_val", "--seed", "2"], d);
    // merge the validation clip into the training manifest
    let mut manifest = std::fs::read_to_string(d.join("data/manifest.jsonl")).unwrap();
    let val = std::fs::read_to_string(d.join("data_val/manifest.jsonl")).unwrap();
    manifest.push_str(&val.replace("synth000", "valclip").replace("\"audio/", "\"../data_val/audio/"));
    std::fs::write(d.join("data/manifest.jsonl"), manifest).unwrap();
    std::fs::rename(d.join("data_val/audio/synth000.wav"), d.join("data_val/audio/valclip.wav")).unwrap();

    respsed(&["prepare", "--manifest", "data/manifest.jsonl", "--config", "small.toml", "--out-dir", "prep"], d);
    assert_eq!(std::fs::read_dir(d.join("data/cache")).unwrap().count(), 4);

    respsed(&["train", "--manifest", "data/manifest.jsonl", "--config", "small.toml", "--out-dir", "run"], d);
    let csv = std::fs::read_to_string(d.join("run/losses.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    assert!(d.join("run/eval/epoch_0001.json").exists());

    respsed(
        &["predict", "--checkpoint", "run/checkpoints/last", "--manifest", "data/manifest.jsonl", "--out-dir", "pred"],
        d,
    );
    let in_process: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("pred/eval.json")).unwrap()).unwrap();
    let cfg = RunConfig::default();
    let again = evaluate_files(
        &d.join("pred/reference.jsonl"),
        &d.join("pred/predictions.jsonl"),
        &cfg.detector.classes,
        &cfg,
    )
    .unwrap();
    // NaN error rates serialize as null, so compare through JSON
    assert_eq!(serde_json::to_value(&again).unwrap(), in_process);

    let out = respsed(&["evaluate", "--ref", "pred/reference.jsonl", "--sys", "pred/reference.jsonl"], d);
    assert!(String::from_utf8_lossy(&out.stdout).contains("overall F1 = 1"));

    respsed(&["inspect", "--manifest", "data/manifest.jsonl", "--run", "run", "--out-dir", "plots"], d);
    for class in ["wheeze", "rhonchi", "stridor", "crackle"] {
        assert!(d.join(format!("plots/durations_{class}.svg")).exists());
    }
    assert!(d.join("plots/losses.svg").exists());
}

#[test]
fn bad_input_exits_nonzero_with_message() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("empty")).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_respsed"))
        .args(["prepare", "--data-dir", "empty", "--out-dir", "o"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no clips found"));

    let out = Command::new(env!("CARGO_BIN_EXE_respsed"))
        .args(["train", "--manifest", "missing.jsonl", "--preset", "nope"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown preset"));
}
