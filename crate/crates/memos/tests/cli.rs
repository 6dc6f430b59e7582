use std::path::Path;
use std::process::Command;

fn memos(config: &Path, out: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_memos"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn error_json(out: &std::process::Output) -> serde_json::Value {
    assert!(!out.status.success());
    serde_json::from_slice(&out.stderr).unwrap()
}

#[test]
fn missing_config_fails_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = memos(&dir.path().join("nope.toml"), dir.path(), &["gen-data"]);
    assert_eq!(error_json(&out)["error"]["kind"], "io");
}

#[test]
fn dependency_error_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.toml");
    std::fs::write(
        &config,
        "seeds = [0]\n[data]\nnum_classes = 4\nheight = 32\nwidth = 32\ntrain_images = 4\nval_images = 2\ntest_images = 2\n",
    )
    .unwrap();
    let run = dir.path().join("run");
    let out = memos(&config, &run, &["evaluate", "--method", "memos"]);
    let err = error_json(&out);
    assert_eq!(err["error"]["kind"], "dependency");
    assert_eq!(err["error"]["required_command"], "gen-data");

    let out = memos(&config, &run, &["gen-data"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let done: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(done["command"], "gen-data");
    assert!(run.join("data").join("manifest.json").is_file());

    let out = memos(&config, &run, &["train-metacog", "--seed", "0"]);
    assert_eq!(error_json(&out)["error"]["required_command"], "train-seg");
}
