use std::path::Path;
use std::process::Command;

fn lesionforge(out: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_lesionforge"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("LESIONFORGE_LOG", "error")
        .output()
        .unwrap()
}

#[test]
fn metrics_without_synth_names_the_missing_input() {
    let dir = tempfile::tempdir().unwrap();
    assert!(lesionforge(dir.path(), &["generate", "--preset", "smoke"])
        .status
        .success());
    assert!(lesionforge(dir.path(), &["segment", "--preset", "smoke"])
        .status
        .success());
    let out = lesionforge(dir.path(), &["metrics", "--preset", "smoke"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.trim(), "error[missing-input]: missing inputs: synth/");
    assert!(dir.path().join("config.resolved.json").is_file());
}

#[test]
fn unknown_config_key_fails_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"seed": 3, "phantom": {"n_lesions": 4}}"#).unwrap();
    let out = lesionforge(
        &dir.path().join("out"),
        &["generate", "--config", cfg.to_str().unwrap()],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error[config]"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn generate_is_repeatable_and_echoes_config() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        assert!(lesionforge(d.path(), &["generate", "--preset", "smoke", "--seed", "5"])
            .status
            .success());
    }
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f)).unwrap();
    assert_eq!(read(&a, "dataset/meta.json"), read(&b, "dataset/meta.json"));
    let echo: serde_json::Value = serde_json::from_slice(&read(&a, "config.resolved.json")).unwrap();
    assert_eq!(echo["seed"], 5);
    assert_eq!(echo["preset"], "smoke");
}

#[test]
fn synth_stage_rebuilds_identically() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["generate", "segment", "train-diffusion", "synth"] {
        let cfg = r#"{"diffusion": {"train": {"steps": 5}}, "synth": {"params": {"inference_steps": 4}}}"#;
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, cfg).unwrap();
        let out = lesionforge(
            dir.path(),
            &[stage, "--preset", "smoke", "--config", path.to_str().unwrap()],
        );
        assert!(
            out.status.success(),
            "{stage}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let manifest = dir.path().join("synth/manifest.json");
    let first = std::fs::read(&manifest).unwrap();
    let sample = std::fs::read(dir.path().join("synth/s0010_v0.png")).unwrap();
    std::fs::remove_dir_all(dir.path().join("synth")).unwrap();
    let path = dir.path().join("cfg.json");
    let out = lesionforge(
        dir.path(),
        &["synth", "--preset", "smoke", "--config", path.to_str().unwrap()],
    );
    assert!(out.status.success());
    assert_eq!(std::fs::read(&manifest).unwrap(), first);
    assert_eq!(std::fs::read(dir.path().join("synth/s0010_v0.png")).unwrap(), sample);
}
