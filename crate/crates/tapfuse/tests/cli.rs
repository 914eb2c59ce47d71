use std::path::Path;
use std::process::Command;

fn tapfuse(out: &Path, args: &[&str]) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_tapfuse")).args(args).arg("--out").arg(out).env_remove("TAPFUSE_OUT").output().unwrap();
    (o.status.code().unwrap_or(-1), String::from_utf8_lossy(&o.stderr).into_owned())
}

const TINY: [&str; 12] = [
    "--set", "data.train=6", "--set", "data.val=2", "--set", "data.test=2", "--set", "data.image_size=16", "--set", "backbone.pretrain_steps=3", "--set",
    "backbone.channels=[4,4,4,4]",
];

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(tapfuse(dir.path(), &["--help"]).0, 0);
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["gen-data", "--set", "data.nonsense=1"][..],
        &["gen-data", "--set", "novalue"],
        &["gen-data", "--set", "data.task=\"painting\""],
        &["train", "--set", "probe.strategy=\"median\""],
        &["gen-data", "--config", "/nonexistent/tapfuse.toml"],
        &["bogus-command"],
        &["gen-data", "--device", "tpu"],
    ] {
        let (code, err) = tapfuse(dir.path(), args);
        assert_eq!(code, 1, "{args:?}: {err}");
    }
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = tapfuse(dir.path(), &["pretrain"]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("manifest.json"), "{err}");
}

#[test]
fn pipeline_runs_and_env_sets_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let mut gen = vec!["gen-data"];
    gen.extend(TINY);
    assert_eq!(tapfuse(dir.path(), &gen).0, 0);
    let mut pre = vec!["pretrain", "--device", "gpu", "--seed", "3"];
    pre.extend(TINY);
    let (code, err) = tapfuse(dir.path(), &pre);
    assert_eq!(code, 0, "{err}");
    assert!(err.contains("warning"), "{err}");
    let run: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("pretrain/run.json")).unwrap()).unwrap();
    assert_eq!(run["seed"], 3);
    assert_eq!(run["command"], "pretrain");
    assert!(run["outputs"].as_object().unwrap().contains_key("backbone.safetensors"));

    let env_dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_tapfuse")).args(&gen).env("TAPFUSE_OUT", env_dir.path()).output().unwrap();
    assert!(o.status.success());
    assert!(env_dir.path().join("data/manifest.json").exists());
}

#[test]
fn config_file_and_overrides_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "seed = 5\n[data]\ntrain = 3\nval = 1\ntest = 1\nimage_size = 16\n").unwrap();
    let (code, err) = tapfuse(dir.path(), &["gen-data", "--config", cfg.to_str().unwrap(), "--set", "data.train=4"]);
    assert_eq!(code, 0, "{err}");
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["spec"]["train"], 4);
    assert_eq!(m["spec"]["seed"], 5);
}
