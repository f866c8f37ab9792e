use std::path::Path;

use scafusion_cli::run_command;
use serde_json::Value;

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["scafusion"];
    argv.extend_from_slice(args);
    run_command(&argv)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["train", "--bogus"]), 2);
    assert_eq!(run(&["frobnicate"]), 2);
    assert_eq!(run(&["train", "--seed", "x"]), 2);
    assert_eq!(run(&[]), 2);
}

#[test]
fn bad_configs_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["gen", "--config", "/nonexistent/cfg.json"]), 1);
    let cfg = config(tmp.path(), r#"{ "train": { "stepz": 3 } }"#);
    assert_eq!(run(&["train", "--config", &cfg]), 1);
    let cfg = config(tmp.path(), r#"{ "model": { "sca": { "rho": 0 } } }"#);
    let out = tmp.path().join("o").to_string_lossy().into_owned();
    assert_eq!(run(&["train", "--config", &cfg, "--out", &out]), 1);
    let missing = tmp.path().join("nothing").to_string_lossy().into_owned();
    assert_eq!(run(&["eval", "--out", &missing]), 1);
}

#[test]
fn lidar_only_pipeline_writes_its_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(
        tmp.path(),
        r#"{
            "dataset": "data",
            "gen": { "num_scenes": 3 },
            "model": { "camera_branch": false },
            "train": { "steps": 6, "batch_size": 2, "log_every": 0 }
        }"#,
    );
    let out = tmp.path().join("run");
    let out_s = out.to_string_lossy().into_owned();
    assert_eq!(run(&["gen", "--config", &cfg, "--seed", "4"]), 0);
    assert!(tmp.path().join("data/meta.json").is_file());
    assert_eq!(run(&["train", "--config", &cfg, "--seed", "4", "--out", &out_s]), 0);
    for f in [
        "history.csv",
        "checkpoint/manifest.json",
        "checkpoint/params.bin",
        "report.json",
        "summary.json",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 7);
    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["steps"], 6);

    let eval_out = tmp.path().join("eval");
    let ckpt = out.join("checkpoint").to_string_lossy().into_owned();
    let eval_s = eval_out.to_string_lossy().into_owned();
    assert_eq!(run(&["eval", "--checkpoint", &ckpt, "--out", &eval_s]), 0);
    let (a, b) = (json(&out.join("report.json")), json(&eval_out.join("report.json")));
    assert_eq!(a["map"], b["map"]);

    assert_eq!(run(&["infer", "--out", &out_s, "--sample", "1"]), 0);
    let boxes = json(&out.join("boxes.json"));
    assert!(boxes.is_object() || boxes.is_array());
    let ppm = std::fs::read(out.join("bev.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6"));
    assert_eq!(run(&["infer", "--out", &out_s, "--sample", "99"]), 1);
}

#[test]
fn gradcheck_passes_on_a_fresh_build() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_string_lossy().into_owned();
    assert_eq!(run(&["gradcheck", "--out", &out]), 0);
    let text = std::fs::read_to_string(tmp.path().join("gradcheck.txt")).unwrap();
    assert!(text.lines().filter(|l| l.contains(" PASS ")).count() >= 30, "{text}");
    assert!(!text.contains(" FAIL "));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        scafusion::train::RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 3);
}
