use std::path::Path;
use std::process::Command;

fn hoi(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_hoi"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

const SMALL: &str = r#"
threads = 1
[data]
train = "suite/train"
test = "suite/test"
[grouping]
k = 4
n_iter = 3
[flow]
depth = 2
width = 8
epochs = 2
[occlusion]
resolution = 32
[optimize]
m = 2
phase1_steps = 5
phase2_steps = 5
[eval]
samples = 300
"#;

#[test]
fn synth_then_run_then_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let out = hoi(dir.path(), &["--seed", "3", "--out-dir", "suite", "synth", "--families", "2", "--scenes", "3", "--views", "3", "--test-scenes", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("suite/train/records.ndjson").exists());

    std::fs::write(dir.path().join("run.toml"), SMALL).unwrap();
    let first = hoi(dir.path(), &["--config", "run.toml", "--seed", "1", "--out-dir", "run", "run"]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let text = String::from_utf8_lossy(&first.stdout);
    assert!(text.contains("refined"), "{text}");
    assert!(dir.path().join("run/eval/report.json").exists());

    let second = hoi(dir.path(), &["--config", "run.toml", "--seed", "1", "--out-dir", "run", "run"]);
    assert!(second.status.success());
    assert_eq!(String::from_utf8_lossy(&second.stdout).matches("Skipped").count(), 5);
}

#[test]
fn individual_stages_chain() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(hoi(p, &["--out-dir", "suite", "synth", "--families", "2", "--scenes", "3", "--views", "3", "--test-scenes", "2"]).status.success());
    std::fs::write(p.join("run.toml"), SMALL).unwrap();
    let cfg = ["--config", "run.toml", "--out-dir", "o"];
    let steps: [&[&str]; 5] = [
        &["group", "--dataset", "suite/train"],
        &["train-prior", "--dataset", "suite/train", "--epochs", "1", "--depth", "2", "--width", "8"],
        &["occlusion", "--dataset", "suite/train"],
        &["optimize", "--dataset", "suite/test", "--flow", "o/train-prior/flow.json", "--occlusion", "o/occlusion/mean_occlusion.json"],
        &["eval", "--dataset", "suite/test", "--mode", "behave"],
    ];
    for step in steps {
        let args: Vec<&str> = cfg.iter().chain(step.iter()).copied().collect();
        let out = hoi(p, &args);
        assert!(out.status.success(), "{step:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert!(p.join("o/optimize/traces.csv").exists());
}

#[test]
fn validation_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[optimize]\nm = 0\n").unwrap();
    let out = hoi(dir.path(), &["--config", "bad.toml", "run"]);
    assert_eq!(out.status.code(), Some(2));
    let out = hoi(dir.path(), &["group", "--dataset", "missing"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn annotate_solve_reports_too_few_clicks() {
    let dir = tempfile::tempdir().unwrap();
    let input = r#"{"intrinsics": {"focal": 1000.0, "width": 1000, "height": 1000},
                    "annotation": {"items": [{"position": [0.0, 0.0], "part": 0}]}}"#;
    std::fs::write(dir.path().join("clicks.json"), input).unwrap();
    let out = hoi(dir.path(), &["annotate-solve", "--input", "clicks.json"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
