use std::process::{Command, Output};

fn voxtag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxtag")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn help_and_version_succeed() {
    for flag in ["--help", "--version"] {
        let o = voxtag(&[flag]);
        assert!(o.status.success(), "{flag}");
        assert!(!o.stdout.is_empty());
    }
    let o = voxtag(&["--help"]);
    for sub in ["synth-data", "perturb", "features", "train", "average-ckpt", "evaluate", "probe", "schedule", "class-weights"] {
        assert!(stdout(&o).contains(sub), "{sub} missing from help");
    }
}

#[test]
fn class_weights_print_the_balanced_solution() {
    let o = voxtag(&["class-weights", "--f", "0.3", "--m", "0.7"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "w_f=1.6667 w_m=0.7143");
    assert_eq!(stdout(&voxtag(&["class-weights", "--f", "0.5", "--m", "0.5"])).trim(), "w_f=1.0000 w_m=1.0000");
}

#[test]
fn schedule_prints_lambda() {
    let o = voxtag(&["schedule", "--gamma", "10", "--total", "2000", "--at", "0"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "step=0 lambda=0.000000");
    let o = voxtag(&["schedule", "--gamma", "10", "--total", "2000"]);
    let lines: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(lines.len(), 11);
    assert_eq!(lines.last().unwrap(), "step=2000 lambda=0.999909");
    let o = voxtag(&["schedule", "--fixed-lambda", "0.5", "--total", "100", "--at", "40"]);
    assert_eq!(stdout(&o).trim(), "step=40 lambda=0.500000");
}

#[test]
fn validation_errors_exit_one() {
    for args in [
        vec!["no-such-command"],
        vec!["class-weights", "--f", "0", "--m", "1"],
        vec!["class-weights", "--f", "0.3", "--m", "0.3"],
        vec!["schedule", "--total", "10", "--at", "11"],
        vec!["synth-data"],
    ] {
        let o = voxtag(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.vxft");
    let o = voxtag(&["--out", out.to_str().unwrap(), "features", "--input", "/nonexistent/input.wav"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"train": {"no_such_field": 1}}"#).unwrap();
    let o = voxtag(&["--config", cfg.to_str().unwrap(), "schedule"]);
    assert_eq!(o.status.code(), Some(1));
}
