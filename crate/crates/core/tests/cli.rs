use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn iagan(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iagan")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn write_toy_scores(path: &Path) {
    let mut text = String::from("image_id,true_label,score,residual,discrimination,iterations,seed\n");
    for (i, (s, l)) in [(0.1, 0), (0.4, 0), (0.35, 1), (0.8, 1)].iter().enumerate() {
        text.push_str(&format!("img{i},{l},{s},{s},0,1,0\n"));
    }
    fs::write(path, text).unwrap();
}

#[test]
fn eval_toy_scores_gives_three_quarters() {
    let dir = tempfile::tempdir().unwrap();
    write_toy_scores(&dir.path().join("toy.csv"));
    let out = iagan(&["eval", "--scores", "toy.csv", "--out", "m"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(dir.path().join("m/metrics.csv")).unwrap();
    let row = metrics.lines().nth(1).unwrap();
    assert!(row.starts_with("toy,0.750000,"), "{row}");
    assert!(dir.path().join("m/run.cfg").is_file());
    assert!(!dir.path().join("m/INCOMPLETE").exists());
}

#[test]
fn empty_synth_warns_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = iagan(&["synth", "--out", "d", "--per-class", "0", "--seed", "3"], dir.path());
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    let split = fs::read_to_string(dir.path().join("d/split.csv")).unwrap();
    assert_eq!(split.lines().filter(|l| !l.starts_with('#')).count(), 1);
}

#[test]
fn synth_writes_split_and_frozen_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = iagan(
        &["synth", "--out", "d", "--per-class", "6", "--test-per-class", "2", "--size", "16", "--classes", "normal,covid_like"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let d = dir.path().join("d");
    assert_eq!(fs::read_dir(d.join("normal")).unwrap().count(), 6);
    let cfg = fs::read_to_string(d.join("run.cfg")).unwrap();
    assert!(cfg.contains("per_class = 6") && cfg.contains("size = 16"));
    let split = fs::read_to_string(d.join("split.csv")).unwrap();
    assert_eq!(split.lines().filter(|l| l.ends_with(",test")).count(), 4);
}

#[test]
fn config_file_and_overrides_apply_in_order() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), "per_class = 4\nsize = 16\ntest_per_class = 1\n").unwrap();
    let out = iagan(&["synth", "--out", "d", "--set", "per_class=3", "--classes", "normal"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_dir(dir.path().join("d/normal")).unwrap().count(), 3);
}

#[test]
fn bad_input_fails_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = iagan(&["synth", "--out", "d", "--bogus"], dir.path());
    assert!(!unknown.status.success());
    assert!(!unknown.stderr.is_empty());
    let missing = iagan(&["eval", "--scores", "absent.csv", "--out", "m"], dir.path());
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("absent.csv"));
    let bad_key = iagan(&["synth", "--out", "d", "--set", "nope=1"], dir.path());
    assert!(!bad_key.status.success());
}

#[test]
fn failed_run_is_marked_incomplete() {
    let dir = tempfile::tempdir().unwrap();
    let out = iagan(&["synth", "--out", "d", "--per-class", "2", "--test-per-class", "5", "--classes", "normal"], dir.path());
    assert!(!out.status.success());
    assert!(dir.path().join("d/INCOMPLETE").is_file());
}
