use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn omnifuse(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_omnifuse")).args(args).current_dir(dir).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const SMALL: [&str; 8] = ["--d", "16", "--blocks", "1", "--heads", "2", "--batch-tiles", "6"];

fn dataset(dir: &Path) {
    ok(&omnifuse(&["gen-data", "--out", "data", "--tiles", "30", "--seed", "4"], dir));
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&omnifuse(&["gen-data", "--out", "a", "--tiles", "20", "--seed", "9"], tmp.path()));
    ok(&omnifuse(&["gen-data", "--out", "b", "--tiles", "20", "--seed", "9"], tmp.path()));
    let (a, b) = (files(&tmp.path().join("a")), files(&tmp.path().join("b")));
    assert!(a.len() > 20);
    assert_eq!(a, b);
}

#[test]
fn unwritable_output_exits_with_io_code() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("plain"), "x").unwrap();
    let out = omnifuse(&["gen-data", "--out", "plain/data", "--tiles", "20"], tmp.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn pretrain_then_finetune_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    dataset(dir);
    let mut pre = vec!["pretrain", "--data", "data", "--out", "pre", "--epochs", "2"];
    pre.extend(SMALL);
    ok(&omnifuse(&pre, dir));
    ok(&omnifuse(
        &["finetune", "--data", "data", "--from", "pre/pretrain.omnf", "--out", "ft", "--epochs", "2"],
        dir,
    ));
    let pre_log = fs::read_to_string(dir.join("pre/metrics.jsonl")).unwrap();
    let ft_log = fs::read_to_string(dir.join("ft/metrics.jsonl")).unwrap();
    assert_eq!(pre_log.lines().count(), 2);
    assert_eq!(ft_log.lines().count(), 2);
    assert!(pre_log.contains("\"phase\":\"pretrain\""));
    assert!(ft_log.contains("\"phase\":\"finetune\""));
    assert!(dir.join("pre/config.toml").exists());

    let stdout = ok(&omnifuse(
        &["eval", "--data", "data", "--from", "ft/finetune.omnf", "--modalities", "vhr", "--out", "ev"],
        dir,
    ));
    assert!(stdout.contains("modalities vhr"), "{stdout}");
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("ev/eval.json")).unwrap()).unwrap();
    assert_eq!(eval["modalities"], serde_json::json!(["vhr"]));
    assert!(eval["loss"].as_f64().unwrap().is_finite());

    let out = omnifuse(&["report", "--runs", "pre", "ft", "absent", "--out", "rep"], dir);
    let table = ok(&out);
    assert!(table.contains("| pre | pretrain | 2 |"), "{table}");
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent"));
    assert!(dir.join("rep/report.md").exists() && dir.join("rep/loss.svg").exists());
}

#[test]
fn resumed_pretraining_appends_to_the_log() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    dataset(dir);
    let mut pre = vec!["pretrain", "--data", "data", "--out", "pre", "--epochs", "1"];
    pre.extend(SMALL);
    ok(&omnifuse(&pre, dir));
    ok(&omnifuse(&["pretrain", "--data", "data", "--out", "pre", "--resume", "pre/last.omnf", "--epochs", "2"], dir));
    let log = fs::read_to_string(dir.join("pre/metrics.jsonl")).unwrap();
    let epochs: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["epoch"].as_u64().unwrap())
        .collect();
    assert_eq!(epochs, [1, 2]);
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    dataset(dir);
    let out = omnifuse(&["pretrain", "--data", "data", "--out", "x", "--ablate", "no-such-thing"], dir);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no-such-thing"));
    let out = omnifuse(&["probe", "--data", "data", "--out", "x"], dir);
    assert_eq!(out.status.code(), Some(2));
    fs::write(dir.join("run.toml"), "[train]\nwidth = 4\n").unwrap();
    let out = omnifuse(&["pretrain", "--config", "run.toml", "--data", "data", "--out", "x"], dir);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_passes_and_reports_injected_faults() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(&omnifuse(&["verify", "--seeds", "3"], tmp.path()));
    assert!(stdout.contains("0 failed"), "{stdout}");
    let out = omnifuse(&["verify", "--seeds", "3", "--inject-fault", "grad"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL gradient/contrastive"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gradient/contrastive"));
}

#[test]
fn dumped_defaults_are_a_valid_run_file() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(&omnifuse(&["config", "--dump-defaults"], tmp.path()));
    fs::write(tmp.path().join("defaults.toml"), &text).unwrap();
    let out = omnifuse(&["gen-data", "--config", "defaults.toml", "--out", "d", "--tiles", "20"], tmp.path());
    ok(&out);
}
