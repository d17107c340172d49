//! End-to-end tests of the command-line interface.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_frdiff"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin()
        .args(args)
        .current_dir(dir)
        .env_remove("FRDIFF_OUT")
        .output()
        .expect("spawn frdiff")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn print_config_emits_valid_toml() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["--print-config"], dir.path());
    assert!(out.status.success());
    let parsed: toml::Value = toml::from_str(&stdout(&out)).unwrap();
    assert!(parsed.get("sampler").is_some());
    assert!(parsed.get("fr").is_some());
}

#[test]
fn profile_reports_expected_speedup() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["profile", "--n-steps", "50", "--skippable", "0.92", "--interval", "2", "--out", "p"], dir.path());
    assert!(out.status.success());
    assert!(stdout(&out).contains("1.852"), "stdout: {}", stdout(&out));
    assert!(dir.path().join("p/profile.csv").exists());
    let csv = std::fs::read_to_string(dir.path().join("p/profile.csv")).unwrap();
    assert!(csv.starts_with("interval,keyframes,speedup"));
}

#[test]
fn verify_equivalence_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &["verify-equivalence", "--n-steps", "10", "--stride", "2", "--width", "4", "--depth", "2", "--out", "v"],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("max deviation"));
}

#[test]
fn sample_output_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["sample", "--n-steps", "5", "--seed", "3", "--width", "4", "--depth", "2"];
    let out = run(&args.iter().chain(&["--out", "a"]).copied().collect::<Vec<_>>(), dir.path());
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let out = run(&args.iter().chain(&["--out", "b"]).copied().collect::<Vec<_>>(), dir.path());
    assert!(out.status.success());
    for name in ["sample0.bin", "sample0.pgm", "config.toml"] {
        let a = std::fs::read(dir.path().join("a").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "artifact {name} differs between identical runs");
    }
    // the ledger matches except for its wall-clock column
    let a = std::fs::read_to_string(dir.path().join("a/ledger0.csv")).unwrap();
    let b = std::fs::read_to_string(dir.path().join("b/ledger0.csv")).unwrap();
    let strip = |s: &str| -> Vec<String> {
        s.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
    };
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn reuse_ledger_shows_skipped_work() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &["sample", "--n-steps", "10", "--interval", "2", "--width", "4", "--depth", "2", "--out", "r"],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("r/ledger0.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "iteration,is_keyframe,lambda,network_evals,s_ops_executed,s_ops_skipped,wallclock_ms"
    );
    assert!(csv.lines().skip(1).any(|l| l.split(',').nth(5).unwrap() != "0"));
}

#[test]
fn unknown_config_key_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[sampler]\nnot_a_field = 3\n").unwrap();
    let out = run(&["--config", "bad.toml", "sample", "--out", "x"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_command_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn out_dir_environment_variable_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["profile", "--n-steps", "10"])
        .current_dir(dir.path())
        .env("FRDIFF_OUT", dir.path().join("env-out"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("env-out/profile/profile.csv").exists());
}

#[test]
fn train_then_sample_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &[
            "train", "--dataset", "mixture", "--steps", "30", "--batch", "4",
            "--width", "4", "--depth", "2", "--out", "t",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let ckpt = dir.path().join("t/checkpoint");
    assert!(ckpt.join("net.toml").exists());
    let loss = std::fs::read_to_string(dir.path().join("t/loss.csv")).unwrap();
    assert!(loss.starts_with("step,loss"));
    assert_eq!(loss.lines().count(), 31);

    let ckpt_str = ckpt.display().to_string();
    let out = run(
        &["sample", "--n-steps", "5", "--checkpoint", &ckpt_str, "--out", "s"],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("s/sample0.bin").exists());
}

#[test]
fn autofr_writes_schedule_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &[
            "autofr", "--n-steps", "4", "--iters", "3", "--width", "4", "--depth", "2",
            "--cost-balance", "0.001", "--out", "af",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).starts_with("keyframes"));
    let theta = std::fs::read_to_string(dir.path().join("af/theta.csv")).unwrap();
    assert!(theta.starts_with("iteration,logit,keyframe"));
    assert_eq!(theta.lines().count(), 5);
    assert!(dir.path().join("af/search.csv").exists());
    assert!(dir.path().join("af/target0.bin").exists());
}
