use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
[synth]
n = 3000
fields = 4
vocab = 20
dim = 4
ctr = 0.2
cvr = 0.2
probe_n = 5000

[train]
hidden = 8,4
batch_size = 64
";

fn esmm(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_esmm"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn esmm")
}

fn small_config(dir: &Path) {
    std::fs::write(dir.join("small.cfg"), SMALL).unwrap();
}

#[test]
fn synth_is_deterministic_and_prints_rates() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "synth", "--n", "20000", "--fields", "5", "--vocab", "50", "--probe-n", "20000", "--seed", "7",
    ];
    let mut logs = Vec::new();
    for name in ["a.tsv", "b.tsv"] {
        let mut a = args.to_vec();
        a.extend(["--out", name]);
        let out = esmm(&a, dir.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).contains("ctr"));
        logs.push((
            std::fs::read(dir.path().join(name)).unwrap(),
            std::fs::read(dir.path().join(format!("{name}.truth"))).unwrap(),
        ));
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    for args in [
        vec!["synth", "--n", "0"],
        vec!["run", "--config", "small.cfg", "--methods", "BASE,XGBOOST"],
        vec!["gradcheck", "--trials", "0"],
        vec!["sweep", "--config", "small.cfg", "--fractions", ""],
        vec!["run", "--config", "missing.cfg"],
    ] {
        let out = esmm(&args, dir.path());
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let ok = esmm(&["gradcheck", "--trials", "5"], dir.path());
    assert!(ok.status.success());
    assert!(String::from_utf8_lossy(&ok.stdout).contains("PASS"));
    let bad = esmm(&["gradcheck", "--trials", "2", "--corrupt"], dir.path());
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn auc_selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = esmm(&["auc-selftest"], dir.path());
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("0.875"));
}

#[test]
fn single_seed_run_has_zero_std() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    let out = esmm(
        &["run", "--config", "small.cfg", "--methods", "BASE,ESMM", "--seeds", "3", "--out", "rep"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(dir.path().join("rep/report.tsv")).unwrap();
    let header = report.lines().find(|l| !l.starts_with('#')).unwrap();
    let std_col = header.split('\t').position(|c| c == "auc_std").unwrap();
    let rows: Vec<&str> = report.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 6);
    for r in rows {
        assert_eq!(r.split('\t').nth(std_col).unwrap().parse::<f64>().unwrap(), 0.0, "{r}");
    }
    assert!(dir.path().join("rep/per_seed.tsv").exists());
}

#[test]
fn run_on_a_written_log() {
    let dir = tempfile::tempdir().unwrap();
    let synth = esmm(
        &[
            "synth", "--n", "3000", "--fields", "4", "--vocab", "20", "--dim", "4", "--ctr", "0.2", "--cvr", "0.2",
            "--probe-n", "5000", "--out", "log.tsv",
        ],
        dir.path(),
    );
    assert!(synth.status.success(), "{}", String::from_utf8_lossy(&synth.stderr));
    std::fs::write(dir.path().join("t.cfg"), "[train]\nhidden = 8,4\nbatch_size = 64\n").unwrap();
    let out = esmm(
        &[
            "run", "--config", "t.cfg", "--data", "log.tsv", "--truth", "log.tsv.truth", "--methods", "DIVISION",
            "--seeds", "0,1", "--out", "rep",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(dir.path().join("rep/report.tsv")).unwrap();
    assert!(report.contains("DIVISION\tcvr-rank-all"));
}
