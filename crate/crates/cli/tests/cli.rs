use std::path::Path;
use std::process::{Command, Output};

fn oar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oar"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn line<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find(|l| l.starts_with(key))
        .unwrap_or_else(|| panic!("no '{key}' in {text}"))
}

const SMALL: &str = r#"
[run]
seeds = 2
[data]
n_train = 60
n_test = 50
[stage1]
epochs = 5
[stage2]
epochs = 5

[[cell]]
name = "cr"
mode = "CR"
base = 0.5
gamma = 0.0

[[cell]]
name = "oar"
mode = "OAR"
base = 0.5
gamma = 0.0

[[cell]]
name = "doar"
mode = "dOAR"
base = 0.5
"#;

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.toml");
    std::fs::write(&p, SMALL).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn help_lists_every_flag() {
    let o = oar(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for flag in ["--config", "--set", "--out", "--seed", "--jobs"] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
    for sub in ["generate", "fit", "experiment", "check", "summarize"] {
        assert!(text.contains(sub));
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(oar(&["--bogus"]).status.code(), Some(1));
    assert_eq!(oar(&["frobnicate"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(
        oar(&["fit", "--out", out, "--set", "stage2.nope=1"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn generate_writes_csv_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = oar(&[
        "generate", "--n", "250", "--b", "2", "--seed", "7", "--out", out,
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let csv = std::fs::read_to_string(dir.path().join("data.csv")).unwrap();
    assert_eq!(csv.lines().count(), 251);
    let side = std::fs::read_to_string(dir.path().join("data.json")).unwrap();
    assert!(side.contains("\"seed\": 7") || side.contains("\"seed\":7"));
}

#[test]
fn gamma_zero_fit_matches_constant_regularization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();
    let cr = oar(&[
        "fit", "--config", &cfg, "--cell", "cr", "--out", out, "--seed", "3",
    ]);
    let oa = oar(&[
        "fit", "--config", &cfg, "--cell", "oar", "--out", out, "--seed", "3",
    ]);
    assert_eq!(
        cr.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&cr.stderr)
    );
    let (a, b) = (stdout(&cr), stdout(&oa));
    assert_eq!(line(&a, "rpehe_out"), line(&b, "rpehe_out"));
    assert_eq!(line(&a, "rpehe_in"), line(&b, "rpehe_in"));
}

#[test]
fn snapshot_reproduces_fit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let first = dir.path().join("first");
    let o1 = oar(&[
        "fit",
        "--config",
        &cfg,
        "--cell",
        "doar",
        "--out",
        first.to_str().unwrap(),
        "--set",
        "data.b=1.5",
    ]);
    assert_eq!(o1.status.code(), Some(0));
    let snap = first.join("resolved.toml");
    let second = dir.path().join("second");
    let o2 = oar(&[
        "fit",
        "--config",
        snap.to_str().unwrap(),
        "--cell",
        "doar",
        "--out",
        second.to_str().unwrap(),
    ]);
    assert_eq!(stdout(&o1), stdout(&o2));
    assert!(first.join("trace.csv").exists());
}

#[test]
fn experiment_resumes_and_summarizes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("exp");
    let out_s = out.to_str().unwrap();
    let o = oar(&[
        "experiment",
        "--config",
        &cfg,
        "--out",
        out_s,
        "--jobs",
        "2",
        "--set",
        "run.baseline=\"cr\"",
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let results = std::fs::read_to_string(out.join("results.jsonl")).unwrap();
    assert_eq!(results.lines().count(), 6);
    // rerun resumes: nothing new is appended
    let o = oar(&[
        "experiment",
        "--config",
        &cfg,
        "--out",
        out_s,
        "--set",
        "run.baseline=\"cr\"",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        std::fs::read_to_string(out.join("results.jsonl")).unwrap(),
        results
    );
    assert!(out.join("summary.csv").exists());

    let s = oar(&["summarize", "--out", out_s, "--baseline", "oar"]);
    assert_eq!(s.status.code(), Some(0));
    assert!(stdout(&s).contains("baseline: oar"));
    assert_eq!(
        oar(&["summarize", "--out", out_s, "--baseline", "zzz"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn check_suites_pass() {
    let dir = tempfile::tempdir().unwrap();
    let o = oar(&["check", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert_eq!(stdout(&o).matches("[PASS]").count(), 6);
}
