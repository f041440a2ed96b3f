use std::path::Path;
use std::process::{Command, Output};

fn subtune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_subtune")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = r#"
methods = ["lora", "ssb"]
ranks = [2]
seeds = [0, 1]
steps = 20
[task]
kind = "recovery"
n = 8
m = 6
planted_rank = 2
"#;

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn params_table() {
    let o = subtune(&["params", "768x768", "--rank", "8"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let lora = text.lines().find(|l| l.starts_with("lora ")).unwrap();
    assert!(lora.contains("12288"), "{lora}");
}

#[test]
fn params_rejects_bad_shape() {
    assert_eq!(subtune(&["params", "768by768"]).status.code(), Some(2));
}

#[test]
fn run_writes_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let out = dir.path().join("out");
    let o = subtune(&["run", &cfg, "--threads", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("small.csv")).unwrap();
    assert!(csv.starts_with("method,rank,seed,params,permille,final_metric,wallclock_ms\n"));
    assert_eq!(csv.lines().count(), 5);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("small.json")).unwrap()).unwrap();
    assert_eq!(json["aggregate"].as_array().unwrap().len(), 2);

    let again = dir.path().join("again");
    subtune(&["run", &cfg, "--threads", "1", "--out", again.to_str().unwrap()]);
    assert_eq!(std::fs::read(out.join("small.csv")).unwrap(), std::fs::read(again.join("small.csv")).unwrap());

    let r = subtune(&["report", out.join("small.csv").to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(0));
    assert!(stdout(&r).contains("rank 2"));
}

#[test]
fn failed_cells_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "diverge.toml",
        &SMALL.replace("steps = 20", "steps = 20\nlr = 1e200\noptimizer = \"sgd\""),
    );
    let o = subtune(&["run", &cfg, "--out", dir.path().join("out").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.toml", &SMALL.replace("steps = 20", "stepz = 20"));
    let o = subtune(&["run", &bad]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stepz"));
    let unknown = write(dir.path(), "unknown.toml", &SMALL.replace("\"ssb\"", "\"qlora\""));
    assert_eq!(subtune(&["run", &unknown]).status.code(), Some(2));
    assert_eq!(subtune(&["run", "/nonexistent/config.toml"]).status.code(), Some(2));
}

#[test]
fn gradcheck_one_kind() {
    let o = subtune(&["gradcheck", "--kind", "flora", "--instances", "2"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("0 failed"));
    assert_eq!(subtune(&["gradcheck", "--kind", "nope"]).status.code(), Some(2));
}

#[test]
fn verify_passes() {
    let o = subtune(&["verify", "--trials", "10"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}
