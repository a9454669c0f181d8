use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const TINY: &str = r#"{
  "seed": 5,
  "synth": {"samples": 400, "warm_start_steps": 100, "steps": 200, "log_every": 50},
  "simulate": {"starts": 5, "steps": 20}
}"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cbfcert"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("config.json"), TINY).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }

    fn cbf(&self, out: &str, args: &[&str]) -> Output {
        let mut all = vec!["--config".to_string(), self.s("config.json"), "--out".to_string(), self.s(out)];
        all.extend(args.iter().map(|a| a.to_string()));
        run(&all.iter().map(String::as_str).collect::<Vec<_>>())
    }

    fn synth(&self, out: &str) -> PathBuf {
        let o = self.cbf(out, &["synth"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        self.path(out).join("model.json")
    }
}

/// Cheap verification settings for a barely trained model.
const QUICK: [&str; 9] = ["--alpha-bar", "0.8", "--delta", "0.05", "--schedule", "uniform", "--q", "2", "--no-base"];

fn verify_args<'a>(model: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["verify", "--model", model];
    v.extend(QUICK);
    v.extend(extra);
    v
}

fn without_wall_time(path: &Path) -> Value {
    fn strip(v: &mut Value) {
        match v {
            Value::Object(m) => {
                m.remove("wall_time_s");
                m.values_mut().for_each(strip);
            }
            Value::Array(a) => a.iter_mut().for_each(strip),
            _ => {}
        }
    }
    let mut v: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    strip(&mut v);
    v
}

#[test]
fn synth_writes_model_log_and_summary() {
    let f = Fixture::new();
    let model = f.synth("a");
    assert!(model.exists());
    let log = fs::read_to_string(f.path("a").join("training_log.csv")).unwrap();
    assert!(log.starts_with("step,stage,loss,unsafe_violations,safe_violations,decay_violations"));
    let summary: Value = serde_json::from_str(&fs::read_to_string(f.path("a").join("synth_summary.json")).unwrap()).unwrap();
    assert!(summary["samples_safe"].as_u64().unwrap() > 0);
}

#[test]
fn synth_is_byte_identical_and_verify_reproducible() {
    let f = Fixture::new();
    let m1 = f.synth("a");
    let m2 = f.synth("b");
    assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());
    let m = m1.to_str().unwrap().to_string();
    let o1 = f.cbf("va", &verify_args(&m, &[]));
    let o2 = f.cbf("vb", &verify_args(&m, &[]));
    assert_eq!(code(&o1), code(&o2));
    assert_eq!(
        without_wall_time(&f.path("va").join("report.json")),
        without_wall_time(&f.path("vb").join("report.json"))
    );
}

#[test]
fn failed_certification_exits_3_with_counterexamples() {
    let f = Fixture::new();
    let m = f.synth("a");
    let o = f.cbf("v", &verify_args(m.to_str().unwrap(), &["--fail-fast"]));
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(f.path("v").join("report.json")).unwrap()).unwrap();
    assert_eq!(report["verdict"], "failed");
    let cex: Vec<Value> = serde_json::from_str(&fs::read_to_string(f.path("v").join("counterexamples.json")).unwrap()).unwrap();
    assert!(!cex.is_empty());
    assert!(cex.iter().all(|c| c["residual"].as_f64().unwrap() > 0.0));
}

#[test]
fn missing_or_invalid_config_exits_1() {
    let f = Fixture::new();
    let o = run(&["--config", &f.s("absent.json"), "synth"]);
    assert_eq!(code(&o), 1);
    fs::write(f.path("bad.json"), r#"{"synth": {"sampels": 10}}"#).unwrap();
    let o = run(&["--config", &f.s("bad.json"), "synth"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("sampels"));
    let o = run(&["verify"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn non_finite_training_exits_2() {
    let f = Fixture::new();
    fs::write(f.path("config.json"), r#"{"synth": {"samples": 400, "warm_start_steps": 50, "steps": 50, "learning_rate": 1e300}}"#).unwrap();
    let o = f.cbf("a", &["synth"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn sweep_rejects_empty_alpha_list() {
    let f = Fixture::new();
    let m = f.synth("a");
    let o = f.cbf("s", &["sweep", "--model", m.to_str().unwrap(), "--alpha-bars", ""]);
    assert_eq!(code(&o), 1);
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let f = Fixture::new();
    let m = f.synth("a");
    let o = f.cbf(
        "s",
        &["sweep", "--model", m.to_str().unwrap(), "--delta", "0.05", "--alpha-bars", "0.8", "--q-min", "1", "--q-max", "2", "--modes", "uniform"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut r = csv::Reader::from_path(f.path("s").join("sweep.csv")).unwrap();
    let headers: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(headers, ["alpha_bar", "q_mode", "q", "gamma_hat", "n_tot", "n_base", "wall_time_s"]);
    assert_eq!(r.records().count(), 2);
}

#[test]
fn refine_with_no_counterexamples_leaves_model_unchanged() {
    let f = Fixture::new();
    let m = f.synth("a");
    fs::write(f.path("none.json"), "[]").unwrap();
    let o = f.cbf("r", &["refine", "--model", m.to_str().unwrap(), "--counterexamples", &f.s("none.json")]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(&m).unwrap(), fs::read(f.path("r").join("model_refined.json")).unwrap());
}

#[test]
fn refine_with_zero_steps_keeps_parameters() {
    let f = Fixture::new();
    let m = f.synth("a");
    let ms = m.to_str().unwrap().to_string();
    assert_eq!(code(&f.cbf("v", &verify_args(&ms, &["--fail-fast"]))), 3);
    let cex = f.s("v/counterexamples.json");
    let mut args = vec!["refine", "--model", &ms, "--counterexamples", &cex, "--steps", "0", "--max-rounds", "1"];
    args.extend(QUICK);
    args.push("--fail-fast");
    let o = f.cbf("r", &args);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(&m).unwrap(), fs::read(f.path("r").join("model_refined.json")).unwrap());
    assert!(f.path("r").join("refine_summary.json").exists());
}

#[test]
fn simulate_with_zero_steps_records_only_starts() {
    let f = Fixture::new();
    let m = f.synth("a");
    let o = f.cbf("s", &["simulate", "--model", m.to_str().unwrap(), "--steps", "0", "--level", "0"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut r = csv::Reader::from_path(f.path("s").join("trajectories.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|row| &row[1] == "0"));
}

#[test]
fn verify_prob_reports_confidence() {
    let f = Fixture::new();
    let m = f.synth("a");
    let o = f.cbf(
        "p",
        &["verify-prob", "--model", m.to_str().unwrap(), "--alpha-bar", "0.8", "--delta", "0.05", "--q", "3", "--volume-samples", "20000"],
    );
    assert!(matches!(code(&o), 0 | 3), "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_str(&fs::read_to_string(f.path("p").join("prob_report.json")).unwrap()).unwrap();
    let theta = r["theta"].as_f64().unwrap();
    let q = r["schedule"].as_array().unwrap().len() as i32 - 1;
    assert_eq!(r["confidence"].as_f64().unwrap(), (1.0 - theta).powi(q));
}
