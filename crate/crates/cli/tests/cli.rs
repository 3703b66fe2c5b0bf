use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Duration;

use serde_json::Value;
use smalldata_core::asha::mock::MockFactory;
use smalldata_core::asha::{events_to_jsonl, run_asha, AshaConfig, SearchSpace};
use smalldata_core::datakit::{DatasetIndex, SplitResult};
use smalldata_core::learner::external::{conformance_suite, Connection, DataManifest, REFERENCE_CHECKPOINT};
use smalldata_core::learner::TrialData;
use smalldata_core::sweep::{SweepReport, CSV_COLUMNS};
use tempfile::TempDir;

const SMALLDATA: &str = env!("CARGO_BIN_EXE_smalldata");
const FAKE_TRAINER: &str = env!("CARGO_BIN_EXE_smalldata-fake-trainer");

fn smalldata(args: &[&str]) -> Output {
    Command::new(SMALLDATA).args(args).output().expect("spawn smalldata")
}

fn ok(args: &[&str]) -> String {
    let out = smalldata(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn count_tiffs(dir: &Path) -> usize {
    std::fs::read_dir(dir.join("patches"))
        .map(|d| d.filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "tif")).count())
        .unwrap_or(0)
}

/// A generated, split and preprocessed dataset.
fn dataset(counts: &str) -> (TempDir, PathBuf) {
    let tmp = TempDir::new().unwrap();
    let ds = tmp.path().join("ds");
    ok(&["generate", "--out", s(&ds), "--counts", counts, "--seed", "4"]);
    ok(&["split", "--data", s(&ds), "--out", s(&tmp.path().join("split.json"))]);
    ok(&["preprocess", "--data", s(&ds), "--out", s(&tmp.path().join("inputs"))]);
    (tmp, ds)
}

#[test]
fn generate_writes_patches_and_manifest() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("ds");
    let stdout = ok(&["generate", "--out", s(&out), "--counts", "84,12,4", "--seed", "1"]);
    assert_eq!(count_tiffs(&out), 100);
    assert!(out.join("manifest.json").is_file());
    assert!(stdout.lines().any(|l| l.starts_with("nominal") && l.contains(" 84 ")));
    assert!(stdout.lines().any(|l| l.starts_with("total") && l.ends_with("100")));
}

#[test]
fn generate_empty_dataset() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("empty");
    ok(&["generate", "--out", s(&out), "--counts", "0,0,0", "--seed", "1"]);
    assert!(out.join("manifest.json").is_file());
    assert_eq!(count_tiffs(&out), 0);
}

#[test]
fn generate_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["generate", "--out", s(d), "--counts", "3,2,2", "--seed", "9"]);
    }
    for f in ["manifest.json", "patches/gap_000001.tif", "patches/overlap_000000.tif"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn unwritable_output_exits_one() {
    let tmp = TempDir::new().unwrap();
    let file = tmp.path().join("plain-file");
    std::fs::write(&file, b"x").unwrap();
    let out = smalldata(&["generate", "--out", s(&file.join("ds")), "--counts", "1,1,1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn usage_errors_exit_two() {
    for args in [
        vec!["frobnicate"],
        vec!["generate", "--out", "x", "--counts", "1,2"],
        vec!["generate", "--out", "x", "--counts", "1,2,3", "--colour", "red"],
        vec!["report", "r.json", "--format", "xml"],
        vec![],
    ] {
        assert_eq!(smalldata(&args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn domain_errors_exit_one() {
    let tmp = TempDir::new().unwrap();
    let out = smalldata(&["split", "--data", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    let (tmp, ds) = dataset("6,3,3");
    let out = smalldata(&[
        "sweep",
        "--data",
        s(&ds),
        "--out",
        s(&tmp.path().join("run")),
        "--trainer",
        &format!("external:{FAKE_TRAINER}"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--inputs"));
}

#[test]
fn split_is_idempotent() {
    let (tmp, ds) = dataset("20,10,10");
    let again = tmp.path().join("again.json");
    ok(&["split", "--data", s(&ds), "--out", s(&again)]);
    assert_eq!(
        std::fs::read(tmp.path().join("split.json")).unwrap(),
        std::fs::read(&again).unwrap()
    );
}

#[test]
fn gradcheck_reports_small_error() {
    let stdout = ok(&["gradcheck"]);
    let err: f64 = stdout
        .split_whitespace()
        .nth(3)
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| panic!("unexpected output `{stdout}`"));
    assert!(err < 1e-4, "{err}");
}

fn mock_log(dir: &Path) -> (PathBuf, String) {
    let empty = DatasetIndex::new(Vec::new()).unwrap();
    let data = TrialData::new(empty.clone(), empty.clone(), empty);
    let cfg = AshaConfig {
        workers: 3,
        ..AshaConfig::default()
    };
    let out = run_asha(&MockFactory::seeded(11), &data, &cfg, &SearchSpace::default(), 5).unwrap();
    let text = events_to_jsonl(&out.events).unwrap();
    let path = dir.join("events.jsonl");
    std::fs::write(&path, &text).unwrap();
    (path, text)
}

#[test]
fn audit_accepts_conforming_log() {
    let tmp = TempDir::new().unwrap();
    let (log, _) = mock_log(tmp.path());
    let stdout = ok(&["audit", s(&log)]);
    assert!(stdout.contains("no violations"));
}

#[test]
fn audit_names_corrupted_promotion() {
    let tmp = TempDir::new().unwrap();
    let (_, text) = mock_log(tmp.path());
    let mut lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    // the worst rung-0 result can never be in its rung's top half
    let worst = lines
        .iter()
        .filter(|v| v["event"] == "metric_reported" && v["rung"] == 0)
        .min_by(|a, b| a["value"].as_f64().unwrap().total_cmp(&b["value"].as_f64().unwrap()))
        .map(|v| v["trial"].clone())
        .unwrap();
    let at = lines
        .iter()
        .position(|v| v["event"] == "promoted" && v["from_rung"] == 0)
        .unwrap();
    lines[at]["trial"] = worst;
    let corrupted = tmp.path().join("corrupted.jsonl");
    let body: Vec<String> = lines.iter().map(Value::to_string).collect();
    std::fs::write(&corrupted, body.join("\n") + "\n").unwrap();

    let out = smalldata(&["audit", s(&corrupted)]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains(&format!("violation at event {at} ")), "{stderr}");
}

#[test]
fn fake_trainer_passes_conformance_suite() {
    let (tmp, _) = dataset("12,6,6");
    let split: SplitResult = serde_json::from_slice(&std::fs::read(tmp.path().join("split.json")).unwrap()).unwrap();
    let data = TrialData::new(split.train, split.eval, split.test);
    let manifest = tmp.path().join("data.json");
    DataManifest::for_trial(&data, &tmp.path().join("inputs")).write(&manifest).unwrap();
    std::env::set_var("SMALLDATA_TRAINER_STATE", tmp.path());
    let connect = || Connection::spawn(&[FAKE_TRAINER.to_string()], Duration::from_secs(60));
    let checks = conformance_suite(&connect, REFERENCE_CHECKPOINT, &manifest);
    assert_eq!(checks.len(), 5);
    for c in &checks {
        assert!(c.passed, "{}: {}", c.name, c.detail);
    }
}

#[test]
fn external_reference_matches_builtin_end_to_end() {
    let (tmp, ds) = dataset("60,30,30");
    let run = tmp.path().join("run");
    let trainer = format!("ref=external:{FAKE_TRAINER}");
    ok(&[
        "sweep",
        "--data",
        s(&ds),
        "--split",
        s(&tmp.path().join("split.json")),
        "--out",
        s(&run),
        "--inputs",
        s(&tmp.path().join("inputs")),
        "--trainer",
        "builtin",
        "--trainer",
        &trainer,
        "--trials",
        "4",
        "--workers",
        "2",
        "--commit-order",
        "issue",
        "--ladder",
        "8,16",
        "--seeds",
        "0,1",
        "--epochs",
        "4",
        "--tuning-per-class",
        "10",
        "--lr-min",
        "1e-3",
        "--lr-max",
        "1e-2",
    ]);
    for f in ["run.json", "plan.json", "split.json", "tuning.json", "report.csv", "plotdata.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    for name in ["builtin", "ref"] {
        ok(&["audit", s(&run.join("events").join(format!("{name}.jsonl")))]);
    }
    let report: SweepReport = serde_json::from_slice(&std::fs::read(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.records.len(), 8);
    assert_eq!(report.failed().count(), 0);
    for size in [8, 16] {
        let a = report.aggregate("builtin", size).unwrap();
        let b = report.aggregate("ref", size).unwrap();
        assert_eq!(a.mean_macro_f1, b.mean_macro_f1, "size {size}");
    }

    let csv_path = tmp.path().join("out.csv");
    ok(&["report", s(&run.join("report.json")), "--format", "csv", "--out", s(&csv_path)]);
    let csv_text = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(csv_text.lines().next().unwrap(), CSV_COLUMNS.join(","));
    assert_eq!(csv_text.lines().count(), 9);
    let plot: Value = serde_json::from_str(&ok(&["report", s(&run.join("report.json")), "--format", "plotdata"])).unwrap();
    assert_eq!(plot["series"].as_array().unwrap().len(), 2);

    let tuned = run.join("tuning.json");
    let rerun = tmp.path().join("rerun");
    ok(&[
        "sweep",
        "--data",
        s(&ds),
        "--split",
        s(&tmp.path().join("split.json")),
        "--out",
        s(&rerun),
        "--tuning",
        s(&tuned),
        "--trainer",
        "builtin",
        "--ladder",
        "8,16",
        "--seeds",
        "0,1",
        "--epochs",
        "4",
    ]);
    let again: SweepReport = serde_json::from_slice(&std::fs::read(rerun.join("report.json")).unwrap()).unwrap();
    let f1 = |r: &SweepReport| r.records.iter().filter(|x| x.trainer == "builtin").map(|x| x.macro_f1()).collect::<Vec<_>>();
    assert_eq!(f1(&report), f1(&again));
}

#[test]
fn tune_writes_tuning_table_and_logs() {
    let (tmp, ds) = dataset("30,15,15");
    let run = tmp.path().join("tune");
    let stdout = ok(&[
        "tune",
        "--data",
        s(&ds),
        "--out",
        s(&run),
        "--trials",
        "8",
        "--tuning-per-class",
        "8",
    ]);
    assert!(stdout.starts_with("builtin"));
    let tuning: Value = serde_json::from_slice(&std::fs::read(run.join("tuning.json")).unwrap()).unwrap();
    assert!(tuning["builtin"]["learning_rate"].as_f64().unwrap() > 0.0);
    let events = std::fs::read_to_string(run.join("events/builtin.jsonl")).unwrap();
    let first: Value = serde_json::from_str(events.lines().next().unwrap()).unwrap();
    assert_eq!(first["event"], "config");
    assert!(events.lines().any(|l| l.contains(r#""event":"completed""#)));
}
