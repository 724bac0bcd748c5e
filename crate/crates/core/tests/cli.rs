//! Command-line behaviour against the shipped replay fixtures.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use halludetect::evaluation::{brier, EvaluationReport};
use halludetect::model::split_ids;
use halludetect::pipeline::ScoreCache;
use tempfile::TempDir;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn halludetect(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_halludetect"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("spawn halludetect")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A config in a scratch directory pointing at the shipped fixtures, with the
/// dataset cut to its first `take` lines plus `add`.
fn scratch(take: usize, add: &[&str]) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let lines: Vec<String> = std::fs::read_to_string(fixtures().join("dataset.jsonl"))
        .unwrap()
        .lines()
        .take(take)
        .map(str::to_string)
        .chain(add.iter().map(|s| s.to_string()))
        .collect();
    std::fs::write(dir.path().join("dataset.jsonl"), lines.join("\n") + "\n").unwrap();
    let base = std::fs::read_to_string(fixtures().join("config.toml")).unwrap();
    let fixture_file = fixtures().join("fixtures.jsonl");
    let text = base.replace(
        "fixtures = \"fixtures.jsonl\"",
        &format!("fixtures = {:?}", fixture_file.to_str().unwrap()),
    );
    let config = dir.path().join("config.toml");
    std::fs::write(&config, text).unwrap();
    (dir, config)
}

#[test]
fn help_exits_zero_and_bad_flag_exits_one() {
    let o = Command::new(env!("CARGO_BIN_EXE_halludetect")).arg("--help").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("calibrate"));
    let o = Command::new(env!("CARGO_BIN_EXE_halludetect")).args(["run", "--budgets", "x"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_config_key_is_reported_with_its_path() {
    let (dir, config) = scratch(5, &[]);
    let text = std::fs::read_to_string(&config).unwrap().replace("top_logprobs = 5", "top_logprob = 5");
    std::fs::write(&config, text).unwrap();
    let o = halludetect(&["score"], &config, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("scoring.top_logprob"), "{}", stderr(&o));
}

#[test]
fn missing_seed_is_a_config_error() {
    let (dir, config) = scratch(5, &[]);
    let text = std::fs::read_to_string(&config).unwrap().replace("seed = 20240\n", "");
    std::fs::write(&config, text).unwrap();
    let o = halludetect(&["score"], &config, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("seed"), "{}", stderr(&o));
}

const UNRECORDED: &str = r#"{"id":"zz-new","input":"Which river is longest?","response":"The Nile.","label":1}"#;

#[test]
fn unrecorded_example_fails_only_its_own_cells() {
    // Platt scaling needs no embeddings, so only scorer cells are at stake.
    let (dir, config) = scratch(40, &[UNRECORDED]);
    let text = std::fs::read_to_string(&config).unwrap().replace("method = \"multical\"", "method = \"platt\"");
    std::fs::write(&config, text).unwrap();
    let o = halludetect(&["score"], &config, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("PTrue: 40/41 scored, 1 failed"), "{out}");
    assert!(out.contains("SelfCheckNli(3): 40/41 scored, 1 failed"), "{out}");
    let err = stderr(&o);
    assert!(err.contains("warning: zz-new / PTrue"), "{err}");
    assert!(!err.contains("q0000"), "{err}");
}

#[test]
fn missing_embedding_is_fatal_under_multicalibration() {
    let (dir, config) = scratch(40, &[UNRECORDED]);
    let o = halludetect(&["score"], &config, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("embedding failed for zz-new"), "{}", stderr(&o));
}

#[test]
fn backend_failure_on_every_cell_exits_two() {
    let (dir, config) = scratch(0, &[UNRECORDED]);
    let o = halludetect(&["score"], &config, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn no_calibration_reports_raw_scores() {
    let (dir, config) = scratch(300, &[]);
    let out = dir.path().join("out");
    let o = halludetect(&["run", "--no-calibration", "--budgets", "1,3"], &config, &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("PTrue: calibrated on 240 examples, 0 patches"), "{}", stdout(&o));

    // Brier of the uncalibrated test-fold scores, straight from the cache.
    let cache = ScoreCache::read(&out.join("scores.jsonl")).unwrap();
    let split = split_ids(cache.ids(), 0.8, 20240).unwrap();
    let report: EvaluationReport =
        serde_json::from_str(&std::fs::read_to_string(out.join("report").join("report.json")).unwrap()).unwrap();
    for (c, kind) in cache.matrix.scorers.iter().enumerate() {
        let (mut p, mut y) = (Vec::new(), Vec::new());
        for (r, id) in cache.ids().iter().enumerate() {
            if !split.is_calibration(id) {
                p.push(cache.matrix.get(r, c).unwrap());
                y.push(cache.labels[r].unwrap());
            }
        }
        let expected = brier(&p, &y).unwrap();
        let got = report.row(&kind.to_string()).unwrap().brier;
        assert!((got - expected).abs() < 1e-12, "{kind}: {got} vs {expected}");
    }
    let budgets: Vec<u32> = report.budget_rows.iter().map(|r| r.budget).collect();
    assert_eq!(budgets, vec![1, 3]);
}

#[test]
fn evaluate_without_a_cache_fails_cleanly() {
    let (dir, config) = scratch(5, &[]);
    let o = halludetect(&["evaluate"], &config, &dir.path().join("nothing-here"));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:"), "{}", stderr(&o));
}

#[test]
fn raw_score_aggregation_ignores_calibrators() {
    let (dir, config) = scratch(300, &[]);
    let raw_config = dir.path().join("raw.toml");
    let text = std::fs::read_to_string(&config).unwrap() + "\n[aggregation]\nraw_scores = true\n";
    std::fs::write(&raw_config, text).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = halludetect(&["run"], &raw_config, &a);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = halludetect(&["run", "--no-calibration"], &config, &b);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let read = |d: &Path| -> EvaluationReport {
        serde_json::from_str(&std::fs::read_to_string(d.join("report").join("report.json")).unwrap()).unwrap()
    };
    let (ra, rb) = (read(&a), read(&b));
    assert_eq!(ra.multiscore_row(), rb.multiscore_row());
    assert_eq!(ra.budget_rows, rb.budget_rows);
    // The per-scorer rows still differ: one run calibrated them.
    assert_ne!(ra.row("PTrue"), rb.row("PTrue"));
}
