use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cait::data::write_csv;
use cait::simulation::{gen_sample, EffectKind, SimSetting};
use serde_json::Value;

fn cait() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cait"))
}

fn run(args: &[&str]) -> Output {
    cait().args(args).output().expect("binary runs")
}

fn sim_csv(dir: &Path, effect: EffectKind, n: usize, seed: u64) -> PathBuf {
    let ds = gen_sample::<f64>(&SimSetting::continuous(effect, n), n, seed).unwrap();
    let path = dir.join("trial.csv");
    write_csv(&ds, &path).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn without_timestamp(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("generated_unix");
    v
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn analyze_homogeneous_da_fts2_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let csv = sim_csv(dir.path(), EffectKind::Homogeneous, 400, 3);
    let out = dir.path().join("out");
    let o = run(&["analyze", "--data", s(&csv), "--estimator", "da", "--selection", "fts2", "--seed", "5", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let tree = read_json(&out.join("tree.json"));
    assert_eq!(tree["seed"], 5);
    assert_eq!(tree["config"]["estimator"], "da");
    assert_eq!(tree["estimator"], "data_adaptive");
    assert!(tree["tree"]["n_internal"].as_u64().is_some());
    let report = read_json(&out.join("selection_report.json"));
    assert_eq!(report["report"]["method"], "fts2");
    assert!(!out.join("sequence.json").exists());
    let summary = std::fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("+/-"));
    assert!(String::from_utf8_lossy(&o.stdout).contains("leaf subgroups"));
}

#[test]
fn missing_treatment_column_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let csv = sim_csv(dir.path(), EffectKind::Homogeneous, 100, 1);
    let o = run(&["analyze", "--data", s(&csv), "--treatment", "arm", "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("'arm'"));
}

#[test]
fn single_arm_data_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("one_arm.csv");
    let mut text = String::from("y,a,x1\n");
    for i in 0..60 {
        text.push_str(&format!("{},1,{}\n", i % 7, i));
    }
    std::fs::write(&csv, text).unwrap();
    let o = run(&["analyze", "--data", s(&csv), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn singular_global_model_fails_at_the_root_with_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("dup.csv");
    let mut text = String::from("y,a,x1,x2\n");
    for i in 0..60 {
        text.push_str(&format!("{},{},{i},{i}\n", i % 7, i % 2));
    }
    std::fs::write(&csv, text).unwrap();
    let cfg = dir.path().join("cfg.json");
    let spec = r#"{"estimator_spec": {"kind": "global_ms", "design": {"terms": [
        {"column": 0, "transform": "linear"}, {"column": 1, "transform": "linear"}]}}}"#;
    std::fs::write(&cfg, spec).unwrap();
    let o = run(&["analyze", "--data", s(&csv), "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("node 0 (root)"));
}

#[test]
fn emit_sequence_writes_every_candidate() {
    let dir = tempfile::tempdir().unwrap();
    let csv = sim_csv(dir.path(), EffectKind::Heterogeneous, 500, 2);
    let out = dir.path().join("out");
    let o = run(&["analyze", "--data", s(&csv), "--selection", "fts1", "--emit-sequence", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let seq = read_json(&out.join("sequence.json"));
    let cands = seq["candidates"].as_array().unwrap();
    assert!(!cands.is_empty());
    let last = cands.last().unwrap();
    assert_eq!(last["n_internal"], 0);
    for w in cands.windows(2) {
        assert!(w[0]["n_internal"].as_u64() > w[1]["n_internal"].as_u64());
    }
    assert!(cands[0]["critical_lambda"].is_number() || cands.len() == 1);
}

#[test]
fn analyze_output_ignores_worker_count_and_reproduces_from_emitted_config() {
    let dir = tempfile::tempdir().unwrap();
    let csv = sim_csv(dir.path(), EffectKind::Heterogeneous, 400, 8);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    let base = ["analyze", "--data", s(&csv), "--estimator", "ms", "--seed", "21", "--emit-sequence"];
    let o = run(&[&base[..], &["--workers", "1", "--out", s(&a)]].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&[&base[..], &["--workers", "4", "--out", s(&b)]].concat());
    assert!(o.status.success());

    let emitted = read_json(&a.join("tree.json"))["config"].clone();
    let cfg_path = dir.path().join("emitted.json");
    std::fs::write(&cfg_path, serde_json::to_string(&emitted).unwrap()).unwrap();
    let o = run(&["analyze", "--config", s(&cfg_path), "--out", s(&c)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    for file in ["tree.json", "selection_report.json", "sequence.json"] {
        let ja = without_timestamp(read_json(&a.join(file)));
        assert_eq!(ja, without_timestamp(read_json(&b.join(file))), "{file} differs across workers");
        assert_eq!(ja, without_timestamp(read_json(&c.join(file))), "{file} differs from emitted config");
    }
}

#[test]
fn simulate_table1_preset_aggregates_every_method_and_setting() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let o = run(&["simulate", "--preset", "table1-desk", "--reps", "1", "--seed", "4", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let agg = read_json(&out.join("aggregates.json"));
    let rows = agg["aggregates"].as_array().unwrap();
    assert_eq!(rows.len(), 20);
    for r in rows {
        for measure in ["mean_mse", "prop_correct", "mean_noise_splits", "prop_root"] {
            assert!(r.get(measure).is_some(), "missing {measure}");
        }
    }
    assert_eq!(agg["config"]["preset"], "table1-desk");
    assert_eq!(agg["seed"], 4);
    let reps = std::fs::read_to_string(out.join("replications.csv")).unwrap();
    assert_eq!(reps.lines().count(), 1 + 20);
    assert!(out.join("plotdata.csv").exists());
    assert_eq!(read_json(&out.join("run.json"))["config"]["reps"], 1);
}

#[test]
fn zero_reps_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["simulate", "--reps", "0", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_preset_exits_2_and_lists_presets() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["simulate", "--preset", "table9", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    for p in ["table1-desk", "table1-full", "n1000-desk", "binary-desk"] {
        assert!(err.contains(p), "{err}");
    }
}
