use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn edgeedit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgeedit")).args(args).output().expect("binary runs")
}

fn corpus_args() -> Vec<String> {
    let fixture = data().join("fixture");
    vec![
        "--corpus".into(),
        fixture.display().to_string(),
        "--manifest".into(),
        fixture.join("manifest.txt").display().to_string(),
        "--dicts".into(),
        data().join("dicts").display().to_string(),
    ]
}

fn run_ok(command: &str, extra: &[&str]) -> String {
    let mut args = vec![command.to_string()];
    args.extend(corpus_args());
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = edgeedit(&refs);
    assert!(out.status.success(), "{command} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(edgeedit(&["--help"]).status.code(), Some(0));
    assert_eq!(edgeedit(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(edgeedit(&["stats"]).status.code(), Some(1));
    assert_eq!(edgeedit(&["stats", "--corpus", "x", "--manifest", "y", "--dmax", "0"]).status.code(), Some(1));
}

#[test]
fn missing_data_is_a_data_error() {
    let out = edgeedit(&["stats", "--corpus", "/nonexistent", "--manifest", "/nonexistent/m.txt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn stats_lists_every_class() {
    let table = run_ok("stats", &[]);
    for name in ["Material", "Apparatus-Property-Type", "Next_Operation", "Coref_Of"] {
        assert!(table.contains(name), "{name} missing");
    }
}

#[test]
fn rule_extract_writes_graphs_and_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("rule");
    let report = run_ok("rule-extract", &["--split", "dev", "--out", path(&out)]);
    assert!(report.contains("Overall"));
    for id in ["d01", "d02", "fig2"] {
        assert!(out.join("graphs").join(format!("{id}.json")).is_file(), "{id}");
    }
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 18, "header, 16 classes and the overall row");
    assert!(out.join("run_config.json").is_file());
}

#[test]
fn train_edit_and_export_dot() {
    let tmp = tempfile::tempdir().unwrap();
    let model_dir = tmp.path().join("model");
    let summary = run_ok("train", &["--epochs", "2", "--out", path(&model_dir)]);
    assert!(summary.contains("best epoch"));
    let log = fs::read_to_string(model_dir.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let checkpoint = model_dir.join("model.json");

    let edited = tmp.path().join("edited");
    run_ok("edit", &["--split", "dev", "--checkpoint", path(&checkpoint), "--out", path(&edited)]);
    let trace = fs::read_to_string(edited.join("traces").join("fig2.jsonl")).unwrap();
    // fig2 has 55 entities, so every one of 55·54 ordered pairs is decided once
    assert_eq!(trace.lines().count(), 55 * 54);

    let dot = edgeedit(&["export-dot", "--graph", path(&edited.join("graphs").join("fig2.json"))]);
    assert!(dot.status.success());
    let dot = String::from_utf8(dot.stdout).unwrap();
    assert!(dot.starts_with("digraph \"fig2\" {"));
    assert!(dot.trim_end().ends_with('}'));
}

#[test]
fn build_dicts_round_trips_into_rule_extract() {
    let tmp = tempfile::tempdir().unwrap();
    let dicts = tmp.path().join("dicts");
    run_ok("build-dicts", &["--out", path(&dicts)]);
    for f in ["solvent.dict", "atmospheric.dict", "participant.dict"] {
        assert!(dicts.join(f).is_file(), "{f}");
    }
    let fixture = data().join("fixture");
    let out = edgeedit(&[
        "rule-extract",
        "--corpus",
        path(&fixture),
        "--manifest",
        path(&fixture.join("manifest.txt")),
        "--dicts",
        path(&dicts),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_file_supplies_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let fixture = data().join("fixture");
    let cfg = tmp.path().join("run.toml");
    fs::write(
        &cfg,
        format!(
            "corpus = {:?}\nmanifest = {:?}\ndicts = {:?}\nsplit = \"train\"\n",
            path(&fixture),
            path(&fixture.join("manifest.txt")),
            path(&data().join("dicts"))
        ),
    )
    .unwrap();
    let out = edgeedit(&["rule-extract", "--config", path(&cfg)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    fs::write(&cfg, "colour = \"blue\"\n").unwrap();
    assert_eq!(edgeedit(&["rule-extract", "--config", path(&cfg)]).status.code(), Some(1));
}
