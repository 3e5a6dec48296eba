use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn matu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_matu"))
        .args(args)
        .output()
        .expect("matu runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The JSON error line printed last on stderr.
fn error_json(o: &Output) -> serde_json::Value {
    let err = stderr(o);
    let line = err.lines().rev().find(|l| l.starts_with('{')).expect("json error line");
    serde_json::from_str(line).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A 6-task dataset with small slices; returns the dir and its config path.
fn small_dataset() -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    let o = matu(&[
        "synth",
        "--out-dir",
        s(dir.path()),
        "--seed",
        "3",
        "--tasks",
        "6",
        "--runs",
        "4",
        "--agents",
        "2",
        "--min-steps",
        "3",
        "--max-steps",
        "4",
        "--dim",
        "8",
        "--rank",
        "2",
        "--noise",
        "0.01",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let paths: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(paths["tasks"], 6);
    let conf = dir.path().join("demo.conf");
    assert!(conf.exists());
    (dir, conf)
}

fn score(conf: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["score", "--config", s(conf), "--rmax", "3"];
    args.extend_from_slice(extra);
    matu(&args)
}

#[test]
fn score_happy_path_writes_one_report_per_task() {
    let (dir, conf) = small_dataset();
    let out = dir.path().join("scores.jsonl");
    let metrics = dir.path().join("metrics.json");
    let o = score(&conf, &["--seed", "1", "--out", s(&out), "--metrics", s(&metrics)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    let reports: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(reports.len(), 6);
    for r in &reports {
        assert_eq!(r["R_max"], 3);
        assert_eq!(r["per_rank_losses"].as_array().unwrap().len(), 3);
        let u = r["U"].as_f64().unwrap();
        let sum: f64 = r["per_rank_losses"]
            .as_array()
            .unwrap()
            .iter()
            .map(|l| l["loss_rel"].as_f64().unwrap())
            .sum();
        assert!((u - sum).abs() < 1e-12);
        let n = r["normalized_u"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&n));
    }
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(m["tasks"], 6);
}

#[test]
fn flags_override_config() {
    let (dir, conf) = small_dataset();
    let o = matu(&[
        "score",
        "--config",
        s(&conf),
        "--seed",
        "1",
        "--loss",
        "abs",
        "--rmax",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let first: serde_json::Value = serde_json::from_str(stdout(&o).lines().next().unwrap()).unwrap();
    assert_eq!(first["loss_mode"], "absolute");
    assert_eq!(first["R_max"], 2);

    let with_seed = dir.path().join("seeded.conf");
    let base = std::fs::read_to_string(&conf).unwrap();
    std::fs::write(&with_seed, format!("{base}fit.seed = 1\nscore.loss = abs\n")).unwrap();
    let from_conf = matu(&["score", "--config", s(&with_seed), "--rmax", "2"]);
    assert!(from_conf.status.success(), "{}", stderr(&from_conf));
    assert_eq!(stdout(&from_conf), stdout(&o));
}

#[test]
fn missing_seed_is_a_usage_error() {
    let (_dir, conf) = small_dataset();
    let o = score(&conf, &[]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_json(&o)["error"]["class"], "usage");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = matu(&["score", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_json(&o)["error"]["class"], "usage");
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "fit.seed = 1\nfit.colour = blue\n").unwrap();
    let o = matu(&["score", "--config", s(&conf)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(error_json(&o)["error"]["message"]
        .as_str()
        .unwrap()
        .contains("fit.colour"));
}

#[test]
fn offline_miss_is_a_data_error_naming_the_key() {
    let (dir, conf) = small_dataset();
    let empty = dir.path().join("empty.bin");
    let o = matu(&[
        "embed",
        "--log",
        s(&dir.path().join("demo.jsonl")),
        "--cache",
        s(&empty),
        "--model",
        "synthetic",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let e = error_json(&o);
    assert_eq!(e["error"]["kind"], "MissingEmbedding");
    let key = e["error"]["key"].as_str().unwrap();
    assert_eq!(key.len(), 64);
    assert!(key.chars().all(|c| c.is_ascii_hexdigit()));
    assert!(e["error"]["text"].as_str().unwrap().starts_with("synth-"));

    let o = score(&conf, &["--seed", "1", "--cache", s(&empty)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_baseline_and_interpret_run_on_the_dataset() {
    let (dir, conf) = small_dataset();
    let scores = dir.path().join("scores.jsonl");
    assert!(score(&conf, &["--seed", "1", "--out", s(&scores)]).status.success());

    let base = dir.path().join("eigv.jsonl");
    let o = matu(&["baseline", "--config", s(&conf), "--out", s(&base)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let first: serde_json::Value =
        serde_json::from_str(std::fs::read_to_string(&base).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["m"], 4);
    let eigv = first["score"].as_f64().unwrap();
    assert!((1.0 - 1e-9..=4.0 + 1e-9).contains(&eigv));

    let o = matu(&[
        "eval",
        "--config",
        s(&conf),
        "--scores",
        &format!("matu={}", s(&scores)),
        "--scores",
        &format!("eigv={}", s(&base)),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    assert!(table.lines().next().unwrap().starts_with("method,AUROC"));
    assert!(table.contains("matu") && table.contains("eigv"));

    let o = matu(&[
        "interpret",
        "--config",
        s(&conf),
        "--seed",
        "1",
        "--task",
        "synth-0000",
        "--rank",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["task_id"], "synth-0000");
    assert_eq!(v["rank"], 2);
}

#[test]
fn route_simulation_and_candidates_file() {
    let o = matu(&["route", "--simulate", "--seed", "5", "--tasks", "50"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["n_tasks"], 50);

    assert_eq!(matu(&["route", "--simulate"]).status.code(), Some(1));

    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("cands.csv");
    std::fs::write(
        &csv,
        "task_id,backbone,U,correct\nt1,a,0.9,0\nt1,b,0.1,1\nt2,a,0.2,1\nt2,b,0.5,0\n",
    )
    .unwrap();
    let o = matu(&["route", "--candidates", s(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["accuracy"], 1.0);
}

#[test]
fn ingest_summarizes_each_task() {
    let (dir, _conf) = small_dataset();
    let o = matu(&["ingest", "--log", s(&dir.path().join("demo.jsonl"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 6);
    assert_eq!(lines[0]["runs"], 4);

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"task_id\": 3}\n").unwrap();
    assert_eq!(matu(&["ingest", "--log", s(&bad)]).status.code(), Some(2));
}
