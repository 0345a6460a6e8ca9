use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn valign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_valign"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = valign(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, cfg: Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn small_config(steps: u64, kind: &str) -> Value {
    json!({
        "data": {
            "games": [
                {"game_id": "a", "appearance_seed": 1},
                {"game_id": "b", "appearance_seed": 2, "step_size": 0.7}
            ],
            "n_episodes": 30
        },
        "sampler": {"kind": kind},
        "schedule": {"steps": steps, "batch_size": 8, "seed": 3},
        "eval": {"n_pairs": 200, "n_queries": 50}
    })
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_writes_one_file_per_game() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", small_config(10, "vep"));
    let out = dir.path().join("nested/gen");
    ok(&["gen", "--config", p(&cfg), "--out", p(&out)]);
    for g in ["a", "b"] {
        let text = std::fs::read_to_string(out.join(format!("{g}.jsonl"))).unwrap();
        assert_eq!(text.lines().count(), 30);
    }
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["command"], "gen");
    for (_, path) in manifest["artifacts"].as_object().unwrap() {
        assert!(Path::new(path.as_str().unwrap()).exists());
    }
}

#[test]
fn every_sampler_pretrains_and_logs_each_step() {
    let dir = tempfile::tempdir().unwrap();
    for kind in ["vep", "tcn", "som", "vip"] {
        let cfg = write_config(dir.path(), &format!("{kind}.json"), small_config(10, kind));
        let out = dir.path().join(kind);
        ok(&["pretrain", "--config", p(&cfg), "--out", p(&out)]);
        let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("step,loss,grad_norm,wall_ms"));
        assert_eq!(lines.count(), 10, "{kind}");
        let echo = read_json(&out.join("config.json"));
        assert_eq!(echo["sampler"]["kind"], kind);
        assert_eq!(echo["encoder"]["layer_sizes"], json!([6, 64, 16]));
    }
}

#[test]
fn pretrain_reads_generated_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", small_config(5, "vep"));
    let gen = dir.path().join("gen");
    ok(&["gen", "--config", p(&cfg), "--out", p(&gen)]);
    let relative = write_config(
        &gen,
        "files.json",
        json!({"data": {"paths": ["a.jsonl", "b.jsonl"]}, "schedule": {"steps": 5, "batch_size": 4}}),
    );
    ok(&["pretrain", "--config", p(&relative), "--out", p(&dir.path().join("pt"))]);
}

#[test]
fn eval_and_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", small_config(20, "vep"));
    let d = dir.path();
    ok(&["pretrain", "--config", p(&cfg), "--out", p(&d.join("pt"))]);
    let ckpt = d.join("pt/checkpoint.json");
    ok(&["eval", "--config", p(&cfg), "--checkpoint", p(&ckpt), "--out", p(&d.join("ev"))]);
    ok(&["eval", "--config", p(&cfg), "--random-baseline", "--out", p(&d.join("rnd"))]);

    let report = read_json(&d.join("ev/report.json"));
    assert_eq!(report["encoder"]["method"], "vep");
    assert_eq!(read_json(&d.join("rnd/report.json"))["encoder"]["method"], "random");
    for key in ["spearman_rho", "retrieval_at_k", "probe_r2_within", "probe_r2_transfer"] {
        assert!(report["metrics"].get(key).is_some(), "{key}");
    }
    assert_eq!(report["sampling"]["n_pairs"], 200);

    let reports: Vec<PathBuf> = ["ev", "rnd", "ev", "rnd"].iter().map(|s| d.join(s).join("report.json")).collect();
    let mut args = vec!["report"];
    args.extend(reports.iter().map(|r| p(r)));
    let out = d.join("rep");
    args.extend(["--out", p(&out)]);
    ok(&args);
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    for metric in ["spearman_rho", "retrieval_at_1", "retrieval_at_5", "probe_r2_within", "probe_r2_transfer"] {
        let svg = std::fs::read_to_string(out.join(format!("{metric}.svg"))).unwrap();
        roxmltree::Document::parse(&svg).unwrap();
    }
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", json!({"schedule": {"stepz": 3}}));
    let out = valign(&["pretrain", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("schedule.stepz"));
}

#[test]
fn episodes_without_goals_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let line = json!({"game_id": "a", "observations": [[0.0, 1.0], [1.0, 0.0]], "rewards": [0.0, 0.0]});
    std::fs::write(dir.path().join("a.jsonl"), format!("{line}\n")).unwrap();
    let cfg = write_config(dir.path(), "run.json", json!({"data": {"paths": ["a.jsonl"]}}));
    let out = valign(&["pretrain", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn checkpoint_mismatch_exits_7() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "run.json", small_config(5, "tcn"));
    ok(&["pretrain", "--config", p(&cfg), "--out", p(&d.join("pt"))]);
    let mut other = small_config(5, "tcn");
    other["encoder"] = json!({"layer_sizes": [6, 32, 8]});
    let other = write_config(d, "other.json", other);
    let out = valign(&[
        "eval",
        "--config",
        p(&other),
        "--checkpoint",
        p(&d.join("pt/checkpoint.json")),
        "--out",
        p(&d.join("ev")),
    ]);
    assert_eq!(out.status.code(), Some(7), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn eval_needs_checkpoint_or_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", small_config(5, "vep"));
    let out = valign(&["eval", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert!(!out.status.success());
}

#[test]
fn report_rejects_foreign_json() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("x.json");
    std::fs::write(&bogus, "{\"hello\": 1}").unwrap();
    let out = valign(&["report", p(&bogus), "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(8));
}

#[test]
fn same_config_same_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "run.json", small_config(15, "vip"));
    ok(&["pretrain", "--config", p(&cfg), "--out", p(&d.join("a"))]);
    ok(&["pretrain", "--config", p(&cfg), "--out", p(&d.join("b"))]);
    for f in ["checkpoint.json", "metrics.csv", "config.json"] {
        assert_eq!(std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
}
