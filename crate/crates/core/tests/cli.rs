//! Runs the `llm-corrector` binary on small generated projects.

mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use llm_corrector::ingest::TaskSpec;
use serde_json::Value;
use tempfile::TempDir;

struct Project {
    dir: TempDir,
    config: PathBuf,
}

impl Project {
    fn new(task: TaskSpec, extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = common::synthetic(task, 60, 30, 25, 17);
        let config = common::write_project(dir.path(), &data, extra);
        Self { dir, config }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_llm-corrector"))
            .arg("--config")
            .arg(&self.config)
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert_eq!(
            out.status.code(),
            Some(0),
            "stderr: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    fn json(&self, rel: &str) -> Value {
        serde_json::from_str(&std::fs::read_to_string(self.path(rel)).unwrap()).unwrap()
    }

    fn lines(&self, rel: &str) -> Vec<Value> {
        std::fs::read_to_string(self.path(rel))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn set(key: &str, value: &Path) -> String {
    format!("{key}={}", value.display())
}

#[test]
fn build_db_writes_both_files() {
    let p = Project::new(TaskSpec::classification(), "");
    let out = p.ok(&["build-db"]);
    assert!(p.path("db/knowledge.jsonl").exists());
    assert!(p.path("db/embeddings.bin").exists());
    assert!(String::from_utf8_lossy(&out.stdout).contains("90 entries (60 train, 30 valid)"));
}

#[test]
fn build_db_names_missing_predictions() {
    let p = Project::new(TaskSpec::classification(), "");
    std::fs::remove_file(p.path("valid.jsonl")).unwrap();
    let out = p.run(&["build-db"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("valid.jsonl"), "{}", stderr(&out));
}

#[test]
fn build_db_refuses_dimension_change_without_force() {
    let p = Project::new(TaskSpec::regression(), "");
    p.ok(&["build-db"]);
    let out = p.run(&["--set", "embed_dim=128", "build-db"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("64") && stderr(&out).contains("128"));
    p.ok(&["--set", "embed_dim=128", "build-db", "--force"]);
}

#[test]
fn echo_correction_reports_no_change() {
    let p = Project::new(TaskSpec::classification(), "");
    p.ok(&["build-db"]);
    p.ok(&["correct"]);
    let report = p.json("out/report-test.json");
    let s = &report["splits"][0];
    assert_eq!(s["baseline"]["value"], s["corrected"]["value"]);
    assert_eq!(s["improvement_pct"].as_f64(), Some(0.0));
    assert_eq!(s["fallbacks"], 0);
    let table = std::fs::read_to_string(p.path("out/report-test.txt")).unwrap();
    assert!(table.contains("+0.0%"), "{table}");
    assert_eq!(p.lines("out/outcomes-test.jsonl").len(), 25);
}

#[test]
fn oracle_regression_reaches_zero_error() {
    let p = Project::new(TaskSpec::regression(), "backend = oracle\naudit_log = true");
    p.ok(&["build-db"]);
    p.ok(&["correct"]);
    let report = p.json("out/report-test.json");
    assert_eq!(report["splits"][0]["corrected"]["value"].as_f64(), Some(0.0));
    for a in p.lines("out/audit-test.jsonl") {
        assert!(a["exclude_id"].is_null());
    }
    p.ok(&["--split", "valid", "correct"]);
    for a in p.lines("out/audit-valid.jsonl") {
        assert_eq!(a["exclude_id"], a["id"]);
        assert!(!a["context_ids"].as_array().unwrap().contains(&a["id"]));
    }
}

#[test]
fn scripted_garbage_exits_partial() {
    let p = Project::new(
        TaskSpec::regression(),
        "backend = scripted\nscripted_responses = replies.jsonl",
    );
    std::fs::write(p.path("replies.jsonl"), "{\"key\": \"*\", \"response\": \"no idea\"}\n").unwrap();
    p.ok(&["build-db"]);
    let out = p.run(&["correct"]);
    assert_eq!(out.status.code(), Some(1));
    let summary = p.json("out/summary-test.json");
    assert_eq!(summary["fallbacks"], 25);
}

#[test]
fn oracle_predictor_is_perfect() {
    let p = Project::new(TaskSpec::classification(), "backend = oracle");
    p.ok(&["predict", "--prompt", "ip"]);
    let summary = p.json("out/predict-summary-ip-test.json");
    assert_eq!(summary["metric"]["value"].as_f64(), Some(1.0));
    assert_eq!(summary["consistency"]["rate"].as_f64(), Some(1.0));
}

#[test]
fn few_shot_uses_exactly_k_train_examples() {
    let p = Project::new(TaskSpec::classification(), "backend = oracle");
    p.ok(&["build-db"]);
    p.ok(&["predict", "--prompt", "fs", "--shots", "3"]);
    for line in p.lines("out/predictions-fs-3-test.jsonl") {
        let ex = line["examples"].as_array().unwrap();
        assert_eq!(ex.len(), 3);
    }
    let out = p.run(&["predict", "--prompt", "fs"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn description_prompts_need_descriptions() {
    // synthetic descriptions are missing for about a third of molecules
    let p = Project::new(TaskSpec::classification(), "backend = oracle");
    let out = p.run(&["predict", "--prompt", "ipd"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("description"), "{}", stderr(&out));
}

#[test]
fn ablations_write_one_report_per_point() {
    let p = Project::new(
        TaskSpec::regression(),
        "backend = noisy-oracle\nablate_embedders = local-hash:32:3, local-hash:64:3, local-hash:128:2",
    );
    for (axis, n) in [("k", 3), ("strategy", 3), ("self-correction", 2), ("embedder", 3)] {
        p.ok(&["ablate", "--axis", axis]);
        for i in 0..n {
            assert!(p.path(&format!("out/ablation-{axis}-{i}.json")).exists(), "{axis} {i}");
        }
        assert!(!p.path(&format!("out/ablation-{axis}-{n}.json")).exists());
    }
    assert_eq!(p.run(&["ablate", "--axis", "temperature"]).status.code(), Some(2));
}

#[test]
fn reruns_and_thread_counts_give_identical_outcomes() {
    let p = Project::new(
        TaskSpec::classification(),
        "backend = noisy-oracle\nstrategy = random\nseed = 4",
    );
    p.ok(&["build-db"]);
    let mut runs = Vec::new();
    for (jobs, dir) in [("1", "a"), ("8", "b"), ("1", "c")] {
        let out_dir = p.path(dir);
        p.ok(&["--jobs", jobs, "--set", &set("output_dir", &out_dir), "correct"]);
        runs.push(std::fs::read(out_dir.join("outcomes-test.jsonl")).unwrap());
    }
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[0], runs[2]);
}

#[test]
fn api_keys_cannot_be_configured() {
    let p = Project::new(TaskSpec::classification(), "");
    let out = p.run(&["--set", "llm_api_key=sk-abc", "build-db"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!stderr(&out).contains("sk-abc"));
}
