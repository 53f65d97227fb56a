use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_memtree");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small corpus, tiny model and a two-epoch run shared by several tests.
struct Fixture {
    _dir: TempDir,
    data: PathBuf,
    config: PathBuf,
    run: PathBuf,
}

fn fixture() -> Fixture {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    let config = dir.path().join("run.toml");
    fs::write(
        &config,
        "n_m = 8\nn_e = 8\nattention_heads = 2\nepochs = 2\nbatch_size = 16\nresamples = 100\n",
    )
    .unwrap();
    let run_dir = dir.path().join("run");
    ok(&["gen-data", "--out", p(&data), "--patients", "30", "--trials", "4", "--seed", "3"]);
    ok(&["train", "--data", p(&data), "--out", p(&run_dir), "--config", p(&config), "--seed", "3"]);
    Fixture {
        data,
        config,
        run: run_dir,
        _dir: dir,
    }
}

fn first_pair(data: &Path) -> (String, String) {
    let line = fs::read_to_string(data.join("pairs.jsonl")).unwrap();
    let pair: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    (
        pair["patient_id"].as_str().unwrap().to_string(),
        pair["criterion_id"].as_str().unwrap().to_string(),
    )
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["gen-data", "--out", "x", "--colour", "blue"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_inputs_are_usage_errors() {
    let dir = TempDir::new().unwrap();
    let out = run(&["train", "--data", p(&dir.path().join("absent")), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error: kind=usage message="), "{stderr}");
    assert!(!dir.path().join("model.ckpt").exists());

    let out = run(&["gen-data", "--out", p(dir.path()), "--config", p(&dir.path().join("none.toml"))]);
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "epochz = 3\n").unwrap();
    let out = run(&["gen-data", "--out", p(&dir.path().join("d")), "--config", p(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("d").exists());
}

#[test]
fn pipeline_end_to_end() {
    let f = fixture();
    let history = fs::read_to_string(f.run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(history.starts_with("epoch,train_loss,val_accuracy,beam_width\n"));

    let ckpt = f.run.join("model.ckpt");
    let eval_dir = f.run.join("eval");
    let table = ok(&["eval", "--checkpoint", p(&ckpt), "--data", p(&f.data), "--out", p(&eval_dir), "--config", p(&f.config)]);
    assert!(table.contains("criteria   accuracy"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_dir.join("report.json")).unwrap()).unwrap();
    for key in ["criteria_accuracy", "criteria_f1"] {
        let m = &report[key];
        let (lo, mean, hi) = (m["ci_low"].as_f64().unwrap(), m["mean"].as_f64().unwrap(), m["ci_high"].as_f64().unwrap());
        assert!(0.0 <= lo && lo <= mean && mean <= hi && hi <= 1.0, "{m}");
    }
    let n_pred = fs::read_to_string(eval_dir.join("predictions.jsonl")).unwrap().lines().count();
    assert_eq!(n_pred as u64, report["pairs"].as_u64().unwrap());
    let strata: u64 = report["strata"].as_array().unwrap().iter().map(|s| s["pairs"].as_u64().unwrap()).sum();
    assert_eq!(strata, report["pairs"].as_u64().unwrap());

    let (patient, criterion) = first_pair(&f.data);
    let line = ok(&["match", "--checkpoint", p(&ckpt), "--data", p(&f.data), "--patient", &patient, "--criterion", &criterion]);
    let record: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    let total: f64 = record["probs"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);
    assert!(record.get("explanation").is_none());

    let dot = ok(&["explain", "--checkpoint", p(&ckpt), "--data", p(&f.data), "--patient", &patient, "--criterion", &criterion, "--format", "dot"]);
    assert!(dot.starts_with("digraph explanation {"));
    assert!(dot.trim_end().ends_with('}'));
    let text = ok(&["explain", "--checkpoint", p(&ckpt), "--data", p(&f.data), "--patient", &patient, "--criterion", &criterion, "--format", "text"]);
    assert!(text.starts_with(&format!("{patient} / {criterion}: ")));

    let out = run(&["match", "--checkpoint", p(&ckpt), "--data", p(&f.data), "--patient", "nobody", "--criterion", &criterion]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    assert!(stderr.starts_with("error: kind=lookup message="), "{stderr}");
}

#[test]
fn explain_json_matches_published_schema() {
    let f = fixture();
    let schema: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/schemas/prediction.schema.json")).unwrap())
            .unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let ckpt = f.run.join("model.ckpt");
    let pairs = fs::read_to_string(f.data.join("pairs.jsonl")).unwrap();
    for line in pairs.lines().step_by(17).take(5) {
        let pair: serde_json::Value = serde_json::from_str(line).unwrap();
        let (patient, criterion) = (pair["patient_id"].as_str().unwrap(), pair["criterion_id"].as_str().unwrap());
        for command in ["explain", "match"] {
            let out = ok(&[command, "--checkpoint", p(&ckpt), "--data", p(&f.data), "--patient", patient, "--criterion", criterion]);
            let value: serde_json::Value = serde_json::from_str(&out).unwrap();
            let errors: Vec<String> = validator.iter_errors(&value).map(|e| e.to_string()).collect();
            assert!(errors.is_empty(), "{command}: {errors:?}");
        }
    }
    let broken = serde_json::json!({"patient_id": "P", "trial_id": "T", "criterion_id": "C", "probs": [0.5, 0.5], "predicted_class": "match"});
    assert!(!validator.is_valid(&broken));
}

#[test]
fn same_seed_gives_identical_files() {
    let a = fixture();
    let b = fixture();
    for file in ["ontology.txt", "patients.jsonl", "criteria.jsonl", "pairs.jsonl", "truth.jsonl"] {
        assert_eq!(fs::read(a.data.join(file)).unwrap(), fs::read(b.data.join(file)).unwrap(), "{file}");
    }
    for file in ["model.ckpt", "history.csv"] {
        assert_eq!(fs::read(a.run.join(file)).unwrap(), fs::read(b.run.join(file)).unwrap(), "{file}");
    }
    let eval = |f: &Fixture| {
        let out = f.run.join("eval-det");
        ok(&["eval", "--checkpoint", p(&f.run.join("model.ckpt")), "--data", p(&f.data), "--out", p(&out), "--config", p(&f.config)]);
        fs::read(out.join("report.json")).unwrap()
    };
    assert_eq!(eval(&a), eval(&b));
}

#[test]
fn workers_do_not_change_training() {
    let f = fixture();
    let other = f.run.with_file_name("run-workers");
    ok(&["train", "--data", p(&f.data), "--out", p(&other), "--config", p(&f.config), "--seed", "3", "--workers", "3"]);
    assert_eq!(fs::read(f.run.join("history.csv")).unwrap(), fs::read(other.join("history.csv")).unwrap());
    // The checkpoint records the worker count, so compare what it predicts instead.
    let predictions = |run: &Path| {
        let out = run.join("eval-all");
        ok(&["eval", "--checkpoint", p(&run.join("model.ckpt")), "--data", p(&f.data), "--out", p(&out), "--split", "all", "--config", p(&f.config)]);
        fs::read(out.join("predictions.jsonl")).unwrap()
    };
    assert_eq!(predictions(&f.run), predictions(&other));
}

#[test]
fn flags_override_the_config_file() {
    let f = fixture();
    let other = f.run.with_file_name("run-one-epoch");
    ok(&["train", "--data", p(&f.data), "--out", p(&other), "--config", p(&f.config), "--epochs", "1"]);
    assert_eq!(fs::read_to_string(other.join("history.csv")).unwrap().lines().count(), 2);
}

#[test]
fn embed_writes_a_reloadable_table() {
    let dir = TempDir::new().unwrap();
    let descriptions = dir.path().join("descriptions.txt");
    fs::write(&descriptions, "chronic kidney disease\ntype 2 diabetes\n\nchronic kidney disease\n").unwrap();
    let hashed = dir.path().join("hashed.tsv");
    ok(&["embed", "--descriptions", p(&descriptions), "--out", p(&hashed), "--dim", "6", "--seed", "1"]);
    let body = fs::read_to_string(&hashed).unwrap();
    let rows: Vec<&str> = body.lines().collect();
    assert_eq!(rows.len(), 2);
    for row in &rows {
        let (_, values) = row.split_once('\t').unwrap();
        let v: Vec<f64> = values.split(' ').map(|x| x.parse().unwrap()).collect();
        assert_eq!(v.len(), 6);
        assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
    }
    let copied = dir.path().join("copied.tsv");
    ok(&["embed", "--descriptions", p(&descriptions), "--out", p(&copied), "--embeddings", p(&hashed)]);
    assert_eq!(fs::read(&hashed).unwrap(), fs::read(&copied).unwrap());

    fs::write(&descriptions, "never seen\n").unwrap();
    let out = run(&["embed", "--descriptions", p(&descriptions), "--out", p(&copied), "--embeddings", p(&hashed)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: kind=missing-embedding"));
}
