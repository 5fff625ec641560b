use std::path::Path;
use std::process::{Command, Output};

fn simfair(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simfair"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_split(dir: &Path) {
    std::fs::write(
        dir.join("world.json"),
        r#"{"stations": 24, "days": 40, "time_stride": 2}"#,
    )
    .unwrap();
    let o = simfair(
        &[
            "world",
            "gen",
            "--config",
            "world.json",
            "--seed",
            "1",
            "--out",
            "world.csv",
        ],
        dir,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = simfair(
        &[
            "split",
            "--kind",
            "geo-region",
            "--in",
            "world.csv",
            "--out-train",
            "train.csv",
            "--out-test",
            "test.csv",
            "--out-test-features",
            "test_x.csv",
        ],
        dir,
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn train_then_eval_writes_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_split(d);
    let o = simfair(
        &[
            "train",
            "--strategy",
            "basenet",
            "--train",
            "train.csv",
            "--test-features",
            "test_x.csv",
            "--epochs",
            "2",
            "--out",
            "model.json",
            "--history",
            "history.jsonl",
        ],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let history = std::fs::read_to_string(d.join("history.jsonl")).unwrap();
    assert!(history.lines().count() >= 2);

    let o = simfair(
        &[
            "eval",
            "--model",
            "model.json",
            "--test",
            "test.csv",
            "--out",
            "eval.json",
        ],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("eval.json")).unwrap()).unwrap();
    assert_eq!(v["schema_version"], 1);
    let m = &v["metrics"];
    assert!(m["rmse"].as_f64().unwrap() > 0.0);
    assert!(m["fairness"].as_f64().unwrap() >= 0.0);
    assert!(!m["per_location"].as_array().unwrap().is_empty());
}

#[test]
fn simulation_strategies_need_a_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_split(d);
    let o = simfair(
        &[
            "train",
            "--strategy",
            "simfair",
            "--train",
            "train.csv",
            "--test-features",
            "test_x.csv",
            "--out",
            "model.json",
        ],
        d,
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--chain"), "{}", stderr(&o));
    assert!(!d.join("model.json").exists());
}

#[test]
fn dry_run_lists_the_default_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let o = simfair(&["experiment", "--dry-run"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("105 runs"), "{out}");
    assert!(out.contains("geo-region / basenet / seed 0"), "{out}");
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(simfair(&["train"], d).status.code(), Some(1));
    assert_eq!(
        simfair(&["experiment", "--jobs", "many"], d).status.code(),
        Some(1)
    );
    let o = simfair(
        &[
            "eval",
            "--model",
            "nope.json",
            "--test",
            "nope.csv",
            "--out",
            "e.json",
        ],
        d,
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.json"), "{}", stderr(&o));
    assert_eq!(simfair(&["--help"], d).status.code(), Some(0));
}
