//! End-to-end tests of the `fedcmd` binary: exit codes, file outputs,
//! and the report/partition/run contracts.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fedcmd(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedcmd"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, strategy: &str, out: &str) -> String {
    let text = format!(
        r#"strategy = "{strategy}"
rounds = 8
rho = 0.25
gamma = 0.5
local_epochs = 2
batch_size = 16
lr = 0.05
num_clients = 4
alpha = 0.5
eval_every = 4
model = "dense-12"

[seeds]
master = 7
data = 11
sampling = 13

[dataset.synthetic]
classes = 3
samples_per_class = 40
input_shape = [6]
separation = 3.0

[output]
dir = "{out}"
"#
    );
    fs::write(dir.join(name), &text).unwrap();
    name.to_string()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn run_writes_report_with_selected_layer_and_all_rounds() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "exp.toml", "fedcmd", "out");
    let out = fedcmd(&["run", "--config", "exp.toml"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/report.json")).unwrap())
            .unwrap();
    assert_eq!(report["rounds"].as_array().unwrap().len(), 8);
    assert!(report["selected_layer"].is_string());
    assert!(report["vote_ledger"]["final"].is_string());
    let csv = fs::read_to_string(dir.path().join("out/rounds.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9); // header + 8 rounds
}

#[test]
fn local_only_report_has_zero_byte_columns() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "exp.toml", "local-only", "out");
    let out = fedcmd(&["run", "--config", "exp.toml"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(dir.path().join("out/rounds.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[7], "0", "bytes_up: {line}");
        assert_eq!(cols[8], "0", "bytes_down: {line}");
    }
}

#[test]
fn dry_run_validates_and_prints_forecast_without_training() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "exp.toml", "fedcmd", "out");
    let out = fedcmd(&["run", "--config", "exp.toml", "--dry-run"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("config ok"));
    assert!(text.contains("4*2*"), "forecast formula missing: {text}");
    assert!(!dir.path().join("out/report.json").exists());
}

#[test]
fn missing_dataset_path_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let config = r#"
[dataset.idx]
images = "no-such-images.idx"
labels = "no-such-labels.idx"
"#;
    fs::write(dir.path().join("exp.toml"), config).unwrap();
    let out = fedcmd(&["run", "--config", "exp.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("no-such-images.idx"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let config = r#"
learning_rate_typo = 0.1

[dataset.synthetic]
classes = 3
samples_per_class = 10
input_shape = [4]
separation = 2.0
"#;
    fs::write(dir.path().join("exp.toml"), config).unwrap();
    let out = fedcmd(&["run", "--config", "exp.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("learning_rate_typo"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn unknown_strategy_override_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "exp.toml", "fedcmd", "out");
    let out = fedcmd(
        &["run", "--config", "exp.toml", "--strategy", "fedprox"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("fedprox"));
}

#[test]
fn partition_is_reproducible_and_reusable() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "exp.toml", "fedcmd", "out");

    let out = fedcmd(
        &["partition", "--config", "exp.toml", "--out", "p1"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("client   0"));
    let again = fedcmd(
        &["partition", "--config", "exp.toml", "--out", "p2"],
        dir.path(),
    );
    assert!(again.status.success());
    let a = fs::read(dir.path().join("p1/plan.json")).unwrap();
    let b = fs::read(dir.path().join("p2/plan.json")).unwrap();
    assert_eq!(a, b, "plan files differ between reruns");

    let plan: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("p1/plan.json")).unwrap())
            .unwrap();
    assert_eq!(plan["assignment"].as_array().unwrap().len(), 4);

    // a run with the stored plan matches a plan-free run bit for bit
    let with_plan = fedcmd(
        &[
            "run",
            "--config",
            "exp.toml",
            "--plan",
            "p1/plan.json",
            "--out",
            "r1",
        ],
        dir.path(),
    );
    assert!(with_plan.status.success(), "{}", stderr(&with_plan));
    let without = fedcmd(&["run", "--config", "exp.toml", "--out", "r2"], dir.path());
    assert!(without.status.success());
    // identical up to the output directory recorded in the config echo
    let mut a: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("r1/report.json")).unwrap())
            .unwrap();
    let mut b: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("r2/report.json")).unwrap())
            .unwrap();
    a["config"]["output"] = serde_json::Value::Null;
    b["config"]["output"] = serde_json::Value::Null;
    assert_eq!(a, b);
}

#[test]
fn report_compares_strategies_and_emits_plot_csvs() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "fedcmd.toml", "fedcmd", "out-fedcmd");
    write_config(dir.path(), "fedavg.toml", "fedavg", "out-fedavg");
    assert!(fedcmd(&["run", "--config", "fedcmd.toml"], dir.path())
        .status
        .success());
    assert!(fedcmd(&["run", "--config", "fedavg.toml"], dir.path())
        .status
        .success());

    let out = fedcmd(
        &[
            "report",
            "out-fedcmd/report.json",
            "out-fedavg/report.json",
            "--out",
            "cmp",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let table = fs::read_to_string(dir.path().join("cmp/comparison.md")).unwrap();
    assert_eq!(table.lines().count(), 4); // header + separator + 2 strategies
    assert!(table.contains("fedcmd") && table.contains("fedavg"));

    // one row per class per strategy, accuracies within [0, 1]
    let class_csv = fs::read_to_string(dir.path().join("cmp/per_class_accuracy.csv")).unwrap();
    assert_eq!(class_csv.lines().count(), 1 + 2 * 3);
    for line in class_csv.lines().skip(1) {
        let acc: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    let acc_csv = fs::read_to_string(dir.path().join("cmp/accuracy_vs_round.csv")).unwrap();
    assert!(acc_csv.lines().count() > 1);
    let bytes_csv = fs::read_to_string(dir.path().join("cmp/bytes_vs_round.csv")).unwrap();
    assert_eq!(bytes_csv.lines().count(), 1 + 2 * 8);
}

#[test]
fn single_report_comparison_works() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "exp.toml", "fedavg", "out");
    assert!(fedcmd(&["run", "--config", "exp.toml"], dir.path())
        .status
        .success());
    let out = fedcmd(
        &["report", "out/report.json", "--out", "cmp"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("fedavg"));
}

#[test]
fn mixed_dataset_reports_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "a.toml", "fedavg", "out-a");
    // a different synthetic dataset
    let other = r#"strategy = "fedavg"
rounds = 4
gamma = 0.5
local_epochs = 1
batch_size = 16
lr = 0.05
num_clients = 4
alpha = 0.5
eval_every = 4
model = "dense-12"

[dataset.synthetic]
classes = 4
samples_per_class = 40
input_shape = [6]
separation = 3.0

[output]
dir = "out-b"
"#;
    fs::write(dir.path().join("b.toml"), other).unwrap();
    assert!(fedcmd(&["run", "--config", "a.toml"], dir.path()).status.success());
    assert!(fedcmd(&["run", "--config", "b.toml"], dir.path()).status.success());
    let out = fedcmd(
        &["report", "out-a/report.json", "out-b/report.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("different datasets"));
}

#[test]
fn checkpoint_and_similarity_flags_write_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "exp.toml", "fedcmd", "out");
    let out = fedcmd(
        &[
            "run",
            "--config",
            "exp.toml",
            "--checkpoint-every",
            "4",
            "--dump-similarity",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(dir.path().join("out/checkpoints/round-0004").is_dir());
    assert!(dir.path().join("out/checkpoints/round-0008").is_dir());
    // phase 2 spans rounds 3..=8 for rho=0.25, rounds=8
    assert!(dir.path().join("out/similarity/round-0003.csv").exists());
    assert!(dir.path().join("out/similarity/round-0008.csv").exists());
}

#[test]
fn config_round_trips_through_toml() {
    let dir = tempfile::tempdir().unwrap();
    let name = write_config(dir.path(), "exp.toml", "fedcmd", "out");
    let text = fs::read_to_string(dir.path().join(name)).unwrap();
    let parsed: fedcmd_core::orchestrator::RunConfig = toml::from_str(&text).unwrap();
    let serialized = toml::to_string(&parsed).unwrap();
    let reparsed: fedcmd_core::orchestrator::RunConfig = toml::from_str(&serialized).unwrap();
    assert_eq!(reparsed, parsed);
}

#[test]
fn exploding_gradients_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = r#"strategy = "fedavg"
rounds = 2
gamma = 1.0
local_epochs = 2
batch_size = 8
lr = 1e30
num_clients = 2
alpha = 1.0
eval_every = 2
model = "dense-8"

[dataset.synthetic]
classes = 2
samples_per_class = 20
input_shape = [4]
separation = 2.0

[output]
dir = "out"
"#;
    fs::write(dir.path().join("exp.toml"), config).unwrap();
    let out = fedcmd(&["run", "--config", "exp.toml"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("non-finite gradient"), "{}", stderr(&out));
}

#[test]
fn seed_override_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "exp.toml", "fedavg", "out");
    assert!(fedcmd(
        &["run", "--config", "exp.toml", "--seed", "1", "--out", "s1"],
        dir.path()
    )
    .status
    .success());
    assert!(fedcmd(
        &["run", "--config", "exp.toml", "--seed", "2", "--out", "s2"],
        dir.path()
    )
    .status
    .success());
    let a: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("s1/report.json")).unwrap())
            .unwrap();
    let b: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("s2/report.json")).unwrap())
            .unwrap();
    assert_eq!(a["config"]["seeds"]["master"], 1);
    assert_eq!(b["config"]["seeds"]["master"], 2);
    assert_ne!(
        a["final_per_client_accuracy"],
        b["final_per_client_accuracy"]
    );
}
