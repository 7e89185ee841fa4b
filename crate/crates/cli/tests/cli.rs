use std::path::Path;
use std::process::{Command, Output};

fn m2rnn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_m2rnn"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn paramcount_succeeds_and_writes_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let o = m2rnn(tmp.path(), &["paramcount", "--out", "o"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("o/paramcount.csv")).unwrap();
    assert!(csv.contains("multi-value,4,64,16,256,"));
    assert!(csv
        .lines()
        .any(|l| l.starts_with("multi-value,4,64,16,256,") && l.contains(",82944,")));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = m2rnn(tmp.path(), &["paramcount", "--override", "no_such_key=1"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&m2rnn(tmp.path(), &["frobnicate"])), 2);
}

#[test]
fn config_file_is_read() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("run.toml"), "pc_heads = [2]\npc_d_models = [64]\n").unwrap();
    let o = m2rnn(tmp.path(), &["paramcount", "--config", "run.toml", "--out", "o"]);
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(tmp.path().join("o/paramcount.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
}

#[test]
fn corrupted_backward_fails_gradcheck() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["gradcheck", "--out", "o", "--override", "gradcheck_seeds=1"];
    assert_eq!(code(&m2rnn(tmp.path(), &args)), 0);
    let o = m2rnn(
        tmp.path(),
        &[&args[..], &["--override", "corrupt_backward=true"]].concat(),
    );
    assert_eq!(code(&o), 1);
    let report = std::fs::read_to_string(tmp.path().join("o/gradcheck.txt")).unwrap();
    assert!(report.contains("dW"));
}

#[test]
fn tp_check_logs_rounds_for_both_schemes() {
    let tmp = tempfile::tempdir().unwrap();
    for scheme in ["topology-independent", "topology-aware"] {
        let o = m2rnn(
            tmp.path(),
            &[
                "tp-check",
                "--out",
                scheme,
                "--override",
                &format!("tp_scheme=\"{scheme}\""),
            ],
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
        assert!(tmp.path().join(scheme).join("comm_log.csv").exists());
    }
}

#[test]
fn train_then_evaluate_lengths() {
    let tmp = tempfile::tempdir().unwrap();
    let train = [
        "train",
        "--out",
        "o",
        "--override",
        "steps=10",
        "--override",
        "train_len=6",
        "--override",
        "batch=4",
    ];
    let o = m2rnn(tmp.path(), &train);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(tmp.path().join("o/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().filter(|l| l.contains(",train,")).count(), 10);
    assert!(tmp.path().join("o/checkpoint.m2rn").exists());

    let eval = [
        "eval-lengths",
        "--out",
        "o",
        "--override",
        "eval_lengths=[6, 12]",
        "--override",
        "eval_count=16",
    ];
    assert_eq!(code(&m2rnn(tmp.path(), &eval)), 0);
    let csv = std::fs::read_to_string(tmp.path().join("o/eval_lengths.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn evaluating_with_another_architecture_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let train = [
        "train",
        "--out",
        "o",
        "--override",
        "steps=2",
        "--override",
        "train_len=4",
        "--override",
        "batch=2",
    ];
    assert_eq!(code(&m2rnn(tmp.path(), &train)), 0);
    let o = m2rnn(tmp.path(), &["eval-lengths", "--out", "o", "--override", "heads=2"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_checkpoint_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&m2rnn(tmp.path(), &["eval-lengths", "--out", "empty"])), 2);
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = m2rnn_cli::RunConfig::load(Some(&path), &[]).unwrap();
            cfg.model_spec(6, 6).unwrap();
            seen += 1;
        }
    }
    assert_eq!(seen, 3);
}
