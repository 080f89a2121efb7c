//! The `optzoo` binary: output files and exit codes.

use std::path::Path;
use std::process::Command;

use optzoo_cli::metrics::read_metrics;
use optzoo_cli::{ExperimentConfig, METRICS_COLUMNS};

fn optzoo(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_optzoo")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

fn tiny_train(out: &Path, extra: &str) -> String {
    format!(
        "experiment = train\nseed = 5\noutput.dir = {}\ndata.source = synthetic\ndata.projection_dim = 12\n\
         data.n_train = 120\ndata.n_test = 40\nmodel.hidden = 8\ntrain.batch_size = 32\n{extra}",
        out.display()
    )
}

#[test]
fn train_writes_metrics_config_and_weights() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), "t.cfg", &tiny_train(&out, "train.epochs = 2\n"));
    let res = optzoo(&["train", &cfg]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let rows = read_metrics(&out.join("metrics.csv")).unwrap();
    // 4 steps per epoch plus one summary row each.
    assert_eq!(rows.len(), 2 * (4 + 1));
    assert_eq!(rows.iter().filter(|r| r.test_accuracy.is_some()).count(), 2);
    assert!(rows.windows(2).all(|w| w[0].step <= w[1].step));
    for name in ["config.txt", "weights_final.txt", "weights_eval.txt"] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    let echoed = std::fs::read_to_string(out.join("config.txt")).unwrap();
    let reparsed = ExperimentConfig::parse(&echoed).unwrap();
    assert_eq!(reparsed, ExperimentConfig::from_file(Path::new(&cfg)).unwrap());
}

#[test]
fn zero_epochs_give_a_header_only_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), "t.cfg", &tiny_train(&out, "train.epochs = 0\n"));
    assert!(optzoo(&["train", &cfg]).status.success());
    let text = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(text.trim_end(), METRICS_COLUMNS.join(","));
}

#[test]
fn configuration_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cases = [
        ("unknown_key", tiny_train(&out, "optimiser.name = adamw\n")),
        ("missing_seed", "experiment = train\n".to_string()),
        ("bad_optimizer", tiny_train(&out, "optimizer.name = lion\n")),
        ("unused_param", tiny_train(&out, "optimizer.name = sgd\noptimizer.beta2 = 0.9\n")),
        ("duplicate", tiny_train(&out, "train.epochs = 1\ntrain.epochs = 2\n")),
        ("wrong_kind", "experiment = rosenbrock\nseed = 0\n".to_string()),
    ];
    for (name, body) in cases {
        let cfg = write_config(dir.path(), &format!("{name}.cfg"), &body);
        let res = optzoo(&["train", &cfg]);
        assert_eq!(res.status.code(), Some(2), "{name}: {}", String::from_utf8_lossy(&res.stderr));
    }
    let res = optzoo(&["train", dir.path().join("absent.cfg").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(3), "unreadable config is an ingestion error");
}

#[test]
fn divergence_exits_with_code_4_and_keeps_partial_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let body = tiny_train(&out, "train.epochs = 3\noptimizer.name = sgd\noptimizer.lr = 1e200\n");
    let cfg = write_config(dir.path(), "t.cfg", &body);
    let res = optzoo(&["train", &cfg]);
    assert_eq!(res.status.code(), Some(4), "{}", String::from_utf8_lossy(&res.stderr));
    let text = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(text.starts_with(&METRICS_COLUMNS.join(",")));
    assert!(text.lines().count() >= 2, "rows before the divergence are flushed");
}

#[test]
fn missing_cifar_directory_is_an_ingestion_error() {
    let dir = tempfile::tempdir().unwrap();
    let res = optzoo(&[
        "project",
        dir.path().join("nowhere").to_str().unwrap(),
        dir.path().join("p.bin").to_str().unwrap(),
        "--seed",
        "1",
    ]);
    assert_eq!(res.status.code(), Some(3));
}

#[test]
fn check_passes_and_detects_an_injected_fault() {
    let ok = optzoo(&["check"]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stdout));
    let broken = optzoo(&["check", "--inject-fault", "duality"]);
    assert_eq!(broken.status.code(), Some(5));
    let stderr = String::from_utf8_lossy(&broken.stderr);
    assert!(stderr.contains("modular.duality_exactness"), "{stderr}");
}

#[test]
fn rosenbrock_writes_every_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rb");
    let body = format!("experiment = rosenbrock\nseed = 0\noutput.dir = {}\nrosenbrock.steps = 50\n", out.display());
    let cfg = write_config(dir.path(), "r.cfg", &body);
    assert!(optzoo(&["rosenbrock", &cfg]).status.success());
    for name in ["sgd", "adamw", "shampoo", "prodigy"] {
        for k in 0..4 {
            let path = out.join(format!("{name}_start{k}.csv"));
            let text = std::fs::read_to_string(&path).unwrap();
            assert!(text.starts_with("step,x,y,f,step_size"), "{}", path.display());
        }
    }
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 16);
}
