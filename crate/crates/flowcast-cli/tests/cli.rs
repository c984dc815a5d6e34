//! End-to-end checks of the binary: the synth→train→eval pipeline, exit
//! codes, and stream discipline (JSON on stdout, logs on stderr).

use std::path::Path;
use std::process::Command;

fn flowcast() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flowcast"))
}

#[test]
fn synth_train_eval_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("run");

    let synth = flowcast()
        .args(["synth", "--seed", "3", "--rows", "3", "--cols", "3"])
        .args(["--steps", "260", "--regimes", "2", "--interval-minutes", "180"])
        .arg("--out")
        .arg(&data)
        .output()
        .unwrap();
    assert!(synth.status.success(), "{}", String::from_utf8_lossy(&synth.stderr));
    assert!(data.join("meta.json").exists());
    assert!(data.join("flow.bin").exists());
    assert!(data.join("labels.json").exists());

    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"embedding_dim": 8, "clusters": 2, "batch_size": 8, "max_epochs": 2, "seed": 1}"#,
    )
    .unwrap();

    let train = flowcast()
        .arg("train")
        .arg("--config")
        .arg(&config)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    for artifact in ["checkpoint.bin", "history.csv", "metrics.json", "assignments.csv"] {
        assert!(out.join(artifact).exists(), "missing {artifact}");
    }

    let eval = flowcast()
        .arg("eval")
        .arg("--checkpoint")
        .arg(out.join("checkpoint.bin"))
        .arg("--data")
        .arg(&data)
        .args(["--split", "test"])
        .output()
        .unwrap();
    assert!(eval.status.success());
    // stdout must be pure JSON
    let metrics: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert!(metrics["mae_in"].as_f64().unwrap() >= 0.0);

    let inspect = flowcast()
        .arg("augment-inspect")
        .arg("--checkpoint")
        .arg(out.join("checkpoint.bin"))
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("inspect"))
        .output()
        .unwrap();
    assert!(inspect.status.success(), "{}", String::from_utf8_lossy(&inspect.stderr));
    for artifact in [
        "relevance.csv",
        "similarity.csv",
        "mask_prob_hist.csv",
        "removal_prob_hist.csv",
        "addition_prob_hist.csv",
    ] {
        assert!(dir.path().join("inspect").join(artifact).exists(), "missing {artifact}");
    }
}

#[test]
fn identical_invocations_produce_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    flowcast()
        .args(["synth", "--seed", "5", "--rows", "2", "--cols", "3"])
        .args(["--steps", "220", "--regimes", "2", "--interval-minutes", "180"])
        .arg("--out")
        .arg(&data)
        .status()
        .unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"embedding_dim": 8, "clusters": 2, "batch_size": 8, "max_epochs": 2, "seed": 4}"#,
    )
    .unwrap();
    let run = |out: &Path| {
        let status = flowcast()
            .arg("train")
            .arg("--config")
            .arg(&config)
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&a);
    run(&b);
    for artifact in ["history.csv", "checkpoint.bin", "metrics.json", "assignments.csv"] {
        let ba = std::fs::read(a.join(artifact)).unwrap();
        let bb = std::fs::read(b.join(artifact)).unwrap();
        assert_eq!(ba, bb, "{artifact} differs between identical runs");
    }
}

#[test]
fn gradcheck_prints_error_and_succeeds() {
    let out = flowcast().args(["gradcheck", "--seed", "42"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("max relative error"), "{text}");
}

#[test]
fn unknown_subcommand_exits_2() {
    let out = flowcast().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_flag_exits_2() {
    let out = flowcast().args(["synth", "--bogus", "1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = flowcast()
        .arg("train")
        .arg("--config")
        .arg(dir.path().join("nope.json"))
        .arg("--data")
        .arg(dir.path())
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn missing_data_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, "{}").unwrap();
    let out = flowcast()
        .arg("train")
        .arg("--config")
        .arg(&config)
        .arg("--data")
        .arg(dir.path().join("absent"))
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
