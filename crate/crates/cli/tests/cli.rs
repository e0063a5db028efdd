use std::path::Path;
use std::process::{Command, Output};

fn popviz(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_popviz"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn popviz")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = popviz(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn no_arguments_prints_usage_and_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = popviz(dir.path(), &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = popviz(dir.path(), &["score", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn help_and_version_exit_0() {
    let dir = tempfile::tempdir().unwrap();
    assert!(ok(dir.path(), &["--help"]).contains("experiment"));
    assert!(ok(dir.path(), &["--version"]).contains("popviz"));
}

#[test]
fn tsne_out_of_sample_is_a_usage_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = popviz(
        dir.path(),
        &["project", "--method", "tsne", "--mode", "oos", "--clean", "a", "--adv", "b",
          "--out-clean", "c", "--out-adv", "d"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("t-SNE"));
}

#[test]
fn missing_input_file_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = popviz(
        dir.path(),
        &["score", "--clean", "nope.vrpm", "--clean-labels", "l", "--adv", "a", "--adv-preds", "p"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.vrpm"));
}

#[test]
fn stage_commands_chain_into_a_score_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--out", "train", "--per-class", "12", "--seed", "3"]);
    ok(d, &["synth", "--out", "test", "--split", "test", "--per-class", "6", "--seed", "3"]);
    ok(d, &["train", "--data", "train", "--out", "model", "--epochs", "2", "--seed", "3"]);
    let msg = ok(d, &["attack", "--model", "model", "--data", "test", "--attack", "fgsm", "--all",
                      "--out", "atk"]);
    assert!(msg.contains("success rate"));
    ok(d, &["extract", "--model", "model", "--images", "atk/images.vrpm", "--out", "r.vrpm"]);
    ok(d, &["extract", "--model", "model", "--images", "atk/x_adv.vrpm", "--out", "ra.vrpm"]);
    ok(d, &["project", "--method", "pca", "--mode", "oos", "--clean", "r.vrpm", "--adv", "ra.vrpm",
            "--out-clean", "z.vrpm", "--out-adv", "za.vrpm"]);
    let score: f64 = ok(d, &["score", "--clean", "z.vrpm", "--clean-labels", "atk/labels.vrpm",
                             "--adv", "za.vrpm", "--adv-preds", "atk/predictions.vrpm"])
        .trim()
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&score));
    ok(d, &["plot", "--clean", "z.vrpm", "--clean-labels", "atk/labels.vrpm", "--adv", "za.vrpm",
            "--out", "p.svg"]);
    let svg = std::fs::read_to_string(d.join("p.svg")).unwrap();
    assert_eq!(svg.matches("<circle").count(), 120);
}

#[test]
fn experiment_writes_table_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = r#"{
        "dataset": {"kind": "synth", "spec": {"per_class": 10}, "test_per_class": 4},
        "train": {"epochs": 2},
        "attacks": [{"kind": "fgsm", "epsilon": 0.03137254901960784,
                     "alpha": 0.00784313725490196, "iterations": 1}],
        "projections": ["pca-coupled", "pca-oos"],
        "plots": {"combos": ["pca-coupled"]},
        "trials": 2
    }"#;
    std::fs::write(d.join("cfg.json"), cfg).unwrap();
    let table = ok(d, &["experiment", "--config", "cfg.json", "--out", "run", "--seed", "4"]);
    assert!(table.starts_with("method,"), "{table}");
    assert_eq!(table.lines().count(), 3);
    assert!(d.join("run/scores.csv").is_file());
    assert!(d.join("run/manifest.json").is_file());
    assert!(d.join("run/plots/pca-coupled/clean.svg").is_file());
}
