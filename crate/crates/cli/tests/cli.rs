use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hugnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hugnn"))
        .args(args)
        .env("HUGNN_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = hugnn(args);
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

fn synth(dir: &Path, p_same: &str) {
    ok(&[
        "synth",
        "--n",
        "120",
        "--classes",
        "2",
        "--degree",
        "4",
        "--p",
        p_same,
        "--seed",
        "1",
        "--out",
        p(dir),
    ]);
}

const SMALL: &[&str] = &["--epochs", "6", "--hidden-dim", "8", "--init-epochs", "5"];

fn train(data: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec!["train", "--data", p(data), "--out", p(out)];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ok(&args)
}

fn without_wall_clock(metrics: &str) -> Vec<serde_json::Value> {
    metrics
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_ms");
            v
        })
        .collect()
}

#[test]
fn synth_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    synth(&a, "0.2");
    synth(&b, "0.2");
    for f in ["edges.tsv", "features.csv", "labels.csv", "meta.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn bad_p_fails_before_writing() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path().join("never");
    let out = hugnn(&[
        "synth",
        "--n",
        "100",
        "--classes",
        "2",
        "--degree",
        "4",
        "--p",
        "1.5",
        "--out",
        p(&dir),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.exists());
}

#[test]
fn missing_bundle_is_a_data_error() {
    let t = tempfile::tempdir().unwrap();
    let out = hugnn(&[
        "train",
        "--data",
        p(&t.path().join("absent")),
        "--out",
        p(&t.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = hugnn(&["train", "--ablate", "everything"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_eval_perturb_round() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    let run = t.path().join("run");
    synth(&data, "0.9");
    train(&data, &run, &["--ablate", "community"]);
    for f in [
        "config.json",
        "metrics.jsonl",
        "summary.json",
        "nodes.json",
        "ckpt-best/manifest.json",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    let config: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["train"]["hyper"]["ablate"], "community");
    let nodes: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("nodes.json")).unwrap()).unwrap();
    assert!(nodes["nodes"].as_array().unwrap().iter().all(|n| n["lambda"][1] == 0.0));

    let ckpt = run.join("ckpt-best");
    let eval = ok(&["eval", "--ckpt", p(&ckpt), "--data", p(&data)]);
    let same = ok(&[
        "perturb",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&data),
        "--kind",
        "drop_edge",
        "--ratio",
        "0.0",
    ]);
    assert_eq!(eval, same);
    let noisy = ok(&[
        "perturb",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&data),
        "--kind",
        "feature_noise",
        "--eps",
        "0.5",
        "--seed",
        "2",
    ]);
    let v: serde_json::Value = serde_json::from_str(&noisy).unwrap();
    assert!(v["test_acc"].as_f64().unwrap() >= 0.0);
}

#[test]
fn config_reproduces_metrics() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    let first = t.path().join("first");
    synth(&data, "0.3");
    train(&data, &first, &["--seed", "4"]);
    let second = t.path().join("second");
    ok(&["train", "--config", p(&first.join("config.json")), "--out", p(&second)]);
    let a = fs::read_to_string(first.join("metrics.jsonl")).unwrap();
    let b = fs::read_to_string(second.join("metrics.jsonl")).unwrap();
    assert_eq!(without_wall_clock(&a), without_wall_clock(&b));
}

#[test]
fn check_reports_pass_lines() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, "0.2");
    let out = ok(&["check", "--data", p(&data), "--trials", "3"]);
    assert!(out.lines().any(|l| l.starts_with("op-check pass")), "{out}");
    assert!(
        out.lines()
            .any(|l| l.starts_with("grad-check pass") && l.contains("max_rel_error=")),
        "{out}"
    );
    assert!(out.lines().any(|l| l.starts_with("probe")), "{out}");
}

#[test]
fn sweep_writes_nine_rows() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    let out = t.path().join("sweep");
    synth(&data, "0.2");
    let mut args = vec!["sweep", "--data", p(&data), "--out", p(&out)];
    args.extend_from_slice(&["--epochs", "2", "--hidden-dim", "4", "--init-epochs", "2"]);
    ok(&args);
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "beta1,beta2,best_epoch,val_acc,test_acc,val_ece,test_ece,frontier"
    );
    assert_eq!(lines.count(), 9);
}

#[test]
fn heterophily_writes_one_row_per_point() {
    let t = tempfile::tempdir().unwrap();
    let csv = t.path().join("h.csv");
    ok(&[
        "heterophily",
        "--out",
        p(&csv),
        "--n",
        "120",
        "--degree",
        "4",
        "--seeds",
        "2",
        "--p",
        "0.2",
        "--variants",
        "full,mean",
        "--epochs",
        "2",
        "--hidden-dim",
        "4",
        "--init-epochs",
        "2",
    ]);
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "variant,p,seed,q_measured,test_acc,ece,mean_u");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().any(|r| r.starts_with("mean,0.2,1,") && r.ends_with(",NaN")));
}
