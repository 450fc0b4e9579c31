use std::path::Path;
use std::process::{Command, Output};

use semood::data::{write_logit_csv, Dist, LogitRow};

fn semood(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semood")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = semood(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn error_kind(out: &Output) -> String {
    assert!(!out.status.success());
    let line = String::from_utf8_lossy(&out.stderr);
    let v: serde_json::Value = serde_json::from_str(line.trim()).expect("stderr is one JSON line");
    assert!(v["message"].is_string());
    v["error"].as_str().unwrap().to_string()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn write(path: &str, text: &str) {
    std::fs::write(path, text).unwrap();
}

const SMALL_DATA: &str = r#"{"n_train_in":1000,"n_train_out":2000,"n_test_in":200,"n_test_out":200}"#;
const SMALL_TRAIN: &str = r#"{"epochs":15,"batch_in":32,"batch_out":64,"network":{"input_dim":2,"hidden_dims":[16,16],"num_classes":4,"seed":0}}"#;

#[test]
fn pipeline_is_deterministic_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(&p(d, "spec.json"), SMALL_DATA);
    write(&p(d, "train.json"), SMALL_TRAIN);
    ok(&["gen-data", "--config", &p(d, "spec.json"), "--seed", "4", "--out", &p(d, "data.csv")]);

    for run in ["a", "b"] {
        let ckpt = p(d, &format!("{run}.ckpt"));
        ok(&["train", "--config", &p(d, "train.json"), "--in", &p(d, "data.csv"), "--out", &ckpt, "--seed", "4", "--log", &p(d, &format!("{run}.log"))]);
        ok(&["score", "--checkpoint", &ckpt, "--in", &p(d, "data.csv"), "--out", &p(d, &format!("{run}.scores.csv"))]);
        ok(&["eval", "--in", &p(d, &format!("{run}.scores.csv")), "--out", &p(d, &format!("{run}.eval.json"))]);
        ok(&["threshold", "--in", &p(d, &format!("{run}.scores.csv")), "--out", &p(d, &format!("{run}.tau.json"))]);
    }
    for suffix in ["ckpt", "scores.csv", "eval.json", "eval.json.hist.csv", "tau.json", "log"] {
        let a = std::fs::read(p(d, &format!("a.{suffix}"))).unwrap();
        let b = std::fs::read(p(d, &format!("b.{suffix}"))).unwrap();
        assert_eq!(a, b, "{suffix} differs between runs");
    }

    let log = std::fs::read_to_string(p(d, "a.log")).unwrap();
    assert_eq!(log.lines().count(), 16);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["epoch", "ce", "hinge", "cluster", "total", "train_acc"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }

    let eval: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p(d, "a.eval.json")).unwrap()).unwrap();
    let keys: Vec<&str> = eval.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, ["aupr", "auroc", "fpr95", "n_in", "n_out", "overlap", "tau"]);
    assert_eq!(eval["n_in"], 200);

    let tau: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p(d, "a.tau.json")).unwrap()).unwrap();
    assert_eq!(tau["scorer"], "multilayer_semantic");
    assert_eq!(tau["target_tpr"], 0.95);

    let hist = std::fs::read_to_string(p(d, "a.eval.json.hist.csv")).unwrap();
    assert_eq!(hist.lines().next(), Some("bin_center,h_in,h_out"));
    assert_eq!(hist.lines().count(), 101);

    // converged model: mean in-score above mean out-score on the training split
    let train_scores = p(d, "train.scores.csv");
    ok(&["score", "--checkpoint", &p(d, "a.ckpt"), "--in", &p(d, "data.csv"), "--split", "train", "--scorer", "semantic", "--out", &train_scores]);
    let rows = semood::scoring::read_score_csv(std::fs::File::open(&train_scores).unwrap()).unwrap();
    let mean = |dist| {
        let v: Vec<f64> = rows.iter().filter(|r| r.dist == dist).map(|r| r.score).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean(Dist::In) > mean(Dist::Out));
}

#[test]
fn scoring_logit_csv_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(&p(d, "spec.json"), SMALL_DATA);
    write(&p(d, "train.json"), SMALL_TRAIN);
    ok(&["gen-data", "--config", &p(d, "spec.json"), "--out", &p(d, "data.csv")]);
    ok(&["train", "--config", &p(d, "train.json"), "--in", &p(d, "data.csv"), "--out", &p(d, "m.ckpt"), "--log", &p(d, "log")]);

    let rows = vec![
        LogitRow { id: "a".into(), dist: Dist::In, label: Some(1), logits: vec![0.1, 3.0, -1.0, 0.2] },
        LogitRow { id: "b".into(), dist: Dist::Out, label: None, logits: vec![0.3, 0.2, 0.1, 0.0] },
    ];
    let mut buf = Vec::new();
    write_logit_csv(&mut buf, &rows, 4).unwrap();
    std::fs::write(p(d, "logits.csv"), buf).unwrap();

    let out = ok(&["score", "--checkpoint", &p(d, "m.ckpt"), "--in", &p(d, "logits.csv"), "--scorer", "softmax_baseline"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let parsed = semood::scoring::read_score_csv(text.as_bytes()).unwrap();
    assert_eq!(parsed.len(), 2);
    assert!(parsed.iter().all(|r| r.score > 0.0 && r.score <= 1.0));

    let kind = error_kind(&semood(&["score", "--checkpoint", &p(d, "m.ckpt"), "--in", &p(d, "logits.csv")]));
    assert_eq!(kind, "config", "multilayer scoring of logits");
    let kind = error_kind(&semood(&["score", "--checkpoint", &p(d, "m.ckpt"), "--in", &p(d, "data.csv"), "--scorer", "nope"]));
    assert_eq!(kind, "argument");

    write(&p(d, "energy.json"), r#"{"mode":"energy_baseline","epochs":1}"#);
    ok(&["train", "--config", &p(d, "energy.json"), "--in", &p(d, "data.csv"), "--out", &p(d, "e.ckpt"), "--log", &p(d, "log")]);
    let kind = error_kind(&semood(&["score", "--checkpoint", &p(d, "e.ckpt"), "--in", &p(d, "data.csv"), "--scorer", "semantic"]));
    assert_eq!(kind, "config");

    write(&p(d, "only_out.csv"), "sample_id,label,split,scorer,score\nx,-,out,vanilla,1.0\n");
    assert_eq!(error_kind(&semood(&["threshold", "--in", &p(d, "only_out.csv")])), "argument");
    assert_eq!(error_kind(&semood(&["eval", "--in", &p(d, "only_out.csv")])), "argument");

    write(&p(d, "bad.json"), r#"{"mode":"cfl_mlse","lr":-1}"#);
    let kind = error_kind(&semood(&["train", "--config", &p(d, "bad.json"), "--in", &p(d, "data.csv"), "--out", &p(d, "x.ckpt")]));
    assert_eq!(kind, "config");
}

#[test]
fn threshold_examples_from_score_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut csv = String::from("sample_id,label,split,scorer,score\n");
    for i in 1..=10 {
        csv.push_str(&format!("{i},0,in,vanilla,{i}\n"));
    }
    write(&p(d, "s.csv"), &csv);
    let out = ok(&["threshold", "--in", &p(d, "s.csv"), "--target-tpr", "0.5"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["tau"].as_f64().unwrap(), 6.0f64.next_down());

    let mut csv = String::from("sample_id,label,split,scorer,score\n");
    for i in 0..7 {
        csv.push_str(&format!("{i},0,in,semantic,2.5\n"));
    }
    write(&p(d, "same.csv"), &csv);
    let out = ok(&["threshold", "--in", &p(d, "same.csv")]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["tau"].as_f64().unwrap() < 2.5);

    write(&p(d, "mixed.csv"), "sample_id,label,split,scorer,score\na,0,in,semantic,1\nb,0,in,vanilla,2\n");
    assert_eq!(error_kind(&semood(&["threshold", "--in", &p(d, "mixed.csv")])), "argument");
}
