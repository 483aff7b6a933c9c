//! End-to-end runs of the `molang` binary on a tiny synthetic benchmark.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use molang::data::SynthSpec;
use serde_json::Value;

fn molang(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_molang"))
        .args(args)
        .output()
        .expect("spawn molang")
}

fn ok(args: &[&str]) -> String {
    let out = molang(args);
    assert!(
        out.status.success(),
        "molang {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    molang(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Eight classes, twenty short clips each.
fn tiny_benchmark(dir: &Path) -> PathBuf {
    let spec = SynthSpec {
        clips_per_class: 20,
        min_frames: 30,
        max_frames: 40,
        ..SynthSpec::default()
    };
    let spec_path = dir.join("spec.json");
    fs::write(&spec_path, serde_json::to_string(&spec).unwrap()).unwrap();
    let data = dir.join("data");
    let out = ok(&[
        "synth",
        "--spec",
        s(&spec_path),
        "--seed",
        "3",
        "--out",
        s(&data),
    ]);
    let summary: Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(summary["clips"], 160);
    data
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_benchmark(tmp.path());
    let train = data.join("train.jsonl");
    let test = data.join("test.jsonl");
    let pre = tmp.path().join("pre");
    let con = tmp.path().join("con");
    let ft = tmp.path().join("ft");

    ok(&[
        "pretrain",
        "--data",
        s(&train),
        "--out",
        s(&pre),
        "--epochs",
        "1",
        "--batch-size",
        "8",
        "--quiet",
    ]);
    for f in [
        "last.moln",
        "last.json",
        "best.moln",
        "optim.moln",
        "state.json",
        "metrics.jsonl",
        "summary.json",
        "config.json",
    ] {
        assert!(pre.join(f).exists(), "missing {f}");
    }
    let motion_ckpt = pre.join("last.moln");
    let line = ok(&[
        "train",
        "--data",
        s(&train),
        "--out",
        s(&con),
        "--epochs",
        "1",
        "--batch-size",
        "8",
        "--motion-ckpt",
        s(&motion_ckpt),
        "--quiet",
    ]);
    assert!(line.contains("final loss"));
    let ckpt = con.join("last.moln");
    ok(&[
        "finetune",
        "--data",
        s(&train),
        "--out",
        s(&ft),
        "--epochs",
        "1",
        "--ckpt",
        s(&ckpt),
        "--quiet",
    ]);

    let ev = tmp.path().join("ev");
    let rec: Value = serde_json::from_str(
        ok(&[
            "eval",
            "--task",
            "recognition",
            "--ckpt",
            s(&ckpt),
            "--data",
            s(&test),
            "--out",
            s(&ev),
        ])
        .trim(),
    )
    .unwrap();
    let acc = rec["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(rec["labels"].as_array().unwrap().len(), 8);
    let confusion = fs::read_to_string(ev.join("confusion.csv")).unwrap();
    assert_eq!(confusion.lines().count(), 9);
    assert!(ev.join("predictions.csv").exists() && ev.join("top3.txt").exists());

    let ret: Value = serde_json::from_str(
        ok(&[
            "eval",
            "--task",
            "retrieval",
            "--ckpt",
            s(&ckpt),
            "--data",
            s(&test),
            "--retrieval-labels",
            "5",
            "--questions",
            "10",
        ])
        .trim(),
    )
    .unwrap();
    assert_eq!(ret["questions"], 10);
    assert!(ret["top1"].as_f64().unwrap() <= ret["top3"].as_f64().unwrap());

    let csv = tmp.path().join("emb.csv");
    ok(&[
        "embed",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&test),
        "--out",
        s(&csv),
    ]);
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("id,label,e0,"));
    let mut rows = 0;
    for line in lines {
        let norm: f64 = line
            .split(',')
            .skip(2)
            .map(|v| v.parse::<f64>().unwrap().powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((norm - 1.0).abs() < 1e-4, "norm {norm}");
        rows += 1;
    }
    assert!(rows > 0);
}

#[test]
fn same_seed_gives_identical_logs_and_resume_of_finished_run_is_a_no_op() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_benchmark(tmp.path());
    let train = data.join("train.jsonl");
    let run = |name: &str, extra: &[&str]| {
        let out = tmp.path().join(name);
        let mut args = vec![
            "train",
            "--data",
            s(&train),
            "--out",
            s(&out),
            "--epochs",
            "2",
            "--batch-size",
            "8",
            "--quiet",
        ];
        args.extend_from_slice(extra);
        let owned: Vec<String> = args.iter().map(|a| a.to_string()).collect();
        let refs: Vec<&str> = owned.iter().map(String::as_str).collect();
        ok(&refs);
        fs::read(out.join("metrics.jsonl")).unwrap()
    };
    let a = run("a", &[]);
    let b = run("b", &[]);
    assert_eq!(a, b);
    let again = run("a", &["--resume"]);
    assert_eq!(a, again);
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_benchmark(tmp.path());
    let cfg = tmp.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"stage": {"epochs": 3, "batch_size": 8, "seed": 5}}"#,
    )
    .unwrap();
    let out = tmp.path().join("run");
    ok(&[
        "pretrain",
        "--config",
        s(&cfg),
        "--data",
        s(&data.join("train.jsonl")),
        "--out",
        s(&out),
        "--epochs",
        "1",
        "--quiet",
    ]);
    let resolved: Value =
        serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    let stage = &resolved["config"]["stage"];
    assert_eq!(stage["epochs"], 1);
    assert_eq!(stage["seed"], 5);
    assert_eq!(stage["batch_size"], 8);
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["epochs"], 1);
}

#[test]
fn usage_and_data_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.jsonl");
    let out = tmp.path().join("o");
    assert_eq!(
        code(&["pretrain", "--data", s(&missing), "--out", s(&out)]),
        2
    );
    assert_eq!(code(&["pretrain", "--bogus-flag"]), 2);

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"stage": {"epochz": 1}}"#).unwrap();
    assert_eq!(
        code(&[
            "pretrain",
            "--config",
            s(&bad),
            "--data",
            s(&missing),
            "--out",
            s(&out)
        ]),
        2
    );

    let data = tiny_benchmark(tmp.path());
    let train = data.join("train.jsonl");
    assert_eq!(
        code(&[
            "finetune",
            "--data",
            s(&train),
            "--out",
            s(&out),
            "--epochs",
            "1"
        ]),
        2
    );

    let pre = tmp.path().join("pre");
    ok(&[
        "pretrain",
        "--data",
        s(&train),
        "--out",
        s(&pre),
        "--epochs",
        "0",
        "--quiet",
    ]);
    let motion_only = pre.join("last.moln");
    assert_eq!(
        code(&[
            "eval",
            "--task",
            "recognition",
            "--ckpt",
            s(&motion_only),
            "--data",
            s(&train)
        ]),
        2
    );

    let spec = tmp.path().join("spec.json");
    fs::write(&spec, r#"{"classes": []}"#).unwrap();
    assert_eq!(
        code(&[
            "synth",
            "--spec",
            s(&spec),
            "--out",
            s(&tmp.path().join("d"))
        ]),
        2
    );
}

#[test]
fn divergent_training_exits_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_benchmark(tmp.path());
    let cfg = tmp.path().join("hot.json");
    fs::write(
        &cfg,
        r#"{"stage": {"schedule": {"eta_min": 1e30, "eta_max": 1e30}}}"#,
    )
    .unwrap();
    let out = tmp.path().join("o");
    let res = molang(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data.join("train.jsonl")),
        "--out",
        s(&out),
        "--epochs",
        "3",
        "--batch-size",
        "8",
        "--quiet",
    ]);
    assert_eq!(
        res.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    assert!(String::from_utf8_lossy(&res.stderr).contains("epoch"));
}

#[test]
fn ablation_grid_serialises() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_benchmark(tmp.path());
    let cfg = tmp.path().join("abl.json");
    fs::write(
        &cfg,
        r#"{"pretrain": {"batch_size": 8}, "contrastive": {"batch_size": 8},
            "retrieval_labels": 5, "retrieval_questions": 8}"#,
    )
    .unwrap();
    let out = tmp.path().join("abl");
    let table = ok(&[
        "ablate",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&out),
        "--pretrain-epochs",
        "1",
        "--epochs",
        "1",
        "--seeds",
        "1",
        "--quiet",
    ]);
    assert!(table.contains("accuracy"));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "mmp,gcb,cstar,seeds,accuracy,top1,top3"
    );
    assert_eq!(csv.lines().count(), 9);
    assert_eq!(
        fs::read_to_string(out.join("rows.jsonl"))
            .unwrap()
            .lines()
            .count(),
        8
    );
}
