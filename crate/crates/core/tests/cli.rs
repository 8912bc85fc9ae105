use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_domain2vec"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

const CORPUS: &str = r#"{
  "write_png": false,
  "domains": [
    {"foreground_set": "stroke-plain", "background_source": "texture-a", "mode": "BB", "count": 50},
    {"foreground_set": "stroke-plain", "background_source": "texture-b", "mode": "GS", "count": 50},
    {"foreground_set": "stroke-blocky", "background_source": "texture-a", "mode": "Cr", "count": 50}
  ]
}"#;

fn corpus(root: &Path, seed: &str) -> std::path::PathBuf {
    let cfg = root.join("corpus.json");
    write(&cfg, CORPUS);
    let out = root.join(format!("corpus-{seed}"));
    let o = cli(&["generate", "--config", p(&cfg), "--out", p(&out), "--seed", seed]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn generate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = corpus(dir.path(), "4");
    std::fs::rename(&a, dir.path().join("first")).unwrap();
    let b = corpus(dir.path(), "4");
    for f in ["manifest.json", "shards/domain_000.bin", "shards/domain_002.bin"] {
        assert_eq!(
            std::fs::read(dir.path().join("first").join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let c = corpus(dir.path(), "5");
    assert_ne!(
        std::fs::read(b.join("shards/domain_000.bin")).unwrap(),
        std::fs::read(c.join("shards/domain_000.bin")).unwrap()
    );
}

#[test]
fn precondition_failures_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["generate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--out"));

    let m = corpus(dir.path(), "1").join("manifest.json");
    let bad = dir.path().join("bad.json");
    write(&bad, r#"{"batch_size": 1}"#);
    let o = cli(&[
        "train",
        "--manifest",
        p(&m),
        "--config",
        p(&bad),
        "--out",
        p(&dir.path().join("run")),
    ]);
    assert_eq!(o.status.code(), Some(2));

    let task = dir.path().join("task.json");
    write(&task, r#"{"name": "t", "source_domain_ids": [0, 1], "target_domain_id": 1}"#);
    let o = cli(&[
        "msda",
        "--task",
        p(&task),
        "--variant",
        "uniform-alpha",
        "--manifest",
        p(&m),
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2), "target among sources");

    let o = cli(&[
        "msda",
        "--task",
        p(&task),
        "--variant",
        "gamma",
        "--manifest",
        p(&m),
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2), "unknown variant");
}

#[test]
fn diverging_training_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), "2").join("manifest.json");
    let cfg = dir.path().join("train.json");
    write(
        &cfg,
        r#"{"batch_size": 16, "epochs": 1, "max_steps": 6, "optimizer": {"kind": "sgd", "lr": 1e30}}"#,
    );
    let o = cli(&[
        "train",
        "--manifest",
        p(&m),
        "--config",
        p(&cfg),
        "--out",
        p(&dir.path().join("run")),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let m = corpus(root, "3").join("manifest.json");

    let train_cfg = root.join("train.json");
    write(&train_cfg, r#"{"batch_size": 16, "epochs": 1, "max_steps": 3}"#);
    let run = root.join("run");
    let o = cli(&[
        "train",
        "--manifest",
        p(&m),
        "--config",
        p(&train_cfg),
        "--out",
        p(&run),
        "--seed",
        "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ck = run.join("checkpoint.d2v");
    assert!(ck.exists() && run.join("train_log.jsonl").exists());

    let emb = root.join("emb");
    let o = cli(&["embed", "--manifest", p(&m), "--checkpoint", p(&ck), "--out", p(&emb)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["embeddings.csv", "distances.csv", "reduced.csv", "embeddings.json"] {
        assert!(emb.join(f).exists(), "{f}");
    }

    let o = cli(&["graph", "--embeddings", p(&emb), "--k", "1"]);
    assert!(o.status.success());
    let dot = std::fs::read_to_string(emb.join("graph.dot")).unwrap();
    assert!(dot.contains("->") || dot.contains("--"));

    let task = root.join("task.json");
    write(&task, r#"{"name": "toy", "source_domain_ids": [0, 2], "target_domain_id": 1}"#);
    let msda_cfg = root.join("msda.json");
    write(&msda_cfg, r#"{"steps": 2, "batch_size": 4}"#);
    let out = root.join("msda");
    let o = cli(&[
        "msda",
        "--task",
        p(&task),
        "--variant",
        "beta",
        "--manifest",
        p(&m),
        "--embeddings",
        p(&emb),
        "--config",
        p(&msda_cfg),
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let w: Vec<f64> = serde_json::from_value(summary["weights"]["weights"].clone()).unwrap();
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let report = std::fs::read_to_string(out.join("msda_report.csv")).unwrap();
    assert!(report.lines().count() == 2 && report.contains("toy,beta,0,"));

    let eval_cfg = root.join("eval.json");
    write(
        &eval_cfg,
        r#"{"name": "cli", "train": {"batch_size": 16, "epochs": 1, "max_steps": 2},
            "matrix": {"epochs": 1, "batch_size": 32}, "tags": ["full", "no-gram"]}"#,
    );
    let evals = root.join("eval");
    let o = cli(&[
        "eval",
        "--manifest",
        p(&m),
        "--config",
        p(&eval_cfg),
        "--out",
        p(&evals),
        "--seed",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run_dir = evals.join("cli/full/2");
    let md = std::fs::read(run_dir.join("report.md")).unwrap();
    assert!(run_dir.join("accuracy_vs_distance.svg").exists() && evals.join("cli/no-gram/2/report.json").exists());

    std::fs::remove_file(run_dir.join("report.md")).unwrap();
    let o = cli(&["report", "--run", p(&run_dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(run_dir.join("report.md")).unwrap(), md);
}
