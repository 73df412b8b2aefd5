use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn ovg(args: &[&Path], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ovg"));
    cmd.args(args).env_remove("OVG_SEED");
    if let Some(s) = seed {
        cmd.env("OVG_SEED", s);
    }
    cmd.output().expect("ovg runs")
}

fn run(args: &[&str]) -> Output {
    let paths: Vec<&Path> = args.iter().map(Path::new).collect();
    ovg(&paths, None)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("data");
    let mut args = vec!["synth", "--out", p(&out)];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("manifest.json")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

/// Synthetic scenes on a larger canvas so all three size buckets are populated.
fn mixed_sizes(dir: &Path) -> PathBuf {
    synth(dir, &["--scenes", "40", "--seed", "4", "--canvas", "200", "--min-side", "12", "--max-side", "180"])
}

#[test]
fn oracle_checkpoint_is_perfect_in_every_bucket() {
    let dir = tempfile::tempdir().unwrap();
    let data = mixed_sizes(dir.path());
    let ckpt = dir.path().join("oracle.json");
    assert!(run(&["oracle", "--data", p(&data), "--out", p(&ckpt)]).status.success());
    let out_dir = dir.path().join("eval");
    let o = run(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&out_dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&out_dir.join("report.json"));
    for bucket in ["small", "middle", "large"] {
        assert!(r[format!("{bucket}_count")].as_u64().unwrap() > 0, "{bucket} bucket empty");
        assert_eq!(r[format!("{bucket}_acc")], 100.0);
    }
    assert_eq!(r["acc50"], 100.0);
    let preds = read_json(&out_dir.join("predictions.json"));
    let first = preds[0].as_object().unwrap();
    for key in ["image_id", "pred_bbox", "iou", "bucket", "correct"] {
        assert!(first.contains_key(key), "missing {key}");
    }
}

#[test]
fn untrained_checkpoint_evaluates_reproducibly_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let data = mixed_sizes(dir.path());
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "train_steps = 0\n").unwrap();
    let train_dir = dir.path().join("train");
    let o = run(&["train", "--toy", "--config", p(&cfg), "--data", p(&data), "--out", p(&train_dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = train_dir.join("checkpoint.json");

    let mut reports = Vec::new();
    for tag in ["a", "b"] {
        let out = dir.path().join(format!("eval-{tag}"));
        let o = run(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        reports.push(std::fs::read(out.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let r: Value = serde_json::from_slice(&reports[0]).unwrap();
    assert_eq!(r.as_object().unwrap().len(), 15);
    assert_eq!(r["total_count"], 40);

    let mut tables = Vec::new();
    for tag in ["a", "b"] {
        let out = dir.path().join(format!("report-{tag}"));
        let o = run(&["report", "--in", p(&dir.path().join("eval-a")), "--out", p(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        for f in ["gt_size_scatter.svg", "bucket_accuracy.svg", "accuracy_table.txt"] {
            assert!(out.join(f).is_file(), "{f} missing");
        }
        tables.push(std::fs::read(out.join("accuracy_table.txt")).unwrap());
    }
    assert_eq!(tables[0], tables[1]);
}

#[test]
fn report_handles_an_empty_dump_and_rejects_missing_fields() {
    let dir = tempfile::tempdir().unwrap();
    let eval = dir.path().join("eval");
    std::fs::create_dir_all(&eval).unwrap();
    let empty = serde_json::json!({
        "small_acc": 0.0, "small_count": 0, "middle_acc": 0.0, "middle_count": 0,
        "large_acc": 0.0, "large_count": 0, "acc50": 0.0, "total_count": 0,
        "base_r1": null, "base_r5": null, "base_r10": null,
        "novel_r1": null, "novel_r5": null, "novel_r10": null, "clip_predictions": true
    });
    std::fs::write(eval.join("report.json"), empty.to_string()).unwrap();
    std::fs::write(eval.join("predictions.json"), "[]").unwrap();
    let out = dir.path().join("out");
    let o = run(&["report", "--in", p(&eval.join("report.json")), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(out.join("accuracy_table.txt")).unwrap();
    assert!(table.lines().any(|l| l.split_whitespace().collect::<Vec<_>>() == ["overall", "0", "0", "0.00"]));

    let mut partial = empty.clone();
    partial.as_object_mut().unwrap().remove("acc50");
    std::fs::write(eval.join("report.json"), partial.to_string()).unwrap();
    let o = run(&["report", "--in", p(&eval), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("acc50"));
}

#[test]
fn invalid_manifest_aborts_training_with_the_validation_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), &["--scenes", "3"]);
    let mut m = read_json(&data);
    m["records"][1]["bbox"] = serde_json::json!([30, 30, 10, 10]);
    m["records"][2]["category"] = serde_json::json!("hexagon");
    std::fs::write(&data, m.to_string()).unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "").unwrap();
    let out = dir.path().join("run");
    let o = run(&["train", "--toy", "--config", p(&cfg), "--data", p(&data), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("record 1: bbox") && err.contains("record 2: category"), "{err}");
    assert!(!out.exists(), "nothing should be written");
}

#[test]
fn seed_comes_from_the_environment_when_set() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), &["--scenes", "4"]);
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "seed = 3\ntrain_steps = 2\n").unwrap();
    let train = |tag: &str, seed: Option<&str>| {
        let out = dir.path().join(tag);
        let args = [Path::new("train"), Path::new("--toy"), Path::new("--config"), &cfg, Path::new("--data"), &data, Path::new("--out"), &out];
        let o = ovg(&args, seed);
        (o, out)
    };
    let (o, out) = train("env", Some("11"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run_record = read_json(&out.join("run.json"));
    assert_eq!(run_record["seed"], 11);
    assert_eq!(run_record["config"]["seed"], 11);
    assert_eq!(run_record["losses"].as_array().unwrap().len(), 2);

    let (o, out) = train("file", None);
    assert!(o.status.success());
    assert_eq!(read_json(&out.join("run.json"))["seed"], 3);

    let (o, _) = train("bad", Some("minus one"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(&dir.path().join("a"), &["--prefix", "train"]);
    let b = synth(&dir.path().join("b"), &["--prefix", "eval", "--seed", "5"]);
    let out = dir.path().join("audit");
    let o = run(&["verify", "--train", p(&a), "--eval", p(&b), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(read_json(&out.join("disjointness.json"))["pass"], true);

    let o = run(&["verify", "--train", p(&a), "--eval", p(&a)]);
    assert_eq!(o.status.code(), Some(1));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["image_overlaps"].as_array().unwrap().len(), 16);

    let o = run(&["verify", "--train", p(&a), "--eval", p(&dir.path().join("missing.json"))]);
    assert_eq!(o.status.code(), Some(2));
}
