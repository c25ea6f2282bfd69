use std::path::PathBuf;
use std::process::{Command, Output};

fn data(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("examples/data")
        .join(name)
        .display()
        .to_string()
}

fn procut(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_procut"))
        .args(args)
        .env_remove("PROCUT_API_KEY")
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("stdout is not one JSON document ({e}): {}", String::from_utf8_lossy(&out.stdout))
    })
}

#[test]
fn segment_structural_json() {
    let tpl = data("support_template.txt");
    let out = procut(&["segment", "-t", &tpl, "--strategy", "structural", "--max-units", "5", "--output", "json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    let segs = v["segments"].as_array().unwrap();
    assert!(segs.len() <= 5 && !segs.is_empty());
    let joined: String = segs.iter().map(|s| s["text"].as_str().unwrap()).collect();
    assert_eq!(joined, std::fs::read_to_string(&tpl).unwrap());
    for (i, s) in segs.iter().enumerate() {
        assert_eq!(s["index"], i);
        assert!(s["tokens"].as_u64().unwrap() > 0);
    }
}

#[test]
fn segment_error_codes() {
    assert_eq!(procut(&["segment", "-t", "/nonexistent/tpl.txt"]).status.code(), Some(2));
    let tpl = data("support_template.txt");
    let out = procut(&["segment", "-t", &tpl, "--strategy", "llm"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(out.stdout.is_empty());
}

#[test]
fn segment_llm_with_mock() {
    let tpl = data("support_template.txt");
    let mock = data("support_oracle.json");
    let out = procut(&["segment", "-t", &tpl, "--strategy", "llm", "--mock", &mock, "--output", "json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out)["strategy"], "llm");
}

#[test]
fn help_and_usage() {
    let help = procut(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("compress"));
    assert_eq!(procut(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(procut(&["compress", "--no-such-flag"]).status.code(), Some(1));
}

fn compress_args<'a>(runs: &'a str, extra: &[&'a str]) -> Vec<String> {
    let mut args: Vec<String> = vec![
        "compress".into(),
        "-t".into(),
        data("support_template.txt"),
        "-d".into(),
        data("support_dataset.jsonl"),
        "--mock".into(),
        data("support_oracle.json"),
        "--runs-dir".into(),
        runs.into(),
        "--output".into(),
        "json".into(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    args
}

fn run_compress(runs: &str, extra: &[&str]) -> Output {
    let args = compress_args(runs, extra);
    procut(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn compress_shap_half() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().to_str().unwrap();
    let out = run_compress(runs, &["--estimator", "shap", "--ratio", "0.5"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&out);
    let m = report["segments"].as_array().unwrap().len();
    assert_eq!(report["k"].as_u64().unwrap() as usize, m / 2);
    let path = dir.path().join(format!("{}.json", report["run_id"].as_str().unwrap()));
    let stored: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(stored["status"], "done");
}

#[test]
fn compress_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let x = run_compress(a.path().to_str().unwrap(), &["--estimator", "lasso", "--seed", "3"]);
    let y = run_compress(b.path().to_str().unwrap(), &["--estimator", "lasso", "--seed", "3"]);
    assert_eq!(x.status.code(), Some(0));
    assert_eq!(x.stdout, y.stdout);
}

#[test]
fn compress_rejects_bad_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_compress(dir.path().to_str().unwrap(), &["--ratio", "1.5"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn compress_llm_ranker_two_meta_calls() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_compress(dir.path().to_str().unwrap(), &["--estimator", "llm-ranker", "--t", "2", "--k", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&out);
    assert_eq!(report["attribution"]["meta_calls"], 2);
    assert_eq!(report["attribution"]["mask_evaluations"], 2);
}

#[test]
fn compress_dataset_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"inputs\": {\"query\": \"x\"}, \"reference\": \"y\"}\n").unwrap();
    let out = procut(&[
        "compress",
        "-t",
        &data("support_template.txt"),
        "-d",
        bad.to_str().unwrap(),
        "--mock",
        &data("support_oracle.json"),
        "--runs-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn config_file_and_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = data("support_config.toml");
    let runs = dir.path().to_str().unwrap();
    let base = procut(&["compress", "--config", &cfg, "--runs-dir", runs, "--output", "json"]);
    assert_eq!(base.status.code(), Some(0), "{}", String::from_utf8_lossy(&base.stderr));
    assert_eq!(json(&base)["config"]["ratio"], 0.6);
    let over = procut(&["compress", "--config", &cfg, "--runs-dir", runs, "--output", "json", "--ratio", "0.25"]);
    assert_eq!(json(&over)["config"]["ratio"], 0.25);

    let typo = dir.path().join("typo.toml");
    std::fs::write(&typo, "ratoi = 0.5\n").unwrap();
    assert_eq!(procut(&["compress", "--config", typo.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn ndcg_command() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, text: &str| {
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        p.to_str().unwrap().to_string()
    };
    let gold = write("gold.json", "[1, 0]");
    let rev = write("rev.json", "[0, 1]");
    let three = write("three.json", "[0, 1, 2]");
    let same = procut(&["ndcg", &gold, &gold]);
    assert_eq!(String::from_utf8_lossy(&same.stdout).trim(), "1.000000");
    let out = procut(&["ndcg", &rev, &gold, "--output", "json"]);
    let v = json(&out)["ndcg"].as_f64().unwrap();
    assert!((v - 1.0 / 3f64.log2()).abs() < 1e-9);
    assert_eq!(procut(&["ndcg", &three, &gold]).status.code(), Some(4));
}

#[test]
fn attribute_and_sweep() {
    let args = |cmd: &str| {
        vec![
            cmd.to_string(),
            "-t".into(),
            data("support_template.txt"),
            "-d".into(),
            data("support_dataset.jsonl"),
            "--mock".into(),
            data("support_oracle.json"),
            "--output".into(),
            "json".into(),
        ]
    };
    let a = args("attribute");
    let out = procut(&a.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json(&out)["estimator"], "shap_exact");

    let mut s = args("sweep");
    s.extend(["--ratios".to_string(), "0.5,1".to_string()]);
    let out = procut(&s.iter().map(String::as_str).collect::<Vec<_>>());
    let curve = json(&out);
    let points = curve["points"].as_array().unwrap();
    assert_eq!(points.len(), 2);
    assert_eq!(points[1]["test_score"], curve["score_before"]);
}
