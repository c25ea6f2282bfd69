// Start the HTTP service on an ephemeral port with the mock oracle, submit
// a run the way the browser companion does, poll it to completion and
// fetch the report.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use procut::gateway::MockOracle;
use procut::service::AppState;
use procut::{Engine, Gateway};
use serde_json::{json, Value};

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/data").join(name)
}

pub fn run_example() -> anyhow::Result<Value> {
    let runs = tempfile::tempdir()?;
    let gw = Gateway::mock(MockOracle::from_file(data("support_oracle.json"))?);
    let state = AppState::new(Engine::new(Arc::new(gw)).with_runs_dir(runs.path()), 2)?;

    let rt = tokio::runtime::Runtime::new()?;
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))?;
    let base = format!("http://{}", listener.local_addr()?);
    rt.spawn(procut::service::serve_on(listener, state));

    let body = json!({
        "template": std::fs::read_to_string(data("support_template.txt"))?,
        "dataset": {"path": data("support_dataset.jsonl")},
        "config": {"ratio": 0.5, "estimator": "shap"},
    });
    let handle: Value = ureq::post(format!("{base}/api/runs")).send_json(&body)?.body_mut().read_json()?;
    let id = handle["run_id"].as_str().unwrap_or_default().to_string();
    println!("submitted {id}");
    loop {
        let h: Value = ureq::get(format!("{base}/api/runs/{id}")).call()?.body_mut().read_json()?;
        println!("  {} {:.0}%", h["status"], 100.0 * h["progress"].as_f64().unwrap_or(0.0));
        match h["status"].as_str() {
            Some("done") => break,
            Some("failed") => anyhow::bail!("run failed: {}", h["error"]),
            _ => std::thread::sleep(Duration::from_millis(20)),
        }
    }
    let report: Value = ureq::get(format!("{base}/api/runs/{id}/report")).call()?.body_mut().read_json()?;
    println!("kept {} segments, tokens {} -> {}", report["k"], report["tokens_before"], report["tokens_after"]);
    println!("{}", report["compressed_template"].as_str().unwrap_or_default());
    Ok(report)
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example().map(|_| ())
}
