// One attribution pass, pruned at several ratios: the token/score trade-off
// curve an operator would pick a ratio from.

use std::path::PathBuf;
use std::sync::Arc;

use procut::attribution::Estimator;
use procut::gateway::MockOracle;
use procut::{parse_template, CompressionConfig, Engine, EvalTask, Gateway, MetricId, TradeoffCurve};

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/data").join(name)
}

pub fn run_example() -> anyhow::Result<TradeoffCurve> {
    let template = parse_template(&std::fs::read_to_string(data("support_template.txt"))?)?;
    let task = EvalTask::from_jsonl_file(data("support_dataset.jsonl"), MetricId::TokenF1)?;
    let engine = Engine::new(Arc::new(Gateway::mock(MockOracle::from_file(data("support_oracle.json"))?)));
    let config = CompressionConfig {
        estimator: Estimator::Lasso,
        seed: 11,
        ..Default::default()
    };
    let curve = engine.sweep(&template, &task, &config, &[0.2, 0.4, 0.6, 0.8, 1.0])?;
    println!("full: {} tokens, score {:.3}", curve.tokens_before, curve.score_before);
    for p in &curve.points {
        let bar = "#".repeat((p.test_score * 40.0).round() as usize);
        println!("r={:.1} k={} {:>3} tok ({:>4.0}% fewer) {:.3} {bar}", p.ratio, p.k, p.tokens_after, 100.0 * p.token_reduction, p.test_score);
    }
    Ok(curve)
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example().map(|_| ())
}
