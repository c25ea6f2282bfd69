// The full pipeline on the support-bot fixture: segment, attribute with
// exact Shapley values, prune to 60% of the segments and re-score on the
// held-out split. The vanilla "ask the LLM to shorten it" baseline runs
// against the same mock for comparison.

use std::path::PathBuf;
use std::sync::Arc;

use procut::gateway::MockOracle;
use procut::{parse_template, CompressionConfig, Engine, EvalTask, Gateway, MetricId, RunReport};

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/data").join(name)
}

pub fn run_example() -> anyhow::Result<RunReport> {
    let template = parse_template(&std::fs::read_to_string(data("support_template.txt"))?)?;
    let task = EvalTask::from_jsonl_file(data("support_dataset.jsonl"), MetricId::TokenF1)?;
    let gw = Gateway::mock(MockOracle::from_file(data("support_oracle.json"))?);
    let engine = Engine::new(Arc::new(gw));

    let config = CompressionConfig {
        ratio: 0.6,
        ..Default::default()
    };
    let report = engine.run(&template, &task, &config).map_err(|f| f.error)?;
    println!("run {}", report.run_id);
    for (s, (score, kept)) in report.segments.iter().zip(report.attribution.scores.iter().zip(report.kept_mask.bits())) {
        println!("  {} {score:>+7.3}  {}", if *kept { "keep" } else { "drop" }, s.text.trim());
    }
    println!("tokens {} -> {}, test score {:.3} -> {:.3}", report.tokens_before, report.tokens_after, report.score_before, report.score_after);
    println!("compressed template:\n{}", report.compressed_template);

    let vanilla = engine.vanilla_llm_compress(&template, 0.6, 2)?;
    println!("vanilla LLM rewrite ({} tokens):\n{}", engine.count_tokens(vanilla.raw_text()), vanilla.raw_text());
    Ok(report)
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example().map(|_| ())
}
