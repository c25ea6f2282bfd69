// Compression inside a prompt-optimisation loop. The stand-in optimiser
// appends a long background paragraph every round that the task never
// needs; compressing after each step keeps the template from bloating.

use std::sync::Arc;

use procut::domain::{EvalExample, PromptTemplate};
use procut::gateway::mock::{SetFunction, SyntheticOracle};
use procut::gateway::MockOracle;
use procut::{count_tokens, parse_template, CompressionConfig, Engine, EvalTask, Gateway, MetricId};

/// About 500 tokens in one paragraph with no sentence break.
pub fn filler(round: usize) -> String {
    let words: Vec<String> = (0..248).map(|i| format!("detail{round}x{i},")).collect();
    format!("Background note {round}: {}\n\n", words.join(" "))
}

/// The optimiser step: insert a filler paragraph ahead of the instruction.
pub fn grow(t: &PromptTemplate, round: usize) -> PromptTemplate {
    parse_template(&format!("{}{}", filler(round), t.raw_text())).expect("filler has no braces")
}

pub fn run_example() -> anyhow::Result<Vec<(usize, usize, f64, f64)>> {
    let oracle = SyntheticOracle::new(vec!["<answer></answer>".into()], SetFunction::additive(&[1.0]));
    let reference = oracle.reference_text();
    let gw = Gateway::mock(MockOracle::synthetic(oracle));
    let engine = Engine::new(Arc::new(gw));
    let task = EvalTask::single(
        (0..4).map(|i| EvalExample::new([("problem", format!("{i} + {i}"))], reference.clone())).collect(),
        MetricId::TokenF1,
    );
    let start = parse_template("Solve {problem} and put the result inside <answer></answer> tags\n")?;
    let config = CompressionConfig {
        ratio: 0.6,
        ..Default::default()
    };

    let mut step = grow;
    let reports = engine
        .compress_in_loop(&mut step, &start, &task, &config, 3)
        .map_err(|f| f.error)?;

    let mut uncompressed = start.clone();
    let mut rows = Vec::new();
    println!("round  uncompressed  compressed  score before/after");
    for (round, r) in reports.iter().enumerate() {
        uncompressed = grow(&uncompressed, round);
        let full = count_tokens(uncompressed.raw_text());
        println!("{round:>5} {full:>13} {:>11} {:>8.3} {:.3}", r.tokens_after, r.score_before, r.score_after);
        rows.push((full, r.tokens_after, r.score_before, r.score_after));
    }
    Ok(rows)
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example().map(|_| ())
}
