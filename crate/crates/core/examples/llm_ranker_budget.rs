// The LLM-driven estimator asks for `t` probe masks, scores only those, and
// asks again for a ranking. Its mask budget stays at `t` while
// leave-one-out grows with the number of segments.

use std::sync::Arc;

use procut::attribution::{llm_ranker, loo};
use procut::domain::{EvalExample, SegmentedTemplate};
use procut::evaluation::TaskValue;
use procut::gateway::mock::{SetFunction, SyntheticOracle};
use procut::gateway::MockOracle;
use procut::{parse_template, EvalTask, Gateway, MetricId, Split, Strategy};

pub fn run_example() -> anyhow::Result<Vec<(usize, usize, usize, usize)>> {
    let mut rows = Vec::new();
    println!("   M  ranker masks  meta calls  loo masks");
    for m in [3, 6, 9, 12] {
        let signatures: Vec<String> = (0..m).map(|j| format!("<rule {j}>")).collect();
        let weights: Vec<f64> = (0..m).map(|j| ((j * 7) % m) as f64 / (m * m) as f64).collect();
        let oracle = SyntheticOracle::new(signatures.clone(), SetFunction::additive(&weights));
        let reference = oracle.reference_text();
        let gw = Arc::new(Gateway::mock(MockOracle::synthetic(oracle)));

        let pieces: Vec<String> = signatures.iter().map(|s| format!("{s} Follow this.\n")).collect();
        let raw = pieces.concat();
        let seg = SegmentedTemplate::new(parse_template(&raw)?, pieces, Strategy::Predefined)?;
        let task = Arc::new(EvalTask::single(vec![EvalExample::new::<&str, &str>([], reference)], MetricId::TokenF1));
        let v = TaskValue::new(seg.clone(), task, Split::Train, gw.clone());

        let ranked = llm_ranker(&seg, &v, &gw, 2, m / 2, 2)?;
        let baseline = loo(&v)?;
        println!("{m:>4} {:>13} {:>11} {:>10}", ranked.mask_evaluations, ranked.meta_calls, baseline.mask_evaluations);
        rows.push((m, ranked.mask_evaluations, ranked.meta_calls, baseline.mask_evaluations));
    }
    Ok(rows)
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example().map(|_| ())
}
