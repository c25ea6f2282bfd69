// The gateway deduplicates and caches requests. A batch with repeats costs
// one upstream call per distinct prompt, and a second process pointed at
// the same cache file answers everything from disk.

use std::collections::BTreeMap;

use procut::gateway::{MockOracle, Phase};
use procut::Gateway;

pub fn run_example() -> anyhow::Result<(u64, u64)> {
    let dir = tempfile::tempdir()?;
    let cache = dir.path().join("responses.jsonl");
    let responses: BTreeMap<String, String> =
        (0..5).map(|i| (format!("question {i}"), format!("answer {i}"))).collect();

    let cold = Gateway::mock(MockOracle::scripted(responses.clone()))
        .with_cache_file(&cache)?;
    let prompts: Vec<_> = (0..10).map(|i| cold.request(format!("question {}", i % 5))).collect();
    let answers = cold.batch_complete(Phase::Evaluation, &prompts, 4)?;
    println!("first answers: {:?}", &answers[..3]);
    let first = cold.ledger();
    println!("cold: {} lookups, {} upstream calls", first.evaluation.lookups, first.total_calls);

    let warm = Gateway::mock(MockOracle::scripted(BTreeMap::new())).with_cache_file(&cache)?;
    let again = warm.batch_complete(Phase::Evaluation, &prompts, 4)?;
    assert_eq!(again, answers);
    let second = warm.ledger();
    println!("warm: {} cache hits, {} upstream calls", second.cache_hits, second.total_calls);
    Ok((first.total_calls, second.total_calls))
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example().map(|_| ())
}
