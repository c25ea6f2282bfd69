// Cut one template three ways: marker lines, paragraph/sentence structure,
// and an LLM (here the synthetic mock) whose answer is validated and
// aligned back onto the original bytes.

use procut::gateway::mock::{SetFunction, SyntheticOracle};
use procut::gateway::MockOracle;
use procut::segmentation::{segment, SegmentationConfig};
use procut::{parse_template, Gateway, Strategy};

const TEMPLATE: &str = "You are a careful math tutor.
---SEGMENT---
Show every step of the calculation. Check the arithmetic twice.
---SEGMENT---
Finish with the number alone inside <answer></answer>.

Problem: {problem}";

pub fn run_example() -> anyhow::Result<Vec<(Strategy, usize)>> {
    let template = parse_template(TEMPLATE)?;
    let gw = Gateway::mock(MockOracle::synthetic(SyntheticOracle::new(vec![], SetFunction::default())));
    let mut counts = Vec::new();
    for strategy in [Strategy::Predefined, Strategy::Structural, Strategy::Llm] {
        let config = SegmentationConfig {
            strategy,
            max_units: 6,
            ..Default::default()
        };
        let seg = segment(&template, &config, Some(&gw))?;
        println!("{strategy:?}: {} segments", seg.len());
        for s in seg.segments() {
            println!("  [{}] {:?}{}", s.index, s.text, if s.contains_placeholders.is_empty() { "" } else { "  <- placeholder" });
        }
        // segments always rebuild the (marker-free) template exactly
        assert_eq!(seg.texts().concat(), seg.source().raw_text());
        counts.push((strategy, seg.len()));
    }
    println!("gateway calls: {}", gw.ledger().total_calls);
    Ok(counts)
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example().map(|_| ())
}
