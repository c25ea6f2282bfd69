// Exact and Monte-Carlo Shapley values for a small set function with an
// interaction term. Segment 2 only helps together with segment 0, and the
// Shapley value splits that bonus evenly between them.

use procut::attribution::{shap_exact, shap_mc, FnValue};
use procut::Mask;

pub fn run_example() -> anyhow::Result<(Vec<f64>, Vec<f64>)> {
    let base = [0.30, 0.10, 0.0, 0.05, 0.15];
    let v = FnValue::new(5, |m: &Mask| {
        let additive: f64 = m.indices().map(|j| base[j]).sum();
        let bonus = if m.get(0) && m.get(2) { 0.2 } else { 0.0 };
        additive + bonus
    });

    let exact = shap_exact(&v, 12)?;
    let mc = shap_mc(&v, 200 * 5, 42)?;
    println!("segment   exact      mc");
    for j in 0..5 {
        println!("{j:>7} {:>8.4} {:>8.4}", exact.scores[j], mc.scores[j]);
    }
    let total: f64 = exact.scores.iter().sum();
    println!("sum of exact values {total:.4} = v(full) - v(empty)");
    println!("masks evaluated: exact {}, mc {}", exact.mask_evaluations, mc.mask_evaluations);
    Ok((exact.scores, mc.scores))
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example().map(|_| ())
}
