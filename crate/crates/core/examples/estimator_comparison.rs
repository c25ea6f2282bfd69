// Every perturbation estimator on the same noisy-free synthetic value
// function, scored by NDCG against exact Shapley values, next to the number
// of distinct masks each one had to evaluate.

use procut::attribution::{
    greedy_forward, lasso_attribution, loo, random_attribution, shap_exact, shap_mc, FnValue, DEFAULT_LAMBDA_GRID,
};
use procut::evaluation::ndcg;
use procut::{AttributionResult, Mask};

pub fn run_example() -> anyhow::Result<Vec<(String, f64, usize)>> {
    let m = 8;
    let weights = [0.25, 0.0, 0.12, 0.03, 0.0, 0.2, 0.07, 0.0];
    // redundancy: segments 2 and 6 say the same thing
    let v = FnValue::new(m, |mask: &Mask| {
        let mut total: f64 = mask.indices().map(|j| weights[j]).sum();
        if mask.get(2) && mask.get(6) {
            total -= 0.05;
        }
        total
    });

    let gold = shap_exact(&v, 12)?;
    let runs: Vec<AttributionResult> = vec![
        shap_mc(&v, 200 * m, 1)?,
        loo(&v)?,
        greedy_forward(&v)?,
        lasso_attribution(&v, 8 * m, 1, 0.5, &DEFAULT_LAMBDA_GRID)?,
        random_attribution(m, 1),
    ];
    let mut rows = Vec::new();
    println!("{:<12} {:>6} {:>6}", "estimator", "ndcg", "masks");
    for r in &runs {
        let name = format!("{:?}", r.estimator);
        let score = ndcg(r, &gold)?;
        println!("{name:<12} {score:>6.3} {:>6}", r.mask_evaluations);
        rows.push((name, score, r.mask_evaluations));
    }
    Ok(rows)
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example().map(|_| ())
}
