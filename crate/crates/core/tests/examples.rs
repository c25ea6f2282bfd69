macro_rules! example {
    ($name:ident) => {
        #[allow(dead_code)]
        mod $name {
            include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/", stringify!($name), ".rs"));
        }
    };
}

example!(segment_template);
example!(shapley_attribution);
example!(estimator_comparison);
example!(llm_ranker_budget);
example!(compress_template);
example!(tradeoff_sweep);
example!(optimization_loop);
example!(gateway_cache);
example!(http_service);

use procut::Strategy;

#[test]
fn segment_template_runs() {
    let counts = segment_template::run_example().unwrap();
    assert_eq!(counts[0], (Strategy::Predefined, 3));
    assert!(counts.iter().all(|&(_, n)| (1..=6).contains(&n)));
}

#[test]
fn shapley_attribution_runs() {
    let (exact, mc) = shapley_attribution::run_example().unwrap();
    let expect = [0.4, 0.1, 0.1, 0.05, 0.15];
    for j in 0..5 {
        assert!((exact[j] - expect[j]).abs() < 1e-12);
        assert!((mc[j] - expect[j]).abs() < 0.02);
    }
}

#[test]
fn estimator_comparison_runs() {
    let rows = estimator_comparison::run_example().unwrap();
    let loo = rows.iter().find(|r| r.0 == "Loo").unwrap();
    assert_eq!(loo.2, 9);
    assert!(rows.iter().all(|r| (0.0..=1.0 + 1e-12).contains(&r.1)));
}

#[test]
fn llm_ranker_budget_runs() {
    for (m, masks, meta, loo) in llm_ranker_budget::run_example().unwrap() {
        assert_eq!((masks, meta, loo), (2, 2, m + 1));
    }
}

#[test]
fn compress_template_runs() {
    let report = compress_template::run_example().unwrap();
    assert_eq!(report.k, 3);
    assert!(report.tokens_after < report.tokens_before);
    assert!(report.compressed_template.contains("{question}"));
}

#[test]
fn tradeoff_sweep_runs() {
    let curve = tradeoff_sweep::run_example().unwrap();
    assert_eq!(curve.points.len(), 5);
    assert!(curve.points.windows(2).all(|w| w[0].tokens_after <= w[1].tokens_after));
}

#[test]
fn optimization_loop_runs() {
    let rows = optimization_loop::run_example().unwrap();
    assert_eq!(rows.len(), 3);
    let (full, compressed, before, after) = rows[2];
    assert!(compressed * 10 < full * 7);
    assert_eq!(before, after);
}

#[test]
fn gateway_cache_runs() {
    assert_eq!(gateway_cache::run_example().unwrap(), (5, 0));
}

#[test]
fn http_service_runs() {
    let report = http_service::run_example().unwrap();
    assert_eq!(report["k"], 3);
}
