use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AttributionError, AttributionResult, EstimatorKind, Probe, ValueFunction};
use crate::domain::Mask;

pub const DEFAULT_LAMBDA_GRID: [f64; 6] = [0.1, 0.05, 0.02, 0.01, 0.005, 0.001];
const TOLERANCE: f64 = 1e-8;
const MAX_SWEEPS: usize = 10_000;
const FOLDS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct LassoFit {
    pub lambda: f64,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub n_masks: usize,
    pub converged: bool,
    /// Mean cross-validated squared error per grid lambda, when computed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cv_errors: Vec<(f64, f64)>,
}

impl LassoFit {
    pub fn predict(&self, mask: &Mask) -> f64 {
        self.intercept + mask.indices().map(|j| self.coefficients[j]).sum::<f64>()
    }
}

/// `n` i.i.d. Bernoulli(`p_include`) masks; all-zero draws are redrawn.
pub fn sample_masks(m: usize, n: usize, seed: u64, p_include: f64) -> Vec<Mask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| loop {
            let mask = Mask::from_bits((0..m).map(|_| rng.random_bool(p_include)).collect());
            if mask.count_ones() > 0 || m == 0 {
                break mask;
            }
        })
        .collect()
}

/// Minimises `(1/2n)·Σ(y − b0 − x·b)² + λ·‖b‖₁` by cyclic coordinate
/// descent on centred columns.
pub fn fit_lasso(designs: &[Mask], targets: &[f64], lambda: f64) -> Result<LassoFit, AttributionError> {
    let n = designs.len();
    if n != targets.len() {
        return Err(AttributionError::DimensionMismatch(format!(
            "{n} designs but {} targets",
            targets.len()
        )));
    }
    let m = designs.first().map_or(0, Mask::len);
    if designs.iter().any(|d| d.len() != m) {
        return Err(AttributionError::DimensionMismatch("designs differ in length".into()));
    }
    if n == 0 || n < m {
        return Err(AttributionError::DimensionMismatch(format!(
            "{n} designs for {m} coefficients"
        )));
    }
    if lambda.is_nan() || lambda < 0.0 {
        return Err(AttributionError::InvalidArgument(format!("lambda {lambda} is negative")));
    }
    let nf = n as f64;
    let y_mean = targets.iter().sum::<f64>() / nf;
    let x_mean: Vec<f64> = (0..m)
        .map(|j| designs.iter().filter(|d| d.get(j)).count() as f64 / nf)
        .collect();
    let columns: Vec<Vec<f64>> = (0..m)
        .map(|j| {
            designs
                .iter()
                .map(|d| d.get(j) as u8 as f64 - x_mean[j])
                .collect()
        })
        .collect();
    let scale: Vec<f64> = columns.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>() / nf).collect();

    let mut beta = vec![0.0; m];
    let mut residual: Vec<f64> = targets.iter().map(|y| y - y_mean).collect();
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut max_delta = 0.0f64;
        for j in 0..m {
            if scale[j] <= f64::EPSILON {
                continue;
            }
            let rho = columns[j].iter().zip(&residual).map(|(x, r)| x * r).sum::<f64>() / nf + scale[j] * beta[j];
            let updated = soft_threshold(rho, lambda) / scale[j];
            let delta = updated - beta[j];
            if delta != 0.0 {
                for (r, x) in residual.iter_mut().zip(&columns[j]) {
                    *r -= delta * x;
                }
                beta[j] = updated;
                max_delta = max_delta.max(delta.abs());
            }
        }
        if max_delta < TOLERANCE {
            converged = true;
            break;
        }
    }
    let intercept = y_mean - x_mean.iter().zip(&beta).map(|(x, b)| x * b).sum::<f64>();
    Ok(LassoFit {
        lambda,
        coefficients: beta,
        intercept,
        n_masks: n,
        converged,
        cv_errors: Vec::new(),
    })
}

fn soft_threshold(x: f64, lambda: f64) -> f64 {
    if x > lambda {
        x - lambda
    } else if x < -lambda {
        x + lambda
    } else {
        0.0
    }
}

/// Samples masks, fits along `lambda_grid` and scores segments by the
/// coefficients of the chosen fit. Among the lambdas whose fit keeps at
/// least one coefficient, the one with the lowest 5-fold cross-validated
/// error wins (ties to the larger lambda); with fewer than 10 masks the
/// largest such lambda is used.
pub fn lasso_attribution(
    v: &dyn ValueFunction,
    n_masks: usize,
    seed: u64,
    p_include: f64,
    lambda_grid: &[f64],
) -> Result<AttributionResult, AttributionError> {
    let m = v.num_segments();
    if lambda_grid.is_empty() || lambda_grid.windows(2).any(|w| w[0] <= w[1]) {
        return Err(AttributionError::InvalidArgument(
            "lambda grid must be non-empty and strictly descending".into(),
        ));
    }
    if !(p_include > 0.0 && p_include < 1.0) {
        return Err(AttributionError::InvalidArgument(format!("p_include {p_include} is outside (0, 1)")));
    }
    let designs = sample_masks(m, n_masks, seed, p_include);
    let mut probe = Probe::new(v);
    let targets = probe.values(&designs)?;

    let spread = targets.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
        - targets.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let fits: Vec<LassoFit> = lambda_grid
        .iter()
        .map(|&l| fit_lasso(&designs, &targets, l))
        .collect::<Result<_, _>>()?;
    let candidates: Vec<usize> = (0..fits.len())
        .filter(|&i| fits[i].coefficients.iter().any(|&c| c != 0.0))
        .collect();

    let mut chosen = if candidates.is_empty() {
        if spread > 1e-12 {
            return Err(AttributionError::AllZeroFit);
        }
        fits.last().cloned().expect("grid is non-empty")
    } else if designs.len() >= 2 * FOLDS {
        let errors: Vec<f64> = candidates
            .iter()
            .map(|&i| cv_error(&designs, &targets, lambda_grid[i]))
            .collect::<Result<_, _>>()?;
        let mut best = 0;
        for i in 1..candidates.len() {
            if errors[i] < errors[best] {
                best = i;
            }
        }
        let mut fit = fits[candidates[best]].clone();
        fit.cv_errors = candidates.iter().map(|&i| lambda_grid[i]).zip(errors).collect();
        fit
    } else {
        fits[candidates[0]].clone()
    };
    chosen.n_masks = designs.len();

    let mut result = AttributionResult::new(chosen.coefficients.clone(), EstimatorKind::Lasso, seed, probe);
    result.lasso = Some(chosen);
    Ok(result)
}

/// Mean held-out squared error with fold `i % FOLDS` held out. Folds whose
/// training part is too small to fit are skipped.
fn cv_error(designs: &[Mask], targets: &[f64], lambda: f64) -> Result<f64, AttributionError> {
    let m = designs[0].len();
    let mut total = 0.0;
    let mut count = 0usize;
    for fold in 0..FOLDS {
        let (mut train_x, mut train_y, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for (i, (d, &y)) in designs.iter().zip(targets).enumerate() {
            if i % FOLDS == fold {
                test.push((d, y));
            } else {
                train_x.push(d.clone());
                train_y.push(y);
            }
        }
        if train_x.len() < m.max(1) {
            continue;
        }
        let fit = fit_lasso(&train_x, &train_y, lambda)?;
        for (d, y) in test {
            total += (fit.predict(d) - y).powi(2);
            count += 1;
        }
    }
    Ok(if count == 0 { f64::INFINITY } else { total / count as f64 })
}
