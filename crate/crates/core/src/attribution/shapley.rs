use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AttributionError, AttributionResult, EstimatorKind, Probe, ValueFunction};
use crate::domain::Mask;

/// Shapley values by enumerating all `2^M` subsets.
pub fn shap_exact(v: &dyn ValueFunction, exact_limit: usize) -> Result<AttributionResult, AttributionError> {
    let m = v.num_segments();
    if m > exact_limit || m > 30 {
        return Err(AttributionError::TooManySegments {
            found: m,
            limit: exact_limit.min(30),
        });
    }
    let mut probe = Probe::new(v);
    let masks: Vec<Mask> = (0..1u64 << m).map(|code| Mask::from_code(m, code)).collect();
    let values = probe.values(&masks)?;

    // weight[s] = s! (M - s - 1)! / M!
    let mut fact = vec![1.0f64; m + 1];
    for i in 1..=m {
        fact[i] = fact[i - 1] * i as f64;
    }
    let weight: Vec<f64> = (0..m).map(|s| fact[s] * fact[m - s - 1] / fact[m]).collect();

    let mut phi = vec![0.0; m];
    for (code, &without) in values.iter().enumerate() {
        let size = (code as u64).count_ones() as usize;
        for (j, p) in phi.iter_mut().enumerate() {
            if code & (1 << j) == 0 {
                *p += weight[size] * (values[code | (1 << j)] - without);
            }
        }
    }
    Ok(AttributionResult::new(phi, EstimatorKind::ShapExact, 0, probe))
}

/// Permutation-sampling Shapley estimate. Permutations are drawn in
/// antithetic pairs (an ordering and its reverse); an odd count leaves the
/// last ordering unpaired.
pub fn shap_mc(v: &dyn ValueFunction, n_permutations: usize, seed: u64) -> Result<AttributionResult, AttributionError> {
    if n_permutations == 0 {
        return Err(AttributionError::InvalidArgument("n_permutations must be at least 1".into()));
    }
    let m = v.num_segments();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut orders: Vec<Vec<usize>> = Vec::with_capacity(n_permutations);
    while orders.len() < n_permutations {
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng);
        if orders.len() + 1 < n_permutations {
            let mut reversed = order.clone();
            reversed.reverse();
            orders.push(order);
            orders.push(reversed);
        } else {
            orders.push(order);
        }
    }

    // prefix masks of every ordering, evaluated together
    let mut masks = Vec::with_capacity(orders.len() * (m + 1));
    for order in &orders {
        let mut mask = Mask::empty(m);
        masks.push(mask.clone());
        for &j in order {
            mask = mask.with(j);
            masks.push(mask.clone());
        }
    }
    let mut probe = Probe::new(v);
    let values = probe.values(&masks)?;

    let mut phi = vec![0.0; m];
    for (order, chain) in orders.iter().zip(values.chunks(m + 1)) {
        for (pos, &j) in order.iter().enumerate() {
            phi[j] += chain[pos + 1] - chain[pos];
        }
    }
    for p in &mut phi {
        *p /= orders.len() as f64;
    }
    Ok(AttributionResult::new(phi, EstimatorKind::ShapMc, seed, probe))
}
