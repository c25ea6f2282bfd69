use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AttributionError, AttributionResult, EstimatorKind, Probe, ValueFunction};
use crate::domain::Mask;

/// Leave-one-out: `a_j = v(full) − v(full \ {j})`, from `M + 1` masks.
pub fn loo(v: &dyn ValueFunction) -> Result<AttributionResult, AttributionError> {
    let m = v.num_segments();
    let full = Mask::full(m);
    let mut masks = vec![full.clone()];
    masks.extend((0..m).map(|j| full.without(j)));
    let mut probe = Probe::new(v);
    let values = probe.values(&masks)?;
    let scores = values[1..].iter().map(|drop| values[0] - drop).collect();
    Ok(AttributionResult::new(scores, EstimatorKind::Loo, 0, probe))
}

/// Greedy forward selection from the empty set; each segment is scored by
/// its gain at the step it was added. Uses `M(M+1)/2 + 1` evaluations.
pub fn greedy_forward(v: &dyn ValueFunction) -> Result<AttributionResult, AttributionError> {
    let m = v.num_segments();
    let mut probe = Probe::new(v);
    let mut current = Mask::empty(m);
    let mut base = probe.value(&current)?;
    let mut scores = vec![0.0; m];
    while current.count_ones() < m {
        let remaining: Vec<usize> = (0..m).filter(|&j| !current.get(j)).collect();
        let candidates: Vec<Mask> = remaining.iter().map(|&j| current.with(j)).collect();
        let values = probe.values(&candidates)?;
        // first maximum wins, so ties go to the lowest index
        let mut best = 0;
        for i in 1..remaining.len() {
            if values[i] > values[best] {
                best = i;
            }
        }
        scores[remaining[best]] = values[best] - base;
        base = values[best];
        current = candidates[best].clone();
    }
    Ok(AttributionResult::new(scores, EstimatorKind::Greedy, 0, probe))
}

/// I.i.d. uniform scores; the random-selection baseline.
pub fn random_attribution(m: usize, seed: u64) -> AttributionResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = (0..m).map(|_| rng.random::<f64>()).collect();
    let nothing = super::FnValue::new(m, |_: &Mask| 0.0);
    AttributionResult::new(scores, EstimatorKind::Random, seed, Probe::new(&nothing))
}

/// Best size-`k` mask by exhaustive search. Ties go to the mask whose kept
/// indices, listed in increasing order, are lexicographically smallest.
pub fn brute_force_best(v: &dyn ValueFunction, k: usize, exact_limit: usize) -> Result<Mask, AttributionError> {
    let m = v.num_segments();
    if m > exact_limit || m > 30 {
        return Err(AttributionError::TooManySegments {
            found: m,
            limit: exact_limit.min(30),
        });
    }
    if k > m {
        return Err(AttributionError::InvalidArgument(format!("k = {k} exceeds M = {m}")));
    }
    let mut masks: Vec<Mask> = (0..1u64 << m)
        .map(|code| Mask::from_code(m, code))
        .filter(|mask| mask.count_ones() == k)
        .collect();
    masks.sort_by(|a, b| a.indices().cmp(b.indices()));
    let values = Probe::new(v).values(&masks)?;
    let mut best = 0;
    for i in 1..masks.len() {
        if values[i] > values[best] {
            best = i;
        }
    }
    Ok(masks.swap_remove(best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::FnValue;

    fn additive(w: Vec<f64>) -> FnValue<impl Fn(&Mask) -> f64 + Send + Sync> {
        FnValue::new(w.len(), move |m: &Mask| m.indices().map(|j| w[j]).sum())
    }

    #[test]
    fn loo_examples() {
        let r = loo(&additive(vec![0.6, 0.4])).unwrap();
        assert_eq!(r.scores, [0.6, 0.4]);
        assert_eq!(r.mask_evaluations, 3);
        let v = FnValue::new(2, |m: &Mask| match (m.get(0), m.get(1)) {
            (true, true) => 1.0,
            (false, true) => 0.3,
            _ => 0.0,
        });
        assert!((loo(&v).unwrap().scores[0] - 0.7).abs() < 1e-15);
        assert_eq!(loo(&FnValue::new(3, |_: &Mask| 0.5)).unwrap().scores, [0.0; 3]);
    }

    #[test]
    fn greedy_examples() {
        let r = greedy_forward(&additive(vec![0.6, 0.4])).unwrap();
        assert_eq!(r.scores, [0.6, 0.4]);
        assert_eq!(r.probe_log[1].mask, Mask::from_bits(vec![true, false]));
        assert_eq!(r.mask_evaluations, 4);

        let r = greedy_forward(&FnValue::new(4, |_: &Mask| 0.2)).unwrap();
        assert_eq!(r.scores, [0.0; 4]);
        let added: Vec<Mask> = r.probe_log.iter().map(|p| p.mask.clone()).collect();
        // chosen path: {0}, {0,1}, {0,1,2}, full
        for path in [vec![0], vec![0, 1], vec![0, 1, 2]] {
            assert!(added.contains(&Mask::from_indices(4, path)));
        }
        assert_eq!(r.mask_evaluations, 4 * 5 / 2 + 1);
    }

    #[test]
    fn greedy_scores_gain_at_addition() {
        // segments 0 and 1 are redundant: either alone gives 0.5, both 0.6;
        // segment 2 adds 0.2 on top of anything.
        let v = FnValue::new(3, |m: &Mask| {
            let core = match (m.get(0), m.get(1)) {
                (true, true) => 0.6,
                (true, false) | (false, true) => 0.5,
                _ => 0.0,
            };
            core + if m.get(2) { 0.2 } else { 0.0 }
        });
        let r = greedy_forward(&v).unwrap();
        // step 1 adds 0 (0.5 ties with 1, lower index wins), step 2 adds 2
        // (gain 0.2 beats 0.1), step 3 adds 1 with gain 0.1
        let expect = [0.5, 0.1, 0.2];
        for (a, b) in r.scores.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{:?}", r.scores);
        }
    }

    #[test]
    fn random_is_seeded() {
        assert_eq!(random_attribution(5, 9).scores, random_attribution(5, 9).scores);
        assert_ne!(random_attribution(5, 9).scores, random_attribution(5, 10).scores);
        assert_eq!(random_attribution(1, 0).len(), 1);
    }

    #[test]
    fn brute_force_examples() {
        let best = brute_force_best(&additive(vec![0.6, 0.4, 0.1]), 2, 12).unwrap();
        assert_eq!(best, Mask::from_bits(vec![true, true, false]));
        assert_eq!(brute_force_best(&additive(vec![0.6, 0.4, 0.1]), 3, 12).unwrap(), Mask::full(3));
        let flat = FnValue::new(3, |_: &Mask| 1.0);
        assert_eq!(brute_force_best(&flat, 1, 12).unwrap(), Mask::from_bits(vec![true, false, false]));
        assert!(brute_force_best(&flat, 1, 2).is_err());
    }
}
