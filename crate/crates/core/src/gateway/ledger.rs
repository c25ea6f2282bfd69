use serde::{Deserialize, Serialize};

/// Pipeline stage a gateway call is charged to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Segmentation,
    /// LLM meta-calls made by an estimator (mask proposals, rankings).
    Attribution,
    /// Task prompts rendered from (masked) templates.
    Evaluation,
    Compression,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct PhaseCounts {
    pub lookups: u64,
    pub cache_hits: u64,
    pub calls: u64,
}

impl PhaseCounts {
    fn since(&self, earlier: &PhaseCounts) -> PhaseCounts {
        PhaseCounts {
            lookups: self.lookups.saturating_sub(earlier.lookups),
            cache_hits: self.cache_hits.saturating_sub(earlier.cache_hits),
            calls: self.calls.saturating_sub(earlier.calls),
        }
    }
}

/// Counters of gateway activity. `total_calls` counts cache misses sent
/// upstream; backoff re-sends are counted separately in `retries`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct CallLedger {
    pub total_calls: u64,
    pub cache_hits: u64,
    pub lookups: u64,
    pub retries: u64,
    pub wall_time_ms: u64,
    pub segmentation: PhaseCounts,
    pub attribution: PhaseCounts,
    pub evaluation: PhaseCounts,
    pub compression: PhaseCounts,
}

impl CallLedger {
    pub fn phase(&self, phase: Phase) -> &PhaseCounts {
        match phase {
            Phase::Segmentation => &self.segmentation,
            Phase::Attribution => &self.attribution,
            Phase::Evaluation => &self.evaluation,
            Phase::Compression => &self.compression,
        }
    }

    fn phase_mut(&mut self, phase: Phase) -> &mut PhaseCounts {
        match phase {
            Phase::Segmentation => &mut self.segmentation,
            Phase::Attribution => &mut self.attribution,
            Phase::Evaluation => &mut self.evaluation,
            Phase::Compression => &mut self.compression,
        }
    }

    pub(super) fn record_lookup(&mut self, phase: Phase, hit: bool) {
        self.lookups += 1;
        self.phase_mut(phase).lookups += 1;
        if hit {
            self.cache_hits += 1;
            self.phase_mut(phase).cache_hits += 1;
        }
    }

    pub(super) fn record_hits(&mut self, phase: Phase, n: u64) {
        self.lookups += n;
        self.cache_hits += n;
        let counts = self.phase_mut(phase);
        counts.lookups += n;
        counts.cache_hits += n;
    }

    pub(super) fn record_call(&mut self, phase: Phase, retry: bool) {
        if retry {
            self.retries += 1;
        } else {
            self.total_calls += 1;
            self.phase_mut(phase).calls += 1;
        }
    }

    /// Activity between `earlier` and `self`.
    pub fn since(&self, earlier: &CallLedger) -> CallLedger {
        CallLedger {
            total_calls: self.total_calls.saturating_sub(earlier.total_calls),
            cache_hits: self.cache_hits.saturating_sub(earlier.cache_hits),
            lookups: self.lookups.saturating_sub(earlier.lookups),
            retries: self.retries.saturating_sub(earlier.retries),
            wall_time_ms: self.wall_time_ms.saturating_sub(earlier.wall_time_ms),
            segmentation: self.segmentation.since(&earlier.segmentation),
            attribution: self.attribution.since(&earlier.attribution),
            evaluation: self.evaluation.since(&earlier.evaluation),
            compression: self.compression.since(&earlier.compression),
        }
    }
}
