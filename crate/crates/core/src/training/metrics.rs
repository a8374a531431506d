//! Accuracy, per-question-type breakdown and selection hit-rates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::feature_store::{FeatureBundle, Sample};
use crate::model::SelectionTrace;

/// What happened on one evaluated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub predicted: usize,
    pub answer: usize,
    pub qtype: String,
    pub loss: f64,
    /// `None` when the sample has no planted ground truth.
    pub tssm_hit: Option<bool>,
    pub srsm_hit: Option<bool>,
}

impl Outcome {
    pub fn new(bundle: &FeatureBundle, predicted: usize, loss: f64, trace: &SelectionTrace) -> Self {
        let (tssm_hit, srsm_hit) = match bundle.planted {
            Some(p) => (Some(trace.segment_hit(p.segment)), Some(srsm_hit(trace, p.segment, p.patch, bundle.dims.snippets))),
            None => (None, None),
        };
        Self { predicted, answer: bundle.answer, qtype: bundle.qtype.clone(), loss, tssm_hit, srsm_hit }
    }
}

/// Whether `patch` was kept in at least half of the selected frames that
/// belong to `segment`. A missed segment counts as a miss.
pub fn srsm_hit(trace: &SelectionTrace, segment: usize, patch: usize, snippets: usize) -> bool {
    let frames: Vec<&Vec<usize>> = trace
        .frame_snippets
        .iter()
        .zip(&trace.patch_indices)
        .filter(|(&snip, _)| snip / snippets == segment)
        .map(|(_, idx)| idx)
        .collect();
    if frames.is_empty() {
        return false;
    }
    let hits = frames.iter().filter(|idx| idx.binary_search(&patch).is_ok()).count();
    2 * hits >= frames.len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QtypeAccuracy {
    pub samples: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub samples: usize,
    pub accuracy: f64,
    pub loss: f64,
    pub per_qtype: BTreeMap<String, QtypeAccuracy>,
    /// Fraction of planted samples whose planted segment was selected.
    pub tssm_hit_rate: Option<f64>,
    /// Fraction of planted samples whose planted patch was kept (see [`srsm_hit`]).
    pub srsm_hit_rate: Option<f64>,
}

impl Metrics {
    /// Aggregates outcomes in order. Panics on an empty slice.
    pub fn from_outcomes(outcomes: &[Outcome]) -> Self {
        assert!(!outcomes.is_empty(), "metrics of no samples");
        let n = outcomes.len();
        let correct = outcomes.iter().filter(|o| o.predicted == o.answer).count();
        let loss = outcomes.iter().map(|o| o.loss).sum::<f64>() / n as f64;
        let mut by_type: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for o in outcomes {
            let e = by_type.entry(o.qtype.clone()).or_default();
            e.0 += 1;
            e.1 += usize::from(o.predicted == o.answer);
        }
        let per_qtype = by_type
            .into_iter()
            .map(|(k, (total, right))| (k, QtypeAccuracy { samples: total, accuracy: right as f64 / total as f64 }))
            .collect();
        let rate = |f: fn(&Outcome) -> Option<bool>| {
            let flags: Vec<bool> = outcomes.iter().filter_map(f).collect();
            (!flags.is_empty()).then(|| flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64)
        };
        Self {
            samples: n,
            accuracy: correct as f64 / n as f64,
            loss,
            per_qtype,
            tssm_hit_rate: rate(|o| o.tssm_hit),
            srsm_hit_rate: rate(|o| o.srsm_hit),
        }
    }
}

/// Samples that carry a planted ground truth.
pub fn planted_count(samples: &[Sample]) -> usize {
    samples.iter().filter(|s| s.bundle.planted.is_some()).count()
}
