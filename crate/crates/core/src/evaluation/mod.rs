//! Online evaluation: every step is scored on the prediction made before
//! its label was revealed.

mod metrics;
mod report;

pub use metrics::{
    average_precision, forgetting_bin, forgetting_table, mean_se, n_shot_accuracy, ranked, timestep_curve,
    ApIntegral, Cell, ForgettingTable, ShotAccuracy, FORGETTING_BINS, FORGETTING_SHOTS,
};
pub use report::{curve_svg, MetricsReport};

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use ocfsl_autodiff::Graph;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Stamp;
use crate::learners::{rollout, OnlineLearner, Prediction};
use crate::sequences::{ClassId, Sequence};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub sequence: u64,
    pub step: usize,
    /// `1 − û`.
    pub knownness: f64,
    pub predicted: Option<ClassId>,
    pub truth: ClassId,
    /// Ground-truth novelty of the step.
    pub novel: bool,
    pub labeled: bool,
    /// Labeled occurrences of the true class strictly before this step.
    pub shots: usize,
    /// Steps since the true class's label was last revealed; `None` if never.
    pub since_label: Option<usize>,
    pub env: u32,
}

impl PredictionRecord {
    pub fn is_correct(&self) -> bool {
        self.predicted == Some(self.truth)
    }

    /// Counted as a hit in the known/unknown ranking.
    pub fn is_hit(&self) -> bool {
        !self.novel && self.is_correct()
    }
}

/// Turn aligned predictions into records, deriving the shot and recency
/// bookkeeping from the sequence's past only.
pub fn records_for(seq: &Sequence, predictions: &[Prediction], g: &Graph) -> Vec<PredictionRecord> {
    assert_eq!(seq.len(), predictions.len(), "one prediction per step");
    build_records(seq, |t| (predictions[t].knownness(g) as f64, predictions[t].predicted_class(g)))
}

/// Records of a learner that knows the ground truth: certain about every
/// known step and correct on it, certain about every novel one.
pub fn oracle_records(seq: &Sequence) -> Vec<PredictionRecord> {
    build_records(seq, |t| {
        let s = &seq.steps[t];
        if s.novel {
            (0.0, None)
        } else {
            (1.0, Some(s.y))
        }
    })
}

fn build_records(seq: &Sequence, mut score: impl FnMut(usize) -> (f64, Option<ClassId>)) -> Vec<PredictionRecord> {
    let mut shots: BTreeMap<ClassId, usize> = BTreeMap::new();
    let mut last: BTreeMap<ClassId, usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(seq.len());
    for (t, step) in seq.steps.iter().enumerate() {
        let (knownness, predicted) = score(t);
        out.push(PredictionRecord {
            sequence: seq.id,
            step: t,
            knownness,
            predicted,
            truth: step.y,
            novel: step.novel,
            labeled: step.label.is_some(),
            shots: shots.get(&step.y).copied().unwrap_or(0),
            since_label: last.get(&step.y).map(|s| t - s),
            env: step.env,
        });
        if step.label.is_some() {
            *shots.entry(step.y).or_default() += 1;
            last.insert(step.y, t);
        }
    }
    out
}

/// Records of one sequence, with every unlabeled write applied.
pub fn evaluate_sequence(learner: &dyn OnlineLearner, seq: &Sequence) -> Result<Vec<PredictionRecord>> {
    let mut g = Graph::new();
    let preds = rollout(learner, &mut g, seq, |_| true)?;
    Ok(records_for(seq, &preds, &g))
}

/// Records for all sequences, in sequence order regardless of parallelism.
pub fn evaluate_records(learner: &dyn OnlineLearner, sequences: &[Sequence]) -> Result<Vec<PredictionRecord>> {
    let per_seq: Vec<Vec<PredictionRecord>> = sequences
        .par_iter()
        .map(|s| evaluate_sequence(learner, s))
        .collect::<Result<_>>()?;
    Ok(per_seq.into_iter().flatten().collect())
}

pub fn evaluate(learner: &dyn OnlineLearner, sequences: &[Sequence]) -> Result<MetricsReport> {
    MetricsReport::from_records(&evaluate_records(learner, sequences)?)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordsHeader {
    provenance: Stamp,
}

/// JSON lines: an optional `{"provenance": ...}` header, then one record per line.
pub fn write_records(w: &mut impl Write, stamp: Option<&Stamp>, records: &[PredictionRecord]) -> Result<()> {
    if let Some(stamp) = stamp {
        writeln!(w, "{}", serde_json::to_string(&RecordsHeader { provenance: stamp.clone() })?)?;
    }
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

pub fn read_records(r: impl BufRead) -> Result<(Option<Stamp>, Vec<PredictionRecord>)> {
    let mut stamp = None;
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if out.is_empty() && stamp.is_none() && line.starts_with("{\"provenance\"") {
            let h: RecordsHeader = serde_json::from_str(&line).map_err(|e| Error::Record {
                line: i + 1,
                reason: format!("bad provenance header: {e}"),
            })?;
            stamp = Some(h.provenance);
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Record {
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok((stamp, out))
}
