use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::PredictionRecord;
use crate::{Error, Result};

/// How the area under the precision–recall points is integrated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApIntegral {
    /// `Σ precision@N · Δrecall@N`.
    #[default]
    RightRiemann,
    /// Average of consecutive precisions per recall increment, with
    /// precision 1 at recall 0.
    Trapezoid,
}

/// Records ranked by known-ness, ties by (sequence, step).
pub fn ranked(records: &[PredictionRecord]) -> Vec<&PredictionRecord> {
    let mut out: Vec<&PredictionRecord> = records.iter().collect();
    out.sort_by(|a, b| {
        b.knownness
            .total_cmp(&a.knownness)
            .then(a.sequence.cmp(&b.sequence))
            .then(a.step.cmp(&b.step))
    });
    out
}

/// Average precision of the known/unknown ranking where a hit must also
/// carry the correct class.
pub fn average_precision(records: &[PredictionRecord], integral: ApIntegral) -> Result<f64> {
    let known = records.iter().filter(|r| !r.novel).count();
    if known == 0 {
        return Err(Error::NoKnownInstances);
    }
    let k = known as f64;
    let mut hits = 0usize;
    let mut prev_precision = 1.0;
    let mut ap = 0.0;
    for (i, r) in ranked(records).into_iter().enumerate() {
        let hit = r.is_hit();
        hits += hit as usize;
        let precision = hits as f64 / (i + 1) as f64;
        if hit {
            ap += match integral {
                ApIntegral::RightRiemann => precision,
                ApIntegral::Trapezoid => 0.5 * (precision + prev_precision),
            };
        }
        prev_precision = precision;
    }
    Ok(ap / k)
}

/// Mean of per-sequence accuracies with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotAccuracy {
    pub mean: f64,
    /// Zero by convention when only one sequence qualifies.
    pub se: f64,
    pub sequences: usize,
    pub records: usize,
    /// Accuracy pooled over records rather than sequences.
    pub pooled: f64,
}

/// Mean and standard error of `values`; SE is zero for a single value.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Accuracy on steps whose class label had been revealed exactly `n` times.
pub fn n_shot_accuracy(records: &[PredictionRecord], n: usize) -> Option<ShotAccuracy> {
    assert!(n >= 1, "N-shot accuracy needs N >= 1");
    let mut per_seq: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.shots == n) {
        let e = per_seq.entry(r.sequence).or_default();
        e.0 += r.is_correct() as usize;
        e.1 += 1;
    }
    if per_seq.is_empty() {
        return None;
    }
    let accs: Vec<f64> = per_seq.values().map(|(c, t)| *c as f64 / *t as f64).collect();
    let (mean, se) = mean_se(&accs);
    let correct: usize = per_seq.values().map(|v| v.0).sum();
    let total: usize = per_seq.values().map(|v| v.1).sum();
    Some(ShotAccuracy {
        mean,
        se,
        sequences: per_seq.len(),
        records: total,
        pooled: correct as f64 / total as f64,
    })
}

/// Inclusive bins of steps since the class label was last revealed.
pub const FORGETTING_BINS: [(usize, usize); 6] = [(1, 2), (3, 5), (6, 10), (11, 20), (21, 50), (51, 100)];
/// Shot counts reported in the forgetting table.
pub const FORGETTING_SHOTS: [usize; 2] = [1, 3];

pub fn forgetting_bin(since: usize) -> Option<usize> {
    FORGETTING_BINS
        .iter()
        .position(|&(lo, hi)| (lo..=hi).contains(&since))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub accuracy: f64,
    /// Binomial standard error of the pooled accuracy.
    pub se: f64,
    pub count: usize,
}

/// `cells[shot index][bin index]`, `None` where no record qualifies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingTable {
    pub cells: Vec<Vec<Option<Cell>>>,
}

pub fn forgetting_table(records: &[PredictionRecord]) -> ForgettingTable {
    let mut tally = vec![vec![(0usize, 0usize); FORGETTING_BINS.len()]; FORGETTING_SHOTS.len()];
    for r in records {
        let (Some(si), Some(since)) = (
            FORGETTING_SHOTS.iter().position(|&s| s == r.shots),
            r.since_label,
        ) else {
            continue;
        };
        if let Some(bi) = forgetting_bin(since) {
            tally[si][bi].0 += r.is_correct() as usize;
            tally[si][bi].1 += 1;
        }
    }
    let cells = tally
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|(c, n)| {
                    (n > 0).then(|| {
                        let p = c as f64 / n as f64;
                        Cell {
                            accuracy: p,
                            se: (p * (1.0 - p) / n as f64).sqrt(),
                            count: n,
                        }
                    })
                })
                .collect()
        })
        .collect();
    ForgettingTable { cells }
}

/// Accuracy at each step index over steps that are not novel.
pub fn timestep_curve(records: &[PredictionRecord]) -> Vec<Option<Cell>> {
    let len = records.iter().map(|r| r.step + 1).max().unwrap_or(0);
    let mut tally = vec![(0usize, 0usize); len];
    for r in records.iter().filter(|r| !r.novel) {
        tally[r.step].0 += r.is_correct() as usize;
        tally[r.step].1 += 1;
    }
    tally
        .into_iter()
        .map(|(c, n)| {
            (n > 0).then(|| {
                let p = c as f64 / n as f64;
                Cell {
                    accuracy: p,
                    se: (p * (1.0 - p) / n as f64).sqrt(),
                    count: n,
                }
            })
        })
        .collect()
}
