//! Summary statistics of generated datasets (the `generate` sidecar).

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::Sequence;

/// Environment run lengths. The mean is estimated per transition as
/// `transitions / switches`, which is unbiased by the runs cut off at the
/// end of each sequence; `se` follows from the binomial switch count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLengthStats {
    pub transitions: usize,
    pub switches: usize,
    pub mean: f64,
    pub se: f64,
    /// Count of completed runs by length; index 0 is unused. Runs cut off
    /// by the sequence end are not counted.
    pub histogram: Vec<usize>,
}

pub fn run_length_stats<'a>(schedules: impl IntoIterator<Item = &'a [u32]>) -> RunLengthStats {
    let (mut transitions, mut switches) = (0usize, 0usize);
    let mut histogram = vec![0usize];
    for sched in schedules {
        let mut run = 1;
        for w in sched.windows(2) {
            transitions += 1;
            if w[0] == w[1] {
                run += 1;
            } else {
                switches += 1;
                if histogram.len() <= run {
                    histogram.resize(run + 1, 0);
                }
                histogram[run] += 1;
                run = 1;
            }
        }
    }
    let (mean, se) = if switches == 0 {
        (f64::INFINITY, f64::INFINITY)
    } else {
        let p = switches as f64 / transitions as f64;
        (1.0 / p, (p * (1.0 - p) / transitions as f64).sqrt() / (p * p))
    };
    RunLengthStats {
        transitions,
        switches,
        mean,
        se,
        histogram,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub sequences: usize,
    pub steps: usize,
    pub labeled_fraction: f64,
    pub novel_fraction: f64,
    pub mean_classes: f64,
    pub run_length: RunLengthStats,
    /// Mean number of distinct classes seen up to and including step `t`.
    pub class_growth: Vec<f64>,
}

pub fn dataset_stats(sequences: &[Sequence]) -> DatasetStats {
    let steps: usize = sequences.iter().map(Sequence::len).sum();
    let count = |f: &dyn Fn(&super::TimeStep) -> bool| {
        sequences.iter().flat_map(|s| &s.steps).filter(|s| f(s)).count()
    };
    let frac = |n: usize| if steps == 0 { 0.0 } else { n as f64 / steps as f64 };
    let longest = sequences.iter().map(Sequence::len).max().unwrap_or(0);
    let mut growth = vec![0.0; longest];
    let mut reach = vec![0usize; longest];
    for seq in sequences {
        let mut seen = HashSet::new();
        for (t, s) in seq.steps.iter().enumerate() {
            seen.insert(s.y);
            growth[t] += seen.len() as f64;
            reach[t] += 1;
        }
    }
    for (g, n) in growth.iter_mut().zip(&reach) {
        *g /= *n as f64;
    }
    let envs: Vec<Vec<u32>> = sequences
        .iter()
        .map(|s| s.steps.iter().map(|t| t.env).collect())
        .collect();
    DatasetStats {
        sequences: sequences.len(),
        steps,
        labeled_fraction: frac(count(&|s| s.label.is_some())),
        novel_fraction: frac(count(&|s| s.novel)),
        mean_classes: if sequences.is_empty() {
            0.0
        } else {
            sequences.iter().map(|s| s.num_classes() as f64).sum::<f64>() / sequences.len() as f64
        },
        run_length: run_length_stats(envs.iter().map(Vec::as_slice)),
        class_growth: growth,
    }
}
