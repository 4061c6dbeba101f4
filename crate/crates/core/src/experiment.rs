//! End-to-end runs: train on fresh sequences, pick the best validation
//! checkpoint, evaluate on a held-out set. Also the 2×2 context ablation.

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::evaluation::{evaluate, mean_se, MetricsReport};
use crate::learners::{Learner, LearnerKind};
use crate::rng::derive_seed;
use crate::sequences::{generate_dataset, Sequence};
use crate::training::{train, LogRow, TrainState};
use crate::Result;

/// The first `count` training sequences for `seed`, in the order training
/// consumes them.
pub fn training_set(config: &ExperimentConfig, seed: u64, count: usize) -> Vec<Sequence> {
    generate_dataset(&config.sampler, derive_seed(seed, "train", 0), 0, count)
}

/// Validation sequences for `seed`; disjoint from training and evaluation streams.
pub fn validation_set(config: &ExperimentConfig, seed: u64) -> Vec<Sequence> {
    generate_dataset(&config.sampler, derive_seed(seed, "val", 0), 0, config.train.val_sequences)
}

/// Held-out evaluation sequences for `seed`.
pub fn evaluation_set(config: &ExperimentConfig, seed: u64) -> Vec<Sequence> {
    generate_dataset(&config.sampler, derive_seed(seed, "eval", 0), 0, config.eval.sequences)
}

pub fn new_learner(config: &ExperimentConfig, seed: u64) -> Result<Learner> {
    Learner::new(
        config.learner.clone(),
        config.sampler.input_dim(),
        config.sampler.max_classes,
        seed,
    )
}

pub struct Outcome {
    /// Learner holding the best-validation parameters.
    pub learner: Learner,
    pub report: MetricsReport,
    pub log: Vec<LogRow>,
    pub best_step: u64,
}

/// Train from scratch with `seed` and evaluate the best checkpoint.
pub fn train_and_evaluate(config: &ExperimentConfig, seed: u64) -> Result<Outcome> {
    config.validate()?;
    let mut learner = new_learner(config, seed)?;
    let val = validation_set(config, seed);
    let mut state = TrainState::new(&learner, &config.train);
    let mut log = Vec::new();
    train(&mut learner, &config.train, &config.sampler, seed, &val, &mut state, |row| {
        log.push(row.clone());
        Ok(())
    })?;
    learner.params = state.best_params;
    let report = evaluate(&learner, &evaluation_set(config, seed))?;
    Ok(Outcome {
        learner,
        report,
        log,
        best_step: state.best_step,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub spatial_cue: bool,
    pub shuffled: bool,
    pub learner: LearnerKind,
    /// One AP per seed, in seed order.
    pub ap: Vec<f64>,
    pub mean: f64,
    pub se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub fn cell(&self, spatial_cue: bool, shuffled: bool, learner: LearnerKind) -> Option<&AblationCell> {
        self.cells
            .iter()
            .find(|c| c.spatial_cue == spatial_cue && c.shuffled == shuffled && c.learner == learner)
    }

    /// Mean AP gain of CPM over the prototype network in one condition.
    pub fn gain(&self, spatial_cue: bool, shuffled: bool) -> Option<f64> {
        let cpm = self.cell(spatial_cue, shuffled, LearnerKind::Cpm)?;
        let pn = self.cell(spatial_cue, shuffled, LearnerKind::ProtoNet)?;
        Some(cpm.mean - pn.mean)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("spatial_cue,shuffled,learner,mean_ap,se,seeds\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.spatial_cue,
                c.shuffled,
                c.learner.name(),
                c.mean,
                c.se,
                c.ap.len()
            ));
        }
        out
    }
}

/// {cue off, on} × {ordered, shuffled} × {CPM, ProtoNet}, each trained and
/// evaluated with the same seeds. `progress` is told about every finished run.
pub fn context_ablation(
    base: &ExperimentConfig,
    seeds: &[u64],
    mut progress: impl FnMut(&AblationCell, u64, f64),
) -> Result<AblationTable> {
    let mut cells = Vec::new();
    for spatial_cue in [false, true] {
        for shuffled in [false, true] {
            for learner in [LearnerKind::Cpm, LearnerKind::ProtoNet] {
                let mut config = base.clone();
                config.sampler.spatial_cue = spatial_cue;
                config.sampler.shuffle = shuffled;
                config.learner.kind = learner;
                let mut cell = AblationCell {
                    spatial_cue,
                    shuffled,
                    learner,
                    ap: Vec::new(),
                    mean: 0.0,
                    se: 0.0,
                };
                for &seed in seeds {
                    let ap = train_and_evaluate(&config, seed)?.report.ap;
                    cell.ap.push(ap);
                    progress(&cell, seed, ap);
                }
                (cell.mean, cell.se) = mean_se(&cell.ap);
                cells.push(cell);
            }
        }
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        cells,
    })
}
