//! Learner checkpoints with provenance, and resumable training state.

use std::path::Path;

use ocfsl_autodiff::{Adam, AdamConfig, Checkpoint, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Stamp};
use crate::experiment::new_learner;
use crate::learners::Learner;
use crate::training::TrainState;
use crate::{Error, Real, Result};

/// Metadata stored alongside every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub stamp: Stamp,
    /// Optimizer steps taken when the parameters were saved.
    pub step: u64,
    pub best_step: u64,
    pub best_val_ap: Option<f64>,
}

impl Provenance {
    /// Parameters are only meaningful for the learner architecture and input
    /// width they were trained with.
    pub fn check_learner(&self, config: &ExperimentConfig) -> Result<()> {
        self.stamp.check_schema()?;
        let saved = &self.stamp.config;
        if saved.learner != config.learner || saved.sampler.input_dim() != config.sampler.input_dim() {
            return Err(Error::config(
                "checkpoint",
                format!(
                    "trained as {} on {}-dimensional input (config {}), asked for {} on {}",
                    saved.learner.kind.name(),
                    saved.sampler.input_dim(),
                    self.stamp.config_hash,
                    config.learner.kind.name(),
                    config.sampler.input_dim()
                ),
            ));
        }
        Ok(())
    }

    /// Resuming additionally needs the same data stream and seed; the
    /// training schedule itself may change (e.g. more steps).
    pub fn check_resumable(&self, config: &ExperimentConfig) -> Result<()> {
        self.check_learner(config)?;
        let saved = &self.stamp.config;
        if saved.sampler != config.sampler || saved.seed != config.seed {
            return Err(Error::config(
                "checkpoint",
                format!(
                    "cannot resume: sampler or seed differ from the checkpoint (config {})",
                    self.stamp.config_hash
                ),
            ));
        }
        Ok(())
    }
}

const BEST_PREFIX: &str = "best/";
const PARAM_PREFIX: &str = "param/";

fn tensors<'a>(prefix: &'a str, params: &'a ParamStore) -> impl Iterator<Item = (String, Tensor)> + 'a {
    params.iter().map(move |(n, t)| (format!("{prefix}{n}"), t.clone()))
}

fn params_from(ck: &Checkpoint, prefix: &str, template: &ParamStore) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, t) in &ck.tensors {
        if let Some(n) = name.strip_prefix(prefix) {
            store.insert(n, t.clone());
        }
    }
    let mut out = template.clone();
    out.load_from(&store)?;
    Ok(out)
}

pub fn read_provenance(path: &Path) -> Result<(Checkpoint, Provenance)> {
    let ck = Checkpoint::load(path)?;
    let prov: Provenance = serde_json::from_str(&ck.metadata)
        .map_err(|e| Error::config("checkpoint", format!("{}: bad metadata: {e}", path.display())))?;
    Ok((ck, prov))
}

/// Save the parameters of `learner` only.
pub fn save_learner(path: &Path, learner: &Learner, provenance: &Provenance) -> Result<()> {
    let ck = Checkpoint {
        metadata: serde_json::to_string(provenance)?,
        tensors: tensors(PARAM_PREFIX, &learner.params).collect(),
    };
    Ok(ck.save(path)?)
}

/// Load the (live) parameters of a checkpoint into a learner for `config`.
pub fn load_learner(path: &Path, config: &ExperimentConfig) -> Result<(Learner, Provenance)> {
    let (ck, prov) = read_provenance(path)?;
    prov.check_learner(config)?;
    let mut learner = new_learner(config, config.seed)?;
    learner.params = params_from(&ck, PARAM_PREFIX, &learner.params)?;
    Ok((learner, prov))
}

/// Save everything needed to continue training: live parameters, the
/// best-so-far parameters and the optimizer moments.
pub fn save_state(path: &Path, config: &ExperimentConfig, learner: &Learner, state: &TrainState) -> Result<()> {
    let prov = Provenance {
        stamp: config.stamp(),
        step: state.step,
        best_step: state.best_step,
        best_val_ap: state.best_val_ap,
    };
    let mut all: Vec<_> = tensors(PARAM_PREFIX, &learner.params).collect();
    all.extend(tensors(BEST_PREFIX, &state.best_params));
    all.extend(state.adam.state_tensors());
    let ck = Checkpoint {
        metadata: serde_json::to_string(&prov)?,
        tensors: all,
    };
    Ok(ck.save(path)?)
}

pub fn load_state(path: &Path, config: &ExperimentConfig) -> Result<(Learner, TrainState)> {
    let (ck, prov) = read_provenance(path)?;
    prov.check_resumable(config)?;
    let mut learner = new_learner(config, config.seed)?;
    let best_params = params_from(&ck, BEST_PREFIX, &learner.params)?;
    learner.params = params_from(&ck, PARAM_PREFIX, &learner.params)?;
    let adam = Adam::restore(
        AdamConfig {
            learning_rate: config.train.learning_rate as Real,
            ..Default::default()
        },
        prov.step,
        ck.tensors.iter().filter(|(n, _)| n.starts_with("adam.")).cloned(),
    );
    let state = TrainState {
        step: prov.step,
        adam,
        best_params,
        best_val_ap: prov.best_val_ap,
        best_step: prov.best_step,
    };
    Ok((learner, state))
}
