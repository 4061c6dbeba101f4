//! Episode streams: environment schedules, class draws, label masks and the
//! synthetic feature generator.

mod io;
mod mask;
mod sampler;
mod stats;
mod toy;

pub use io::{read_sequences, sequence_from_json, sequence_to_json, write_sequences, SCHEMA_VERSION};
pub use mask::{label_probability, mask_labels, recompute_novelty};
pub use sampler::{crp_new_probability, crp_sample_class, sample_environment_schedule, CrpDraw};
pub use stats::{dataset_stats, run_length_stats, DatasetStats, RunLengthStats};
pub use toy::generate_toy_features;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::rng::{derive_seed, stream_rng, StreamRng};
use crate::{Error, Real, Result};

pub type ClassId = u32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub sequence_length: usize,
    pub environments: usize,
    pub switch_probability: f64,
    pub crp_alpha: f64,
    pub crp_theta: f64,
    pub max_appearances: usize,
    /// Soft per-sequence class budget; the memory capacity is sized from it.
    pub max_classes: usize,
    /// Full CRP redraws allowed when a capped class is drawn before NEW is forced.
    pub crp_retries: usize,
    pub label_ratio: f64,
    pub semi_supervised: bool,
    /// Class-signal dimensions of each feature vector.
    pub feature_dim: usize,
    /// Dimensions of the appended environment cue.
    pub cue_dim: usize,
    pub spatial_cue: bool,
    /// Spread of environment style centres around the origin.
    pub style_scale: f64,
    /// Spread of class vectors around their environment's style centre.
    pub class_spread: f64,
    pub feature_noise: f64,
    pub cue_noise: f64,
    /// Fraction of new classes that reuse the vector of a class from another
    /// environment.
    pub ambiguity: f64,
    /// Uniformly permute each sequence after generation.
    pub shuffle: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            sequence_length: 150,
            environments: 5,
            switch_probability: 0.2,
            crp_alpha: 0.2,
            crp_theta: 1.0,
            max_appearances: 6,
            max_classes: 50,
            crp_retries: 16,
            label_ratio: 0.3,
            semi_supervised: false,
            feature_dim: 16,
            cue_dim: 8,
            spatial_cue: true,
            style_scale: 1.0,
            class_spread: 0.6,
            feature_noise: 0.15,
            cue_noise: 1.0,
            ambiguity: 0.5,
            shuffle: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, reason: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("sampler.{field}"), reason))
            }
        };
        check(self.sequence_length >= 1, "sequence_length", "must be at least 1")?;
        check(self.environments >= 1, "environments", "must be at least 1")?;
        check(
            self.switch_probability >= 0.0 && self.switch_probability < 1.0,
            "switch_probability",
            "must lie in [0, 1)",
        )?;
        check(
            (0.0..1.0).contains(&self.crp_alpha),
            "crp_alpha",
            "must lie in [0, 1)",
        )?;
        check(self.crp_theta > 0.0, "crp_theta", "must be positive")?;
        check(self.max_appearances >= 1, "max_appearances", "must be at least 1")?;
        check(self.max_classes >= 1, "max_classes", "must be at least 1")?;
        check(
            self.label_ratio > 0.0 && self.label_ratio <= 1.0,
            "label_ratio",
            "must lie in (0, 1]",
        )?;
        check(self.feature_dim >= 1, "feature_dim", "must be at least 1")?;
        check(
            !self.spatial_cue || self.cue_dim >= 1,
            "cue_dim",
            "must be at least 1 when the spatial cue is on",
        )?;
        for (name, v) in [
            ("style_scale", self.style_scale),
            ("class_spread", self.class_spread),
            ("feature_noise", self.feature_noise),
            ("cue_noise", self.cue_noise),
        ] {
            check(v.is_finite() && v >= 0.0, name, "must be finite and non-negative")?;
        }
        check(
            (0.0..=1.0).contains(&self.ambiguity),
            "ambiguity",
            "must lie in [0, 1]",
        )
    }

    /// Length of each generated feature vector.
    pub fn input_dim(&self) -> usize {
        self.feature_dim + if self.spatial_cue { self.cue_dim } else { 0 }
    }

    /// Short stable digest of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeStep {
    pub x: Vec<Real>,
    pub y: ClassId,
    /// Revealed label; `None` when the step is unlabeled.
    pub label: Option<ClassId>,
    /// Hidden environment, used only for evaluation and diagnostics.
    pub env: u32,
    /// True iff no earlier step revealed the label of `y`.
    pub novel: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub id: u64,
    pub seed: u64,
    pub config_hash: String,
    /// Classes owned by each environment.
    pub rosters: Vec<Vec<ClassId>>,
    pub steps: Vec<TimeStep>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.rosters.iter().map(Vec::len).sum()
    }

    /// Check the structural invariants; `max_appearances` is enforced when given.
    pub fn validate(&self, max_appearances: Option<usize>) -> std::result::Result<(), String> {
        let mut counts = std::collections::BTreeMap::<ClassId, (usize, usize)>::new();
        let dim = self.steps.first().map(|s| s.x.len());
        let mut known = std::collections::BTreeSet::new();
        for (t, s) in self.steps.iter().enumerate() {
            if Some(s.x.len()) != dim {
                return Err(format!("step {t}: feature length {} differs", s.x.len()));
            }
            if let Some(l) = s.label {
                if l != s.y {
                    return Err(format!("step {t}: revealed label {l} differs from class {}", s.y));
                }
            }
            if !self.rosters.is_empty() {
                let roster = self
                    .rosters
                    .get(s.env as usize)
                    .ok_or_else(|| format!("step {t}: environment {} has no roster", s.env))?;
                if !roster.contains(&s.y) {
                    return Err(format!(
                        "step {t}: class {} is not in the roster of environment {}",
                        s.y, s.env
                    ));
                }
            }
            if s.novel != !known.contains(&s.y) {
                return Err(format!("step {t}: novelty flag inconsistent with earlier labels"));
            }
            if s.label.is_some() {
                known.insert(s.y);
            }
            let c = counts.entry(s.y).or_default();
            c.0 += 1;
            c.1 += s.label.is_some() as usize;
        }
        for (class, (n, labeled)) in counts {
            if labeled == 0 {
                return Err(format!("class {class} never receives a label"));
            }
            if let Some(cap) = max_appearances {
                if n > cap {
                    return Err(format!("class {class} appears {n} times (cap {cap})"));
                }
            }
        }
        Ok(())
    }
}

/// Class and environment assignment of one sequence, before features.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    pub envs: Vec<u32>,
    pub classes: Vec<ClassId>,
    pub rosters: Vec<Vec<ClassId>>,
}

/// Draw environments and classes for one sequence. Class ids are assigned
/// in order of first appearance; rosters are disjoint across environments.
pub fn sample_skeleton(config: &SamplerConfig, rng: &mut StreamRng) -> Skeleton {
    let envs = sample_environment_schedule(config, rng);
    let mut rosters: Vec<Vec<ClassId>> = vec![Vec::new(); config.environments];
    let mut env_counts: Vec<Vec<u32>> = vec![Vec::new(); config.environments];
    let mut next: ClassId = 0;
    let mut classes = Vec::with_capacity(envs.len());
    for &e in &envs {
        let e = e as usize;
        let budget_left = (next as usize) < config.max_classes;
        let draw = crp_sample_class(&env_counts[e], budget_left, config, rng);
        let class = match draw {
            CrpDraw::New => {
                rosters[e].push(next);
                env_counts[e].push(1);
                next += 1;
                next - 1
            }
            CrpDraw::Existing(i) => {
                env_counts[e][i] += 1;
                rosters[e][i]
            }
        };
        classes.push(class);
    }
    Skeleton {
        envs,
        classes,
        rosters,
    }
}

/// Generate sequence `index` as a pure function of `(config, seed, index)`.
pub fn generate_sequence(config: &SamplerConfig, seed: u64, index: u64) -> Sequence {
    let mut rng = stream_rng(seed, "sampler", index);
    let skeleton = sample_skeleton(config, &mut rng);
    let xs = generate_toy_features(&skeleton, config, &mut rng);
    let mut steps: Vec<TimeStep> = skeleton
        .classes
        .iter()
        .zip(&skeleton.envs)
        .zip(xs)
        .map(|((&y, &env), x)| TimeStep {
            x,
            y,
            label: Some(y),
            env,
            novel: false,
        })
        .collect();
    if config.semi_supervised {
        mask_labels(&mut steps, config.label_ratio, &mut rng);
    }
    recompute_novelty(&mut steps);
    let mut seq = Sequence {
        id: index,
        seed: derive_seed(seed, "sampler", index),
        config_hash: config.hash(),
        rosters: skeleton.rosters,
        steps,
    };
    if config.shuffle {
        shuffle_sequence(&mut seq, &mut rng);
    }
    seq
}

/// Generate `count` sequences starting at index `first`, in parallel.
pub fn generate_dataset(config: &SamplerConfig, seed: u64, first: u64, count: usize) -> Vec<Sequence> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_sequence(config, seed, first + i))
        .collect()
}

/// Uniformly permute the steps and recompute novelty flags.
pub fn shuffle_sequence(seq: &mut Sequence, rng: &mut StreamRng) {
    seq.steps.shuffle(rng);
    recompute_novelty(&mut seq.steps);
}
