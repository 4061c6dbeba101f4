#![allow(dead_code)]

use ocfsl_core::context::EncoderConfig;
use ocfsl_core::learners::{Learner, LearnerConfig, LearnerKind};
use ocfsl_core::sequences::{generate_sequence, SamplerConfig, Sequence};

/// A short toy stream: `feature + cue` input dims.
pub fn sampler(length: usize, feature: usize, cue: usize, semi: bool) -> SamplerConfig {
    SamplerConfig {
        sequence_length: length,
        feature_dim: feature,
        cue_dim: cue,
        spatial_cue: cue > 0,
        semi_supervised: semi,
        max_classes: 12,
        ..Default::default()
    }
}

pub fn learner_config(kind: LearnerKind, embedding: Option<usize>, hidden: usize) -> LearnerConfig {
    LearnerConfig {
        kind,
        encoder: EncoderConfig {
            hidden: Vec::new(),
            output_dim: embedding,
        },
        hidden,
        ..Default::default()
    }
}

pub fn learner(config: LearnerConfig, sampler: &SamplerConfig, seed: u64) -> Learner {
    Learner::new(config, sampler.input_dim(), sampler.max_classes, seed).unwrap()
}

pub fn sequences(config: &SamplerConfig, seed: u64, n: usize) -> Vec<Sequence> {
    (0..n as u64).map(|i| generate_sequence(config, seed, i)).collect()
}
