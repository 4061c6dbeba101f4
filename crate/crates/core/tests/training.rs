//! Training-loop contracts.

mod common;

use ocfsl_core::config::ExperimentConfig;
use ocfsl_core::experiment::{new_learner, validation_set};
use ocfsl_core::learners::LearnerKind;
use ocfsl_core::training::{sequence_gradient, train, validation_ap, LogRow, TrainConfig, TrainState};

fn small(kind: LearnerKind) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.sampler = common::sampler(30, 6, 2, true);
    c.learner = common::learner_config(kind, Some(8), 8);
    c.train = TrainConfig {
        steps: 6,
        batch_size: 3,
        val_every: 2,
        val_sequences: 4,
        milestones: vec![3],
        ..Default::default()
    };
    c.train.ramp.every = 2;
    c
}

fn run(config: &ExperimentConfig, steps: u64, state: Option<TrainState>) -> (ocfsl_core::learners::Learner, TrainState, Vec<LogRow>) {
    let mut learner = new_learner(config, config.seed).unwrap();
    if let Some(s) = &state {
        learner.params = s.best_params.clone();
    }
    let mut state = state.unwrap_or_else(|| TrainState::new(&learner, &config.train));
    let mut cfg = config.train.clone();
    cfg.steps = steps;
    let val = validation_set(config, config.seed);
    let mut log = Vec::new();
    train(&mut learner, &cfg, &config.sampler, config.seed, &val, &mut state, |r| {
        log.push(r.clone());
        Ok(())
    })
    .unwrap();
    (learner, state, log)
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let mut c = small(LearnerKind::Cpm);
    c.train.learning_rate = 0.0;
    let before = new_learner(&c, 0).unwrap().params;
    let (after, _, log) = run(&c, 4, None);
    assert_eq!(after.params, before);
    assert_eq!(log.len(), 4);
}

#[test]
fn zero_bce_weight_removes_the_bce_gradient() {
    let c = small(LearnerKind::Cpm);
    let learner = new_learner(&c, 0).unwrap();
    let mut seq = common::sequences(&c.sampler, 1, 1).remove(0);
    // keep only novel labeled steps: no CE term remains
    seq.steps.retain(|s| s.novel);
    let g = sequence_gradient(&learner, &seq, 0.0, false, |_| true).unwrap();
    assert!(g.grads.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    let g = sequence_gradient(&learner, &seq, 1.0, false, |_| true).unwrap();
    assert!(g.grads.global_norm() > 0.0);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let c = small(LearnerKind::Cpm);
    let (straight, straight_state, straight_log) = run(&c, 6, None);

    // interrupt after three steps, carrying the live parameters over
    let mut learner = new_learner(&c, c.seed).unwrap();
    let val = validation_set(&c, c.seed);
    let mut state = TrainState::new(&learner, &c.train);
    let mut log = Vec::new();
    let mut cfg = c.train.clone();
    cfg.steps = 3;
    train(&mut learner, &cfg, &c.sampler, c.seed, &val, &mut state, |r| {
        log.push(r.clone());
        Ok(())
    })
    .unwrap();
    cfg.steps = 6;
    train(&mut learner, &cfg, &c.sampler, c.seed, &val, &mut state, |r| {
        log.push(r.clone());
        Ok(())
    })
    .unwrap();

    assert_eq!(learner.params, straight.params);
    assert_eq!(state.best_params, straight_state.best_params);
    // step 3 is a validation point only in the interrupted run
    let strip = |rows: &[LogRow]| -> Vec<LogRow> {
        rows.iter().map(|r| LogRow { val_ap: None, ..r.clone() }).collect()
    };
    assert_eq!(strip(&log), strip(&straight_log));
}

#[test]
fn training_improves_validation_ap_on_the_toy_task() {
    for seed in 0..3 {
        let mut c = ExperimentConfig::default();
        c.seed = seed;
        c.train.steps = 30;
        c.train.val_every = 30;
        c.train.val_sequences = 16;
        let mut learner = new_learner(&c, seed).unwrap();
        let val = validation_set(&c, seed);
        let untrained = validation_ap(&learner, &val).unwrap();
        let mut state = TrainState::new(&learner, &c.train);
        train(&mut learner, &c.train, &c.sampler, seed, &val, &mut state, |_| Ok(())).unwrap();
        let trained = state.best_val_ap.unwrap();
        assert!(trained > untrained, "seed {seed}: {trained} ≤ {untrained}");
    }
}
