//! Statistical and structural properties of the episode sampler.

mod common;

use std::collections::HashMap;

use ocfsl_core::rng::stream_rng;
use ocfsl_core::sequences::{
    crp_new_probability, crp_sample_class, generate_sequence, label_probability, mask_labels,
    recompute_novelty, run_length_stats, sample_environment_schedule, CrpDraw, SamplerConfig, TimeStep,
};
use proptest::prelude::*;

#[test]
fn crp_new_rate_matches_closed_form() {
    let cfg = SamplerConfig::default();
    let counts = [4u32, 3, 3];
    let p = crp_new_probability(3, 10, cfg.crp_alpha, cfg.crp_theta);
    let mut rng = stream_rng(1, "crp", 0);
    let n = 10_000;
    let hits = (0..n)
        .filter(|_| crp_sample_class(&counts, true, &cfg, &mut rng) == CrpDraw::New)
        .count();
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    let rate = hits as f64 / n as f64;
    assert!((rate - p).abs() < 3.0 * sigma, "rate {rate} vs {p}");
}

#[test]
fn environment_runs_are_geometric() {
    let cfg = SamplerConfig::default();
    let schedules: Vec<Vec<u32>> = (0..10_000)
        .map(|i| sample_environment_schedule(&cfg, &mut stream_rng(2, "env", i)))
        .collect();
    let s = run_length_stats(schedules.iter().map(Vec::as_slice));
    assert!((s.mean - 5.0).abs() < 3.0 * s.se, "mean run {} ± {}", s.mean, s.se);
}

fn occurrences(classes: &[u32]) -> Vec<TimeStep> {
    classes
        .iter()
        .map(|&y| TimeStep {
            x: vec![0.0],
            y,
            label: Some(y),
            env: 0,
            novel: false,
        })
        .collect()
}

/// Expected label rate of one occurrence of a class seen `m` times: the
/// independent draw plus the flip applied when every draw came up empty.
fn expected_rate(m: usize, ratio: f64) -> f64 {
    let a = label_probability(m, ratio);
    a + (1.0 - a).powi(m as i32) / m as f64
}

#[test]
fn masking_keeps_a_label_per_class_and_matches_rates() {
    let cfg = SamplerConfig {
        semi_supervised: true,
        max_appearances: 20,
        ..Default::default()
    };
    let (mut labeled, mut total, mut expected) = (0usize, 0usize, 0.0);
    for i in 0..10_000 {
        let seq = generate_sequence(&cfg, 3, i);
        let mut m: HashMap<u32, usize> = HashMap::new();
        for s in &seq.steps {
            *m.entry(s.y).or_default() += 1;
        }
        for c in m.keys() {
            assert!(seq.steps.iter().any(|s| s.y == *c && s.label.is_some()), "sequence {i} class {c}");
        }
        for s in seq.steps.iter().filter(|s| m[&s.y] >= 8) {
            total += 1;
            expected += expected_rate(m[&s.y], cfg.label_ratio);
            labeled += s.label.is_some() as usize;
        }
    }
    assert!(total > 10_000);
    let p = expected / total as f64;
    let sigma = (p * (1.0 - p) / total as f64).sqrt();
    let rate = labeled as f64 / total as f64;
    assert!((rate - p).abs() < 3.0 * sigma, "rate {rate} vs {p} over {total}");
}

#[test]
fn mask_flips_exactly_one_label_back_when_a_class_loses_all() {
    // ratio → 0 and m_k = 40 make every independent draw almost surely empty
    let classes: Vec<u32> = (0..80).map(|t| (t / 40) as u32).collect();
    let mut steps = occurrences(&classes);
    mask_labels(&mut steps, 1e-12, &mut stream_rng(0, "m", 0));
    recompute_novelty(&mut steps);
    for c in [0, 1] {
        assert_eq!(steps.iter().filter(|s| s.y == c && s.label.is_some()).count(), 1);
    }
    assert!(steps[0].novel && steps[40].novel);
}

#[test]
fn noiseless_nearest_class_vector_oracle_is_perfect() {
    let cfg = SamplerConfig {
        feature_noise: 0.0,
        cue_noise: 0.0,
        ..Default::default()
    };
    for i in 0..50 {
        let seq = generate_sequence(&cfg, 9, i);
        // class vectors read off the noiseless features
        let mut vectors: HashMap<u32, &[f64]> = HashMap::new();
        for s in &seq.steps {
            vectors.entry(s.y).or_insert(&s.x[..cfg.feature_dim]);
        }
        for s in &seq.steps {
            let roster = &seq.rosters[s.env as usize];
            let best = roster
                .iter()
                .filter(|c| vectors.contains_key(c))
                .min_by(|a, b| {
                    let d = |c: &u32| -> f64 {
                        vectors[c].iter().zip(&s.x).map(|(u, v)| (u - v).powi(2)).sum()
                    };
                    d(a).total_cmp(&d(b))
                })
                .unwrap();
            assert_eq!(*best, s.y);
        }
    }
}

fn config_strategy() -> impl Strategy<Value = SamplerConfig> {
    (
        1usize..120,
        1usize..7,
        0.0f64..0.9,
        0.0f64..0.9,
        0.1f64..5.0,
        1usize..8,
        any::<bool>(),
        any::<bool>(),
        0.05f64..1.0,
        0.0f64..1.0,
    )
        .prop_map(|(t, envs, p, a, th, cap, semi, shuffle, ratio, amb)| SamplerConfig {
            sequence_length: t,
            environments: envs,
            switch_probability: p,
            crp_alpha: a,
            crp_theta: th,
            max_appearances: cap,
            semi_supervised: semi,
            shuffle,
            label_ratio: ratio,
            ambiguity: amb,
            max_classes: 30,
            ..Default::default()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_sequences_satisfy_invariants(cfg in config_strategy(), seed in any::<u64>()) {
        let seq = generate_sequence(&cfg, seed, 0);
        prop_assert_eq!(seq.len(), cfg.sequence_length);
        let cap = (!cfg.shuffle).then_some(cfg.max_appearances);
        prop_assert!(seq.validate(cap).is_ok(), "{:?}", seq.validate(cap));
        if !cfg.semi_supervised {
            prop_assert!(seq.steps.iter().all(|s| s.label.is_some()));
        }
        prop_assert_eq!(generate_sequence(&cfg, seed, 0), seq);
    }

    #[test]
    fn crp_probability_is_a_probability(k in 0usize..50, extra in 0usize..500, a in 0.0f64..0.99, th in 0.01f64..10.0) {
        let m = k + extra;
        let p = crp_new_probability(k, m, a, th);
        prop_assert!(p > 0.0 && p <= 1.0 + 1e-12);
    }
}
