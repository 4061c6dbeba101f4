//! Behavioural contracts shared by every learner.

mod common;

use ocfsl_autodiff::{sigmoid, Graph};
use ocfsl_core::evaluation::{evaluate, n_shot_accuracy, evaluate_records};
use ocfsl_core::learners::{rollout, Ablations, Learner, LearnerConfig, LearnerKind, Prediction};
use ocfsl_core::memory::{Dissimilarity, WriteRule};
use ocfsl_core::sequences::{SamplerConfig, Sequence};

/// Values of a prediction, detached from its tape.
#[derive(Debug, PartialEq)]
struct Snapshot {
    log_probs: Option<Vec<f64>>,
    classes: Vec<Option<u32>>,
    novelty_logit: Option<f64>,
}

fn snapshot(g: &Graph, p: &Prediction) -> Snapshot {
    Snapshot {
        log_probs: p.log_probs.map(|v| g.value(v).data().to_vec()),
        classes: p.classes.clone(),
        novelty_logit: p.novelty_logit.map(|v| g.scalar_value(v)),
    }
}

fn run_all(learner: &Learner, seq: &Sequence, write: bool) -> Vec<Snapshot> {
    let mut g = Graph::new();
    let preds = rollout(learner, &mut g, seq, |_| write).unwrap();
    preds.iter().map(|p| snapshot(&g, p)).collect()
}

fn all_variants(s: &SamplerConfig) -> Vec<Learner> {
    let mut out = Vec::new();
    for kind in [
        LearnerKind::Cpm,
        LearnerKind::ProtoNet,
        LearnerKind::MatchingNet,
        LearnerKind::Imp,
        LearnerKind::Lstm,
    ] {
        out.push(common::learner(common::learner_config(kind, Some(8), 8), s, 7));
    }
    let mut gau = common::learner_config(LearnerKind::Cpm, Some(8), 8);
    gau.dissimilarity = Dissimilarity::Cosine;
    gau.write_rule = WriteRule::Gated;
    out.push(common::learner(gau, s, 8));
    out
}

#[test]
fn fully_ablated_cpm_matches_protonet_exactly() {
    let s = common::sampler(60, 6, 2, false);
    let mut cpm = common::learner_config(LearnerKind::Cpm, Some(8), 8);
    cpm.ablate = Ablations::all();
    let cpm = common::learner(cpm, &s, 42);
    let pn = common::learner(common::learner_config(LearnerKind::ProtoNet, Some(8), 8), &s, 42);
    for seq in common::sequences(&s, 1, 50) {
        assert_eq!(run_all(&cpm, &seq, false), run_all(&pn, &seq, false), "sequence {}", seq.id);
    }
}

#[test]
fn predictions_never_depend_on_the_future() {
    for semi in [false, true] {
        let s = common::sampler(25, 6, 2, semi);
        for learner in all_variants(&s) {
            for seq in common::sequences(&s, 3, 20) {
                let full = run_all(&learner, &seq, true);
                for t in 0..seq.len() {
                    let mut prefix = seq.clone();
                    prefix.steps.truncate(t + 1);
                    let truncated = run_all(&learner, &prefix, true);
                    assert_eq!(truncated[t], full[t], "{:?} step {t}", learner.kind());
                }
            }
        }
    }
}

#[test]
fn first_step_is_always_novel() {
    let s = common::sampler(5, 6, 2, false);
    let seq = &common::sequences(&s, 0, 1)[0];
    for learner in all_variants(&s) {
        let mut g = Graph::new();
        let preds = rollout(&learner, &mut g, seq, |_| true).unwrap();
        let u = 1.0 - preds[0].knownness(&g);
        if learner.kind() == LearnerKind::Lstm {
            // The recurrent baseline has no memory to consult; it only
            // emits a (learned) unknown score.
            assert!(u > 0.0 && u < 1.0);
        } else {
            assert_eq!(u, 1.0, "{:?}", learner.kind());
            assert!(preds[0].log_probs.is_none());
        }
    }
}

fn noiseless(ambiguity: f64) -> SamplerConfig {
    SamplerConfig {
        feature_noise: 0.0,
        cue_noise: 0.0,
        ambiguity,
        ..Default::default()
    }
}

fn identity_learner(kind: LearnerKind, s: &SamplerConfig) -> Learner {
    let cfg = LearnerConfig {
        kind,
        encoder: Default::default(),
        ..Default::default()
    };
    Learner::new(cfg, s.input_dim(), s.max_classes, 0).unwrap()
}

#[test]
fn immediate_repeat_is_recognised_by_untrained_cpm() {
    let s = noiseless(0.5);
    let cpm = identity_learner(LearnerKind::Cpm, &s);
    let mut checked = 0;
    for seq in common::sequences(&s, 2, 30) {
        let mut g = Graph::new();
        let preds = rollout(&cpm, &mut g, &seq, |_| false).unwrap();
        let (a, b) = (&seq.steps[0], &seq.steps[1]);
        if a.y == b.y {
            assert_eq!(preds[1].predicted_class(&g), Some(a.y));
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn protonet_is_perfect_at_one_shot_on_separable_data() {
    let s = noiseless(0.0);
    let pn = identity_learner(LearnerKind::ProtoNet, &s);
    let report = evaluate(&pn, &common::sequences(&s, 4, 20)).unwrap();
    assert_eq!(report.n_shot[0].as_ref().unwrap().mean, 1.0);
    let records = evaluate_records(&pn, &common::sequences(&s, 4, 20)).unwrap();
    assert_eq!(n_shot_accuracy(&records, 1).unwrap().pooled, 1.0);
}

#[test]
fn matching_net_novelty_at_exact_repeat() {
    let s = noiseless(0.0);
    let mn = identity_learner(LearnerKind::MatchingNet, &s);
    let seq = common::sequences(&s, 6, 1).remove(0);
    let mut g = Graph::new();
    let preds = rollout(&mn, &mut g, &seq, |_| false).unwrap();
    let t = (1..seq.len()).find(|&t| !seq.steps[t].novel).unwrap();
    let u = sigmoid(g.scalar_value(preds[t].novelty_logit.unwrap()));
    let expected = sigmoid(-10.0 / ocfsl_autodiff::softplus(1.0));
    assert!((u - expected).abs() < 1e-12, "{u} vs {expected}");
}
