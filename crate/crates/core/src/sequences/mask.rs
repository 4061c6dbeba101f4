use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use super::{ClassId, TimeStep};
use crate::rng::StreamRng;

/// Per-occurrence label probability for a class seen `m_k` times: rare
/// classes are almost always labeled, frequent ones approach `ratio`.
pub fn label_probability(m_k: usize, ratio: f64) -> f64 {
    (1.0 - ratio) * (-0.5 * (m_k as f64 - 1.0)).exp() + ratio
}

/// Hide labels independently per occurrence, then guarantee every class at
/// least one revealed label by un-hiding one uniformly chosen occurrence.
/// Novelty flags are left stale; call [`recompute_novelty`] afterwards.
pub fn mask_labels(steps: &mut [TimeStep], ratio: f64, rng: &mut StreamRng) {
    let mut occurrences: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for (t, s) in steps.iter().enumerate() {
        occurrences.entry(s.y).or_default().push(t);
    }
    for (class, idx) in occurrences {
        let p = label_probability(idx.len(), ratio);
        let mut any = false;
        for &t in &idx {
            let labeled = rng.random_bool(p.clamp(0.0, 1.0));
            steps[t].label = labeled.then_some(class);
            any |= labeled;
        }
        if !any {
            let t = idx[rng.random_range(0..idx.len())];
            steps[t].label = Some(class);
        }
    }
}

/// A step is novel iff no earlier step revealed the label of its class.
pub fn recompute_novelty(steps: &mut [TimeStep]) {
    let mut known = BTreeSet::new();
    for s in steps {
        s.novel = !known.contains(&s.y);
        if s.label.is_some() {
            known.insert(s.y);
        }
    }
}
