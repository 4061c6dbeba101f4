use rand::Rng;

use super::SamplerConfig;
use crate::rng::StreamRng;

/// Outcome of one CRP seating draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrpDraw {
    New,
    /// Index into the environment's class list.
    Existing(usize),
}

/// Environment id for every step: start uniformly, then at each step switch
/// with probability `switch_probability` to a uniformly chosen other one.
pub fn sample_environment_schedule(config: &SamplerConfig, rng: &mut StreamRng) -> Vec<u32> {
    let n = config.environments as u32;
    let mut env = rng.random_range(0..n);
    let mut out = Vec::with_capacity(config.sequence_length);
    for t in 0..config.sequence_length {
        if t > 0 && n > 1 && rng.random_bool(config.switch_probability) {
            let other = rng.random_range(0..n - 1);
            env = if other >= env { other + 1 } else { other };
        }
        out.push(env);
    }
    out
}

/// Probability of seating a new class after `m` draws over `k` classes.
pub fn crp_new_probability(k: usize, m: usize, alpha: f64, theta: f64) -> f64 {
    (k as f64 * alpha + theta) / (m as f64 + theta)
}

fn crp_draw_once(counts: &[u32], config: &SamplerConfig, rng: &mut StreamRng) -> CrpDraw {
    let m: u32 = counts.iter().sum();
    let p_new = crp_new_probability(counts.len(), m as usize, config.crp_alpha, config.crp_theta);
    let mut r = rng.random::<f64>();
    if r < p_new {
        return CrpDraw::New;
    }
    r -= p_new;
    let denom = m as f64 + config.crp_theta;
    for (i, &c) in counts.iter().enumerate() {
        let w = (c as f64 - config.crp_alpha) / denom;
        if r < w {
            return CrpDraw::Existing(i);
        }
        r -= w;
    }
    // Rounding left a sliver of mass unassigned.
    CrpDraw::Existing(counts.len() - 1)
}

/// Two-parameter CRP draw over an environment's class `counts`.
///
/// Drawing a class already at `max_appearances` triggers a full redraw; after
/// `crp_retries` failed redraws NEW is forced. When `budget_left` is false a
/// NEW outcome is redrawn as well, falling back to a weighted choice among
/// uncapped classes, and to NEW only if every class is capped.
pub fn crp_sample_class(
    counts: &[u32],
    budget_left: bool,
    config: &SamplerConfig,
    rng: &mut StreamRng,
) -> CrpDraw {
    let cap = config.max_appearances as u32;
    for _ in 0..=config.crp_retries {
        match crp_draw_once(counts, config, rng) {
            CrpDraw::New if budget_left => return CrpDraw::New,
            CrpDraw::Existing(i) if counts[i] < cap => return CrpDraw::Existing(i),
            _ => {}
        }
    }
    if budget_left {
        return CrpDraw::New;
    }
    let open: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] < cap).collect();
    if open.is_empty() {
        return CrpDraw::New;
    }
    let total: f64 = open.iter().map(|&i| counts[i] as f64 - config.crp_alpha).sum();
    let mut r = rng.random::<f64>() * total;
    for &i in &open {
        let w = counts[i] as f64 - config.crp_alpha;
        if r < w {
            return CrpDraw::Existing(i);
        }
        r -= w;
    }
    CrpDraw::Existing(*open.last().unwrap())
}
