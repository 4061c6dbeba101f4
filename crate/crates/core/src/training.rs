//! Sequence loss and the backpropagation-through-time training loop.

use ocfsl_autodiff::{clip_global_norm, Adam, AdamConfig, GradMap, Graph, ParamStore, Var};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::evaluation::{average_precision, evaluate_records, ApIntegral};
use crate::learners::{run, Learner, Prediction};
use crate::rng::{derive_seed, stream_rng};
use crate::sequences::{generate_sequence, SamplerConfig, Sequence, TimeStep};
use crate::{Error, Real, Result};

/// Novelty probabilities are clamped to `[ε, 1−ε]` inside the BCE.
pub const BCE_EPS: Real = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RampSchedule {
    pub start: f64,
    pub increment: f64,
    pub every: u64,
    pub cap: f64,
}

impl Default for RampSchedule {
    fn default() -> Self {
        Self {
            start: 0.0,
            increment: 0.2,
            every: 2000,
            cap: 1.0,
        }
    }
}

/// Probability that an unlabeled write is applied at training `step`.
pub fn ramp_probability(step: u64, schedule: &RampSchedule) -> f64 {
    let raw = schedule.start + schedule.increment * (step / schedule.every.max(1)) as f64;
    raw.clamp(0.0, schedule.cap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Steps at which the learning rate is multiplied by `decay`.
    pub milestones: Vec<u64>,
    pub decay: f64,
    pub clip: f64,
    /// BCE coefficient λ.
    pub bce_weight: f64,
    pub ramp: RampSchedule,
    /// Score every step, labeled or not.
    pub unmasked_loss: bool,
    /// Validate every this many steps (and after the last one).
    pub val_every: u64,
    pub val_sequences: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 6000,
            batch_size: 8,
            learning_rate: 2e-3,
            milestones: vec![3000, 4500],
            decay: 0.1,
            clip: 5.0,
            bce_weight: 1.0,
            ramp: RampSchedule::default(),
            unmasked_loss: false,
            val_every: 500,
            val_sequences: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |f: &str, r: &str| Err(Error::config(format!("train.{f}"), r));
        if self.batch_size == 0 {
            return fail("batch_size", "must be at least 1");
        }
        if !(self.learning_rate >= 0.0) {
            return fail("learning_rate", "must be non-negative");
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return fail("milestones", "must be strictly increasing");
        }
        if !(self.clip > 0.0) {
            return fail("clip", "must be positive");
        }
        if !(self.bce_weight >= 0.0) {
            return fail("bce_weight", "must be non-negative");
        }
        if self.val_every == 0 {
            return fail("val_every", "must be at least 1");
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, step: u64) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| step >= m).count();
        self.learning_rate * self.decay.powi(passed as i32)
    }
}

/// Loss terms of one sequence, each already divided by its length.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub ce: f64,
    pub total: f64,
    /// Steps contributing a BCE term.
    pub scored_steps: usize,
    /// Steps contributing a CE term.
    pub ce_steps: usize,
}

/// `−log û` and `−log(1−û)` for `û = σ(z)` with û clamped to `[ε, 1−ε]`.
/// Outside the clamp the term is a constant with zero gradient.
fn bce_term(g: &mut Graph, z: Option<Var>, novel: bool) -> Var {
    let limit = ((1.0 - BCE_EPS) / BCE_EPS).ln();
    let Some(z) = z else {
        // û = 1 exactly, clamped to 1−ε.
        let loss = if novel { -(1.0 - BCE_EPS).ln() } else { -BCE_EPS.ln() };
        return g.scalar(loss);
    };
    let zv = g.scalar_value(z);
    // novel: −log σ(z) = softplus(−z); known: −log(1−σ(z)) = softplus(z)
    let signed = if novel { -zv } else { zv };
    if signed.abs() > limit {
        let clamped = signed.clamp(-limit, limit);
        return g.scalar(ocfsl_autodiff::softplus(clamped));
    }
    let arg = if novel { g.neg(z) } else { z };
    g.softplus(arg)
}

/// `(1/T) Σ_t [λ·BCE_t + CE_t·(1−u_t)]`, restricted to labeled steps
/// unless `unmasked`. Returns the loss node (if anything was scored) and
/// its breakdown.
pub fn sequence_loss(
    g: &mut Graph,
    predictions: &[Prediction],
    steps: &[TimeStep],
    bce_weight: Real,
    unmasked: bool,
) -> Result<(Option<Var>, LossBreakdown)> {
    assert_eq!(predictions.len(), steps.len(), "one prediction per step");
    let t_len = steps.len().max(1) as Real;
    let mut bce_terms = Vec::new();
    let mut ce_terms = Vec::new();
    for (t, (p, s)) in predictions.iter().zip(steps).enumerate() {
        if !unmasked && s.label.is_none() {
            continue;
        }
        bce_terms.push(bce_term(g, p.novelty_logit, s.novel));
        if !s.novel {
            let (Some(lp), Some(unit)) = (p.log_probs, p.unit_of(s.y)) else {
                return Err(Error::Invariant(format!(
                    "step {t}: class {} is known but the learner has no output for it",
                    s.y
                )));
            };
            let picked = g.pick(lp, unit)?;
            ce_terms.push(g.neg(picked));
        }
    }
    let mut breakdown = LossBreakdown {
        scored_steps: bce_terms.len(),
        ce_steps: ce_terms.len(),
        ..Default::default()
    };
    let bce = sum_terms(g, &bce_terms)?;
    let ce = sum_terms(g, &ce_terms)?;
    breakdown.bce = bce.map_or(0.0, |v| g.scalar_value(v) as f64) / t_len as f64;
    breakdown.ce = ce.map_or(0.0, |v| g.scalar_value(v) as f64) / t_len as f64;
    breakdown.total = bce_weight as f64 * breakdown.bce + breakdown.ce;
    let weighted_bce = bce.map(|b| g.affine(b, bce_weight, 0.0));
    let total = match (weighted_bce, ce) {
        (Some(a), Some(b)) => Some(g.add(a, b)?),
        (a, b) => a.or(b),
    };
    Ok((total.map(|v| g.affine(v, 1.0 / t_len, 0.0)), breakdown))
}

fn sum_terms(g: &mut Graph, terms: &[Var]) -> Result<Option<Var>> {
    if terms.is_empty() {
        return Ok(None);
    }
    let v = g.concat(terms)?;
    Ok(Some(g.sum(v)))
}

/// Mean control values over a rollout: `[β_r, γ_r, β_w, γ_w]`.
fn mean_control(g: &Graph, preds: &[Prediction]) -> Option<[f64; 4]> {
    let mut acc = [0.0; 4];
    let mut n = 0;
    for c in preds.iter().filter_map(|p| p.control) {
        for (a, v) in acc.iter_mut().zip([c.beta_r, c.gamma_r, c.beta_w, c.gamma_w]) {
            *a += g.scalar_value(v) as f64;
        }
        n += 1;
    }
    (n > 0).then(|| acc.map(|a| a / n as f64))
}

/// Gradient of one sequence's loss with respect to `learner.params`.
pub struct SequenceGrad {
    pub grads: GradMap,
    pub loss: LossBreakdown,
    pub control: Option<[f64; 4]>,
}

pub fn sequence_gradient(
    learner: &Learner,
    seq: &Sequence,
    bce_weight: Real,
    unmasked: bool,
    write_unlabeled: impl FnMut(usize) -> bool,
) -> Result<SequenceGrad> {
    let mut g = Graph::new();
    let bindings = learner.params.bind(&mut g);
    let mut r = learner.start_bound(&mut g, bindings.clone());
    let preds = run(r.as_mut(), &mut g, seq, write_unlabeled)?;
    drop(r);
    let (loss, breakdown) = sequence_loss(&mut g, &preds, &seq.steps, bce_weight, unmasked)?;
    let grads = match loss {
        Some(l) => bindings.collect(&learner.params, &g.backward(l)?),
        None => GradMap::zeros_like(&learner.params),
    };
    Ok(SequenceGrad {
        grads,
        loss: breakdown,
        control: mean_control(&g, &preds),
    })
}

/// Worst disagreement between backpropagated and central-difference
/// gradients over every trainable parameter element.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    pub worst_relative_error: f64,
    pub worst_parameter: String,
    pub worst_index: usize,
    pub elements: usize,
}

/// Compare [`sequence_gradient`] against central differences of the loss
/// with step `h`. Relative error is `|a−n| / max(|a|, |n|, 1e-5)`, so
/// elements whose gradient is numerically zero are judged absolutely.
pub fn check_gradients(
    learner: &Learner,
    seq: &Sequence,
    bce_weight: Real,
    unmasked: bool,
    write_unlabeled: impl Fn(usize) -> bool + Copy,
    h: Real,
) -> Result<GradientCheck> {
    let analytic = sequence_gradient(learner, seq, bce_weight, unmasked, write_unlabeled)?.grads;
    let loss_at = |params: &ParamStore| -> Result<f64> {
        let mut probe = learner.clone();
        probe.params = params.clone();
        Ok(sequence_gradient(&probe, seq, bce_weight, unmasked, write_unlabeled)?.loss.total)
    };
    let mut report = GradientCheck {
        worst_relative_error: 0.0,
        worst_parameter: String::new(),
        worst_index: 0,
        elements: 0,
    };
    let names: Vec<String> = learner.params.names().map(String::from).collect();
    for name in names.iter().filter(|n| learner.params.is_trainable(n)) {
        let grad = analytic.get(name).expect("every trainable parameter has a gradient");
        for i in 0..grad.len() {
            let mut plus = learner.params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += h;
            let mut minus = learner.params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= h;
            let numeric = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * h as f64);
            let a = grad.data()[i] as f64;
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
            report.elements += 1;
            if err > report.worst_relative_error || report.worst_parameter.is_empty() {
                report.worst_relative_error = err;
                report.worst_parameter = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub bce: f64,
    pub ce: f64,
    pub grad_norm: f64,
    pub learning_rate: f64,
    pub ramp: f64,
    pub val_ap: Option<f64>,
    pub beta_r: Option<f64>,
    pub gamma_r: Option<f64>,
    pub beta_w: Option<f64>,
    pub gamma_w: Option<f64>,
}

pub const LOG_HEADER: &str = "step,loss,bce,ce,grad_norm,learning_rate,ramp,val_ap,beta_r,gamma_r,beta_w,gamma_w";

impl LogRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.loss,
            self.bce,
            self.ce,
            self.grad_norm,
            self.learning_rate,
            self.ramp,
            opt(self.val_ap),
            opt(self.beta_r),
            opt(self.gamma_r),
            opt(self.beta_w),
            opt(self.gamma_w),
        )
    }
}

/// Resumable optimizer progress.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub adam: Adam,
    pub best_params: ParamStore,
    pub best_val_ap: Option<f64>,
    pub best_step: u64,
}

impl TrainState {
    pub fn new(learner: &Learner, config: &TrainConfig) -> Self {
        Self {
            step: 0,
            adam: Adam::new(AdamConfig {
                learning_rate: config.learning_rate as Real,
                ..Default::default()
            }),
            best_params: learner.params.clone(),
            best_val_ap: None,
            best_step: 0,
        }
    }
}

/// Training sequence `b` of step `step`: drawn fresh from its own stream.
pub fn training_sequence(sampler: &SamplerConfig, seed: u64, step: u64, b: usize, batch: usize) -> Sequence {
    generate_sequence(sampler, derive_seed(seed, "train", 0), step * batch as u64 + b as u64)
}

/// Validation AP of the current parameters.
pub fn validation_ap(learner: &Learner, val: &[Sequence]) -> Result<f64> {
    let records = evaluate_records(learner, val)?;
    average_precision(&records, ApIntegral::RightRiemann)
}

/// Train `learner` in place until `config.steps`, resuming from `state`.
/// `on_row` receives every log row as it is produced. On return
/// `state.best_params` holds the parameters with the best validation AP.
pub fn train(
    learner: &mut Learner,
    config: &TrainConfig,
    sampler: &SamplerConfig,
    seed: u64,
    val: &[Sequence],
    state: &mut TrainState,
    mut on_row: impl FnMut(&LogRow) -> Result<()>,
) -> Result<()> {
    config.validate()?;
    while state.step < config.steps {
        let step = state.step;
        let ramp = if sampler.semi_supervised {
            ramp_probability(step, &config.ramp)
        } else {
            0.0
        };
        let results: Vec<SequenceGrad> = (0..config.batch_size)
            .into_par_iter()
            .map(|b| {
                let seq = training_sequence(sampler, seed, step, b, config.batch_size);
                let mut rng = stream_rng(seed, "ramp", step * config.batch_size as u64 + b as u64);
                let gate = |_t: usize| ramp > 0.0 && rng.random_bool(ramp);
                sequence_gradient(learner, &seq, config.bce_weight as Real, config.unmasked_loss, gate)
            })
            .collect::<Result<_>>()?;

        let n = results.len() as f64;
        let mut grads = GradMap::zeros_like(&learner.params);
        let (mut loss, mut bce, mut ce) = (0.0, 0.0, 0.0);
        let mut control = [0.0; 4];
        let mut control_n = 0;
        for r in &results {
            grads.accumulate(&r.grads);
            loss += r.loss.total / n;
            bce += r.loss.bce / n;
            ce += r.loss.ce / n;
            if let Some(c) = r.control {
                control.iter_mut().zip(c).for_each(|(a, v)| *a += v);
                control_n += 1;
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        grads.scale((1.0 / n) as Real);
        let grad_norm = clip_global_norm(&mut grads, config.clip as Real) as f64;
        let lr = config.learning_rate_at(step);
        state
            .adam
            .step_with_lr(&mut learner.params, &grads, lr as Real)
            .map_err(|e| match e {
                ocfsl_autodiff::AutodiffError::NonFiniteGradient { .. } => Error::NonFiniteLoss { step },
                other => other.into(),
            })?;
        state.step += 1;

        let validate = !val.is_empty() && (state.step % config.val_every == 0 || state.step == config.steps);
        let val_ap = if validate {
            let ap = validation_ap(learner, val)?;
            if state.best_val_ap.is_none_or(|best| ap > best) {
                state.best_val_ap = Some(ap);
                state.best_params = learner.params.clone();
                state.best_step = state.step;
            }
            Some(ap)
        } else {
            None
        };
        let c = (control_n > 0).then(|| control.map(|v| v / control_n as f64));
        on_row(&LogRow {
            step: state.step,
            loss,
            bce,
            ce,
            grad_norm,
            learning_rate: lr,
            ramp,
            val_ap,
            beta_r: c.map(|c| c[0]),
            gamma_r: c.map(|c| c[1]),
            beta_w: c.map(|c| c[2]),
            gamma_w: c.map(|c| c[3]),
        })?;
    }
    if val.is_empty() {
        state.best_params = learner.params.clone();
        state.best_step = state.step;
    }
    Ok(())
}
