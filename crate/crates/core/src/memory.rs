//! Slot-based class memory recorded on the tape.
//!
//! Prototypes live in one `[slots, dim]` variable that is replaced on every
//! write, so gradients flow from later reads back through all earlier
//! writes. The slot → class map is bookkeeping outside the tape.

use ocfsl_autodiff::{Bindings, Graph, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::StreamRng;
use crate::sequences::ClassId;
use crate::{Error, Real, Result};

pub const COSINE_SCALE_INIT: Real = 10.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dissimilarity {
    /// `Σ_d m_d (h_d − p_d)²`
    #[default]
    Euclidean,
    /// `−s · cos(h ⊙ m, p)` with a trainable scale `s`.
    Cosine,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WriteRule {
    /// Exact running (weighted) mean.
    #[default]
    Average,
    /// Gated averaging unit: a learned convex blend of old prototype and input.
    Gated,
}

/// Per-step control values: optional metric scaling `[dim]` and the four
/// scalar thresholds/temperatures (temperatures already positive).
#[derive(Clone, Copy, Debug)]
pub struct Control {
    pub metric: Option<Var>,
    pub beta_r: Var,
    pub gamma_r: Var,
    pub beta_w: Var,
    pub gamma_w: Var,
}

#[derive(Clone, Copy, Debug)]
struct Gate {
    w_h: Var,
    w_p: Var,
    b: Var,
}

/// Trainable memory parameters bound onto one tape.
#[derive(Clone, Copy, Debug)]
pub struct MemoryVars {
    pub mode: Dissimilarity,
    cosine_scale: Option<Var>,
    gate: Option<Gate>,
}

impl MemoryVars {
    pub fn bind(b: &Bindings, mode: Dissimilarity, rule: WriteRule) -> Self {
        Self {
            mode,
            cosine_scale: (mode == Dissimilarity::Cosine).then(|| b.var("mem.cosine_scale")),
            gate: (rule == WriteRule::Gated).then(|| Gate {
                w_h: b.var("mem.gate.w_h"),
                w_p: b.var("mem.gate.w_p"),
                b: b.var("mem.gate.b"),
            }),
        }
    }
}

/// Register the memory's trainable parameters under `mem.*`.
pub fn register_memory_params(
    store: &mut ParamStore,
    dim: usize,
    mode: Dissimilarity,
    rule: WriteRule,
    rng: &mut StreamRng,
) {
    if mode == Dissimilarity::Cosine {
        store.insert("mem.cosine_scale", Tensor::scalar(COSINE_SCALE_INIT));
    }
    if rule == WriteRule::Gated {
        let bound = 1.0 / ((2 * dim) as Real).sqrt();
        let mut draw = || {
            let data = (0..dim).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::vector(data).expect("non-empty")
        };
        store.insert("mem.gate.w_h", draw());
        store.insert("mem.gate.w_p", draw());
        store.insert("mem.gate.b", Tensor::scalar(0.0));
    }
}

/// Dissimilarity of `h` to every row of `rows`.
pub fn dissimilarities(
    g: &mut Graph,
    rows: Var,
    h: Var,
    metric: Option<Var>,
    vars: &MemoryVars,
) -> Result<Var> {
    Ok(match vars.mode {
        Dissimilarity::Euclidean => g.sq_dist_rows(rows, h, metric)?,
        Dissimilarity::Cosine => {
            let q = match metric {
                Some(m) => g.mul(h, m)?,
                None => h,
            };
            let cos = g.cosine_rows(rows, q)?;
            let s = vars.cosine_scale.expect("cosine mode binds a scale");
            let scaled = g.mul_scalar(cos, s)?;
            g.neg(scaled)
        }
    })
}

/// Dissimilarity between two vectors.
pub fn dissimilarity(
    g: &mut Graph,
    h: Var,
    p: Var,
    metric: Option<Var>,
    vars: &MemoryVars,
) -> Result<Var> {
    let row = g.as_row(p)?;
    let d = dissimilarities(g, row, h, metric, vars)?;
    Ok(g.pick(d, 0)?)
}

/// `(d − β) / γ`, the logit of a novelty probability.
pub fn novelty_logit(g: &mut Graph, d: Var, beta: Var, gamma: Var) -> Result<Var> {
    let shifted = g.sub(d, beta)?;
    Ok(g.div(shifted, gamma)?)
}

/// Result of reading a non-empty memory.
#[derive(Clone, Copy, Debug)]
pub struct ReadOut {
    /// Dissimilarity to each occupied slot.
    pub distances: Var,
    pub log_probs: Var,
    pub probs: Var,
    pub min_distance: Var,
    /// Logit of the read novelty `û_r`.
    pub novelty_logit: Var,
}

#[derive(Clone, Debug)]
pub struct PrototypeMemory {
    capacity: usize,
    rule: WriteRule,
    slots: Vec<ClassId>,
    prototypes: Option<Var>,
    counts: Option<Var>,
}

impl PrototypeMemory {
    pub fn new(capacity: usize, rule: WriteRule) -> Self {
        Self {
            capacity,
            rule,
            slots: Vec::new(),
            prototypes: None,
            counts: None,
        }
    }

    /// Forget all slots; trainable parameters live elsewhere and are kept.
    pub fn reset(&mut self) {
        self.slots.clear();
        self.prototypes = None;
        self.counts = None;
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Class held by each occupied slot, in slot order.
    pub fn classes(&self) -> &[ClassId] {
        &self.slots
    }

    pub fn slot_of(&self, class: ClassId) -> Option<usize> {
        self.slots.iter().position(|&c| c == class)
    }

    pub fn prototypes(&self) -> Option<Var> {
        self.prototypes
    }

    pub fn counts(&self) -> Option<Var> {
        self.counts
    }

    /// Class distribution over occupied slots and read novelty; `None` for
    /// an empty memory, whose novelty is exactly 1.
    pub fn read(
        &self,
        g: &mut Graph,
        h: Var,
        control: &Control,
        vars: &MemoryVars,
    ) -> Result<Option<ReadOut>> {
        let Some(p) = self.prototypes else {
            return Ok(None);
        };
        let distances = dissimilarities(g, p, h, control.metric, vars)?;
        let neg = g.neg(distances);
        let log_probs = g.log_softmax(neg)?;
        let probs = g.exp(log_probs);
        let min_distance = g.min(distances)?;
        let novelty_logit = novelty_logit(g, min_distance, control.beta_r, control.gamma_r)?;
        Ok(Some(ReadOut {
            distances,
            log_probs,
            probs,
            min_distance,
            novelty_logit,
        }))
    }

    /// Labeled write: allocate a slot on first sighting, else update it with
    /// weight one.
    pub fn write_labeled(
        &mut self,
        g: &mut Graph,
        h: Var,
        class: ClassId,
        vars: &MemoryVars,
    ) -> Result<()> {
        let Some(k) = self.slot_of(class) else {
            return self.allocate(g, h, class);
        };
        let p_all = self.prototypes.expect("occupied");
        let c_all = self.counts.expect("occupied");
        let p = g.row(p_all, k)?;
        let updated = match self.rule {
            WriteRule::Average => {
                let c = g.pick(c_all, k)?;
                let weighted = g.mul_scalar(p, c)?;
                let num = g.add(weighted, h)?;
                let denom = g.affine(c, 1.0, 1.0);
                let one = g.scalar(1.0);
                let inv = g.div(one, denom)?;
                g.mul_scalar(num, inv)?
            }
            WriteRule::Gated => {
                let gate = vars.gate.expect("gated mode binds a gate");
                let f = self.gate_values(g, gate, p, h)?;
                let diff = g.sub(h, p)?;
                let step = g.mul_scalar(diff, f)?;
                g.add(p, step)?
            }
        };
        self.prototypes = Some(g.set_row(p_all, k, updated)?);
        let mut onehot = Tensor::zeros(&[self.slots.len()]);
        onehot.data_mut()[k] = 1.0;
        let onehot = g.constant(onehot);
        self.counts = Some(g.add(c_all, onehot)?);
        Ok(())
    }

    fn allocate(&mut self, g: &mut Graph, h: Var, class: ClassId) -> Result<()> {
        if self.slots.len() >= self.capacity {
            return Err(Error::Capacity {
                sequence: 0,
                reason: format!(
                    "prototype memory full ({} slots) when class {class} arrived",
                    self.capacity
                ),
            });
        }
        let one = g.scalar(1.0);
        match (self.prototypes, self.counts) {
            (Some(p), Some(c)) => {
                self.prototypes = Some(g.append_row(p, h)?);
                self.counts = Some(g.concat(&[c, one])?);
            }
            _ => {
                self.prototypes = Some(g.as_row(h)?);
                self.counts = Some(one);
            }
        }
        self.slots.push(class);
        Ok(())
    }

    /// Gate `σ(w_h·h + w_p·p + b)`; `p` is a vector or a `[slots, dim]` matrix.
    fn gate_values(&self, g: &mut Graph, gate: Gate, p: Var, h: Var) -> Result<Var> {
        let from_h = g.dot(gate.w_h, h)?;
        let z = if g.value(p).rank() == 1 {
            let from_p = g.dot(p, gate.w_p)?;
            g.add(from_p, from_h)?
        } else {
            let from_p = g.matmul(p, gate.w_p)?;
            g.add_scalar(from_p, from_h)?
        };
        let z = g.add_scalar(z, gate.b)?;
        Ok(g.sigmoid(z))
    }

    /// Unlabeled write: every slot moves toward `h` with weight
    /// `ŷ_k (1 − û_w)`. Never allocates; a no-op on an empty memory.
    pub fn write_unlabeled(
        &mut self,
        g: &mut Graph,
        h: Var,
        read: &ReadOut,
        control: &Control,
        vars: &MemoryVars,
    ) -> Result<()> {
        let (Some(p), Some(c)) = (self.prototypes, self.counts) else {
            return Ok(());
        };
        let z_w = novelty_logit(g, read.min_distance, control.beta_w, control.gamma_w)?;
        // 1 − σ(z) = σ(−z)
        let neg = g.neg(z_w);
        let known_w = g.sigmoid(neg);
        let delta = g.mul_scalar(read.probs, known_w)?;
        let new_counts = g.add(c, delta)?;
        let new_p = match self.rule {
            WriteRule::Average => {
                let weighted = g.scale_rows(p, c)?;
                let incoming = g.outer(delta, h)?;
                let num = g.add(weighted, incoming)?;
                let ones = g.constant(Tensor::full(&[self.slots.len()], 1.0));
                let inv = g.div(ones, new_counts)?;
                g.scale_rows(num, inv)?
            }
            WriteRule::Gated => {
                let gate = vars.gate.expect("gated mode binds a gate");
                let f = self.gate_values(g, gate, p, h)?;
                let rate = g.mul(f, delta)?;
                let keep = g.affine(rate, -1.0, 1.0);
                let kept = g.scale_rows(p, keep)?;
                let incoming = g.outer(rate, h)?;
                g.add(kept, incoming)?
            }
        };
        self.prototypes = Some(new_p);
        self.counts = Some(new_counts);
        Ok(())
    }
}
