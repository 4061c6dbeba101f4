//! Recurrent baseline: a two-layer LSTM over `[h_cnn, one-hot label]` with
//! an affine head of `units` class logits plus one unknown logit.
//!
//! The label slice carries the revealed label of the previous step (all
//! zero when that step was unlabeled, and at the first step), so a
//! prediction never sees its own label. Output units are bound to classes
//! in order of first revealed label.

use ocfsl_autodiff::{Bindings, Graph, ParamStore, Tensor};

use super::{Prediction, Rollout};
use crate::context::{init_uniform, linear, lstm_step, register_lstm, Encoder, LstmState};
use crate::rng::StreamRng;
use crate::sequences::ClassId;
use crate::{Error, Real, Result};

pub(super) fn register(store: &mut ParamStore, dim: usize, hidden: usize, units: usize, rng: &mut StreamRng) {
    register_lstm(store, "lstm0", dim + units, hidden, rng);
    register_lstm(store, "lstm1", hidden, hidden, rng);
    store.insert("out.w", init_uniform(rng, &[units + 1, hidden], hidden));
    store.insert("out.b", Tensor::zeros(&[units + 1]));
}

pub(super) struct LstmRollout<'a> {
    b: Bindings,
    encoder: &'a Encoder,
    units: usize,
    layers: [LstmState; 2],
    assigned: Vec<ClassId>,
    previous_label: Option<usize>,
}

impl<'a> LstmRollout<'a> {
    pub fn new(g: &mut Graph, b: Bindings, encoder: &'a Encoder, hidden: usize, units: usize) -> Self {
        let layers = [LstmState::zeros(g, hidden), LstmState::zeros(g, hidden)];
        Self {
            b,
            encoder,
            units,
            layers,
            assigned: Vec::new(),
            previous_label: None,
        }
    }
}

impl Rollout for LstmRollout<'_> {
    fn predict(&mut self, g: &mut Graph, x: &[Real]) -> Result<Prediction> {
        let h = self.encoder.encode(g, &self.b, x)?;
        let mut onehot = Tensor::zeros(&[self.units]);
        if let Some(u) = self.previous_label {
            onehot.data_mut()[u] = 1.0;
        }
        let onehot = g.constant(onehot);
        let input = g.concat(&[h, onehot])?;
        let s0 = lstm_step(g, &self.b, "lstm0", input, self.layers[0])?;
        let s1 = lstm_step(g, &self.b, "lstm1", s0.h, self.layers[1])?;
        self.layers = [s0, s1];
        let logits = linear(g, &self.b, "out", s1.h)?;
        let class_logits = g.slice(logits, 0, self.units)?;
        let log_probs = g.log_softmax(class_logits)?;
        let unknown = g.pick(logits, self.units)?;
        let classes = (0..self.units).map(|u| self.assigned.get(u).copied()).collect();
        Ok(Prediction {
            log_probs: Some(log_probs),
            classes,
            novelty_logit: Some(unknown),
            control: None,
        })
    }

    fn observe(&mut self, _g: &mut Graph, label: Option<ClassId>, _write_unlabeled: bool) -> Result<()> {
        self.previous_label = match label {
            None => None,
            Some(y) => Some(match self.assigned.iter().position(|&c| c == y) {
                Some(u) => u,
                None => {
                    if self.assigned.len() >= self.units {
                        return Err(Error::Capacity {
                            sequence: 0,
                            reason: format!("all {} output units are bound when class {y} arrived", self.units),
                        });
                    }
                    self.assigned.push(y);
                    self.assigned.len() - 1
                }
            }),
        };
        Ok(())
    }
}

/// Unit assigned to the one-hot label input, exposed for tests.
#[cfg(test)]
impl LstmRollout<'_> {
    fn label_input(&self) -> Option<usize> {
        self.previous_label
    }
}
