//! Prototype-memory learners: the contextual learner and, with every
//! contextual component switched off, the online prototypical network.

use ocfsl_autodiff::{Bindings, Graph, Var};

use super::{Ablations, Prediction, Rollout};
use crate::context::{contextualize, control_step, lstm_step, scalar_control, Encoder, LstmState};
use crate::memory::{Control, Dissimilarity, MemoryVars, PrototypeMemory, ReadOut, WriteRule};
use crate::sequences::ClassId;
use crate::{Real, Result};

/// Which recurrent outputs feed the memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProtoFlags {
    pub context_vector: bool,
    pub metric: bool,
    pub step_control: bool,
}

impl ProtoFlags {
    pub fn from_ablations(a: Ablations) -> Self {
        Self {
            context_vector: !a.no_h_rnn,
            metric: !a.no_metric,
            step_control: !a.no_control,
        }
    }

    pub fn without_context() -> Self {
        Self::from_ablations(Ablations::all())
    }

    fn uses_rnn(self) -> bool {
        self.context_vector || self.metric || self.step_control
    }
}

struct Pending {
    h: Var,
    control: Control,
    read: Option<ReadOut>,
}

pub(super) struct ProtoRollout<'a> {
    b: Bindings,
    encoder: &'a Encoder,
    flags: ProtoFlags,
    vars: MemoryVars,
    memory: PrototypeMemory,
    state: Option<LstmState>,
    fixed_control: Option<Control>,
    pending: Option<Pending>,
}

impl<'a> ProtoRollout<'a> {
    pub fn new(
        g: &mut Graph,
        b: Bindings,
        encoder: &'a Encoder,
        flags: ProtoFlags,
        mode: Dissimilarity,
        rule: WriteRule,
        capacity: usize,
    ) -> Self {
        let state = flags.uses_rnn().then(|| {
            let hidden = g.value(b.var("rnn.b")).len() / 4;
            LstmState::zeros(g, hidden)
        });
        let fixed_control = (!flags.step_control).then(|| scalar_control(g, &b));
        Self {
            vars: MemoryVars::bind(&b, mode, rule),
            b,
            encoder,
            flags,
            memory: PrototypeMemory::new(capacity, rule),
            state,
            fixed_control,
            pending: None,
        }
    }
}

impl Rollout for ProtoRollout<'_> {
    fn predict(&mut self, g: &mut Graph, x: &[Real]) -> Result<Prediction> {
        let h_cnn = self.encoder.encode(g, &self.b, x)?;
        let mut h = h_cnn;
        let mut control = self.fixed_control;
        if let Some(state) = self.state {
            let next = lstm_step(g, &self.b, "rnn", h_cnn, state)?;
            self.state = Some(next);
            let head = control_step(g, &self.b, next.h, self.encoder.output_dim())?;
            if self.flags.context_vector {
                h = contextualize(g, h_cnn, head.h_rnn)?;
            }
            let mut c = control.unwrap_or(head.control);
            c.metric = self.flags.metric.then_some(head.metric);
            control = Some(c);
        }
        let control = control.expect("control is either fixed or per step");
        let read = self.memory.read(g, h, &control, &self.vars)?;
        self.pending = Some(Pending { h, control, read });
        Ok(match read {
            None => Prediction {
                control: Some(control),
                ..Prediction::unknown()
            },
            Some(r) => Prediction {
                log_probs: Some(r.log_probs),
                classes: self.memory.classes().iter().map(|&c| Some(c)).collect(),
                novelty_logit: Some(r.novelty_logit),
                control: Some(control),
            },
        })
    }

    fn observe(&mut self, g: &mut Graph, label: Option<ClassId>, write_unlabeled: bool) -> Result<()> {
        let p = self.pending.take().expect("observe follows predict");
        match (label, p.read) {
            (Some(y), _) => self.memory.write_labeled(g, p.h, y, &self.vars),
            (None, Some(read)) if write_unlabeled => {
                self.memory
                    .write_unlabeled(g, p.h, &read, &p.control, &self.vars)
            }
            _ => Ok(()),
        }
    }
}
