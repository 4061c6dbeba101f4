//! Online matching network: every labeled embedding is kept verbatim and a
//! class scores by its nearest stored exemplar.

use ocfsl_autodiff::{Bindings, Graph, Var};

use super::{Prediction, Rollout};
use crate::context::{scalar_control, Encoder};
use crate::memory::{novelty_logit, Control};
use crate::sequences::ClassId;
use crate::{Real, Result};

pub(super) struct MatchingRollout<'a> {
    b: Bindings,
    encoder: &'a Encoder,
    control: Control,
    exemplars: Option<Var>,
    labels: Vec<ClassId>,
    /// Distinct classes in order of first storage.
    classes: Vec<ClassId>,
    pending: Option<Var>,
}

impl<'a> MatchingRollout<'a> {
    pub fn new(g: &mut Graph, b: Bindings, encoder: &'a Encoder) -> Self {
        let control = scalar_control(g, &b);
        Self {
            b,
            encoder,
            control,
            exemplars: None,
            labels: Vec::new(),
            classes: Vec::new(),
            pending: None,
        }
    }

    #[cfg(test)]
    fn stored(&self) -> usize {
        self.labels.len()
    }
}

impl Rollout for MatchingRollout<'_> {
    fn predict(&mut self, g: &mut Graph, x: &[Real]) -> Result<Prediction> {
        let h = self.encoder.encode(g, &self.b, x)?;
        self.pending = Some(h);
        let Some(e) = self.exemplars else {
            return Ok(Prediction {
                control: Some(self.control),
                ..Prediction::unknown()
            });
        };
        let d = g.sq_dist_rows(e, h, None)?;
        let mut per_class = Vec::with_capacity(self.classes.len());
        for &c in &self.classes {
            let idx: Vec<usize> = (0..self.labels.len()).filter(|&i| self.labels[i] == c).collect();
            let ds = g.gather(d, &idx)?;
            per_class.push(g.min(ds)?);
        }
        let class_d = g.concat(&per_class)?;
        let neg = g.neg(class_d);
        let log_probs = g.log_softmax(neg)?;
        let nearest = g.min(d)?;
        let z = novelty_logit(g, nearest, self.control.beta_r, self.control.gamma_r)?;
        Ok(Prediction {
            log_probs: Some(log_probs),
            classes: self.classes.iter().map(|&c| Some(c)).collect(),
            novelty_logit: Some(z),
            control: Some(self.control),
        })
    }

    fn observe(&mut self, g: &mut Graph, label: Option<ClassId>, _write_unlabeled: bool) -> Result<()> {
        let h = self.pending.take().expect("observe follows predict");
        // Unlabeled examples are skipped.
        let Some(y) = label else { return Ok(()) };
        self.exemplars = Some(match self.exemplars {
            Some(e) => g.append_row(e, h)?,
            None => g.as_row(h)?,
        });
        self.labels.push(y);
        if !self.classes.contains(&y) {
            self.classes.push(y);
        }
        Ok(())
    }
}
