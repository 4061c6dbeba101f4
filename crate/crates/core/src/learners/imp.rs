//! Online infinite mixture of prototypes.
//!
//! Clusters hold a running mean and at most one label; a class may own
//! several. An example joins its nearest admissible cluster when the
//! distance is within the write threshold β_w, otherwise it opens a new
//! cluster. Labeled examples may join clusters of their own class or
//! unlabeled ones (which then take the label); unlabeled examples may join
//! any cluster. Class scores use each labeled class's nearest cluster.

use ocfsl_autodiff::{Bindings, Graph, Var};

use super::{Prediction, Rollout};
use crate::context::{scalar_control, Encoder};
use crate::memory::{novelty_logit, Control};
use crate::sequences::ClassId;
use crate::{Error, Real, Result};

struct Pending {
    h: Var,
    distances: Option<Var>,
}

pub(super) struct ImpRollout<'a> {
    b: Bindings,
    encoder: &'a Encoder,
    control: Control,
    capacity: usize,
    centroids: Option<Var>,
    counts: Vec<Real>,
    labels: Vec<Option<ClassId>>,
    pending: Option<Pending>,
}

impl<'a> ImpRollout<'a> {
    pub fn new(g: &mut Graph, b: Bindings, encoder: &'a Encoder, capacity: usize) -> Self {
        let control = scalar_control(g, &b);
        Self {
            b,
            encoder,
            control,
            capacity,
            centroids: None,
            counts: Vec::new(),
            labels: Vec::new(),
            pending: None,
        }
    }

    fn labeled_classes(&self) -> Vec<ClassId> {
        let mut out: Vec<ClassId> = Vec::new();
        for c in self.labels.iter().flatten() {
            if !out.contains(c) {
                out.push(*c);
            }
        }
        out
    }

    fn join(&mut self, g: &mut Graph, k: usize, h: Var, label: Option<ClassId>) -> Result<()> {
        let all = self.centroids.expect("cluster exists");
        let c = self.counts[k];
        let row = g.row(all, k)?;
        let old = g.affine(row, c / (c + 1.0), 0.0);
        let new = g.affine(h, 1.0 / (c + 1.0), 0.0);
        let mean = g.add(old, new)?;
        self.centroids = Some(g.set_row(all, k, mean)?);
        self.counts[k] += 1.0;
        if label.is_some() {
            self.labels[k] = label;
        }
        Ok(())
    }

    fn create(&mut self, g: &mut Graph, h: Var, label: Option<ClassId>) -> Result<()> {
        if self.labels.len() >= self.capacity {
            return Err(Error::Capacity {
                sequence: 0,
                reason: format!("cluster budget of {} exhausted", self.capacity),
            });
        }
        self.centroids = Some(match self.centroids {
            Some(c) => g.append_row(c, h)?,
            None => g.as_row(h)?,
        });
        self.counts.push(1.0);
        self.labels.push(label);
        Ok(())
    }
}

impl Rollout for ImpRollout<'_> {
    fn predict(&mut self, g: &mut Graph, x: &[Real]) -> Result<Prediction> {
        let h = self.encoder.encode(g, &self.b, x)?;
        let distances = match self.centroids {
            Some(c) => Some(g.sq_dist_rows(c, h, None)?),
            None => None,
        };
        self.pending = Some(Pending { h, distances });
        let classes = self.labeled_classes();
        let Some(d) = distances.filter(|_| !classes.is_empty()) else {
            return Ok(Prediction {
                control: Some(self.control),
                ..Prediction::unknown()
            });
        };
        let mut per_class = Vec::with_capacity(classes.len());
        for &c in &classes {
            let idx: Vec<usize> = (0..self.labels.len())
                .filter(|&i| self.labels[i] == Some(c))
                .collect();
            let ds = g.gather(d, &idx)?;
            per_class.push(g.min(ds)?);
        }
        let class_d = g.concat(&per_class)?;
        let neg = g.neg(class_d);
        let log_probs = g.log_softmax(neg)?;
        let nearest = g.min(class_d)?;
        let z = novelty_logit(g, nearest, self.control.beta_r, self.control.gamma_r)?;
        Ok(Prediction {
            log_probs: Some(log_probs),
            classes: classes.into_iter().map(Some).collect(),
            novelty_logit: Some(z),
            control: Some(self.control),
        })
    }

    fn observe(&mut self, g: &mut Graph, label: Option<ClassId>, write_unlabeled: bool) -> Result<()> {
        let p = self.pending.take().expect("observe follows predict");
        if label.is_none() && !write_unlabeled {
            return Ok(());
        }
        let threshold = g.scalar_value(self.control.beta_w);
        let nearest = p.distances.and_then(|d| {
            let d = g.value(d).data();
            (0..d.len())
                .filter(|&i| label.is_none() || self.labels[i].is_none() || self.labels[i] == label)
                .min_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)))
                .map(|i| (i, d[i]))
        });
        match nearest {
            Some((k, dist)) if dist <= threshold => self.join(g, k, p.h, label),
            _ => self.create(g, p.h, label),
        }
    }
}
