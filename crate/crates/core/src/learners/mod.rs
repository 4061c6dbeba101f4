//! Online learners behind one predict-then-observe contract.
//!
//! A [`Rollout`] sees one step's features in [`Rollout::predict`] and only
//! afterwards its revealed label in [`Rollout::observe`], so a prediction
//! can never depend on the label it is scored against.

mod imp;
mod lstm;
mod matching;
mod proto;

use ocfsl_autodiff::{sigmoid, Bindings, Graph, ParamStore, Var};
use serde::{Deserialize, Serialize};

use crate::context::{register_control_head, register_lstm, register_scalar_control, Encoder, EncoderConfig};
use crate::memory::{register_memory_params, Control, Dissimilarity, WriteRule};
use crate::rng::stream_rng;
use crate::sequences::{ClassId, Sequence};
use crate::{Error, Real, Result};

pub use proto::ProtoFlags;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnerKind {
    /// Contextual prototypical memory.
    #[default]
    Cpm,
    /// Online prototypical network: the memory without the recurrent context.
    ProtoNet,
    /// Nearest stored exemplar per class.
    MatchingNet,
    /// Online infinite mixture of prototypes: several clusters per class.
    Imp,
    /// Two-layer LSTM reading features and the previous label.
    Lstm,
}

impl LearnerKind {
    pub fn name(self) -> &'static str {
        match self {
            LearnerKind::Cpm => "cpm",
            LearnerKind::ProtoNet => "protonet",
            LearnerKind::MatchingNet => "matchingnet",
            LearnerKind::Imp => "imp",
            LearnerKind::Lstm => "lstm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).ok()
    }
}

/// Component switches for the contextual learner.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    /// Drop the additive context vector: `h_t = h_cnn`.
    pub no_h_rnn: bool,
    /// Fix the metric scaling to ones.
    pub no_metric: bool,
    /// Replace per-step thresholds/temperatures with learned scalars.
    pub no_control: bool,
}

impl Ablations {
    pub fn all() -> Self {
        Self {
            no_h_rnn: true,
            no_metric: true,
            no_control: true,
        }
    }

    /// Parse a comma-separated flag list such as `no_h_rnn,no_metric`.
    pub fn parse_list(s: &str) -> Result<Self> {
        let mut a = Self::default();
        for flag in s.split(',').map(str::trim).filter(|f| !f.is_empty()) {
            match flag {
                "no_h_rnn" => a.no_h_rnn = true,
                "no_metric" => a.no_metric = true,
                "no_control" => a.no_control = true,
                "all" => a = Self::all(),
                other => {
                    return Err(Error::config(
                        "ablate",
                        format!("unknown flag `{other}` (expected no_h_rnn, no_metric, no_control, all)"),
                    ))
                }
            }
        }
        Ok(a)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub kind: LearnerKind,
    pub encoder: EncoderConfig,
    /// LSTM hidden width (context RNN and the LSTM baseline).
    pub hidden: usize,
    /// Only the contextual learner may use cosine; baselines are Euclidean.
    pub dissimilarity: Dissimilarity,
    pub write_rule: WriteRule,
    pub ablate: Ablations,
    /// Memory slots beyond the sampler's class budget.
    pub memory_slack: usize,
    pub cluster_capacity: usize,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            kind: LearnerKind::Cpm,
            encoder: EncoderConfig {
                hidden: Vec::new(),
                output_dim: Some(32),
            },
            hidden: 64,
            dissimilarity: Dissimilarity::Euclidean,
            write_rule: WriteRule::Average,
            ablate: Ablations::default(),
            memory_slack: 8,
            cluster_capacity: 512,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::config("learner.hidden", "must be at least 1"));
        }
        if self.encoder.hidden.contains(&0) || self.encoder.output_dim == Some(0) {
            return Err(Error::config("learner.encoder", "layer widths must be positive"));
        }
        if self.kind != LearnerKind::Cpm
            && (self.dissimilarity != Dissimilarity::Euclidean
                || self.write_rule != WriteRule::Average
                || self.ablate != Ablations::default())
        {
            return Err(Error::config(
                "learner",
                format!(
                    "dissimilarity, write_rule and ablate apply to cpm only, not {}",
                    self.kind.name()
                ),
            ));
        }
        Ok(())
    }
}

/// One step's output, recorded on the caller's tape.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// Log-probabilities over output units; `None` when nothing is known.
    pub log_probs: Option<Var>,
    /// Class held by each output unit.
    pub classes: Vec<Option<ClassId>>,
    /// Logit of the novelty probability û; `None` means û = 1 exactly.
    pub novelty_logit: Option<Var>,
    /// Control values in effect, for learners that have them.
    pub control: Option<Control>,
}

impl Prediction {
    pub fn unknown() -> Self {
        Self {
            log_probs: None,
            classes: Vec::new(),
            novelty_logit: None,
            control: None,
        }
    }

    /// Known-ness score `1 − û`.
    pub fn knownness(&self, g: &Graph) -> Real {
        self.novelty_logit
            .map_or(0.0, |z| sigmoid(-g.scalar_value(z)))
    }

    /// Class of the highest-probability unit (first on ties).
    pub fn predicted_class(&self, g: &Graph) -> Option<ClassId> {
        let lp = g.value(self.log_probs?).data();
        let mut best = 0;
        for (i, v) in lp.iter().enumerate() {
            if *v > lp[best] {
                best = i;
            }
        }
        self.classes.get(best).copied().flatten()
    }

    /// Output unit holding `class`.
    pub fn unit_of(&self, class: ClassId) -> Option<usize> {
        self.classes.iter().position(|c| *c == Some(class))
    }
}

/// Per-sequence learner state bound to one tape.
pub trait Rollout {
    fn predict(&mut self, g: &mut Graph, x: &[Real]) -> Result<Prediction>;
    /// Consume the revealed label of the step just predicted. Unlabeled
    /// steps update state only when `write_unlabeled` is set.
    fn observe(&mut self, g: &mut Graph, label: Option<ClassId>, write_unlabeled: bool) -> Result<()>;
}

/// Anything that can start fresh per-sequence rollouts.
pub trait OnlineLearner: Sync {
    fn start<'a>(&'a self, g: &mut Graph) -> Box<dyn Rollout + 'a>;
}

/// A parameterised learner of any [`LearnerKind`].
#[derive(Clone, Debug, PartialEq)]
pub struct Learner {
    pub config: LearnerConfig,
    pub params: ParamStore,
    encoder: Encoder,
    /// Memory slots / output units.
    capacity: usize,
}

impl Learner {
    /// Fresh parameters drawn from the `init` stream of `seed`.
    pub fn new(config: LearnerConfig, input_dim: usize, max_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, "init", 0);
        let encoder = Encoder::new(&config.encoder, input_dim);
        let dim = encoder.output_dim();
        let capacity = max_classes + config.memory_slack;
        let mut params = ParamStore::new();
        encoder.register(&mut params, &mut rng);
        match config.kind {
            LearnerKind::Cpm => {
                register_lstm(&mut params, "rnn", dim, config.hidden, &mut rng);
                register_control_head(&mut params, config.hidden, dim);
                if config.ablate.no_control {
                    register_scalar_control(&mut params);
                }
                register_memory_params(&mut params, dim, config.dissimilarity, config.write_rule, &mut rng);
            }
            LearnerKind::ProtoNet | LearnerKind::MatchingNet | LearnerKind::Imp => {
                register_scalar_control(&mut params);
            }
            LearnerKind::Lstm => lstm::register(&mut params, dim, config.hidden, capacity, &mut rng),
        }
        Ok(Self {
            config,
            params,
            encoder,
            capacity,
        })
    }

    pub fn kind(&self) -> LearnerKind {
        self.config.kind
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

impl OnlineLearner for Learner {
    fn start<'a>(&'a self, g: &mut Graph) -> Box<dyn Rollout + 'a> {
        let b = self.params.bind(g);
        self.start_bound(g, b)
    }
}

impl Learner {
    /// Start a rollout over parameters already bound onto `g`.
    pub fn start_bound<'a>(&'a self, g: &mut Graph, b: Bindings) -> Box<dyn Rollout + 'a> {
        let cfg = &self.config;
        match cfg.kind {
            LearnerKind::Cpm => Box::new(proto::ProtoRollout::new(
                g,
                b,
                &self.encoder,
                ProtoFlags::from_ablations(cfg.ablate),
                cfg.dissimilarity,
                cfg.write_rule,
                self.capacity,
            )),
            LearnerKind::ProtoNet => Box::new(proto::ProtoRollout::new(
                g,
                b,
                &self.encoder,
                ProtoFlags::without_context(),
                Dissimilarity::Euclidean,
                WriteRule::Average,
                self.capacity,
            )),
            LearnerKind::MatchingNet => Box::new(matching::MatchingRollout::new(g, b, &self.encoder)),
            LearnerKind::Imp => Box::new(imp::ImpRollout::new(g, b, &self.encoder, cfg.cluster_capacity)),
            LearnerKind::Lstm => Box::new(lstm::LstmRollout::new(g, b, &self.encoder, cfg.hidden, self.capacity)),
        }
    }
}

/// Run `learner` over `seq` on tape `g`, predicting each step before
/// observing it. `write_unlabeled(t)` decides whether the unlabeled step `t`
/// updates the learner.
pub fn rollout(
    learner: &dyn OnlineLearner,
    g: &mut Graph,
    seq: &Sequence,
    write_unlabeled: impl FnMut(usize) -> bool,
) -> Result<Vec<Prediction>> {
    let mut r = learner.start(g);
    run(r.as_mut(), g, seq, write_unlabeled)
}

/// Drive an already started rollout over `seq`; see [`rollout`].
pub fn run(
    r: &mut dyn Rollout,
    g: &mut Graph,
    seq: &Sequence,
    mut write_unlabeled: impl FnMut(usize) -> bool,
) -> Result<Vec<Prediction>> {
    let with_id = |e: Error| match e {
        Error::Capacity { reason, .. } => Error::Capacity {
            sequence: seq.id,
            reason,
        },
        other => other,
    };
    let mut out = Vec::with_capacity(seq.len());
    for (t, step) in seq.steps.iter().enumerate() {
        out.push(r.predict(g, &step.x).map_err(with_id)?);
        let write = step.label.is_none() && write_unlabeled(t);
        r.observe(g, step.label, write).map_err(with_id)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_list_parsing() {
        assert_eq!(Ablations::parse_list("").unwrap(), Ablations::default());
        let a = Ablations::parse_list("no_h_rnn, no_control").unwrap();
        assert!(a.no_h_rnn && a.no_control && !a.no_metric);
        assert_eq!(Ablations::parse_list("all").unwrap(), Ablations::all());
        assert!(Ablations::parse_list("no_gau").is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for k in [
            LearnerKind::Cpm,
            LearnerKind::ProtoNet,
            LearnerKind::MatchingNet,
            LearnerKind::Imp,
            LearnerKind::Lstm,
        ] {
            assert_eq!(LearnerKind::parse(k.name()), Some(k));
        }
        assert_eq!(LearnerKind::parse("dnc"), None);
    }

    #[test]
    fn baselines_reject_cpm_options() {
        let cfg = LearnerConfig {
            kind: LearnerKind::ProtoNet,
            write_rule: WriteRule::Gated,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
