//! Recurrent context controller, control head and feature encoder.

use ocfsl_autodiff::{Bindings, Graph, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::memory::Control;
use crate::rng::StreamRng;
use crate::{Error, Real, Result};

/// Initial bias of both thresholds β_r and β_w.
pub const BETA_INIT: Real = 10.0;
/// Added to the raw temperature before the softplus.
pub const GAMMA_SHIFT: Real = 1.0;
pub const FORGET_BIAS: Real = 1.0;

/// Uniform in `±1/√fan_in`.
pub fn init_uniform(rng: &mut StreamRng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as Real).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("non-empty shape")
}

/// `W x + b` for bound `{prefix}.w` / `{prefix}.b`.
pub fn linear(g: &mut Graph, b: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let wx = g.matmul(b.var(&format!("{prefix}.w")), x)?;
    Ok(g.add(wx, b.var(&format!("{prefix}.b")))?)
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(g: &mut Graph, hidden: usize) -> Self {
        Self {
            h: g.constant(Tensor::zeros(&[hidden])),
            c: g.constant(Tensor::zeros(&[hidden])),
        }
    }
}

/// Register `{prefix}.w` `[4H, X+H]` and `{prefix}.b` `[4H]`, gates ordered
/// input, forget, output, candidate.
pub fn register_lstm(
    store: &mut ParamStore,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut StreamRng,
) {
    let fan_in = input + hidden;
    store.insert(
        format!("{prefix}.w"),
        init_uniform(rng, &[4 * hidden, fan_in], fan_in),
    );
    let mut b = Tensor::zeros(&[4 * hidden]);
    b.data_mut()[hidden..2 * hidden].fill(FORGET_BIAS);
    store.insert(format!("{prefix}.b"), b);
}

/// One LSTM cell step; the new hidden state is the output.
pub fn lstm_step(
    g: &mut Graph,
    b: &Bindings,
    prefix: &str,
    x: Var,
    state: LstmState,
) -> Result<LstmState> {
    let hidden = g.value(state.h).len();
    let input = g.concat(&[x, state.h])?;
    let z = linear(g, b, prefix, input)?;
    let i = g.slice(z, 0, hidden)?;
    let i = g.sigmoid(i);
    let f = g.slice(z, hidden, hidden)?;
    let f = g.sigmoid(f);
    let o = g.slice(z, 2 * hidden, hidden)?;
    let o = g.sigmoid(o);
    let cand = g.slice(z, 3 * hidden, hidden)?;
    let cand = g.tanh(cand);
    let kept = g.mul(f, state.c)?;
    let written = g.mul(i, cand)?;
    let c = g.add(kept, written)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok(LstmState { h, c })
}

/// Register the control head `head.w` `[2D+4, H]` (zero) and `head.b`.
///
/// Bias layout: `[h_rnn (D), m_raw (D), β_r, γ_r_raw, β_w, γ_w_raw]`. The
/// β biases start at [`BETA_INIT`]; `m_raw` starts at `ln(e−1)` so that the
/// metric is exactly one at initialization.
pub fn register_control_head(store: &mut ParamStore, hidden: usize, dim: usize) {
    let out = 2 * dim + 4;
    store.insert("head.w", Tensor::zeros(&[out, hidden]));
    let mut b = Tensor::zeros(&[out]);
    let unit_metric = (std::f64::consts::E - 1.0).ln() as Real;
    b.data_mut()[dim..2 * dim].fill(unit_metric);
    b.data_mut()[2 * dim] = BETA_INIT;
    b.data_mut()[2 * dim + 2] = BETA_INIT;
    store.insert("head.b", b);
}

/// Outputs of the control head for one step.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub h_rnn: Var,
    pub metric: Var,
    pub control: Control,
}

/// `γ = softplus(raw + 1)`, positive for every input.
pub fn temperature(g: &mut Graph, raw: Var) -> Var {
    let shifted = g.affine(raw, 1.0, GAMMA_SHIFT);
    g.softplus(shifted)
}

pub fn control_step(g: &mut Graph, b: &Bindings, lstm_out: Var, dim: usize) -> Result<HeadOutput> {
    let out = linear(g, b, "head", lstm_out)?;
    let h_rnn = g.slice(out, 0, dim)?;
    let m_raw = g.slice(out, dim, dim)?;
    let metric = g.softplus(m_raw);
    let beta_r = g.pick(out, 2 * dim)?;
    let gamma_r = g.pick(out, 2 * dim + 1)?;
    let gamma_r = temperature(g, gamma_r);
    let beta_w = g.pick(out, 2 * dim + 2)?;
    let gamma_w = g.pick(out, 2 * dim + 3)?;
    let gamma_w = temperature(g, gamma_w);
    Ok(HeadOutput {
        h_rnn,
        metric,
        control: Control {
            metric: Some(metric),
            beta_r,
            gamma_r,
            beta_w,
            gamma_w,
        },
    })
}

/// Register learned scalar thresholds `ctrl.*` used when the control head is
/// absent or ablated.
pub fn register_scalar_control(store: &mut ParamStore) {
    store.insert("ctrl.beta_r", Tensor::scalar(BETA_INIT));
    store.insert("ctrl.gamma_r", Tensor::scalar(0.0));
    store.insert("ctrl.beta_w", Tensor::scalar(BETA_INIT));
    store.insert("ctrl.gamma_w", Tensor::scalar(0.0));
}

/// Sequence-constant control from the `ctrl.*` scalars, metric fixed to one.
pub fn scalar_control(g: &mut Graph, b: &Bindings) -> Control {
    let gamma_r = temperature(g, b.var("ctrl.gamma_r"));
    let gamma_w = temperature(g, b.var("ctrl.gamma_w"));
    Control {
        metric: None,
        beta_r: b.var("ctrl.beta_r"),
        gamma_r,
        beta_w: b.var("ctrl.beta_w"),
        gamma_w,
    }
}

/// `h_t = h_cnn + h_rnn`.
pub fn contextualize(g: &mut Graph, h_cnn: Var, h_rnn: Var) -> Result<Var> {
    Ok(g.add(h_cnn, h_rnn)?)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Hidden layer widths; empty with no `output_dim` means identity.
    pub hidden: Vec<usize>,
    /// Embedding width; `None` keeps the raw width (identity when no hidden
    /// layers are configured).
    pub output_dim: Option<usize>,
}

impl EncoderConfig {
    pub fn is_identity(&self) -> bool {
        self.hidden.is_empty() && self.output_dim.is_none()
    }

    pub fn output_dim(&self, input: usize) -> usize {
        self.output_dim
            .or_else(|| self.hidden.last().copied())
            .unwrap_or(input)
    }
}

/// Feature encoder: identity, or affine layers with tanh between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    input: usize,
    widths: Vec<usize>,
}

impl Encoder {
    pub fn new(config: &EncoderConfig, input: usize) -> Self {
        let mut widths = config.hidden.clone();
        if let Some(out) = config.output_dim {
            widths.push(out);
        }
        Self { input, widths }
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }

    pub fn output_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(self.input)
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut StreamRng) {
        let mut fan_in = self.input;
        for (i, &w) in self.widths.iter().enumerate() {
            store.insert(format!("enc.{i}.w"), init_uniform(rng, &[w, fan_in], fan_in));
            store.insert(format!("enc.{i}.b"), Tensor::zeros(&[w]));
            fan_in = w;
        }
    }

    pub fn encode(&self, g: &mut Graph, b: &Bindings, x: &[Real]) -> Result<Var> {
        if x.len() != self.input {
            return Err(Error::config(
                "encoder",
                format!("input has {} dimensions, encoder expects {}", x.len(), self.input),
            ));
        }
        let mut h = g.constant(Tensor::vector(x.to_vec())?);
        for i in 0..self.widths.len() {
            if i > 0 {
                h = g.tanh(h);
            }
            h = linear(g, b, &format!("enc.{i}"), h)?;
        }
        Ok(h)
    }
}
