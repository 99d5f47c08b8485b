//! RNN-T prediction and joint networks, the lattice loss and decoding.
//!
//! The output vocabulary has `V + 1` entries; the blank symbol is the last
//! index `V`. The prediction network starts from the blank symbol and then
//! consumes the previously emitted non-blank tokens.
//!
//! Every network here has two implementations that must agree: a tape
//! version used for training, which evaluates the whole `T' × (U+1)` lattice
//! at once, and a plain numeric version used by the decoders, which steps one
//! label at a time.

mod decode;
mod loss;

pub use decode::{
    beam_decode, greedy_decode, DecodeConfig, Decoder, Emission, FrameScorer, Hypothesis, PredState, Scorer,
};
pub use loss::{rnnt_loss, rnnt_loss_value, LatticePosting};

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::tensor::{Axis, ParamInit, Session, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictionNetConfig {
    pub n_layers: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub proj: usize,
}

impl Default for PredictionNetConfig {
    fn default() -> Self {
        Self {
            n_layers: 1,
            embed_dim: 32,
            hidden: 64,
            proj: 32,
        }
    }
}

/// How encoder and prediction vectors are merged before the output layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointCombine {
    /// `tanh(W_e·enc + W_p·pred)`.
    AddTanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointConfig {
    pub joint_dim: usize,
    /// Non-blank vocabulary size `V`.
    pub vocab_size: usize,
    pub combine: JointCombine,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            joint_dim: 32,
            vocab_size: 32,
            combine: JointCombine::AddTanh,
        }
    }
}

impl JointConfig {
    pub fn blank(&self) -> usize {
        self.vocab_size
    }

    pub fn output_dim(&self) -> usize {
        self.vocab_size + 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransducerConfig {
    pub prediction: PredictionNetConfig,
    pub joint: JointConfig,
    /// Width of the encoder output feeding the joint network.
    pub enc_dim: usize,
}

impl TransducerConfig {
    pub fn validate(&self) -> Result<()> {
        let p = &self.prediction;
        if p.n_layers == 0 || p.embed_dim == 0 || p.hidden == 0 || p.proj == 0 {
            return Err(config("prediction network dimensions must be positive"));
        }
        if self.joint.joint_dim == 0 || self.joint.vocab_size == 0 || self.enc_dim == 0 {
            return Err(config("joint dimensions and vocabulary size must be positive"));
        }
        Ok(())
    }
}

/// Parameters: `pred.embed`, `pred.lstm{l}.{wx,wh,b}`, `pred.proj`,
/// `joint.enc.{l1,l2}` (the encoder-side MLP head), `joint.pred`, `joint.out`.
pub fn init_params(p: &mut ParamInit, cfg: &TransducerConfig) {
    let pc = &cfg.prediction;
    let j = cfg.joint.joint_dim;
    let v1 = cfg.joint.output_dim();
    p.uniform("pred.embed", &[v1, pc.embed_dim], 1.0);
    for l in 0..pc.n_layers {
        let input = if l == 0 { pc.embed_dim } else { pc.hidden };
        p.glorot(&format!("pred.lstm{l}.wx"), input, 4 * pc.hidden);
        p.glorot(&format!("pred.lstm{l}.wh"), pc.hidden, 4 * pc.hidden);
        // Forget-gate bias starts at 1.
        let mut b = vec![0.0; 4 * pc.hidden];
        b[pc.hidden..2 * pc.hidden].fill(1.0);
        p.store
            .insert(format!("pred.lstm{l}.b"), crate::tensor::Tensor::vector(b));
    }
    p.linear("pred.proj", pc.hidden, pc.proj);
    p.linear("joint.enc.l1", cfg.enc_dim, cfg.enc_dim);
    p.linear("joint.enc.l2", cfg.enc_dim, j);
    p.linear("joint.pred", pc.proj, j);
    p.linear("joint.out", j, v1);
}

/// Runs the prediction network over `[blank, y_1, …, y_U]`, returning
/// `[(U+1) × proj]`.
pub fn prediction_var(s: &mut Session, cfg: &TransducerConfig, targets: &[usize]) -> Result<Var> {
    let pc = &cfg.prediction;
    let h_dim = pc.hidden;
    let mut ids = Vec::with_capacity(targets.len() + 1);
    ids.push(cfg.joint.blank());
    ids.extend_from_slice(targets);
    let n = ids.len();
    let table = s.param("pred.embed")?;
    let mut x = s.embedding_lookup(table, &ids)?;
    for l in 0..pc.n_layers {
        let pre = format!("pred.lstm{l}");
        let wx = s.param(&format!("{pre}.wx"))?;
        let wh = s.param(&format!("{pre}.wh"))?;
        let b = s.param(&format!("{pre}.b"))?;
        let xw = s.matmul(x, wx)?;
        let xw = s.add(xw, b)?;
        let mut h: Option<Var> = None;
        let mut c: Option<Var> = None;
        let mut outs = Vec::with_capacity(n);
        for u in 0..n {
            let mut gates = s.slice(xw, Axis::Rows, u, u + 1)?;
            if let Some(hp) = h {
                let r = s.matmul(hp, wh)?;
                gates = s.add(gates, r)?;
            }
            let i = s.slice(gates, Axis::Last, 0, h_dim)?;
            let f = s.slice(gates, Axis::Last, h_dim, 2 * h_dim)?;
            let g = s.slice(gates, Axis::Last, 2 * h_dim, 3 * h_dim)?;
            let o = s.slice(gates, Axis::Last, 3 * h_dim, 4 * h_dim)?;
            let i = s.sigmoid(i)?;
            let f = s.sigmoid(f)?;
            let g = s.tanh(g)?;
            let o = s.sigmoid(o)?;
            let ig = s.mul(i, g)?;
            let c_new = match c {
                Some(cp) => {
                    let fc = s.mul(f, cp)?;
                    s.add(fc, ig)?
                }
                None => ig,
            };
            let tc = s.tanh(c_new)?;
            let h_new = s.mul(o, tc)?;
            outs.push(h_new);
            h = Some(h_new);
            c = Some(c_new);
        }
        x = s.concat(&outs, Axis::Rows)?;
    }
    s.linear(x, "pred.proj")
}

/// Encoder-side joint projection `[T' × d] → [T' × J]` (two-layer MLP head).
pub fn joint_enc_var(s: &mut Session, enc: Var) -> Result<Var> {
    let h = s.linear(enc, "joint.enc.l1")?;
    let h = s.swish(h)?;
    s.linear(h, "joint.enc.l2")
}

/// Full lattice logits `[T' × (U+1) × (V+1)]` from encoder output `[T' × d]`
/// and prediction output `[(U+1) × proj]`.
pub fn joint_logits(s: &mut Session, enc: Var, pred: Var) -> Result<Var> {
    let e = joint_enc_var(s, enc)?;
    let p = s.linear(pred, "joint.pred")?;
    let z = s.outer_add(e, p)?;
    let z = s.tanh(z)?;
    s.linear(z, "joint.out")
}
