//! Confidence estimation: per-token correctness prediction, utterance
//! scores, and pseudo-label filtering.
//!
//! The CEM reads, for every emitted token, the encoder output at the
//! emission frame, the joint network's hidden activation, a learned token
//! embedding, the token log-probability and the output entropy. All of these
//! except the embedding are detached, so CEM gradients never reach the
//! encoder or the transducer networks.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::eval::{align, EditOp};
use crate::tensor::{Axis, ParamInit, ParamStore, Session, Tensor, Var};
use crate::transducer::Hypothesis;

/// Probabilities are clamped to `[P_EPS, 1 − P_EPS]` inside the loss.
pub const P_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CemConfig {
    pub hidden: usize,
    pub token_embed_dim: usize,
    /// Weight of the confidence loss next to the transducer loss.
    pub loss_weight: f64,
    pub threshold: f64,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            token_embed_dim: 8,
            loss_weight: 1.0,
            threshold: 0.9,
        }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.token_embed_dim == 0 {
            return Err(config("CEM dimensions must be positive"));
        }
        if !(0.0..=1.0).contains(&self.threshold) || self.loss_weight < 0.0 {
            return Err(config("CEM threshold must lie in [0, 1] and loss_weight be ≥ 0"));
        }
        Ok(())
    }
}

/// Width of the detached part of a CEM input row.
pub fn feature_dim(enc_dim: usize, joint_dim: usize) -> usize {
    enc_dim + joint_dim + 2
}

/// Parameters `cem.embed`, `cem.l1`, `cem.l2`; the output layer starts at
/// zero so an untrained CEM predicts 0.5 everywhere.
pub fn init_params(p: &mut ParamInit, cfg: &CemConfig, enc_dim: usize, joint_dim: usize, n_tokens: usize) {
    p.uniform("cem.embed", &[n_tokens, cfg.token_embed_dim], 1.0);
    p.linear("cem.l1", feature_dim(enc_dim, joint_dim) + cfg.token_embed_dim, cfg.hidden);
    p.zeros("cem.l2.w", &[cfg.hidden, 1]);
    p.zeros("cem.l2.b", &[1]);
}

/// Detached per-token CEM inputs for one hypothesis.
#[derive(Clone, Debug, PartialEq)]
pub struct CemInputs {
    /// `[N × feature_dim]`
    pub features: Tensor,
    pub tokens: Vec<usize>,
}

impl CemInputs {
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Gathers features from a hypothesis decoded with joint activations
    /// collected. `encodings` is the `[T' × d]` encoder output.
    pub fn from_hypothesis(encodings: &Tensor, hyp: &Hypothesis) -> Result<Self> {
        let d = encodings.last_dim();
        let joint_dim = hyp.emissions.first().map_or(0, |e| e.joint_hidden.len());
        let width = d + joint_dim + 2;
        let mut data = Vec::with_capacity(hyp.emissions.len() * width);
        for e in &hyp.emissions {
            if e.joint_hidden.len() != joint_dim || joint_dim == 0 {
                return Err(contract("hypothesis was decoded without confidence inputs"));
            }
            if e.frame >= encodings.rows() {
                return Err(contract("emission frame outside the encoder output"));
            }
            data.extend_from_slice(encodings.row(e.frame));
            data.extend_from_slice(&e.joint_hidden);
            data.push(e.log_prob);
            data.push(e.entropy);
        }
        Ok(Self {
            features: Tensor::new(vec![hyp.emissions.len(), width], data)?,
            tokens: hyp.tokens.clone(),
        })
    }
}

/// Per-token confidence `p ∈ (0, 1)` as an `[N × 1]` tape value; `None` for
/// an empty hypothesis.
pub fn cem_forward(s: &mut Session, inputs: &CemInputs) -> Result<Option<Var>> {
    if inputs.is_empty() {
        return Ok(None);
    }
    let x = s.constant(inputs.features.clone())?;
    let table = s.param("cem.embed")?;
    let emb = s.embedding_lookup(table, &inputs.tokens)?;
    let x = s.concat(&[x, emb], Axis::Last)?;
    let h = s.linear(x, "cem.l1")?;
    let h = s.swish(h)?;
    let z = s.linear(h, "cem.l2")?;
    s.sigmoid(z).map(Some)
}

/// Per-token confidences without recording gradients.
pub fn cem_scores(params: &ParamStore, inputs: &CemInputs) -> Result<Vec<f64>> {
    let mut s = Session::inference(params);
    Ok(match cem_forward(&mut s, inputs)? {
        Some(p) => s.value(p).data().to_vec(),
        None => Vec::new(),
    })
}

/// Mean token confidence; 0 for an empty hypothesis.
pub fn utterance_score(p: &[f64]) -> f64 {
    if p.is_empty() {
        0.0
    } else {
        p.iter().sum::<f64>() / p.len() as f64
    }
}

/// 1 for each hypothesis token aligned as a match against `reference`,
/// 0 for substitutions and insertions.
pub fn confidence_targets<T: PartialEq>(hyp: &[T], reference: &[T]) -> Vec<f64> {
    align(hyp, reference)
        .into_iter()
        .filter_map(|op| match op {
            EditOp::Match => Some(1.0),
            EditOp::Sub | EditOp::Ins => Some(0.0),
            EditOp::Del => None,
        })
        .collect()
}

/// Mean binary cross-entropy between `p` (`[N × 1]` or `[N]`) and targets.
pub fn confidence_loss(s: &mut Session, p: Var, c: &[f64]) -> Result<Var> {
    let n = s.value(p).len();
    if n != c.len() || n == 0 {
        return Err(contract(format!(
            "confidence_loss: {n} predictions for {} targets",
            c.len()
        )));
    }
    let shape = s.shape(p).to_vec();
    let pc = s.clamp(p, P_EPS, 1.0 - P_EPS)?;
    let lp = s.ln(pc)?;
    let q = s.affine(pc, -1.0, 1.0)?;
    let lq = s.ln(q)?;
    let ct = s.constant(Tensor::new(shape.clone(), c.to_vec())?)?;
    let cq = s.constant(Tensor::new(shape, c.iter().map(|v| 1.0 - v).collect())?)?;
    let a = s.mul(ct, lp)?;
    let b = s.mul(cq, lq)?;
    let sum = s.add(a, b)?;
    let m = s.mean(sum)?;
    s.scale(m, -1.0)
}

/// One pseudo-labeled utterance, as written to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub utt_id: usize,
    pub hyp: Vec<usize>,
    pub utterance_score: f64,
    pub kept: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub threshold: f64,
    pub kept: usize,
    pub dropped: usize,
    pub dropped_fraction: f64,
}

/// Marks every label with `utterance_score ≥ threshold` as kept.
pub fn filter_utterances(labels: &mut [PseudoLabel], threshold: f64) -> FilterStats {
    let mut kept = 0;
    for l in labels.iter_mut() {
        l.kept = l.utterance_score >= threshold;
        kept += usize::from(l.kept);
    }
    let dropped = labels.len() - kept;
    FilterStats {
        threshold,
        kept,
        dropped,
        dropped_fraction: if labels.is_empty() {
            0.0
        } else {
            dropped as f64 / labels.len() as f64
        },
    }
}

pub fn write_manifest(path: &Path, labels: &[PseudoLabel]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for l in labels {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<PseudoLabel>> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("manifest line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}
