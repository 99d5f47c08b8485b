//! Self-supervised encoder objectives and the joint training loss.
//!
//! All three objectives read the last encoder layer through their own
//! two-layer MLP head (`ss.l1`, `ss.l2`), separate from the transducer's
//! encoder-side joint head. Targets are the stacked acoustic features of the
//! input (the domain one-hot is excluded) and never receive gradients.
//!
//! - wav2vec: from `enc_t`, identify `x_{t+k}` for `k = 1..=K` among negatives
//!   drawn from other frames of the same utterance.
//! - wav2vec 2.0: acoustic columns of masked frames are replaced by a learned
//!   embedding before encoding; the encoder output at each masked frame must
//!   identify the clean features there among other masked frames.
//! - APC: regress `x_{t+n}` from `enc_t`, plus a total-variation penalty on
//!   consecutive predictions.

use std::rc::Rc;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::tensor::{Axis, ParamInit, Session, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfSupKind {
    Wav2vec,
    Wav2vec2,
    Apc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelfSupConfig {
    pub kind: SelfSupKind,
    /// Weight of the self-supervised term in the joint loss.
    pub lambda: f64,
    pub future_steps: usize,
    pub n_negatives: usize,
    pub mask_prob: f64,
    pub mask_span: usize,
    pub apc_shift: usize,
    pub apc_tv_weight: f64,
    /// Contrastive scores are cosine similarities divided by this.
    pub temperature: f64,
    pub head_hidden: usize,
}

impl Default for SelfSupConfig {
    fn default() -> Self {
        Self {
            kind: SelfSupKind::Wav2vec,
            lambda: 0.5,
            future_steps: 3,
            n_negatives: 8,
            mask_prob: 0.2,
            mask_span: 4,
            apc_shift: 3,
            apc_tv_weight: 0.1,
            temperature: 0.1,
            head_hidden: 32,
        }
    }
}

impl SelfSupConfig {
    pub fn with_kind(kind: SelfSupKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(config(format!("lambda must be finite and ≥ 0, got {}", self.lambda)));
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return Err(config(format!("mask_prob must lie in (0, 1), got {}", self.mask_prob)));
        }
        if self.future_steps == 0 || self.n_negatives == 0 || self.mask_span == 0 || self.apc_shift == 0 {
            return Err(config("future_steps, n_negatives, mask_span and apc_shift must be positive"));
        }
        if !(self.temperature > 0.0) || self.apc_tv_weight < 0.0 || self.head_hidden == 0 {
            return Err(config("temperature and head_hidden must be positive, apc_tv_weight ≥ 0"));
        }
        Ok(())
    }

    /// Width of the head output for a given target width.
    pub fn head_out_dim(&self, target_dim: usize) -> usize {
        match self.kind {
            SelfSupKind::Wav2vec => self.future_steps * target_dim,
            SelfSupKind::Wav2vec2 | SelfSupKind::Apc => target_dim,
        }
    }
}

/// Head `ss.l1`/`ss.l2`, plus `ss.mask_emb` for wav2vec 2.0.
pub fn init_head(p: &mut ParamInit, cfg: &SelfSupConfig, enc_dim: usize, target_dim: usize) {
    p.linear("ss.l1", enc_dim, cfg.head_hidden);
    p.linear("ss.l2", cfg.head_hidden, cfg.head_out_dim(target_dim));
    if cfg.kind == SelfSupKind::Wav2vec2 {
        p.uniform("ss.mask_emb", &[target_dim], 1.0);
    }
}

pub fn head_var(s: &mut Session, enc: Var) -> Result<Var> {
    let h = s.linear(enc, "ss.l1")?;
    let h = s.swish(h)?;
    s.linear(h, "ss.l2")
}

/// Masked frames of one utterance, stored as `(start, len)` spans.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    t_len: usize,
    spans: Vec<(usize, usize)>,
}

impl MaskPlan {
    /// Builds a plan from a per-frame mask.
    pub fn from_mask(mask: &[bool]) -> Self {
        let mut spans = Vec::new();
        let mut t = 0;
        while t < mask.len() {
            if mask[t] {
                let start = t;
                while t < mask.len() && mask[t] {
                    t += 1;
                }
                spans.push((start, t - start));
            } else {
                t += 1;
            }
        }
        Self {
            t_len: mask.len(),
            spans,
        }
    }

    /// Masks `max(1, round(prob·T'))` frames by placing spans of length
    /// `span` at random starts until the budget is reached.
    pub fn sample(t_len: usize, prob: f64, span: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut mask = vec![false; t_len];
        if t_len == 0 {
            return Self::from_mask(&mask);
        }
        let budget = ((prob * t_len as f64).round() as usize).clamp(1, t_len);
        let mut count = 0;
        while count < budget {
            let start = rng.gen_range(0..t_len);
            for m in mask.iter_mut().skip(start).take(span) {
                if count == budget {
                    break;
                }
                if !*m {
                    *m = true;
                    count += 1;
                }
            }
        }
        Self::from_mask(&mask)
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    pub fn indices(&self) -> Vec<usize> {
        self.spans.iter().flat_map(|&(s, l)| s..s + l).collect()
    }

    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.t_len];
        for i in self.indices() {
            m[i] = true;
        }
        m
    }

    pub fn n_masked(&self) -> usize {
        self.spans.iter().map(|s| s.1).sum()
    }

    /// Errors unless some, but not all, frames are masked.
    pub fn check(&self) -> Result<()> {
        let n = self.n_masked();
        if n == 0 {
            return Err(contract("mask plan is empty"));
        }
        if n == self.t_len {
            return Err(config("mask plan covers every frame; lower mask_prob"));
        }
        Ok(())
    }
}

/// Replaces the first `target_dim` columns of masked rows of `input`
/// (`[T' × F]`) with the learned `ss.mask_emb`.
pub fn apply_mask(s: &mut Session, input: Var, plan: &MaskPlan, target_dim: usize) -> Result<Var> {
    plan.check()?;
    let shape = s.shape(input).to_vec();
    if shape.len() != 2 || shape[0] != plan.t_len() || shape[1] < target_dim {
        return Err(crate::Error::Shape {
            op: "apply_mask",
            shapes: vec![shape, vec![plan.t_len(), target_dim]],
        });
    }
    let (t_len, f) = (shape[0], shape[1]);
    let mask = plan.mask();
    let mut keep = vec![1.0; t_len * f];
    let mut sel = vec![0.0; t_len * f];
    for t in (0..t_len).filter(|&t| mask[t]) {
        keep[t * f..t * f + target_dim].fill(0.0);
        sel[t * f..t * f + target_dim].fill(1.0);
    }
    let keep = s.constant(Tensor::new(vec![t_len, f], keep)?)?;
    let sel = s.constant(Tensor::new(vec![t_len, f], sel)?)?;
    let emb = s.param("ss.mask_emb")?;
    let emb = if f > target_dim {
        let pad = s.constant(Tensor::zeros(&[f - target_dim]))?;
        s.concat(&[emb, pad], Axis::Rows)?
    } else {
        emb
    };
    let kept = s.mul(input, keep)?;
    let filled = s.mul(sel, emb)?;
    s.add(kept, filled)
}

/// `mean_n −log softmax(scores[n])[0]`: InfoNCE with the positive in column 0.
pub fn info_nce(s: &mut Session, scores: Var) -> Result<Var> {
    let shape = s.shape(scores).to_vec();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(crate::Error::Shape {
            op: "info_nce",
            shapes: vec![shape],
        });
    }
    let lsm = s.log_softmax_lastdim(scores)?;
    let idx: Rc<[usize]> = vec![0; shape[0]].into();
    let pos = s.gather_lastdim(lsm, idx, 1)?;
    let m = s.mean(pos)?;
    s.scale(m, -1.0)
}

/// Row-normalized copy of `targets` as `[S × T']` for scoring.
fn normalized_targets_t(targets: &Tensor) -> Result<Tensor> {
    let (t_len, d) = (targets.rows(), targets.last_dim());
    let mut out = vec![0.0; d * t_len];
    for t in 0..t_len {
        let row = targets.row(t);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
        for j in 0..d {
            out[j * t_len + t] = row[j] / n;
        }
    }
    Tensor::new(vec![d, t_len], out)
}

/// Cosine scores of `preds` (`[N × S]`) against target frames chosen by
/// `cols` (`N × width` frame indices), divided by the temperature.
fn contrastive_scores(
    s: &mut Session,
    preds: Var,
    targets: &Tensor,
    cols: Vec<usize>,
    width: usize,
    temperature: f64,
) -> Result<Var> {
    let p = s.l2_normalize_lastdim(preds)?;
    let tt = s.constant(normalized_targets_t(targets)?)?;
    let all = s.matmul(p, tt)?;
    let picked = s.gather_lastdim(all, cols.into(), width)?;
    s.scale(picked, 1.0 / temperature)
}

/// `n` frame indices from `pool` excluding `positive`, drawn uniformly with
/// replacement.
fn draw_negatives(pool: &[usize], positive: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let others: Vec<usize> = pool.iter().copied().filter(|&i| i != positive).collect();
    (0..n).map(|_| *others.choose(rng).expect("non-empty pool")).collect()
}

fn check_targets(s: &Session, enc: Var, targets: &Tensor) -> Result<usize> {
    let t_len = s.shape(enc)[0];
    if targets.ndim() != 2 || targets.rows() != t_len {
        return Err(crate::Error::Shape {
            op: "selfsup targets",
            shapes: vec![s.shape(enc).to_vec(), targets.shape().to_vec()],
        });
    }
    Ok(t_len)
}

/// Contrastive future prediction. Returns `None` (with a warning) when the
/// utterance has no more than `K` frames.
pub fn wav2vec_loss(
    s: &mut Session,
    enc: Var,
    targets: &Tensor,
    cfg: &SelfSupConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Var>> {
    let t_len = check_targets(s, enc, targets)?;
    let k_max = cfg.future_steps;
    if t_len <= k_max {
        warn!("wav2vec: skipping utterance with {t_len} frames (needs more than {k_max})");
        return Ok(None);
    }
    let d = targets.last_dim();
    let head = head_var(s, enc)?;
    let frames: Vec<usize> = (0..t_len).collect();
    let width = 1 + cfg.n_negatives;
    let mut parts = Vec::with_capacity(k_max);
    let mut cols = Vec::new();
    for k in 1..=k_max {
        let pk = s.slice(head, Axis::Last, (k - 1) * d, k * d)?;
        parts.push(s.slice(pk, Axis::Rows, 0, t_len - k)?);
        for t in 0..t_len - k {
            cols.push(t + k);
            cols.extend(draw_negatives(&frames, t + k, cfg.n_negatives, rng));
        }
    }
    let preds = s.concat(&parts, Axis::Rows)?;
    let scores = contrastive_scores(s, preds, targets, cols, width, cfg.temperature)?;
    info_nce(s, scores).map(Some)
}

/// Contrastive identification at masked frames. `enc` must come from the
/// masked input (see [`apply_mask`]); `targets` are the clean features.
/// Returns `None` (with a warning) when fewer than two frames are masked.
pub fn wav2vec2_loss(
    s: &mut Session,
    enc: Var,
    plan: &MaskPlan,
    targets: &Tensor,
    cfg: &SelfSupConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Var>> {
    plan.check()?;
    let t_len = check_targets(s, enc, targets)?;
    if plan.t_len() != t_len {
        return Err(contract("mask plan length differs from encoder output"));
    }
    let masked = plan.indices();
    if masked.len() < 2 {
        warn!("wav2vec2: skipping utterance with a single masked frame");
        return Ok(None);
    }
    let head = head_var(s, enc)?;
    let rows: Vec<Var> = masked
        .iter()
        .map(|&t| s.slice(head, Axis::Rows, t, t + 1))
        .collect::<Result<_>>()?;
    let preds = s.concat(&rows, Axis::Rows)?;
    let mut cols = Vec::with_capacity(masked.len() * (1 + cfg.n_negatives));
    for &t in &masked {
        cols.push(t);
        cols.extend(draw_negatives(&masked, t, cfg.n_negatives, rng));
    }
    let scores = contrastive_scores(s, preds, targets, cols, 1 + cfg.n_negatives, cfg.temperature)?;
    info_nce(s, scores).map(Some)
}

/// Future-frame regression plus total variation. Returns `None` (with a
/// warning) when the utterance has no more than `n` frames.
pub fn apc_loss(s: &mut Session, enc: Var, targets: &Tensor, cfg: &SelfSupConfig) -> Result<Option<Var>> {
    let t_len = check_targets(s, enc, targets)?;
    let n = cfg.apc_shift;
    if t_len <= n {
        warn!("apc: skipping utterance with {t_len} frames (needs more than {n})");
        return Ok(None);
    }
    let head = head_var(s, enc)?;
    let preds = s.slice(head, Axis::Rows, 0, t_len - n)?;
    let future = s.constant(targets.slice_rows(n, t_len))?;
    let diff = s.sub(preds, future)?;
    let sq = s.square(diff)?;
    let mse = s.mean(sq)?;
    let m = t_len - n;
    if m < 2 || cfg.apc_tv_weight == 0.0 {
        return Ok(Some(mse));
    }
    let a = s.slice(preds, Axis::Rows, 1, m)?;
    let b = s.slice(preds, Axis::Rows, 0, m - 1)?;
    let step = s.sub(a, b)?;
    let step = s.square(step)?;
    let tv = s.mean(step)?;
    let tv = s.scale(tv, cfg.apc_tv_weight)?;
    s.add(mse, tv).map(Some)
}

/// `l_rnnt + λ·l_selfsup`.
pub fn joint_loss(s: &mut Session, l_rnnt: Var, l_selfsup: Var, lambda: f64) -> Result<Var> {
    let w = s.scale(l_selfsup, lambda)?;
    s.add(l_rnnt, w)
}
