//! The shared optimization loop.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AugmentConfig, TrainConfig};
use crate::confidence::{cem_forward, confidence_loss, confidence_targets, CemInputs};
use crate::error::{Error, Result};
use crate::eval::{corpus_wer, WerBreakdown};
use crate::model::AsrModel;
use crate::selfsup::{self, SelfSupConfig};
use crate::synthgen::{rng_for, Utterance};
use crate::tensor::{adam_step, AdamState, Session, Tensor, Var};
use crate::transducer::DecodeConfig;

const STREAM_BATCH: u64 = 20;
const STREAM_SS_BATCH: u64 = 21;
const STREAM_SS_SAMPLING: u64 = 22;
const STREAM_AUGMENT: u64 = 23;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub wer_target: f64,
}

/// First curve step whose WER is at or below `threshold`.
pub fn steps_to_reach(curve: &[CurvePoint], threshold: f64) -> Option<usize> {
    curve.iter().find(|p| p.wer_target <= threshold).map(|p| p.step)
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub curve: Vec<CurvePoint>,
    /// Every labeled utterance id that contributed to a transducer update.
    pub used_ids: BTreeSet<usize>,
    pub skipped_updates: u64,
}

/// One transcribed training utterance.
#[derive(Clone, Copy)]
pub(crate) struct Example<'a> {
    pub id: usize,
    pub features: &'a Tensor,
    pub tokens: &'a [usize],
}

pub(crate) struct SelfSupTerm<'a> {
    pub cfg: &'a SelfSupConfig,
    pub pool: Vec<&'a Tensor>,
    pub weight: f64,
}

pub(crate) struct LoopSpec<'a> {
    pub labeled: Vec<Example<'a>>,
    pub selfsup: Option<SelfSupTerm<'a>>,
    /// Weight of the confidence loss; 0 disables the CEM term.
    pub cem_weight: f64,
    pub augment: Option<&'a AugmentConfig>,
    pub train: &'a TrainConfig,
    pub seed: u64,
    /// Target-domain eval split for the WER curve.
    pub eval: Option<(&'a [&'a Utterance], &'a DecodeConfig)>,
    /// Added to curve step numbers (steps already spent in earlier stages).
    pub step_offset: usize,
}

/// Shuffled passes over `0..n`.
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        if self.order.is_empty() {
            return out;
        }
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Noisy-student input perturbation: time masks over the acoustic columns
/// followed by Gaussian noise on them. The domain one-hot is left intact.
pub fn augment(features: &Tensor, target_dim: usize, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let mut out = features.clone();
    let t_len = out.rows();
    let max_len = (cfg.max_mask_fraction * t_len as f64).floor() as usize;
    for _ in 0..cfg.n_time_masks {
        let len = rng.gen_range(0..=max_len);
        if len == 0 {
            continue;
        }
        let start = rng.gen_range(0..=t_len - len);
        for t in start..start + len {
            out.row_mut(t)[..target_dim].fill(0.0);
        }
    }
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("positive sigma");
        for t in 0..t_len {
            for v in &mut out.row_mut(t)[..target_dim] {
                *v += normal.sample(rng);
            }
        }
    }
    out
}

fn mean_of(s: &mut Session, terms: &[Var]) -> Result<Option<Var>> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &t in rest {
        acc = s.add(acc, t)?;
    }
    s.scale(acc, 1.0 / terms.len() as f64).map(Some)
}

/// Corpus-level WER of `model` over `utts`.
pub fn eval_wer(model: &AsrModel, utts: &[&Utterance], decode: &DecodeConfig) -> Result<WerBreakdown> {
    let hyps = utts
        .iter()
        .map(|u| model.transcribe(&u.features, decode).map(|h| h.tokens))
        .collect::<Result<Vec<_>>>()?;
    Ok(corpus_wer(
        hyps.iter().zip(utts).map(|(h, u)| (h.as_slice(), u.tokens.as_slice())),
    ))
}

/// Runs `spec.train.steps` Adam updates on `model`.
pub(crate) fn run_loop(model: &mut AsrModel, spec: &LoopSpec) -> Result<TrainLog> {
    let tc = spec.train;
    let mut log = TrainLog::default();
    let mut opt = AdamState::new();
    let mut batches = EpochSampler::new(spec.labeled.len(), rng_for(spec.seed, STREAM_BATCH, 0));
    let ss_len = spec.selfsup.as_ref().map_or(0, |t| t.pool.len());
    let mut ss_batches = EpochSampler::new(ss_len, rng_for(spec.seed, STREAM_SS_BATCH, 0));
    let mut ss_rng = rng_for(spec.seed, STREAM_SS_SAMPLING, 0);
    let mut aug_rng = rng_for(spec.seed, STREAM_AUGMENT, 0);
    let greedy = DecodeConfig {
        beam_size: 1,
        ..DecodeConfig::default()
    };
    let target_dim = model.config.target_dim;
    for step in 0..tc.steps {
        let grads = {
            let mut s = Session::train(&model.params);
            let mut sup = Vec::new();
            for i in batches.batch(tc.batch_size) {
                let ex = spec.labeled[i];
                let feats = match spec.augment {
                    Some(a) => augment(ex.features, target_dim, a, &mut aug_rng),
                    None => ex.features.clone(),
                };
                let enc = model.encode(&mut s, &feats)?;
                let mut l = model.rnnt_loss(&mut s, enc.encodings, ex.tokens)?;
                if spec.cem_weight > 0.0 {
                    let enc_val = s.value(enc.encodings).clone();
                    let hyp = model.decode_encodings(&enc_val, &greedy, true)?.swap_remove(0);
                    let inputs = CemInputs::from_hypothesis(&enc_val, &hyp)?;
                    if let Some(p) = cem_forward(&mut s, &inputs)? {
                        let c = confidence_targets(&hyp.tokens, ex.tokens);
                        let bce = confidence_loss(&mut s, p, &c)?;
                        let bce = s.scale(bce, spec.cem_weight)?;
                        l = s.add(l, bce)?;
                    }
                }
                log.used_ids.insert(ex.id);
                sup.push(l);
            }
            let mut total = mean_of(&mut s, &sup)?;
            if let Some(term) = spec.selfsup.as_ref().filter(|t| t.weight > 0.0) {
                let mut ss = Vec::new();
                for i in ss_batches.batch(tc.batch_size) {
                    if let Some(l) = model.selfsup_loss(&mut s, term.cfg, term.pool[i], &mut ss_rng)? {
                        ss.push(l);
                    }
                }
                if let Some(l_ss) = mean_of(&mut s, &ss)? {
                    total = Some(match total {
                        Some(l_sup) => selfsup::joint_loss(&mut s, l_sup, l_ss, term.weight)?,
                        None => s.scale(l_ss, term.weight)?,
                    });
                }
            }
            let Some(total) = total else {
                log.losses.push(f64::NAN);
                continue;
            };
            let value = s.value(total).item()?;
            if !value.is_finite() {
                return Err(Error::Diverged { step, loss: value });
            }
            log.losses.push(value);
            s.backward(total)?;
            s.grads()
        };
        adam_step(&mut model.params, &grads, &mut opt, &tc.adam)?;
        let done = step + 1;
        if let Some((utts, decode)) = spec.eval {
            if (tc.eval_every > 0 && done % tc.eval_every == 0) || done == tc.steps {
                let w = eval_wer(model, utts, decode)?;
                log.curve.push(CurvePoint {
                    step: spec.step_offset + done,
                    wer_target: w.wer,
                });
            }
        }
    }
    log.skipped_updates = opt.skipped_nonfinite;
    Ok(log)
}
