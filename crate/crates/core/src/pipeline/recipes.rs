//! End-to-end recipes built on the training loop.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use log::info;

use super::train::{eval_wer, run_loop, Example, LoopSpec, SelfSupTerm, TrainLog};
use super::{
    Algorithm, ExperimentSpec, NstAudit, PseudoLabelSummary, RunReport, ScaleInfo,
};
use crate::confidence::{filter_utterances, PseudoLabel};
use crate::encoder::EncoderConfig;
use crate::error::{contract, Error, Result};
use crate::eval::{corpus_wer, WerBreakdown};
use crate::model::AsrModel;
use crate::synthgen::{derive_seed, rng_for, Corpus};
use crate::tensor::Tensor;
use crate::transducer::DecodeConfig;

const STAGE_STUDENT_INIT: u64 = 1;
const STAGE_TEACHER_INIT: u64 = 2;
const STAGE_PRETRAIN: u64 = 100;
const STAGE_TEACHER: u64 = 101;
const STAGE_MAIN: u64 = 102;
const STREAM_CAUSALITY: u64 = 30;

/// Reuses expensive intermediate products (pre-trained encoders, teacher
/// pseudo-labels) across the runs of a preset. Entries are keyed by the
/// serialized configuration that determines them.
#[derive(Default)]
pub struct Workspace {
    pretrained: BTreeMap<String, (AsrModel, Vec<f64>)>,
    pseudo: BTreeMap<String, PseudoLabelSet>,
}

impl Workspace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Cached teacher outputs, in key order.
    pub fn pseudo_labels(&self) -> impl Iterator<Item = &PseudoLabelSet> {
        self.pseudo.values()
    }

    /// Uses the checkpoint at `path`, written by an earlier pre-training
    /// run, as the pre-trained encoder for `spec`.
    pub fn load_pretrained(&mut self, spec: &ExperimentSpec, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::MissingPrerequisite(format!(
                "pre-trained checkpoint {} not found; run `pretrain` first",
                path.display()
            )));
        }
        let model = AsrModel::load(path)?;
        if model.config.encoder != spec.pretrain_encoder()? {
            return Err(contract("checkpoint encoder differs from the experiment's pre-training encoder"));
        }
        self.pretrained.insert(pretrain_key(spec), (model, Vec::new()));
        Ok(())
    }
}

/// Teacher output over the unlabeled target utterances, before filtering.
#[derive(Clone, Debug)]
pub struct PseudoLabelSet {
    pub labels: Vec<PseudoLabel>,
    pub teacher_losses: Vec<f64>,
    pub teacher_wer_target: f64,
}

impl PseudoLabelSet {
    /// Applies the confidence filter and scores both label sets against the
    /// held ground truth.
    pub fn filtered(&self, corpus: &Corpus, threshold: f64) -> (Vec<PseudoLabel>, PseudoLabelSummary) {
        let mut labels = self.labels.clone();
        let filter = filter_utterances(&mut labels, threshold);
        let wer_of = |keep: &dyn Fn(&PseudoLabel) -> bool| {
            corpus_wer(
                labels
                    .iter()
                    .filter(|l| keep(l))
                    .map(|l| (l.hyp.as_slice(), corpus.utt(l.utt_id).tokens.as_slice())),
            )
            .wer
        };
        let summary = PseudoLabelSummary {
            wer_all: wer_of(&|_| true),
            wer_kept: wer_of(&|l| l.kept),
            teacher_wer_target: self.teacher_wer_target,
            filter,
        };
        (labels, summary)
    }
}

fn key<T: serde::Serialize>(parts: &T) -> String {
    serde_json::to_string(parts).expect("serializable key")
}

/// `(target, source)` WER on the held-out eval splits.
pub fn evaluate(model: &AsrModel, corpus: &Corpus, decode: &DecodeConfig) -> Result<(WerBreakdown, WerBreakdown)> {
    let tgt = corpus.split("eval_MF")?;
    let src = corpus.split("eval_SF")?;
    if tgt.is_empty() || src.is_empty() {
        return Err(contract("evaluation split is empty"));
    }
    Ok((eval_wer(model, &tgt, decode)?, eval_wer(model, &src, decode)?))
}

/// Checks that encoder output rows `≤ t` are bit-identical when every input
/// frame after `t` is replaced by noise.
pub fn student_is_causal(model: &AsrModel, seed: u64) -> Result<bool> {
    use rand::Rng;
    let mut rng = rng_for(seed, STREAM_CAUSALITY, 0);
    let t_len = 12;
    let d = model.config.input_dim;
    let base = Tensor::new(vec![t_len, d], (0..t_len * d).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let enc = model.encodings(&base)?;
    for t in [0, 4, t_len - 2] {
        let mut x = base.clone();
        for r in t + 1..t_len {
            for v in x.row_mut(r) {
                *v = rng.gen_range(-3.0..3.0);
            }
        }
        let e2 = model.encodings(&x)?;
        for r in 0..=t {
            let same = enc.row(r).iter().zip(e2.row(r)).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn labeled_examples<'a>(corpus: &'a Corpus, ids: &[usize]) -> Vec<Example<'a>> {
    ids.iter()
        .map(|&i| {
            let u = corpus.utt(i);
            Example {
                id: i,
                features: &u.features,
                tokens: &u.tokens,
            }
        })
        .collect()
}

fn md_pool(corpus: &Corpus) -> Vec<&Tensor> {
    corpus.manifest.md.iter().map(|&i| &corpus.utt(i).features).collect()
}

fn fresh_model(spec: &ExperimentSpec, corpus: &Corpus, encoder: &EncoderConfig, stage: u64) -> Result<AsrModel> {
    let cfg = spec.model.model_config(&corpus.spec, encoder);
    AsrModel::new(cfg, derive_seed(spec.seed, stage, 0))
}

struct Stage {
    model: AsrModel,
    log: TrainLog,
    pretrain_losses: Vec<f64>,
    pretrain_steps: usize,
    teacher_losses: Vec<f64>,
    pseudo: Option<PseudoLabelSummary>,
    audit: Option<NstAudit>,
}

impl Stage {
    fn plain(model: AsrModel, log: TrainLog) -> Self {
        Self {
            model,
            log,
            pretrain_losses: Vec::new(),
            pretrain_steps: 0,
            teacher_losses: Vec::new(),
            pseudo: None,
            audit: None,
        }
    }
}

/// A finished run: its report and the trained student.
#[derive(Clone, Debug)]
pub struct Trained {
    pub report: RunReport,
    pub model: AsrModel,
}

fn report(spec: &ExperimentSpec, corpus: &Corpus, st: Stage) -> Result<Trained> {
    let (wer_target, wer_source) = evaluate(&st.model, corpus, &spec.eval_decode)?;
    let student_causal = student_is_causal(&st.model, spec.seed)?;
    if !student_causal {
        return Err(contract(format!("run `{}`: trained student is not causal", spec.name)));
    }
    let full = EncoderConfig::full_size();
    info!(
        "{} [{} seed {}]: WER target {:.4} source {:.4}",
        spec.name,
        spec.data_split.label(),
        spec.seed,
        wer_target.wer,
        wer_source.wer
    );
    let report = RunReport {
        name: spec.name.clone(),
        algorithm: spec.algorithm,
        data_split: spec.data_split.label(),
        seed: spec.seed,
        losses: st.log.losses,
        pretrain_losses: st.pretrain_losses,
        teacher_losses: st.teacher_losses,
        curve: st.log.curve,
        wer_target,
        wer_source,
        steps_to_threshold: None,
        pretrain_steps: st.pretrain_steps,
        total_steps: st.pretrain_steps + spec.train.steps,
        pseudo_labels: st.pseudo,
        audit: st.audit,
        student_causal,
        skipped_updates: st.log.skipped_updates,
        scale: ScaleInfo {
            student_params: st.model.params.num_scalars(),
            full_size_encoder_blocks: full.n_blocks,
            full_size_model_dim: full.model_dim,
            batch_size: spec.train.batch_size,
        },
        spec: spec.clone(),
    };
    Ok(Trained { report, model: st.model })
}

fn main_loop<'a>(
    spec: &'a ExperimentSpec,
    labeled: Vec<Example<'a>>,
    eval: &'a [&'a crate::synthgen::Utterance],
    step_offset: usize,
) -> LoopSpec<'a> {
    LoopSpec {
        labeled,
        selfsup: None,
        cem_weight: 0.0,
        augment: None,
        train: &spec.train,
        seed: derive_seed(spec.seed, STAGE_MAIN, 0),
        eval: Some((eval, &spec.eval_decode)),
        step_offset,
    }
}

/// Transducer training of a fresh causal student on the labeled split.
pub fn train_supervised(spec: &ExperimentSpec, corpus: &Corpus) -> Result<Trained> {
    spec.validate()?;
    let (labeled, _) = spec.data_split.partition(&corpus.manifest);
    let eval = corpus.split("eval_MF")?;
    let mut model = fresh_model(spec, corpus, &spec.model.student, STAGE_STUDENT_INIT)?;
    let ls = main_loop(spec, labeled_examples(corpus, &labeled), &eval, 0);
    let log = run_loop(&mut model, &ls)?;
    report(spec, corpus, Stage::plain(model, log))
}

/// Self-supervised training of an encoder and head on all `MD` features.
/// Returns the model (transducer parameters untouched) and its losses.
pub fn pretrain_selfsup(spec: &ExperimentSpec, corpus: &Corpus) -> Result<(AsrModel, Vec<f64>)> {
    let enc = spec.pretrain_encoder()?;
    let mut cfg = spec.model.model_config(&corpus.spec, &enc);
    cfg.selfsup = Some(spec.selfsup.clone());
    let mut model = AsrModel::new(cfg, derive_seed(spec.seed, STAGE_STUDENT_INIT, 0))?;
    let ls = LoopSpec {
        labeled: Vec::new(),
        selfsup: Some(SelfSupTerm {
            cfg: &spec.selfsup,
            pool: md_pool(corpus),
            weight: 1.0,
        }),
        cem_weight: 0.0,
        augment: None,
        train: &spec.pretrain,
        seed: derive_seed(spec.seed, STAGE_PRETRAIN, 0),
        eval: None,
        step_offset: 0,
    };
    let log = run_loop(&mut model, &ls)?;
    Ok((model, log.losses))
}

fn pretrain_key(spec: &ExperimentSpec) -> String {
    key(&(
        &spec.selfsup,
        &spec.model,
        spec.pretrain_right_context,
        &spec.pretrain,
        spec.seed,
    ))
}

fn cached_pretrain(spec: &ExperimentSpec, corpus: &Corpus, ws: &mut Workspace) -> Result<(AsrModel, Vec<f64>)> {
    let k = pretrain_key(spec);
    if let Some(hit) = ws.pretrained.get(&k) {
        return Ok(hit.clone());
    }
    let out = pretrain_selfsup(spec, corpus)?;
    ws.pretrained.insert(k, out.clone());
    Ok(out)
}

/// A fresh causal student whose encoder weights come from `pretrained`.
fn student_from(spec: &ExperimentSpec, corpus: &Corpus, pretrained: Option<&AsrModel>) -> Result<AsrModel> {
    let mut model = fresh_model(spec, corpus, &spec.model.student, STAGE_STUDENT_INIT)?;
    if let Some(p) = pretrained {
        let copied = model.params.load_matching(&p.params.filtered(&["enc."]));
        if copied.is_empty() {
            return Err(contract("pre-trained checkpoint shares no encoder weights with the student"));
        }
    }
    Ok(model)
}

fn finetune(spec: &ExperimentSpec, corpus: &Corpus, pretrained: &AsrModel, pre_losses: Vec<f64>) -> Result<Trained> {
    let (labeled, _) = spec.data_split.partition(&corpus.manifest);
    let eval = corpus.split("eval_MF")?;
    let mut model = student_from(spec, corpus, Some(pretrained))?;
    let ls = main_loop(spec, labeled_examples(corpus, &labeled), &eval, spec.pretrain.steps);
    let log = run_loop(&mut model, &ls)?;
    let mut st = Stage::plain(model, log);
    st.pretrain_losses = pre_losses;
    st.pretrain_steps = spec.pretrain.steps;
    report(spec, corpus, st)
}

/// Single-stage optimization of `L_rnnt + λ·L_selfsup` on a causal student;
/// the self-supervised batch is drawn from all `MD` features.
pub fn train_joint(spec: &ExperimentSpec, corpus: &Corpus) -> Result<Trained> {
    spec.validate()?;
    let (labeled, _) = spec.data_split.partition(&corpus.manifest);
    let eval = corpus.split("eval_MF")?;
    let mut model = fresh_model(spec, corpus, &spec.model.student, STAGE_STUDENT_INIT)?;
    model.add_selfsup_head(&spec.selfsup, derive_seed(spec.seed, STAGE_STUDENT_INIT, 0));
    let mut ls = main_loop(spec, labeled_examples(corpus, &labeled), &eval, 0);
    ls.selfsup = Some(SelfSupTerm {
        cfg: &spec.selfsup,
        pool: md_pool(corpus),
        weight: spec.selfsup.lambda,
    });
    let log = run_loop(&mut model, &ls)?;
    report(spec, corpus, Stage::plain(model, log))
}

/// Fresh non-causal teacher trained on the labeled split with the
/// transducer and confidence losses.
pub fn train_teacher(spec: &ExperimentSpec, corpus: &Corpus) -> Result<(AsrModel, Vec<f64>)> {
    let (labeled, _) = spec.data_split.partition(&corpus.manifest);
    let mut model = fresh_model(spec, corpus, &spec.model.teacher, STAGE_TEACHER_INIT)?;
    let ls = LoopSpec {
        labeled: labeled_examples(corpus, &labeled),
        selfsup: None,
        cem_weight: spec.model.cem.loss_weight,
        augment: None,
        train: &spec.teacher_train,
        seed: derive_seed(spec.seed, STAGE_TEACHER, 0),
        eval: None,
        step_offset: 0,
    };
    let log = run_loop(&mut model, &ls)?;
    Ok((model, log.losses))
}

/// Beam-decodes clean features of `ids` with the teacher and scores every
/// hypothesis with its confidence module. Nothing is filtered yet.
pub fn pseudo_label(teacher: &AsrModel, corpus: &Corpus, ids: &[usize], decode: &DecodeConfig) -> Result<Vec<PseudoLabel>> {
    ids.iter()
        .map(|&id| {
            let (hyp, _, score) = teacher.transcribe_scored(&corpus.utt(id).features, decode)?;
            Ok(PseudoLabel {
                utt_id: id,
                hyp: hyp.tokens,
                utterance_score: score,
                kept: true,
            })
        })
        .collect()
}

fn cached_pseudo(spec: &ExperimentSpec, corpus: &Corpus, ws: &mut Workspace) -> Result<PseudoLabelSet> {
    let k = key(&(
        &spec.data_split,
        &spec.model,
        &spec.teacher_train,
        &spec.pseudo_decode,
        &spec.eval_decode,
        spec.ground_truth_pseudo,
        spec.seed,
    ));
    if let Some(hit) = ws.pseudo.get(&k) {
        return Ok(hit.clone());
    }
    let (_, unlabeled) = spec.data_split.partition(&corpus.manifest);
    let (teacher, teacher_losses) = train_teacher(spec, corpus)?;
    let teacher_wer_target = evaluate(&teacher, corpus, &spec.eval_decode)?.0.wer;
    let mut labels = pseudo_label(&teacher, corpus, &unlabeled, &spec.pseudo_decode)?;
    if spec.ground_truth_pseudo {
        for l in &mut labels {
            l.hyp = corpus.utt(l.utt_id).tokens.clone();
        }
    }
    let set = PseudoLabelSet {
        labels,
        teacher_losses,
        teacher_wer_target,
    };
    ws.pseudo.insert(k, set.clone());
    Ok(set)
}

/// Noisy-student training: a causal student learns from the human-labeled
/// split plus the kept pseudo-labels, on augmented inputs.
pub fn train_student_nst(
    spec: &ExperimentSpec,
    corpus: &Corpus,
    pseudo: &PseudoLabelSet,
    pretrained: Option<(&AsrModel, Vec<f64>)>,
) -> Result<Trained> {
    let (labeled, unlabeled) = spec.data_split.partition(&corpus.manifest);
    let (labels, summary) = pseudo.filtered(corpus, spec.confidence_threshold);
    if !unlabeled.is_empty() && summary.filter.kept == 0 {
        return Err(Error::EmptyKeptSet {
            threshold: spec.confidence_threshold,
        });
    }
    let eval = corpus.split("eval_MF")?;
    let mut examples = labeled_examples(corpus, &labeled);
    let kept: Vec<&PseudoLabel> = labels.iter().filter(|l| l.kept).collect();
    examples.extend(kept.iter().map(|l| Example {
        id: l.utt_id,
        features: &corpus.utt(l.utt_id).features,
        tokens: &l.hyp,
    }));
    let mut model = student_from(spec, corpus, pretrained.as_ref().map(|p| p.0))?;
    let offset = if pretrained.is_some() { spec.pretrain.steps } else { 0 };
    let mut ls = main_loop(spec, examples, &eval, offset);
    ls.augment = Some(&spec.augment);
    if spec.algorithm.uses_joint_loss() {
        model.add_selfsup_head(&spec.selfsup, derive_seed(spec.seed, STAGE_STUDENT_INIT, 0));
        ls.selfsup = Some(SelfSupTerm {
            cfg: &spec.selfsup,
            pool: md_pool(corpus),
            weight: spec.selfsup.lambda,
        });
    }
    let log = run_loop(&mut model, &ls)?;
    let allowed: BTreeSet<usize> = labeled.iter().copied().chain(kept.iter().map(|l| l.utt_id)).collect();
    let violations: Vec<usize> = log.used_ids.difference(&allowed).copied().collect();
    if !violations.is_empty() {
        return Err(contract(format!("student trained on non-kept utterances {violations:?}")));
    }
    let audit = NstAudit {
        labeled_ids: labeled.len(),
        kept_pseudo_ids: kept.len(),
        distinct_ids_trained: log.used_ids.len(),
        violations,
    };
    let mut st = Stage::plain(model, log);
    st.teacher_losses = pseudo.teacher_losses.clone();
    st.pseudo = Some(summary);
    st.audit = Some(audit);
    if let Some((_, pre_losses)) = pretrained {
        st.pretrain_losses = pre_losses;
        st.pretrain_steps = spec.pretrain.steps;
    }
    report(spec, corpus, st)
}

/// Runs one experiment, reusing cached intermediate products from `ws`.
pub fn run_experiment(spec: &ExperimentSpec, corpus: &Corpus, ws: &mut Workspace) -> Result<RunReport> {
    run_experiment_trained(spec, corpus, ws).map(|t| t.report)
}

/// [`run_experiment`], keeping the trained student.
pub fn run_experiment_trained(spec: &ExperimentSpec, corpus: &Corpus, ws: &mut Workspace) -> Result<Trained> {
    spec.validate()?;
    match spec.algorithm {
        Algorithm::Supervised => train_supervised(spec, corpus),
        Algorithm::JointSelfsup => train_joint(spec, corpus),
        Algorithm::SelfsupPretrainFinetune => {
            let (pre, losses) = cached_pretrain(spec, corpus, ws)?;
            finetune(spec, corpus, &pre, losses)
        }
        Algorithm::SemisupNst | Algorithm::JointPlusNst => {
            let pseudo = cached_pseudo(spec, corpus, ws)?;
            train_student_nst(spec, corpus, &pseudo, None)
        }
        Algorithm::SelfPlusSemi => {
            let pre = cached_pretrain(spec, corpus, ws)?;
            let pseudo = cached_pseudo(spec, corpus, ws)?;
            train_student_nst(spec, corpus, &pseudo, Some((&pre.0, pre.1)))
        }
    }
}
