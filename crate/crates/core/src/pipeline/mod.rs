//! Training recipes, noisy-student pseudo-labeling and experiment presets.
//!
//! Every run is a pure function of `(ExperimentSpec, corpus, seed)`: random
//! draws come from named seeded streams and all maps are ordered, so reports
//! serialize byte-identically on rerun.

mod presets;
mod recipes;
mod train;

pub use presets::{preset, preset_names, run_preset, PresetOutput, PRESETS};
pub use recipes::{
    evaluate, pretrain_selfsup, pseudo_label, run_experiment, run_experiment_trained, student_is_causal, train_joint,
    train_student_nst, train_supervised, train_teacher, PseudoLabelSet, Trained, Workspace,
};
pub use train::{augment, eval_wer, steps_to_reach, CurvePoint, TrainLog};

use serde::{Deserialize, Serialize};

use crate::confidence::{CemConfig, FilterStats};
use crate::encoder::EncoderConfig;
use crate::error::{config, Result};
use crate::eval::WerBreakdown;
use crate::model::ModelConfig;
use crate::selfsup::{SelfSupConfig, SelfSupKind};
use crate::synthgen::{CorpusSpec, SplitManifest};
use crate::tensor::AdamConfig;
use crate::transducer::{DecodeConfig, PredictionNetConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Supervised,
    SelfsupPretrainFinetune,
    JointSelfsup,
    SemisupNst,
    SelfPlusSemi,
    JointPlusNst,
}

impl Algorithm {
    pub fn uses_nst(self) -> bool {
        matches!(self, Self::SemisupNst | Self::SelfPlusSemi | Self::JointPlusNst)
    }

    pub fn uses_pretraining(self) -> bool {
        matches!(self, Self::SelfsupPretrainFinetune | Self::SelfPlusSemi)
    }

    pub fn uses_joint_loss(self) -> bool {
        matches!(self, Self::JointSelfsup | Self::JointPlusNst)
    }
}

/// Which utterances carry human labels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum DataSplit {
    #[serde(rename = "MD")]
    Md,
    #[serde(rename = "MD_src")]
    MdSrc,
    #[serde(rename = "MD_3p")]
    Md3p,
    /// `MD_src` plus the given fraction of target utterances.
    #[serde(rename = "sweep")]
    Sweep(f64),
}

impl DataSplit {
    pub fn label(&self) -> String {
        match self {
            Self::Md => "MD".into(),
            Self::MdSrc => "MD_src".into(),
            Self::Md3p => "MD_3p".into(),
            Self::Sweep(x) => format!("MD_src+{}%MF", (x * 100.0).round()),
        }
    }

    /// `(labeled, unlabeled target)` utterance ids.
    pub fn partition(&self, m: &SplitManifest) -> (Vec<usize>, Vec<usize>) {
        let labeled = match self {
            Self::Md => m.md.clone(),
            Self::MdSrc => m.md_src.clone(),
            Self::Md3p => m.md_3p.clone(),
            Self::Sweep(x) => m.with_target_fraction(*x).0,
        };
        let set: std::collections::BTreeSet<usize> = labeled.iter().copied().collect();
        let unlabeled = m.mf.iter().copied().filter(|i| !set.contains(i)).collect();
        (labeled, unlabeled)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Evaluate on the target eval split every this many steps (0: never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 8,
            adam: AdamConfig::default(),
            eval_every: 0,
        }
    }
}

/// Student-side input noise for noisy-student training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub n_time_masks: usize,
    /// Longest time mask as a fraction of the utterance length.
    pub max_mask_fraction: f64,
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            n_time_masks: 2,
            max_mask_fraction: 0.1,
            noise_sigma: 0.1,
        }
    }
}

/// Model sizes shared by teacher and student.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub student: EncoderConfig,
    pub teacher: EncoderConfig,
    pub prediction: PredictionNetConfig,
    pub joint_dim: usize,
    pub cem: CemConfig,
}

impl Default for ModelShape {
    fn default() -> Self {
        let student = EncoderConfig {
            n_blocks: 2,
            model_dim: 32,
            n_heads: 2,
            left_context: 16,
            right_context: 0,
            conv_kernel: 5,
            causal_conv: true,
            ff_expansion: 2,
        };
        Self {
            teacher: student.with_lookahead(8),
            student,
            prediction: PredictionNetConfig {
                n_layers: 1,
                embed_dim: 16,
                hidden: 32,
                proj: 32,
            },
            joint_dim: 32,
            cem: CemConfig::default(),
        }
    }
}

impl ModelShape {
    pub fn model_config(&self, corpus: &CorpusSpec, encoder: &EncoderConfig) -> ModelConfig {
        ModelConfig {
            encoder: encoder.clone(),
            prediction: self.prediction.clone(),
            joint_dim: self.joint_dim,
            cem: self.cem.clone(),
            ..ModelConfig::for_corpus(corpus)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub name: String,
    pub algorithm: Algorithm,
    pub data_split: DataSplit,
    pub selfsup: SelfSupConfig,
    /// Pseudo-labels with utterance confidence below this are dropped.
    pub confidence_threshold: f64,
    pub model: ModelShape,
    /// Right context of the encoder used during two-stage self-supervised
    /// pre-training; `None` pre-trains the causal student encoder itself.
    pub pretrain_right_context: Option<usize>,
    pub train: TrainConfig,
    pub pretrain: TrainConfig,
    pub teacher_train: TrainConfig,
    pub pseudo_decode: DecodeConfig,
    pub eval_decode: DecodeConfig,
    pub augment: AugmentConfig,
    /// Replace pseudo-labels by the ground truth (upper-bound control).
    pub ground_truth_pseudo: bool,
    pub seed: u64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "supervised".into(),
            algorithm: Algorithm::Supervised,
            data_split: DataSplit::MdSrc,
            selfsup: SelfSupConfig::default(),
            confidence_threshold: 0.9,
            model: ModelShape::default(),
            pretrain_right_context: None,
            train: TrainConfig::default(),
            pretrain: TrainConfig::default(),
            teacher_train: TrainConfig::default(),
            pseudo_decode: DecodeConfig::default(),
            eval_decode: DecodeConfig {
                beam_size: 1,
                ..DecodeConfig::default()
            },
            augment: AugmentConfig::default(),
            ground_truth_pseudo: false,
            seed: 0,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.model.student.validate_student()?;
        self.model.teacher.validate()?;
        self.model.cem.validate()?;
        self.selfsup.validate()?;
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(config("confidence_threshold must lie in [0, 1]"));
        }
        if let DataSplit::Sweep(x) = self.data_split {
            if !(0.0..=1.0).contains(&x) {
                return Err(config("sweep fraction must lie in [0, 1]"));
            }
        }
        for (what, t) in [("train", &self.train), ("pretrain", &self.pretrain), ("teacher_train", &self.teacher_train)] {
            if t.batch_size == 0 {
                return Err(config(format!("{what}.batch_size must be positive")));
            }
        }
        if self.algorithm.uses_pretraining() {
            self.pretrain_encoder()?;
        }
        Ok(())
    }

    /// Encoder used for two-stage pre-training. wav2vec 2.0 sees the future
    /// of every masked frame only through right context; on a causal encoder
    /// the two-stage recipe does not converge and is rejected.
    pub fn pretrain_encoder(&self) -> Result<EncoderConfig> {
        let enc = match self.pretrain_right_context {
            Some(r) => self.model.student.with_lookahead(r),
            None => self.model.student.clone(),
        };
        if self.selfsup.kind == SelfSupKind::Wav2vec2 && enc.is_causal() {
            return Err(config(
                "two-stage wav2vec2 pre-training on a causal encoder does not converge; \
                 set pretrain_right_context > 0 or use joint training",
            ));
        }
        Ok(enc)
    }
}

/// Sizes that relate a run to the full-scale setup it imitates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleInfo {
    pub student_params: usize,
    pub full_size_encoder_blocks: usize,
    pub full_size_model_dim: usize,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NstAudit {
    pub labeled_ids: usize,
    pub kept_pseudo_ids: usize,
    pub distinct_ids_trained: usize,
    /// Utterance ids sampled during training that were neither labeled nor
    /// kept by the filter. Always zero in a valid run.
    pub violations: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSummary {
    pub filter: FilterStats,
    /// Pseudo-label WER against the held ground truth, all decoded utterances.
    pub wer_all: f64,
    /// The same over the kept utterances only.
    pub wer_kept: f64,
    pub teacher_wer_target: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub algorithm: Algorithm,
    pub data_split: String,
    pub seed: u64,
    /// Per-step loss of the final (student or supervised) training stage.
    pub losses: Vec<f64>,
    pub pretrain_losses: Vec<f64>,
    pub teacher_losses: Vec<f64>,
    /// Target-domain WER during the final stage; steps include pre-training.
    pub curve: Vec<CurvePoint>,
    pub wer_target: WerBreakdown,
    pub wer_source: WerBreakdown,
    pub steps_to_threshold: Option<usize>,
    pub pretrain_steps: usize,
    pub total_steps: usize,
    pub pseudo_labels: Option<PseudoLabelSummary>,
    pub audit: Option<NstAudit>,
    pub student_causal: bool,
    pub skipped_updates: u64,
    pub scale: ScaleInfo,
    pub spec: ExperimentSpec,
}
