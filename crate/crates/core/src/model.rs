//! A complete transducer model: configuration, parameters and the forward
//! passes shared by training and inference.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::confidence::{self, CemConfig, CemInputs};
use crate::encoder::{self, EncoderConfig, EncoderOutput};
use crate::error::{config, Error, Result};
use crate::selfsup::{self, MaskPlan, SelfSupConfig, SelfSupKind};
use crate::synthgen::{rng_for, CorpusSpec};
use crate::tensor::{read_checkpoint, write_checkpoint, Checkpoint, ParamInit, ParamStore, Session, Tensor, Var};
use crate::transducer::{
    self, beam_decode, greedy_decode, DecodeConfig, Decoder, FrameScorer, Hypothesis, JointCombine, JointConfig,
    PredictionNetConfig, TransducerConfig,
};

const STREAM_INIT_ENCODER: u64 = 10;
const STREAM_INIT_TRANSDUCER: u64 = 11;
const STREAM_INIT_CEM: u64 = 12;
const STREAM_INIT_SELFSUP: u64 = 13;
const STREAM_INIT_ADAPTER: u64 = 14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width of a model input row (stacked features plus domain one-hot).
    pub input_dim: usize,
    /// Width of the stacked acoustic part, the self-supervised target.
    pub target_dim: usize,
    /// Non-blank vocabulary size; blank is id `vocab_size`.
    pub vocab_size: usize,
    pub encoder: EncoderConfig,
    pub prediction: PredictionNetConfig,
    pub joint_dim: usize,
    pub cem: CemConfig,
    /// Present when the model carries a self-supervised head.
    pub selfsup: Option<SelfSupConfig>,
    /// An extra MLP layer between the encoder and the joint network, giving
    /// the transducer its own view of the encoder output when a
    /// self-supervised head shares it.
    pub rnnt_adapter: bool,
}

impl ModelConfig {
    /// Desk-scale defaults sized for `spec`.
    pub fn for_corpus(spec: &CorpusSpec) -> Self {
        Self {
            input_dim: spec.input_dim(),
            target_dim: spec.stacked_dim(),
            vocab_size: spec.vocab_size,
            encoder: EncoderConfig::default(),
            prediction: PredictionNetConfig::default(),
            joint_dim: 32,
            cem: CemConfig::default(),
            selfsup: None,
            rnnt_adapter: true,
        }
    }

    pub fn transducer(&self) -> TransducerConfig {
        TransducerConfig {
            prediction: self.prediction.clone(),
            joint: JointConfig {
                joint_dim: self.joint_dim,
                vocab_size: self.vocab_size,
                combine: JointCombine::AddTanh,
            },
            enc_dim: self.encoder.model_dim,
        }
    }

    pub fn blank(&self) -> usize {
        self.vocab_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_dim == 0 || self.target_dim > self.input_dim {
            return Err(config("target_dim must be in 1..=input_dim"));
        }
        self.encoder.validate()?;
        self.transducer().validate()?;
        self.cem.validate()?;
        if let Some(ss) = &self.selfsup {
            ss.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AsrModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl AsrModel {
    /// Fresh parameters. Each component draws from its own seeded stream,
    /// so adding or removing the self-supervised head leaves the rest of
    /// the initialization unchanged.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        {
            let mut rng = rng_for(seed, STREAM_INIT_ENCODER, 0);
            let mut p = ParamInit {
                store: &mut params,
                rng: &mut rng,
            };
            encoder::init_params(&mut p, &config.encoder, config.input_dim);
        }
        {
            let mut rng = rng_for(seed, STREAM_INIT_TRANSDUCER, 0);
            let mut p = ParamInit {
                store: &mut params,
                rng: &mut rng,
            };
            transducer::init_params(&mut p, &config.transducer());
        }
        {
            let mut rng = rng_for(seed, STREAM_INIT_CEM, 0);
            let mut p = ParamInit {
                store: &mut params,
                rng: &mut rng,
            };
            confidence::init_params(
                &mut p,
                &config.cem,
                config.encoder.model_dim,
                config.joint_dim,
                config.vocab_size + 1,
            );
        }
        let mut model = Self { config, params };
        if let Some(ss) = model.config.selfsup.clone() {
            model.add_selfsup_head(&ss, seed);
        }
        if model.config.rnnt_adapter {
            model.add_rnnt_adapter(seed);
        }
        Ok(model)
    }

    fn add_rnnt_adapter(&mut self, seed: u64) {
        let d = self.config.encoder.model_dim;
        let mut rng = rng_for(seed, STREAM_INIT_ADAPTER, 0);
        ParamInit {
            store: &mut self.params,
            rng: &mut rng,
        }
        .linear("rnnt.adapter", d, d);
    }

    /// Encoder rows as the joint network sees them.
    pub fn rnnt_input(&self, s: &mut Session, enc: Var) -> Result<Var> {
        if !self.config.rnnt_adapter {
            return Ok(enc);
        }
        let h = s.linear(enc, "rnnt.adapter")?;
        s.swish(h)
    }

    /// Attaches (or replaces) a self-supervised head.
    pub fn add_selfsup_head(&mut self, ss: &SelfSupConfig, seed: u64) {
        let mut rng = rng_for(seed, STREAM_INIT_SELFSUP, 0);
        let mut p = ParamInit {
            store: &mut self.params,
            rng: &mut rng,
        };
        selfsup::init_head(&mut p, ss, self.config.encoder.model_dim, self.config.target_dim);
        self.config.selfsup = Some(ss.clone());
    }

    /// Self-supervised loss of one utterance, or `None` when it is too short.
    pub fn selfsup_loss(
        &self,
        s: &mut Session,
        cfg: &SelfSupConfig,
        features: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<Var>> {
        let td = self.config.target_dim;
        let targets = acoustic_targets(features, td);
        match cfg.kind {
            SelfSupKind::Wav2vec => {
                let enc = self.encode(s, features)?;
                selfsup::wav2vec_loss(s, enc.encodings, &targets, cfg, rng)
            }
            SelfSupKind::Apc => {
                let enc = self.encode(s, features)?;
                selfsup::apc_loss(s, enc.encodings, &targets, cfg)
            }
            SelfSupKind::Wav2vec2 => {
                let plan = MaskPlan::sample(features.rows(), cfg.mask_prob, cfg.mask_span, rng);
                if plan.check().is_err() {
                    return Ok(None);
                }
                let x = s.constant(features.clone())?;
                let masked = selfsup::apply_mask(s, x, &plan, td)?;
                let enc = self.encode_var(s, masked)?;
                selfsup::wav2vec2_loss(s, enc.encodings, &plan, &targets, cfg, rng)
            }
        }
    }

    /// Encodes model input rows already on the tape.
    pub fn encode_var(&self, s: &mut Session, input: Var) -> Result<EncoderOutput> {
        encoder::encode_var(s, input, &self.config.encoder)
    }

    pub fn encode(&self, s: &mut Session, features: &Tensor) -> Result<EncoderOutput> {
        self.check_input(features)?;
        let x = s.constant(features.clone())?;
        self.encode_var(s, x)
    }

    /// Encoder output `[T' × d]` without recording gradients.
    pub fn encodings(&self, features: &Tensor) -> Result<Tensor> {
        let mut s = Session::inference(&self.params);
        let out = self.encode(&mut s, features)?;
        Ok(s.value(out.encodings).clone())
    }

    fn check_input(&self, features: &Tensor) -> Result<()> {
        if features.ndim() != 2 || features.shape()[1] != self.config.input_dim || features.rows() == 0 {
            return Err(Error::Shape {
                op: "model input",
                shapes: vec![features.shape().to_vec(), vec![self.config.input_dim]],
            });
        }
        Ok(())
    }

    /// Transducer negative log-likelihood of `tokens` given encodings.
    pub fn rnnt_loss(&self, s: &mut Session, enc: Var, tokens: &[usize]) -> Result<Var> {
        let enc = self.rnnt_input(s, enc)?;
        let cfg = self.config.transducer();
        let pred = transducer::prediction_var(s, &cfg, tokens)?;
        let logits = transducer::joint_logits(s, enc, pred)?;
        transducer::rnnt_loss(s, logits, tokens)
    }

    /// N-best hypotheses for `[T' × d]` encodings; `beam_size == 1` decodes
    /// greedily.
    pub fn decode_encodings(&self, enc: &Tensor, decode: &DecodeConfig, collect: bool) -> Result<Vec<Hypothesis>> {
        let cfg = self.config.transducer();
        let dec = Decoder::new(&self.params, &cfg);
        let proj = if self.config.rnnt_adapter {
            let mut s = Session::inference(&self.params);
            let x = s.constant(enc.clone())?;
            let y = self.rnnt_input(&mut s, x)?;
            dec.project_encodings(s.value(y))?
        } else {
            dec.project_encodings(enc)?
        };
        let scorer = FrameScorer {
            decoder: &dec,
            enc_proj: &proj,
        };
        if decode.beam_size == 1 {
            Ok(vec![greedy_decode(&scorer, decode.max_symbols_per_frame, collect)?])
        } else {
            beam_decode(&scorer, decode, collect)
        }
    }

    /// Best hypothesis for one utterance.
    pub fn transcribe(&self, features: &Tensor, decode: &DecodeConfig) -> Result<Hypothesis> {
        let enc = self.encodings(features)?;
        Ok(self.decode_encodings(&enc, decode, false)?.swap_remove(0))
    }

    /// Best hypothesis with its per-token confidences and utterance score.
    pub fn transcribe_scored(&self, features: &Tensor, decode: &DecodeConfig) -> Result<(Hypothesis, Vec<f64>, f64)> {
        let enc = self.encodings(features)?;
        let hyp = self.decode_encodings(&enc, decode, true)?.swap_remove(0);
        let inputs = CemInputs::from_hypothesis(&enc, &hyp)?;
        let p = confidence::cem_scores(&self.params, &inputs)?;
        let score = confidence::utterance_score(&p);
        Ok((hyp, p, score))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut meta = BTreeMap::new();
        meta.insert("model_config".to_string(), serde_json::to_string(&self.config)?);
        meta.insert("blank_id".to_string(), self.config.blank().to_string());
        Ok(Checkpoint {
            meta,
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let raw = ckpt
            .meta
            .get("model_config")
            .ok_or_else(|| Error::Parse("checkpoint has no model_config".into()))?;
        let config: ModelConfig =
            serde_json::from_str(raw).map_err(|e| Error::Parse(format!("model_config: {e}")))?;
        config.validate()?;
        Ok(Self {
            config,
            params: ckpt.params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.to_checkpoint()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(read_checkpoint(path)?)
    }
}

/// The stacked acoustic columns of model input rows, without the domain id.
pub fn acoustic_targets(features: &Tensor, target_dim: usize) -> Tensor {
    let t_len = features.rows();
    let mut data = Vec::with_capacity(t_len * target_dim);
    for t in 0..t_len {
        data.extend_from_slice(&features.row(t)[..target_dim]);
    }
    Tensor::new(vec![t_len, target_dim], data).expect("row widths")
}

