//! Named experiment grids mirroring the result tables.

use std::fmt::Write as _;

use log::info;
use serde::{Deserialize, Serialize};

use super::recipes::{run_experiment, Workspace};
use super::train::steps_to_reach;
use super::{Algorithm, DataSplit, ExperimentSpec, RunReport};
use crate::error::{config, Result};
use crate::selfsup::SelfSupKind;
use crate::synthgen::Corpus;

pub const PRESETS: &[&str] = &["table2", "table3", "table4", "table5", "fig2", "sweep", "table6"];

pub fn preset_names() -> &'static [&'static str] {
    PRESETS
}

/// Right context of the encoder used when pre-training with wav2vec 2.0.
const W2V2_PRETRAIN_RIGHT_CONTEXT: usize = 2;

/// Label-fraction grid of the sweep preset.
pub const SWEEP_FRACTIONS: [f64; 5] = [0.0, 0.03, 0.1, 0.3, 1.0];

fn row(base: &ExperimentSpec, name: &str, algorithm: Algorithm, split: DataSplit) -> ExperimentSpec {
    ExperimentSpec {
        name: name.into(),
        algorithm,
        data_split: split,
        ..base.clone()
    }
}

fn with_kind(mut spec: ExperimentSpec, kind: SelfSupKind) -> ExperimentSpec {
    spec.selfsup.kind = kind;
    if kind == SelfSupKind::Wav2vec2 && spec.algorithm.uses_pretraining() {
        spec.pretrain_right_context = Some(W2V2_PRETRAIN_RIGHT_CONTEXT);
    }
    spec
}

fn no_filter(mut spec: ExperimentSpec) -> ExperimentSpec {
    spec.confidence_threshold = 0.0;
    spec
}

/// The experiment rows of preset `name`, built on `base`.
pub fn preset(name: &str, base: &ExperimentSpec) -> Result<Vec<ExperimentSpec>> {
    use Algorithm::*;
    use DataSplit::*;
    use SelfSupKind::*;
    let b = base;
    Ok(match name {
        "table2" => vec![
            row(b, "Supervised", Supervised, Md),
            row(b, "Supervised", Supervised, MdSrc),
            row(b, "Supervised", Supervised, Md3p),
            with_kind(row(b, "Wav2vec", SelfsupPretrainFinetune, MdSrc), Wav2vec),
            with_kind(row(b, "Wav2vec2.0", SelfsupPretrainFinetune, MdSrc), Wav2vec2),
            with_kind(row(b, "APC", SelfsupPretrainFinetune, MdSrc), Apc),
            with_kind(row(b, "Wav2vec", SelfsupPretrainFinetune, Md), Wav2vec),
            with_kind(row(b, "Wav2vec", SelfsupPretrainFinetune, Md3p), Wav2vec),
        ],
        "table3" => vec![
            row(b, "Semi-sup", SemisupNst, MdSrc),
            row(b, "Semi-sup", SemisupNst, Md3p),
            with_kind(row(b, "Self + Semi-sup", SelfPlusSemi, Md3p), Wav2vec),
        ],
        "table4" => vec![
            no_filter(with_kind(row(b, "Self + Semi-sup w/o filter", SelfPlusSemi, Md3p), Wav2vec)),
            with_kind(row(b, "Self + Semi-sup w filter", SelfPlusSemi, Md3p), Wav2vec),
        ],
        "table5" => vec![
            with_kind(row(b, "Joint W2V", JointSelfsup, Md3p), Wav2vec),
            with_kind(row(b, "Joint W2V2", JointSelfsup, Md3p), Wav2vec2),
            with_kind(row(b, "Joint W2V + NST", JointPlusNst, Md3p), Wav2vec),
            with_kind(row(b, "Joint W2V2 + NST", JointPlusNst, Md3p), Wav2vec2),
        ],
        "fig2" => {
            let mut rows = vec![
                row(b, "Supervised", Supervised, Md3p),
                with_kind(row(b, "W2V", SelfsupPretrainFinetune, Md3p), Wav2vec),
                with_kind(row(b, "W2V2", SelfsupPretrainFinetune, Md3p), Wav2vec2),
                with_kind(row(b, "Joint W2V", JointSelfsup, Md3p), Wav2vec),
                with_kind(row(b, "Joint W2V2", JointSelfsup, Md3p), Wav2vec2),
            ];
            for r in &mut rows {
                if r.train.eval_every == 0 {
                    r.train.eval_every = (r.train.steps / 10).max(1);
                }
            }
            rows
        }
        "sweep" => SWEEP_FRACTIONS
            .iter()
            .flat_map(|&x| {
                [
                    row(b, "Supervised", Supervised, Sweep(x)),
                    with_kind(row(b, "Wav2vec", SelfsupPretrainFinetune, Sweep(x)), Wav2vec),
                ]
            })
            .collect(),
        "table6" => vec![
            row(b, "Semi-sup", SemisupNst, MdSrc),
            row(b, "Semi-sup", SemisupNst, Md3p),
            row(b, "Semi-sup", SemisupNst, Md),
            with_kind(row(b, "Self + Semi-sup", SelfPlusSemi, Md3p), Wav2vec),
            with_kind(row(b, "Self + Semi-sup", SelfPlusSemi, Md), Wav2vec),
        ],
        other => {
            return Err(config(format!(
                "unknown preset `{other}` (known: {})",
                PRESETS.join(", ")
            )))
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetOutput {
    pub preset: String,
    pub reports: Vec<RunReport>,
}

impl PresetOutput {
    /// One line per run; floats use fixed precision so reruns compare
    /// byte-for-byte.
    pub fn csv(&self) -> String {
        let mut out = String::from(
            "preset,name,algorithm,data_split,selfsup,seed,wer_target,wer_source,steps_to_threshold,total_steps,kept_fraction,pseudo_wer_all,pseudo_wer_kept\n",
        );
        for r in &self.reports {
            let alg = serde_json::to_string(&r.algorithm).unwrap_or_default();
            let ss = serde_json::to_string(&r.spec.selfsup.kind).unwrap_or_default();
            let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
            let pl = r.pseudo_labels.as_ref();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:.6},{:.6},{},{},{},{},{}",
                self.preset,
                r.name,
                alg.trim_matches('"'),
                r.data_split,
                ss.trim_matches('"'),
                r.seed,
                r.wer_target.wer,
                r.wer_source.wer,
                r.steps_to_threshold.map_or(String::new(), |s| s.to_string()),
                r.total_steps,
                opt(pl.map(|p| 1.0 - p.filter.dropped_fraction)),
                opt(pl.map(|p| p.wer_all)),
                opt(pl.map(|p| p.wer_kept)),
            );
        }
        out
    }

    pub fn json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Runs every row of preset `name` for each seed. In `fig2`, each run's
/// `steps_to_threshold` is measured against the supervised baseline's final
/// target WER for the same seed.
pub fn run_preset(name: &str, corpus: &Corpus, base: &ExperimentSpec, seeds: &[u64]) -> Result<PresetOutput> {
    let rows = preset(name, base)?;
    let mut ws = Workspace::new();
    let mut reports = Vec::new();
    for &seed in seeds {
        let mut seed_reports = Vec::new();
        for r in &rows {
            let spec = ExperimentSpec { seed, ..r.clone() };
            info!("preset {name}: running {} on {} (seed {seed})", spec.name, spec.data_split.label());
            seed_reports.push(run_experiment(&spec, corpus, &mut ws)?);
        }
        if name == "fig2" {
            let threshold = seed_reports[0].wer_target.wer;
            for r in &mut seed_reports {
                r.steps_to_threshold = steps_to_reach(&r.curve, threshold);
            }
        }
        reports.extend(seed_reports);
    }
    Ok(PresetOutput {
        preset: name.into(),
        reports,
    })
}
