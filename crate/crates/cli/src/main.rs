//! `adapt-asr`: generate the synthetic corpus, train, pseudo-label, evaluate
//! and run experiment presets.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use adapt_asr::confidence::{filter_utterances, write_manifest};
use adapt_asr::model::AsrModel;
use adapt_asr::pipeline::{
    eval_wer, preset_names, pretrain_selfsup, pseudo_label, run_experiment_trained, run_preset, train_teacher,
    ExperimentSpec, PresetOutput, Workspace,
};
use adapt_asr::synthgen::{generate, read_corpus, write_corpus, Corpus, CorpusSpec};
use adapt_asr::transducer::DecodeConfig;

#[derive(Parser)]
#[command(name = "adapt-asr", version, about = "Self- and semi-supervised adaptation of a streaming transducer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and its split manifest.
    GenData {
        /// Corpus spec as JSON; missing fields take their defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the spec.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Self-supervised encoder pre-training; writes `pretrain.ckpt`.
    Pretrain(RunArgs),
    /// Run the recipe named by the config's `algorithm`; writes the report and
    /// the trained student checkpoint.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Pre-trained encoder from `pretrain`, for recipes that fine-tune.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Train the teacher and write its filtered pseudo-labels.
    PseudoLabel(RunArgs),
    /// WER of a checkpoint on one split, printed as JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "eval_MF")]
        split: String,
        #[arg(long, default_value_t = 1)]
        beam: usize,
    },
    /// Run every row of a preset grid; writes `<preset>.json` and `<preset>.csv`.
    Experiment {
        #[arg(long)]
        preset: String,
        #[command(flatten)]
        run: RunArgs,
        /// Number of consecutive seeds starting at `--seed`.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Experiment spec as JSON; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn load(&self) -> Result<(ExperimentSpec, Corpus)> {
        let mut spec: ExperimentSpec = match &self.config {
            Some(p) => serde_json::from_str(&read_text(p)?).with_context(|| format!("parsing {}", p.display()))?,
            None => ExperimentSpec::default(),
        };
        if let Some(s) = self.seed {
            spec.seed = s;
        }
        spec.validate()?;
        let corpus = read_corpus(&self.corpus).with_context(|| format!("reading corpus {}", self.corpus.display()))?;
        fs::create_dir_all(&self.out)?;
        Ok((spec, corpus))
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_text(path: &Path, text: String) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_preset(out: &Path, output: &PresetOutput) -> Result<()> {
    write_text(&out.join(format!("{}.json", output.preset)), output.json()?)?;
    write_text(&out.join(format!("{}.csv", output.preset)), output.csv())?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData { spec, out, seed } => {
            let mut cs: CorpusSpec = match spec {
                Some(p) => serde_json::from_str(&read_text(&p)?).with_context(|| format!("parsing {}", p.display()))?,
                None => CorpusSpec::default(),
            };
            if let Some(s) = seed {
                cs.seed = s;
            }
            let corpus = generate(&cs)?;
            write_corpus(&out, &corpus)?;
            eprintln!("wrote {} utterances to {}", corpus.utterances.len(), out.display());
        }
        Command::Pretrain(args) => {
            let (spec, corpus) = args.load()?;
            let (model, losses) = pretrain_selfsup(&spec, &corpus)?;
            model.save(&args.out.join("pretrain.ckpt"))?;
            write_text(&args.out.join("pretrain_losses.json"), serde_json::to_string_pretty(&losses)?)?;
        }
        Command::Train { run, pretrained } => {
            let (spec, corpus) = run.load()?;
            let mut ws = Workspace::new();
            if let Some(p) = &pretrained {
                if !spec.algorithm.uses_pretraining() {
                    bail!("--pretrained given but {:?} does not fine-tune a pre-trained encoder", spec.algorithm);
                }
                ws.load_pretrained(&spec, p)?;
            }
            let trained = run_experiment_trained(&spec, &corpus, &mut ws)?;
            trained.model.save(&run.out.join("student.ckpt"))?;
            let output = PresetOutput {
                preset: "train".into(),
                reports: vec![trained.report],
            };
            write_preset(&run.out, &output)?;
        }
        Command::PseudoLabel(args) => {
            let (spec, corpus) = args.load()?;
            let (_, unlabeled) = spec.data_split.partition(&corpus.manifest);
            if unlabeled.is_empty() {
                bail!("split {} leaves no unlabeled target utterances", spec.data_split.label());
            }
            let (teacher, losses) = train_teacher(&spec, &corpus)?;
            teacher.save(&args.out.join("teacher.ckpt"))?;
            let mut labels = pseudo_label(&teacher, &corpus, &unlabeled, &spec.pseudo_decode)?;
            let stats = filter_utterances(&mut labels, spec.confidence_threshold);
            write_manifest(&args.out.join("pseudo_labels.jsonl"), &labels)?;
            write_text(&args.out.join("teacher_losses.json"), serde_json::to_string_pretty(&losses)?)?;
            write_text(&args.out.join("filter.json"), serde_json::to_string_pretty(&stats)?)?;
            if stats.kept == 0 {
                return Err(adapt_asr::Error::EmptyKeptSet {
                    threshold: spec.confidence_threshold,
                }
                .into());
            }
        }
        Command::Eval {
            ckpt,
            corpus,
            split,
            beam,
        } => {
            let model = AsrModel::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let corpus = read_corpus(&corpus)?;
            let decode = DecodeConfig {
                beam_size: beam,
                ..DecodeConfig::default()
            };
            let wer = eval_wer(&model, &corpus.split(&split)?, &decode)?;
            println!("{}", serde_json::to_string_pretty(&wer)?);
        }
        Command::Experiment { preset, run, seeds } => {
            if !preset_names().contains(&preset.as_str()) {
                bail!("unknown preset `{preset}` (known: {})", preset_names().join(", "));
            }
            let (spec, corpus) = run.load()?;
            let seed_list: Vec<u64> = (spec.seed..spec.seed + seeds.max(1)).collect();
            let output = run_preset(&preset, &corpus, &spec, &seed_list)?;
            write_preset(&run.out, &output)?;
            print!("{}", output.csv());
        }
    }
    Ok(())
}
