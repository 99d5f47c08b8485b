//! Synthetic two-domain corpus.
//!
//! Every token owns a fixed random prototype of 3–6 feature frames. An
//! utterance is a token sequence drawn from its domain's prior, rendered as
//! the concatenation of the token prototypes plus Gaussian noise, then
//! stacked/subsampled and tagged with a one-hot domain id. The source domain
//! is short-form with one token prior; the target domain is long-form with a
//! different prior, so a model trained on source data alone meets both a
//! label-distribution shift and a length shift at test time.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::tensor::Tensor;

/// Derives an independent stream seed from `(base, stream, index)`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(base: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream, index))
}

const STREAM_PROTO: u64 = 1;
const STREAM_UTT: u64 = 2;
const STREAM_SPLIT: u64 = 3;
const STREAM_PROBE: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    /// Raw feature dimension per frame (before stacking).
    pub feat_dim: usize,
    /// Size of the one-hot domain id (scaled down from 16).
    pub n_domains: usize,
    /// Inclusive raw-frame length range of source utterances.
    pub source_len_range: (usize, usize),
    /// Inclusive raw-frame length range of target utterances.
    pub target_len_range: (usize, usize),
    /// Inclusive range of prototype lengths, in raw frames per token.
    pub frames_per_token: (usize, usize),
    /// Probability mass each domain puts on its "home" half of the vocabulary.
    pub prior_skew: f64,
    /// Explicit priors; when empty they are derived from `prior_skew`.
    pub source_prior: Vec<f64>,
    pub target_prior: Vec<f64>,
    pub noise_sigma: f64,
    pub n_source: usize,
    pub n_target: usize,
    pub n_eval_source: usize,
    pub n_eval_target: usize,
    /// Fraction of target training utterances that carry human labels in `MD_3p`.
    pub target_label_fraction: f64,
    pub stack: usize,
    pub subsample: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            feat_dim: 16,
            n_domains: 4,
            source_len_range: (20, 40),
            target_len_range: (60, 120),
            frames_per_token: (3, 6),
            prior_skew: 0.9,
            source_prior: Vec::new(),
            target_prior: Vec::new(),
            noise_sigma: 0.5,
            n_source: 400,
            n_target: 200,
            n_eval_source: 60,
            n_eval_target: 60,
            target_label_fraction: 0.03,
            stack: 4,
            subsample: 3,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    /// Width of a model input row: stacked features plus the domain one-hot.
    pub fn input_dim(&self) -> usize {
        self.stack * self.feat_dim + self.n_domains
    }

    pub fn stacked_dim(&self) -> usize {
        self.stack * self.feat_dim
    }

    /// Domain id carried by target-domain utterances; source utterances use
    /// the remaining ids.
    pub fn target_domain(&self) -> usize {
        self.n_domains - 1
    }

    /// The (source, target) token priors.
    pub fn priors(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let v = self.vocab_size;
        if !self.source_prior.is_empty() || !self.target_prior.is_empty() {
            for p in [&self.source_prior, &self.target_prior] {
                if p.len() != v || p.iter().any(|&x| x < 0.0) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(config("explicit priors must be distributions over the vocabulary"));
                }
            }
            return Ok((self.source_prior.clone(), self.target_prior.clone()));
        }
        let half = v / 2;
        let home = |lo: usize, hi: usize| -> Vec<f64> {
            let n_home = hi - lo;
            (0..v)
                .map(|k| {
                    if (lo..hi).contains(&k) {
                        self.prior_skew / n_home as f64
                    } else {
                        (1.0 - self.prior_skew) / (v - n_home) as f64
                    }
                })
                .collect()
        };
        Ok((home(0, half), home(half, v)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(config(format!("vocab_size must be ≥ 4, got {}", self.vocab_size)));
        }
        if self.vocab_size > u16::MAX as usize {
            return Err(config("vocab_size must fit in u16"));
        }
        if self.feat_dim == 0 || self.stack == 0 || self.subsample == 0 {
            return Err(config("feat_dim, stack and subsample must be positive"));
        }
        if self.n_domains < 2 || self.n_domains > u8::MAX as usize {
            return Err(config("n_domains must be in 2..=255"));
        }
        for (name, (lo, hi)) in [
            ("source_len_range", self.source_len_range),
            ("target_len_range", self.target_len_range),
            ("frames_per_token", self.frames_per_token),
        ] {
            if lo == 0 || lo > hi {
                return Err(config(format!("{name} is empty: ({lo}, {hi})")));
            }
        }
        if !(0.0..=1.0).contains(&self.target_label_fraction) {
            return Err(config("target_label_fraction must be in [0, 1]"));
        }
        if self.noise_sigma < 0.0 {
            return Err(config("noise_sigma must be non-negative"));
        }
        let (s, t) = self.priors()?;
        let tv = total_variation(&s, &t);
        if tv < 0.3 {
            return Err(config(format!("domain priors too close: total variation {tv:.3} < 0.3")));
        }
        let mid = |(lo, hi): (usize, usize)| (lo + hi) as f64 / 2.0;
        if mid(self.target_len_range) < 2.0 * mid(self.source_len_range) {
            return Err(config("target mean length must be at least twice the source mean length"));
        }
        Ok(())
    }
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelKind {
    Human,
    Pseudo { confidence: f64 },
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: usize,
    /// `[T' × (stack·F + D)]` model input rows.
    pub features: Tensor,
    /// Token ids. For pseudo-labeled utterances these are the teacher's
    /// hypothesis; generated utterances always carry the ground truth.
    pub tokens: Vec<usize>,
    pub domain: usize,
    pub label: LabelKind,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn confidence(&self) -> Option<f64> {
        match self.label {
            LabelKind::Pseudo { confidence } => Some(confidence),
            _ => None,
        }
    }

    pub fn check(&self, vocab_size: usize, n_domains: usize) -> Result<()> {
        if self.features.ndim() != 2 || self.frames() == 0 {
            return Err(contract(format!("utterance {}: needs at least one frame", self.id)));
        }
        if let Some(&t) = self.tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(contract(format!("utterance {}: token {t} ≥ vocab {vocab_size}", self.id)));
        }
        let width = self.features.shape()[1];
        if width < n_domains {
            return Err(contract(format!("utterance {}: too narrow", self.id)));
        }
        let onehot = &self.features.row(0)[width - n_domains..];
        let nz: Vec<usize> = (0..n_domains).filter(|&d| onehot[d] != 0.0).collect();
        if nz != [self.domain] {
            return Err(contract(format!("utterance {}: domain one-hot is not exactly one-hot", self.id)));
        }
        if let LabelKind::Pseudo { confidence } = self.label {
            if !(0.0..=1.0).contains(&confidence) {
                return Err(contract(format!("utterance {}: confidence outside [0,1]", self.id)));
            }
        }
        Ok(())
    }
}

/// Named utterance-id lists mirroring the source/target data splits.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    /// All training utterances, both domains.
    #[serde(rename = "MD")]
    pub md: Vec<usize>,
    /// Source-domain training utterances.
    #[serde(rename = "MD_src")]
    pub md_src: Vec<usize>,
    /// Target-domain training utterances, in a seeded random order; labeled
    /// fractions are prefixes of this list.
    #[serde(rename = "MF")]
    pub mf: Vec<usize>,
    /// `MD_src` plus the labeled target prefix.
    #[serde(rename = "MD_3p")]
    pub md_3p: Vec<usize>,
    /// Target training utterances outside the labeled prefix.
    #[serde(rename = "MF_unlabeled")]
    pub mf_unlabeled: Vec<usize>,
    #[serde(rename = "eval_MF")]
    pub eval_mf: Vec<usize>,
    #[serde(rename = "eval_SF")]
    pub eval_sf: Vec<usize>,
}

impl SplitManifest {
    /// Number of target utterances labeled at fraction `x`.
    pub fn labeled_target_count(&self, x: f64) -> usize {
        ((x * self.mf.len() as f64).round() as usize).min(self.mf.len())
    }

    /// `MD_src` plus the first `x` fraction of `MF` (labeled), and the
    /// remaining `MF` utterances (unlabeled).
    pub fn with_target_fraction(&self, x: f64) -> (Vec<usize>, Vec<usize>) {
        let k = self.labeled_target_count(x);
        let mut labeled = self.md_src.clone();
        labeled.extend_from_slice(&self.mf[..k]);
        (labeled, self.mf[k..].to_vec())
    }

    pub fn by_name(&self, name: &str) -> Option<&[usize]> {
        Some(match name {
            "MD" => &self.md,
            "MD_src" => &self.md_src,
            "MF" => &self.mf,
            "MD_3p" => &self.md_3p,
            "MF_unlabeled" => &self.mf_unlabeled,
            "eval_MF" => &self.eval_mf,
            "eval_SF" => &self.eval_sf,
            _ => return None,
        })
    }

    pub fn check(&self) -> Result<()> {
        let set = |v: &[usize]| v.iter().copied().collect::<BTreeSet<_>>();
        let (src, mf) = (set(&self.md_src), set(&self.mf));
        if !src.is_disjoint(&mf) {
            return Err(contract("manifest: MD_src and MF overlap"));
        }
        let train = set(&self.md);
        for e in [&self.eval_mf, &self.eval_sf] {
            if !set(e).is_disjoint(&train) {
                return Err(contract("manifest: eval set overlaps training data"));
            }
        }
        let md3p = set(&self.md_3p);
        if !src.is_subset(&md3p) || !md3p.difference(&src).all(|i| mf.contains(i)) {
            return Err(contract("manifest: MD_3p must be MD_src plus target utterances"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub utterances: Vec<Utterance>,
    pub manifest: SplitManifest,
}

impl Corpus {
    pub fn utt(&self, id: usize) -> &Utterance {
        &self.utterances[id]
    }

    pub fn select(&self, ids: &[usize]) -> Vec<&Utterance> {
        ids.iter().map(|&i| &self.utterances[i]).collect()
    }

    pub fn split(&self, name: &str) -> Result<Vec<&Utterance>> {
        let ids = self
            .manifest
            .by_name(name)
            .ok_or_else(|| config(format!("unknown split `{name}`")))?;
        Ok(self.select(ids))
    }
}

/// Stacks `stack` consecutive rows starting every `subsample` rows.
///
/// Output row `i` is the concatenation of input rows
/// `subsample·i .. subsample·i + stack`, zero-padded past the end, and there
/// are `ceil(T / subsample)` output rows.
pub fn stack_frames(features: &Tensor, stack: usize, subsample: usize) -> Result<Tensor> {
    if features.ndim() != 2 {
        return Err(Error::Shape {
            op: "stack_frames",
            shapes: vec![features.shape().to_vec()],
        });
    }
    let (t_len, f) = (features.shape()[0], features.shape()[1]);
    if t_len < 1 {
        return Err(contract("stack_frames: need at least one frame"));
    }
    if stack == 0 || subsample == 0 {
        return Err(contract("stack_frames: stack and subsample must be positive"));
    }
    let out_len = t_len.div_ceil(subsample);
    let mut data = vec![0.0; out_len * stack * f];
    for i in 0..out_len {
        for s in 0..stack {
            let src = subsample * i + s;
            if src < t_len {
                let dst = (i * stack + s) * f;
                data[dst..dst + f].copy_from_slice(features.row(src));
            }
        }
    }
    Tensor::new(vec![out_len, stack * f], data)
}

/// Token prototypes: `prototypes[k]` is `[n_k × F]`.
pub fn prototypes(spec: &CorpusSpec) -> Vec<Tensor> {
    let mut rng = rng_for(spec.seed, STREAM_PROTO, 0);
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..spec.vocab_size)
        .map(|_| {
            let n = rng.gen_range(spec.frames_per_token.0..=spec.frames_per_token.1);
            let data = (0..n * spec.feat_dim).map(|_| normal.sample(&mut rng)).collect();
            Tensor::new(vec![n, spec.feat_dim], data).unwrap()
        })
        .collect()
}

fn sample_categorical(rng: &mut ChaCha8Rng, p: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, &pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return k;
        }
    }
    p.len() - 1
}

/// Renders token ids into model-ready input rows.
pub fn render(
    spec: &CorpusSpec,
    protos: &[Tensor],
    tokens: &[usize],
    domain: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let f = spec.feat_dim;
    let mut raw = Vec::new();
    for &t in tokens {
        raw.extend_from_slice(protos[t].data());
    }
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).unwrap();
        for v in &mut raw {
            *v += noise.sample(rng);
        }
    }
    let t_len = raw.len() / f;
    let stacked = stack_frames(&Tensor::new(vec![t_len, f], raw)?, spec.stack, spec.subsample)?;
    let (rows, w) = (stacked.shape()[0], stacked.shape()[1]);
    let width = w + spec.n_domains;
    let mut data = Vec::with_capacity(rows * width);
    for r in 0..rows {
        data.extend_from_slice(stacked.row(r));
        data.extend((0..spec.n_domains).map(|d| if d == domain { 1.0 } else { 0.0 }));
    }
    Tensor::new(vec![rows, width], data)
}

fn generate_utterance(
    spec: &CorpusSpec,
    protos: &[Tensor],
    prior: &[f64],
    len_range: (usize, usize),
    domain: usize,
    id: usize,
) -> Result<Utterance> {
    let mut rng = rng_for(spec.seed, STREAM_UTT, id as u64);
    let target_len = rng.gen_range(len_range.0..=len_range.1);
    let mut tokens = Vec::new();
    let mut frames = 0;
    while frames < target_len {
        let t = sample_categorical(&mut rng, prior);
        frames += protos[t].shape()[0];
        tokens.push(t);
    }
    let features = render(spec, protos, &tokens, domain, &mut rng)?;
    Ok(Utterance {
        id,
        features,
        tokens,
        domain,
        label: LabelKind::Human,
    })
}

/// Generates the corpus and its split manifest; a pure function of `spec`.
pub fn generate(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let (src_prior, tgt_prior) = spec.priors()?;
    let protos = prototypes(spec);
    let tgt_dom = spec.target_domain();
    let n_src_domains = spec.n_domains - 1;

    #[derive(Clone, Copy)]
    enum Role {
        TrainSrc,
        TrainTgt,
        EvalSrc,
        EvalTgt,
    }
    let roles = std::iter::repeat(Role::TrainSrc)
        .take(spec.n_source)
        .chain(std::iter::repeat(Role::TrainTgt).take(spec.n_target))
        .chain(std::iter::repeat(Role::EvalSrc).take(spec.n_eval_source))
        .chain(std::iter::repeat(Role::EvalTgt).take(spec.n_eval_target));

    let mut utterances = Vec::new();
    let mut manifest = SplitManifest::default();
    for (id, role) in roles.enumerate() {
        let (prior, range, domain) = match role {
            Role::TrainSrc | Role::EvalSrc => (&src_prior, spec.source_len_range, id % n_src_domains),
            Role::TrainTgt | Role::EvalTgt => (&tgt_prior, spec.target_len_range, tgt_dom),
        };
        utterances.push(generate_utterance(spec, &protos, prior, range, domain, id)?);
        match role {
            Role::TrainSrc => manifest.md_src.push(id),
            Role::TrainTgt => manifest.mf.push(id),
            Role::EvalSrc => manifest.eval_sf.push(id),
            Role::EvalTgt => manifest.eval_mf.push(id),
        }
    }
    let mut split_rng = rng_for(spec.seed, STREAM_SPLIT, 0);
    manifest.mf.shuffle(&mut split_rng);
    manifest.md = manifest.md_src.iter().chain(&manifest.mf).copied().collect();
    manifest.md.sort_unstable();
    let (md_3p, unl) = manifest.with_target_fraction(spec.target_label_fraction);
    manifest.md_3p = md_3p;
    manifest.mf_unlabeled = unl;
    manifest.check()?;

    let corpus = Corpus {
        spec: spec.clone(),
        utterances,
        manifest,
    };
    if spec.n_source > 0 && spec.n_target > 0 && spec.n_eval_source > 0 && spec.n_eval_target > 0 {
        let acc = domain_probe_accuracy(&corpus)?;
        if acc <= 0.9 {
            return Err(config(format!(
                "generated domains are not separable: linear probe accuracy {acc:.3} ≤ 0.9"
            )));
        }
    }
    Ok(corpus)
}

/// Probe features: mean stacked acoustic features plus log length. The
/// one-hot domain id is excluded.
fn probe_features(spec: &CorpusSpec, u: &Utterance) -> Vec<f64> {
    let w = spec.stacked_dim();
    let mut m = vec![0.0; w + 2];
    for r in 0..u.frames() {
        for (a, b) in m.iter_mut().zip(&u.features.row(r)[..w]) {
            *a += b;
        }
    }
    for v in &mut m[..w] {
        *v /= u.frames() as f64;
    }
    m[w] = (u.frames() as f64).ln();
    m[w + 1] = 1.0;
    m
}

/// Held-out accuracy of a logistic-regression probe that tells source from
/// target utterances, trained on the training splits and scored on the
/// evaluation splits.
pub fn domain_probe_accuracy(corpus: &Corpus) -> Result<f64> {
    let spec = &corpus.spec;
    let label = |u: &Utterance| if u.domain == spec.target_domain() { 1.0 } else { 0.0 };
    let train: Vec<(Vec<f64>, f64)> = corpus
        .manifest
        .md
        .iter()
        .map(|&i| (probe_features(spec, corpus.utt(i)), label(corpus.utt(i))))
        .collect();
    let dim = train.first().map_or(0, |(x, _)| x.len());
    // Standardize with training statistics.
    let mut mu = vec![0.0; dim];
    let mut sd = vec![0.0; dim];
    for (x, _) in &train {
        for (m, v) in mu.iter_mut().zip(x) {
            *m += v / train.len() as f64;
        }
    }
    for (x, _) in &train {
        for j in 0..dim {
            sd[j] += (x[j] - mu[j]).powi(2) / train.len() as f64;
        }
    }
    let norm = |x: &[f64]| -> Vec<f64> {
        (0..dim)
            .map(|j| if sd[j] > 1e-12 { (x[j] - mu[j]) / sd[j].sqrt() } else { x[j] })
            .collect()
    };
    let train: Vec<(Vec<f64>, f64)> = train.iter().map(|(x, y)| (norm(x), *y)).collect();
    let mut w = vec![0.0; dim];
    let mut rng = rng_for(spec.seed, STREAM_PROBE, 0);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..50 {
        order.shuffle(&mut rng);
        let lr = 0.5 / (1.0 + epoch as f64);
        for &i in &order {
            let (x, y) = &train[i];
            let z: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
            let g = crate::tensor::sigmoid(z) - y;
            for (wj, xj) in w.iter_mut().zip(x) {
                *wj -= lr * g * xj;
            }
        }
    }
    let eval: Vec<usize> = corpus.manifest.eval_sf.iter().chain(&corpus.manifest.eval_mf).copied().collect();
    let correct = eval
        .iter()
        .filter(|&&i| {
            let u = corpus.utt(i);
            let x = norm(&probe_features(spec, u));
            let z: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
            (z > 0.0) == (label(u) == 1.0)
        })
        .count();
    Ok(correct as f64 / eval.len().max(1) as f64)
}

// ------------------------------------------------------------------ files

const MAGIC: &[u8; 4] = b"ADSR";
pub const CORPUS_VERSION: u32 = 1;
pub const CORPUS_FILE: &str = "corpus.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPEC_FILE: &str = "spec.json";

/// Binary corpus records (little-endian):
///
/// ```text
/// magic b"ADSR", version u32, n_records u32, vocab_size u32, n_domains u32
/// n_records × { domain_id u8, T u32, F u32, n_tokens u16, ids u16 × n_tokens, f64 × T·F }
/// ```
pub fn encode_utterances(utts: &[Utterance], vocab_size: usize, n_domains: usize) -> Result<Vec<u8>> {
    let mut w = Vec::new();
    w.write_all(MAGIC)?;
    w.write_all(&CORPUS_VERSION.to_le_bytes())?;
    w.write_all(&(utts.len() as u32).to_le_bytes())?;
    w.write_all(&(vocab_size as u32).to_le_bytes())?;
    w.write_all(&(n_domains as u32).to_le_bytes())?;
    for u in utts {
        let (t, f) = (u.features.shape()[0], u.features.shape()[1]);
        let n_tok = u16::try_from(u.tokens.len()).map_err(|_| contract("utterance has more than 65535 tokens"))?;
        w.push(u.domain as u8);
        w.write_all(&(t as u32).to_le_bytes())?;
        w.write_all(&(f as u32).to_le_bytes())?;
        w.write_all(&n_tok.to_le_bytes())?;
        for &tok in &u.tokens {
            w.write_all(&(tok as u16).to_le_bytes())?;
        }
        for v in u.features.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(w)
}

/// Inverse of [`encode_utterances`]. Returns `(utterances, vocab_size, n_domains)`;
/// any malformed input yields an error and no partial corpus.
pub fn decode_utterances(bytes: &[u8]) -> Result<(Vec<Utterance>, usize, usize)> {
    let mut pos = 0usize;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if bytes.len() - pos < n {
            return Err(Error::Parse(format!("corpus truncated while reading {what}")));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    if take(4, "magic")? != MAGIC {
        return Err(Error::Parse("not a corpus file: bad magic".into()));
    }
    let u32le = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let version = u32le(take(4, "version")?);
    if version != CORPUS_VERSION {
        return Err(Error::Parse(format!(
            "corpus version {version} unsupported (expected {CORPUS_VERSION})"
        )));
    }
    let n = u32le(take(4, "record count")?) as usize;
    let vocab = u32le(take(4, "vocab size")?) as usize;
    let n_domains = u32le(take(4, "domain count")?) as usize;
    let mut utts = Vec::with_capacity(n.min(1 << 16));
    for id in 0..n {
        let domain = take(1, "domain id")?[0] as usize;
        let t = u32le(take(4, "frame count")?) as usize;
        let f = u32le(take(4, "feature width")?) as usize;
        let nt = u16::from_le_bytes(take(2, "token count")?.try_into().unwrap()) as usize;
        let tokens = take(2 * nt, "tokens")?
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let nbytes = t
            .checked_mul(f)
            .and_then(|x| x.checked_mul(8))
            .ok_or_else(|| Error::Parse("feature size overflow".into()))?;
        let data = take(nbytes, "features")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let u = Utterance {
            id,
            features: Tensor::new(vec![t, f], data)?,
            tokens,
            domain,
            label: LabelKind::Human,
        };
        u.check(vocab, n_domains).map_err(|e| Error::Parse(format!("record {id}: {e}")))?;
        utts.push(u);
    }
    if pos != bytes.len() {
        return Err(Error::Parse("trailing bytes after last record".into()));
    }
    Ok((utts, vocab, n_domains))
}

/// Writes `corpus.bin`, `manifest.json` and `spec.json` into `dir`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let bytes = encode_utterances(&corpus.utterances, corpus.spec.vocab_size, corpus.spec.n_domains)?;
    std::fs::write(dir.join(CORPUS_FILE), bytes)?;
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&corpus.manifest)?)?;
    std::fs::write(dir.join(SPEC_FILE), serde_json::to_vec_pretty(&corpus.spec)?)?;
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let spec: CorpusSpec = serde_json::from_slice(&std::fs::read(dir.join(SPEC_FILE))?)?;
    let (utterances, vocab, n_domains) = decode_utterances(&std::fs::read(dir.join(CORPUS_FILE))?)?;
    if vocab != spec.vocab_size || n_domains != spec.n_domains {
        return Err(Error::Parse("corpus header disagrees with spec.json".into()));
    }
    let manifest: SplitManifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest
        .md
        .iter()
        .chain(&manifest.eval_mf)
        .chain(&manifest.eval_sf)
        .any(|&i| i >= utterances.len())
    {
        return Err(Error::Parse("manifest references a missing utterance".into()));
    }
    manifest.check()?;
    Ok(Corpus {
        spec,
        utterances,
        manifest,
    })
}

/// Per-domain token histograms, for inspection and tests.
pub fn token_histogram<'a>(utts: impl IntoIterator<Item = &'a Utterance>, vocab: usize) -> BTreeMap<usize, Vec<usize>> {
    let mut h: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for u in utts {
        let e = h.entry(u.domain).or_insert_with(|| vec![0; vocab]);
        for &t in &u.tokens {
            e[t] += 1;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusSpec {
        CorpusSpec {
            n_source: 100,
            n_target: 100,
            n_eval_source: 20,
            n_eval_target: 20,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn three_percent_of_hundred_is_three() {
        let c = generate(&small()).unwrap();
        let target_part: Vec<_> = c.manifest.md_3p.iter().filter(|i| !c.manifest.md_src.contains(i)).collect();
        assert_eq!(target_part.len(), 3);
        assert_eq!(c.manifest.mf_unlabeled.len(), 97);
    }

    #[test]
    fn stack_shapes() {
        let x = Tensor::new(vec![12, 2], (0..24).map(f64::from).collect()).unwrap();
        let y = stack_frames(&x, 4, 3).unwrap();
        assert_eq!(y.shape(), &[4, 8]);
        // last row: input rows 9,10,11 then zero pad
        assert_eq!(y.row(3), &[18.0, 19.0, 20.0, 21.0, 22.0, 23.0, 0.0, 0.0]);
        let c = stack_frames(&Tensor::full(&[9, 3], 2.5), 4, 3).unwrap();
        // rows fully inside the input are constant
        assert!(c.row(0).iter().chain(c.row(1)).all(|&v| v == 2.5));
    }

    #[test]
    fn stack_rejects_empty() {
        assert!(stack_frames(&Tensor::zeros(&[0, 2]), 4, 3).is_err());
    }

    #[test]
    fn noiseless_same_tokens_same_features() {
        let spec = CorpusSpec {
            noise_sigma: 0.0,
            ..small()
        };
        let protos = prototypes(&spec);
        let toks = [3, 1, 4, 1, 5];
        let a = render(&spec, &protos, &toks, 0, &mut rng_for(1, 0, 0)).unwrap();
        let b = render(&spec, &protos, &toks, 0, &mut rng_for(2, 0, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_errors() {
        assert!(generate(&CorpusSpec {
            vocab_size: 3,
            ..small()
        })
        .is_err());
        assert!(generate(&CorpusSpec {
            source_len_range: (5, 2),
            ..small()
        })
        .is_err());
        assert!(generate(&CorpusSpec {
            prior_skew: 0.6,
            ..small()
        })
        .is_err());
    }

    #[test]
    fn utterances_satisfy_invariants() {
        let c = generate(&small()).unwrap();
        for u in &c.utterances {
            u.check(c.spec.vocab_size, c.spec.n_domains).unwrap();
            assert_eq!(u.features.shape()[1], c.spec.input_dim());
        }
        let mean = |ids: &[usize]| ids.iter().map(|&i| c.utt(i).frames() as f64).sum::<f64>() / ids.len() as f64;
        assert!(mean(&c.manifest.mf) >= 2.0 * mean(&c.manifest.md_src));
    }

    #[test]
    fn manifest_is_pure_function_of_spec() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.manifest, b.manifest);
        let c = generate(&CorpusSpec { seed: 9, ..small() }).unwrap();
        assert_ne!(a.manifest.mf, c.manifest.mf);
    }
}
