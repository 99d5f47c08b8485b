mod common;

use adapt_asr::synthgen::{
    decode_utterances, encode_utterances, generate, read_corpus, stack_frames, token_histogram, total_variation,
    write_corpus, CorpusSpec, CORPUS_FILE,
};
use adapt_asr::tensor::Tensor;
use common::{random_tensor, rng};
use proptest::prelude::*;
use rand::Rng;

fn small() -> CorpusSpec {
    CorpusSpec {
        n_source: 60,
        n_target: 40,
        n_eval_source: 20,
        n_eval_target: 20,
        ..CorpusSpec::default()
    }
}

/// Row `i` of the output, built by indexing the input by hand.
fn stack_oracle(x: &Tensor, stack: usize, sub: usize) -> Vec<Vec<f64>> {
    let (t, f) = (x.shape()[0], x.shape()[1]);
    (0..(t + sub - 1) / sub)
        .map(|i| {
            let mut row = Vec::new();
            for s in 0..stack {
                let src = i * sub + s;
                for c in 0..f {
                    row.push(if src < t { x.data()[src * f + c] } else { 0.0 });
                }
            }
            row
        })
        .collect()
}

#[test]
fn stacking_examples() {
    let x = random_tensor(&mut rng(1), &[12, 2], 1.0);
    let y = stack_frames(&x, 4, 3).unwrap();
    assert_eq!(y.shape(), &[4, 8]);
    let c = stack_frames(&Tensor::full(&[9, 3], 0.25), 2, 3).unwrap();
    assert!((0..c.rows()).all(|r| c.row(r) == c.row(0)));
    assert!(stack_frames(&Tensor::zeros(&[0, 3]), 4, 3).is_err());
}

proptest! {
    #[test]
    fn stacking_matches_index_oracle(t in 1usize..20, f in 1usize..4, stack in 1usize..5, sub in 1usize..4, seed in 0u64..1000) {
        let x = random_tensor(&mut rng(seed), &[t, f], 1.0);
        let y = stack_frames(&x, stack, sub).unwrap();
        let want = stack_oracle(&x, stack, sub);
        prop_assert_eq!(y.rows(), want.len());
        for (i, row) in want.iter().enumerate() {
            prop_assert_eq!(y.row(i), row.as_slice());
        }
    }
}

#[test]
fn generated_priors_are_far_apart() {
    let spec = CorpusSpec::default();
    let (src, tgt) = spec.priors().unwrap();
    assert!(total_variation(&src, &tgt) >= 0.3);
    // Empirical histograms over 10k draws per domain.
    let spec = CorpusSpec {
        n_source: 1800,
        n_target: 700,
        n_eval_source: 10,
        n_eval_target: 10,
        ..CorpusSpec::default()
    };
    let c = generate(&spec).unwrap();
    let train = c.select(&c.manifest.md);
    let hist = token_histogram(train.iter().copied(), spec.vocab_size);
    let tgt_dom = spec.target_domain();
    let mut src_counts = vec![0usize; spec.vocab_size];
    for (d, h) in &hist {
        if *d != tgt_dom {
            src_counts.iter_mut().zip(h).for_each(|(a, b)| *a += b);
        }
    }
    let norm = |h: &[usize]| {
        let n: usize = h.iter().sum();
        assert!(n >= 10_000, "only {n} tokens");
        h.iter().map(|&x| x as f64 / n as f64).collect::<Vec<_>>()
    };
    let tv = total_variation(&norm(&src_counts), &norm(&hist[&tgt_dom]));
    assert!(tv >= 0.3, "empirical total variation {tv}");
}

#[test]
fn utterances_satisfy_invariants() {
    let spec = small();
    let c = generate(&spec).unwrap();
    let mean_len = |ids: &[usize]| ids.iter().map(|&i| c.utt(i).frames()).sum::<usize>() as f64 / ids.len() as f64;
    assert!(mean_len(&c.manifest.mf) >= 2.0 * mean_len(&c.manifest.md_src));
    for u in &c.utterances {
        u.check(spec.vocab_size, spec.n_domains).unwrap();
        assert_eq!(u.features.shape()[1], spec.input_dim());
        assert!(u.confidence().is_none());
    }
    c.manifest.check().unwrap();
}

#[test]
fn noiseless_repeats_render_identically() {
    let spec = CorpusSpec {
        noise_sigma: 0.0,
        source_len_range: (4, 4),
        target_len_range: (8, 8),
        frames_per_token: (4, 4),
        vocab_size: 4,
        prior_skew: 1.0,
        ..small()
    };
    let c = generate(&spec).unwrap();
    let mut seen = std::collections::BTreeMap::new();
    let mut repeats = 0;
    for u in &c.utterances {
        if let Some(f) = seen.insert((u.tokens.clone(), u.domain), u.features.clone()) {
            assert_eq!(f, u.features);
            repeats += 1;
        }
    }
    assert!(repeats > 0);
}

#[test]
fn generation_is_a_pure_function_of_the_spec() {
    let a = generate(&small()).unwrap();
    let b = generate(&small()).unwrap();
    assert_eq!(a, b);
    let other = generate(&CorpusSpec { seed: 1, ..small() }).unwrap();
    assert_ne!(a.manifest.mf, other.manifest.mf);
}

#[test]
fn config_errors() {
    for bad in [
        CorpusSpec { vocab_size: 3, ..small() },
        CorpusSpec {
            source_len_range: (5, 4),
            ..small()
        },
        CorpusSpec {
            prior_skew: 0.6,
            ..small()
        },
        CorpusSpec {
            target_len_range: (20, 40),
            ..small()
        },
    ] {
        assert!(generate(&bad).is_err());
    }
}

#[test]
fn corpus_round_trip() {
    let c = generate(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), &c).unwrap();
    let back = read_corpus(dir.path()).unwrap();
    assert_eq!(back.manifest, c.manifest);
    assert_eq!(back.spec, c.spec);
    for (a, b) in c.utterances.iter().zip(&back.utterances) {
        assert_eq!(a.tokens, b.tokens);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.features), bits(&b.features));
    }
}

#[test]
fn empty_corpus_is_a_valid_file() {
    let bytes = encode_utterances(&[], 32, 4).unwrap();
    let (utts, vocab, domains) = decode_utterances(&bytes).unwrap();
    assert!(utts.is_empty());
    assert_eq!((vocab, domains), (32, 4));
}

#[test]
fn corrupted_files_are_rejected() {
    let c = generate(&small()).unwrap();
    let bytes = encode_utterances(&c.utterances[..5], 32, 4).unwrap();
    let mut r = rng(3);
    for _ in 0..50 {
        let mut b = bytes.clone();
        let k = r.gen_range(0..4);
        b[k] ^= 1 << r.gen_range(0..8);
        assert!(decode_utterances(&b).is_err());
    }
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(decode_utterances(&bytes[..cut]).is_err(), "cut {cut}");
    }
    let mut version = bytes.clone();
    version[4] = 99;
    assert!(decode_utterances(&version).is_err());

    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), &c).unwrap();
    let path = dir.path().join(CORPUS_FILE);
    let mut raw = std::fs::read(&path).unwrap();
    raw[0] = b'X';
    std::fs::write(&path, raw).unwrap();
    assert!(read_corpus(dir.path()).is_err());
}
