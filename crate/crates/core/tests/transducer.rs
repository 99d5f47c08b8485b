mod common;

use adapt_asr::tensor::{ParamInit, ParamStore, Session, Tensor};
use adapt_asr::transducer::{
    beam_decode, greedy_decode, init_params, joint_logits, prediction_var, rnnt_loss, rnnt_loss_value,
    DecodeConfig, Decoder, FrameScorer, JointConfig, LatticePosting, PredictionNetConfig, Scorer,
    TransducerConfig,
};
use adapt_asr::Result;
use common::{brute_force_rnnt, close, gradcheck, random_tensor, rng};
use rand::seq::SliceRandom;
use rand::Rng;

fn random_targets(r: &mut impl Rng, u: usize, v: usize) -> Vec<usize> {
    (0..u).map(|_| r.gen_range(0..v)).collect()
}

#[test]
fn loss_matches_path_enumeration() {
    let mut r = rng(1);
    let mut checked = 0;
    for t_len in 1..=8 {
        for u in 0..=(8 - t_len) {
            for _ in 0..100 {
                let v = r.gen_range(1..=4);
                let logits = random_tensor(&mut r, &[t_len, u + 1, v + 1], 3.0);
                let targets = random_targets(&mut r, u, v);
                let got = rnnt_loss_value(&logits, &targets).unwrap();
                let want = brute_force_rnnt(&logits, &targets);
                assert!(
                    (got - want).abs() <= 1e-9 * want.abs().max(1.0),
                    "T'={t_len} U={u}: {got} vs {want}"
                );
                checked += 1;
            }
        }
    }
    assert_eq!(checked, 100 * 36);
}

#[test]
fn two_frame_one_label_uniform() {
    let logits = Tensor::zeros(&[2, 2, 3]);
    let want = -(2.0 * (1.0f64 / 3.0).powi(3)).ln();
    assert!((rnnt_loss_value(&logits, &[0]).unwrap() - want).abs() < 1e-12);
    assert!((brute_force_rnnt(&logits, &[0]) - want).abs() < 1e-12);
    assert!((want - 2.6027).abs() < 1e-4);
}

#[test]
fn forward_and_backward_likelihoods_agree() {
    let mut r = rng(2);
    for _ in 0..200 {
        let t_len = r.gen_range(1..10);
        let u = r.gen_range(0..8);
        let v = r.gen_range(1..6);
        let logits = random_tensor(&mut r, &[t_len, u + 1, v + 1], 10.0);
        let lat = LatticePosting::compute(&logits, &random_targets(&mut r, u, v)).unwrap();
        assert_eq!(lat.alpha[0], 0.0);
        assert!((lat.log_likelihood() - lat.log_likelihood_beta()).abs() < 1e-9);
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut r = rng(3);
    for _ in 0..20 {
        let t_len = r.gen_range(1..5);
        let u = r.gen_range(0..4);
        let v = r.gen_range(1..4);
        let logits = random_tensor(&mut r, &[t_len, u + 1, v + 1], 2.0);
        let targets = random_targets(&mut r, u, v);
        let store = ParamStore::new();
        gradcheck(&[logits], |tape, xs| {
            let mut s = Session::inference(&store);
            std::mem::swap(&mut *s, tape);
            let out = rnnt_loss(&mut s, xs[0], &targets).unwrap();
            std::mem::swap(&mut *s, tape);
            out
        })
        .unwrap();
    }
}

#[test]
fn loss_is_invariant_to_vocabulary_relabeling() {
    let mut r = rng(4);
    for _ in 0..100 {
        let (t_len, u, v) = (r.gen_range(1..6), r.gen_range(0..5), r.gen_range(2..6));
        let logits = random_tensor(&mut r, &[t_len, u + 1, v + 1], 3.0);
        let targets = random_targets(&mut r, u, v);
        let mut perm: Vec<usize> = (0..v).collect();
        perm.shuffle(&mut r);
        let mut relabeled = logits.clone();
        for row in 0..logits.rows() {
            for k in 0..v {
                relabeled.row_mut(row)[perm[k]] = logits.row(row)[k];
            }
        }
        let mapped: Vec<usize> = targets.iter().map(|&k| perm[k]).collect();
        let a = rnnt_loss_value(&logits, &targets).unwrap();
        let b = rnnt_loss_value(&relabeled, &mapped).unwrap();
        assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
    }
}

#[test]
fn labels_without_frames_are_a_contract_error() {
    assert!(rnnt_loss_value(&Tensor::zeros(&[0, 2, 3]), &[0]).is_err());
}

fn tiny_config(v: usize) -> TransducerConfig {
    TransducerConfig {
        prediction: PredictionNetConfig {
            n_layers: 2,
            embed_dim: 4,
            hidden: 6,
            proj: 5,
        },
        joint: JointConfig {
            joint_dim: 5,
            vocab_size: v,
            ..JointConfig::default()
        },
        enc_dim: 4,
    }
}

/// Random tiny transducer; `sharpness` scales the output layer so decoding
/// sees peaked as well as flat distributions.
fn tiny_model(cfg: &TransducerConfig, seed: u64, sharpness: f64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    init_params(&mut ParamInit { store: &mut store, rng: &mut r }, cfg);
    for name in ["joint.out.w", "joint.out.b"] {
        let t = store.get_mut(name).unwrap();
        for (x, n) in t.data_mut().iter_mut().zip(0..) {
            *x = *x * sharpness + if name.ends_with(".b") { 0.3 * f64::from(n % 3) } else { 0.0 };
        }
    }
    store
}

#[test]
fn joint_logits_shape_and_gradients() {
    let cfg = tiny_config(3);
    let store = tiny_model(&cfg, 5, 1.0);
    let mut s = Session::inference(&store);
    let enc = s.constant(Tensor::zeros(&[1, 4])).unwrap();
    let pred = prediction_var(&mut s, &cfg, &[]).unwrap();
    let z = joint_logits(&mut s, enc, pred).unwrap();
    assert_eq!(s.shape(z), &[1, 1, 4]);

    let mut r = rng(6);
    let enc = random_tensor(&mut r, &[3, 4], 1.0);
    let pred = random_tensor(&mut r, &[2, 5], 1.0);
    gradcheck(&[enc, pred], |tape, xs| {
        let mut s = Session::inference(&store);
        std::mem::swap(&mut *s, tape);
        let z = joint_logits(&mut s, xs[0], xs[1]).unwrap();
        std::mem::swap(&mut *s, tape);
        common::weighted_sum(tape, z, 7)
    })
    .unwrap();
}

#[test]
fn stepwise_decoder_matches_lattice() {
    let cfg = tiny_config(4);
    let store = tiny_model(&cfg, 8, 1.0);
    let mut r = rng(9);
    let enc = random_tensor(&mut r, &[3, 4], 1.0);
    let targets = [2, 0, 3];
    let mut s = Session::inference(&store);
    let e = s.constant(enc.clone()).unwrap();
    let p = prediction_var(&mut s, &cfg, &targets).unwrap();
    let z = joint_logits(&mut s, e, p).unwrap();
    let z = s.log_softmax_lastdim(z).unwrap();
    let lattice = s.value(z).clone();

    let dec = Decoder::new(&store, &cfg);
    let proj = dec.project_encodings(&enc).unwrap();
    let mut state = dec.start().unwrap();
    for u in 0..=targets.len() {
        for t in 0..3 {
            let (lp, _) = dec.joint(proj.row(t), &state).unwrap();
            let want = lattice.row(t * (targets.len() + 1) + u);
            for (a, b) in lp.iter().zip(want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        if u < targets.len() {
            state = dec.step(&state, targets[u]).unwrap();
        }
    }
}

/// Log-probabilities chosen by a closure of `(frame, label history)`.
struct Scripted<F> {
    frames: usize,
    vocab: usize,
    f: F,
}

impl<F: Fn(usize, &[usize]) -> Vec<f64>> Scorer for Scripted<F> {
    type State = Vec<usize>;

    fn n_frames(&self) -> usize {
        self.frames
    }

    fn blank(&self) -> usize {
        self.vocab
    }

    fn start(&self) -> Result<Vec<usize>> {
        Ok(Vec::new())
    }

    fn step(&self, state: &Vec<usize>, token: usize) -> Result<Vec<usize>> {
        let mut s = state.clone();
        s.push(token);
        Ok(s)
    }

    fn joint(&self, t: usize, state: &Vec<usize>) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut lp = (self.f)(t, state);
        let lse = adapt_asr::tensor::log_sum_exp(&lp);
        lp.iter_mut().for_each(|x| *x -= lse);
        Ok((lp, Vec::new()))
    }
}

fn peaked(vocab: usize, winner: usize) -> Vec<f64> {
    (0..=vocab).map(|k| if k == winner { 10.0 } else { 0.0 }).collect()
}

#[test]
fn greedy_on_blank_everywhere_is_empty() {
    let s = Scripted { frames: 5, vocab: 3, f: |_, _: &[usize]| peaked(3, 3) };
    assert!(greedy_decode(&s, 4, false).unwrap().tokens.is_empty());
    let cfg = DecodeConfig { beam_size: 4, ..Default::default() };
    assert!(beam_decode(&s, &cfg, false).unwrap()[0].tokens.is_empty());
}

#[test]
fn greedy_emits_one_token_per_frame() {
    // Token 1 until the frame has one emission, then blank.
    let s = Scripted {
        frames: 3,
        vocab: 3,
        f: |t, h: &[usize]| peaked(3, if h.len() <= t { 1 } else { 3 }),
    };
    assert_eq!(greedy_decode(&s, 4, false).unwrap().tokens, vec![1, 1, 1]);
}

#[test]
fn greedy_forces_blank_at_symbol_cap() {
    let s = Scripted { frames: 2, vocab: 2, f: |_, _: &[usize]| peaked(2, 0) };
    let hyp = greedy_decode(&s, 3, false).unwrap();
    assert_eq!(hyp.tokens, vec![0; 6]);
}

fn random_model_scorer_check(seed: u64, v: usize, frames: usize, check: impl Fn(&FrameScorer)) {
    let cfg = tiny_config(v);
    let sharpness = 1.0 + (seed % 4) as f64;
    let store = tiny_model(&cfg, seed, sharpness);
    let dec = Decoder::new(&store, &cfg);
    let enc = random_tensor(&mut rng(seed + 1000), &[frames, 4], 2.0);
    let proj = dec.project_encodings(&enc).unwrap();
    check(&FrameScorer { decoder: &dec, enc_proj: &proj });
}

#[test]
fn beam_of_one_is_greedy() {
    for seed in 0..20 {
        random_model_scorer_check(seed, 5, 6, |s| {
            let g = greedy_decode(s, 4, true).unwrap();
            let b = beam_decode(s, &DecodeConfig { beam_size: 1, max_symbols_per_frame: 4 }, true).unwrap();
            assert_eq!(b.len(), 1);
            assert_eq!(b[0].tokens, g.tokens);
            assert!((b[0].log_prob - g.log_prob).abs() < 1e-12);
            assert_eq!(b[0].emissions, g.emissions);
        });
    }
}

#[test]
fn nbest_is_sorted_and_beats_greedy() {
    for seed in 0..20 {
        random_model_scorer_check(seed, 4, 5, |s| {
            let g = greedy_decode(s, 4, false).unwrap();
            let nbest = beam_decode(s, &DecodeConfig::default(), false).unwrap();
            assert!(!nbest.is_empty() && nbest.len() <= 4);
            for w in nbest.windows(2) {
                assert!(w[0].log_prob >= w[1].log_prob);
            }
            assert!(g.log_prob <= nbest[0].log_prob + 1e-12, "seed {seed}");
        });
    }
}

/// Best single alignment path over every blank/label sequence with at most
/// `cap` labels per frame, by depth-first enumeration.
fn best_path<S: Scorer>(s: &S, cap: usize) -> (f64, Vec<usize>) {
    fn go<S: Scorer>(s: &S, cap: usize, t: usize, n: usize, st: &S::State, tokens: &mut Vec<usize>, score: f64, best: &mut (f64, Vec<usize>)) {
        if t == s.n_frames() {
            if score > best.0 {
                *best = (score, tokens.clone());
            }
            return;
        }
        let (lp, _) = s.joint(t, st).unwrap();
        go(s, cap, t + 1, 0, st, tokens, score + lp[s.blank()], best);
        if n < cap {
            for k in 0..s.blank() {
                let next = s.step(st, k).unwrap();
                tokens.push(k);
                go(s, cap, t, n + 1, &next, tokens, score + lp[k], best);
                tokens.pop();
            }
        }
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    go(s, cap, 0, 0, &s.start().unwrap(), &mut Vec::new(), 0.0, &mut best);
    best
}

#[test]
fn wide_beam_finds_the_best_path() {
    // V = 3 labels over 3 frames; two labels per frame bounds hypotheses
    // at 6 tokens and still admits every sequence of length ≤ 4 that fits.
    for seed in 0..100 {
        random_model_scorer_check(seed, 3, 3, |s| {
            let (score, tokens) = best_path(s, 2);
            let cfg = DecodeConfig { beam_size: 16, max_symbols_per_frame: 2 };
            let top = &beam_decode(s, &cfg, false).unwrap()[0];
            assert_eq!(top.tokens, tokens, "seed {seed}: beam {} oracle {score}", top.log_prob);
            assert!(close(top.log_prob, score, 1e-12, 1e-12));
        });
    }
}

#[test]
fn zero_beam_is_rejected() {
    let s = Scripted { frames: 1, vocab: 1, f: |_, _: &[usize]| vec![0.0, 0.0] };
    assert!(beam_decode(&s, &DecodeConfig { beam_size: 0, max_symbols_per_frame: 1 }, false).is_err());
}
