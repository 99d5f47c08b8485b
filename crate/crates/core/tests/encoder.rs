mod common;

use adapt_asr::encoder::{encode_var, init_params, self_attention, EncoderConfig};
use adapt_asr::model::{AsrModel, ModelConfig};
use adapt_asr::synthgen::CorpusSpec;
use adapt_asr::tensor::{ParamInit, ParamStore, Session, Tensor};
use common::{param_gradcheck, random_tensor, rng, weighted_sum};
use rand::Rng;

const IN: usize = 6;

fn cfg() -> EncoderConfig {
    EncoderConfig {
        n_blocks: 2,
        model_dim: 8,
        n_heads: 2,
        left_context: 3,
        right_context: 0,
        conv_kernel: 3,
        causal_conv: true,
        ff_expansion: 2,
    }
}

/// Glorot weights plus random biases and norm parameters, so no term of the
/// forward pass is trivially zero.
fn store(c: &EncoderConfig, input_dim: usize, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    init_params(&mut ParamInit { store: &mut store, rng: &mut r }, c, input_dim);
    let names: Vec<String> = store.names().map(String::from).collect();
    for n in names {
        if n.ends_with(".b") || n.ends_with(".g") || n.ends_with("dw_b") {
            for v in store.get_mut(&n).unwrap().data_mut() {
                *v += r.gen_range(-0.3..0.3);
            }
        }
    }
    store
}

fn encode(store: &ParamStore, c: &EncoderConfig, x: &Tensor) -> Tensor {
    let mut s = Session::inference(store);
    let xv = s.constant(x.clone()).unwrap();
    let out = encode_var(&mut s, xv, c).unwrap();
    s.value(out.encodings).clone()
}

fn rows_identical(a: &Tensor, b: &Tensor, upto: usize) -> bool {
    (0..=upto).all(|r| a.row(r).iter().zip(b.row(r)).all(|(x, y)| x.to_bits() == y.to_bits()))
}

fn perturb_from(x: &Tensor, from: usize, seed: u64) -> Tensor {
    let mut y = x.clone();
    let mut r = rng(seed);
    for row in from..x.rows() {
        for v in y.row_mut(row) {
            *v += r.gen_range(-5.0..5.0);
        }
    }
    y
}

#[test]
fn student_is_bit_exactly_causal() {
    let c = cfg();
    assert!(c.is_causal());
    for seed in 0..3 {
        let store = store(&c, IN, seed);
        let x = random_tensor(&mut rng(seed + 100), &[14, IN], 1.0);
        let base = encode(&store, &c, &x);
        for t in 0..13 {
            let out = encode(&store, &c, &perturb_from(&x, t + 1, seed * 31 + t as u64));
            assert!(rows_identical(&base, &out, t), "seed {seed}: row ≤ {t} moved");
        }
    }
}

#[test]
fn streaming_prefix_reproduces_full_output() {
    let c = cfg();
    let store = store(&c, IN, 5);
    let x = random_tensor(&mut rng(6), &[12, IN], 1.0);
    let full = encode(&store, &c, &x);
    for t in 1..=12 {
        let prefix = encode(&store, &c, &x.slice_rows(0, t));
        assert!(rows_identical(&full, &prefix, t - 1), "prefix {t}");
    }
}

#[test]
fn teacher_respects_its_lookahead_exactly() {
    for (right, kernel) in [(1, 3), (2, 1), (0, 5), (3, 5)] {
        let c = EncoderConfig {
            conv_kernel: kernel,
            ..cfg().with_lookahead(right)
        };
        let reach = c.total_lookahead();
        assert_eq!(reach, c.n_blocks * (right + if c.causal_conv { 0 } else { (kernel - 1) / 2 }));
        let store = store(&c, IN, 9);
        let t_len = 20;
        let x = random_tensor(&mut rng(10), &[t_len, IN], 1.0);
        let base = encode(&store, &c, &x);
        for t in 0..t_len {
            // Frames beyond the window never matter.
            if t + reach + 1 < t_len {
                let out = encode(&store, &c, &perturb_from(&x, t + reach + 1, t as u64));
                assert!(rows_identical(&base, &out, t), "r={right} k={kernel}: row {t} saw past {reach}");
            }
            // The last frame inside the window does.
            if reach > 0 && t + reach < t_len {
                let mut y = x.clone();
                y.row_mut(t + reach).iter_mut().for_each(|v| *v += 1.0);
                let out = encode(&store, &c, &y);
                assert!(base.row(t) != out.row(t), "r={right} k={kernel}: row {t} ignores frame {}", t + reach);
            }
        }
    }
}

#[test]
fn single_frame_window_attends_to_itself() {
    let c = EncoderConfig {
        n_heads: 1,
        left_context: 0,
        ..cfg()
    };
    let d = c.model_dim;
    let mut store = ParamStore::new();
    let mut r = rng(11);
    init_params(&mut ParamInit { store: &mut store, rng: &mut r }, &c, IN);
    let mut eye = Tensor::zeros(&[d, d]);
    for i in 0..d {
        eye.data_mut()[i * d + i] = 1.0;
    }
    for p in ["v", "o"] {
        store.insert(format!("enc.block0.att.{p}.w"), eye.clone());
        store.insert(format!("enc.block0.att.{p}.b"), Tensor::zeros(&[d]));
    }
    let x = random_tensor(&mut r, &[5, d], 1.0);
    let mut s = Session::inference(&store);
    let xv = s.constant(x.clone()).unwrap();
    let y = self_attention(&mut s, xv, "enc.block0", &c).unwrap();
    assert_eq!(s.value(y), &x);
}

#[test]
fn encoder_gradcheck() {
    let c = EncoderConfig { n_blocks: 1, ..cfg() };
    let mut store = store(&c, 16, 12);
    store.insert("x.input", random_tensor(&mut rng(13), &[8, 16], 1.0));
    param_gradcheck(&store, 1e-6, 1e-5, 1e-8, |s| {
        let x = s.param("x.input").unwrap();
        let out = encode_var(s, x, &c).unwrap();
        weighted_sum(s, out.encodings, 14)
    })
    .unwrap();
}

#[test]
fn width_mismatch_is_a_contract_error() {
    let spec = CorpusSpec::default();
    let model = AsrModel::new(ModelConfig::for_corpus(&spec), 0).unwrap();
    let bad = Tensor::zeros(&[4, spec.input_dim() + 1]);
    assert!(model.encodings(&bad).is_err());
    let one = Tensor::zeros(&[1, spec.input_dim()]);
    assert_eq!(model.encodings(&one).unwrap().shape(), &[1, model.config.encoder.model_dim]);
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let spec = CorpusSpec::default();
    let model = AsrModel::new(ModelConfig::for_corpus(&spec), 3).unwrap();
    let x = random_tensor(&mut rng(15), &[9, spec.input_dim()], 1.0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let back = AsrModel::load(&path).unwrap();
    assert_eq!(back.config, model.config);
    let a = model.encodings(&x).unwrap();
    let b = back.encodings(&x).unwrap();
    assert!(rows_identical(&a, &b, 8));
}
