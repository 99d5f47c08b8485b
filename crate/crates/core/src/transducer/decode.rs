//! Frame-synchronous greedy and beam decoding.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::{joint_enc_var, TransducerConfig};
use crate::error::{contract, Result};
use crate::tensor::{log_sum_exp, matmul_acc, sigmoid, ParamStore, Session, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Non-blank emissions allowed per encoder frame before a blank is forced.
    pub max_symbols_per_frame: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 4,
            max_symbols_per_frame: 4,
        }
    }
}

/// One emitted non-blank token together with the quantities the confidence
/// module consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct Emission {
    pub token: usize,
    /// Encoder frame the token was emitted at.
    pub frame: usize,
    pub log_prob: f64,
    /// Entropy of the output distribution at the emission step.
    pub entropy: f64,
    /// `tanh` activation of the joint network; empty unless requested.
    pub joint_hidden: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Log-probability of the decoded alignment path, blanks included.
    pub log_prob: f64,
    pub emissions: Vec<Emission>,
}

impl Hypothesis {
    pub fn token_log_probs(&self) -> Vec<f64> {
        self.emissions.iter().map(|e| e.log_prob).collect()
    }
}

/// Recurrent state of the prediction network after some label history.
#[derive(Clone, Debug)]
pub struct PredState {
    h: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    /// Prediction output already mapped into the joint space.
    joint_in: Vec<f64>,
}

/// Step-at-a-time view of the transducer parameters.
pub struct Decoder<'a> {
    params: &'a ParamStore,
    cfg: &'a TransducerConfig,
}

fn row_linear(params: &ParamStore, prefix: &str, x: &[f64]) -> Result<Vec<f64>> {
    let w = get(params, &format!("{prefix}.w"))?;
    let b = get(params, &format!("{prefix}.b"))?;
    let (k, n) = (w.shape()[0], w.shape()[1]);
    if x.len() != k {
        return Err(contract(format!("{prefix}: input width {} != {k}", x.len())));
    }
    let mut out = vec![0.0; n];
    matmul_acc(x, w.data(), 1, k, n, &mut out);
    for (o, bv) in out.iter_mut().zip(b.data()) {
        *o += bv;
    }
    Ok(out)
}

fn get<'p>(params: &'p ParamStore, name: &str) -> Result<&'p Tensor> {
    params
        .get(name)
        .ok_or_else(|| contract(format!("unknown parameter `{name}`")))
}

impl<'a> Decoder<'a> {
    pub fn new(params: &'a ParamStore, cfg: &'a TransducerConfig) -> Self {
        Self { params, cfg }
    }

    pub fn blank(&self) -> usize {
        self.cfg.joint.blank()
    }

    /// Applies the encoder-side joint head to `[T' × d]` encodings.
    pub fn project_encodings(&self, enc: &Tensor) -> Result<Tensor> {
        let mut s = Session::inference(self.params);
        let x = s.constant(enc.clone())?;
        let y = joint_enc_var(&mut s, x)?;
        Ok(s.value(y).clone())
    }

    /// State after consuming the start (blank) symbol.
    pub fn start(&self) -> Result<PredState> {
        let pc = &self.cfg.prediction;
        let zero = PredState {
            h: vec![vec![0.0; pc.hidden]; pc.n_layers],
            c: vec![vec![0.0; pc.hidden]; pc.n_layers],
            joint_in: Vec::new(),
        };
        self.step(&zero, self.blank())
    }

    /// Advances the prediction network by one label.
    pub fn step(&self, state: &PredState, token: usize) -> Result<PredState> {
        let pc = &self.cfg.prediction;
        let hd = pc.hidden;
        let table = get(self.params, "pred.embed")?;
        if token >= table.shape()[0] {
            return Err(contract(format!("token {token} outside the prediction vocabulary")));
        }
        let mut x = table.row(token).to_vec();
        let mut next = PredState {
            h: Vec::with_capacity(pc.n_layers),
            c: Vec::with_capacity(pc.n_layers),
            joint_in: Vec::new(),
        };
        for l in 0..pc.n_layers {
            let wx = get(self.params, &format!("pred.lstm{l}.wx"))?;
            let wh = get(self.params, &format!("pred.lstm{l}.wh"))?;
            let b = get(self.params, &format!("pred.lstm{l}.b"))?;
            let mut gates = vec![0.0; 4 * hd];
            matmul_acc(&x, wx.data(), 1, x.len(), 4 * hd, &mut gates);
            for (g, bv) in gates.iter_mut().zip(b.data()) {
                *g += bv;
            }
            let mut rec = vec![0.0; 4 * hd];
            matmul_acc(&state.h[l], wh.data(), 1, hd, 4 * hd, &mut rec);
            for (g, r) in gates.iter_mut().zip(&rec) {
                *g += r;
            }
            let mut h = vec![0.0; hd];
            let mut c = vec![0.0; hd];
            for j in 0..hd {
                let i = sigmoid(gates[j]);
                let f = sigmoid(gates[hd + j]);
                let g = gates[2 * hd + j].tanh();
                let o = sigmoid(gates[3 * hd + j]);
                c[j] = f * state.c[l][j] + i * g;
                h[j] = o * c[j].tanh();
            }
            x = h.clone();
            next.h.push(h);
            next.c.push(c);
        }
        let proj = row_linear(self.params, "pred.proj", &x)?;
        next.joint_in = row_linear(self.params, "joint.pred", &proj)?;
        Ok(next)
    }

    /// Output log-probabilities `[V+1]` and the joint hidden activation at
    /// one lattice node.
    pub fn joint(&self, enc_proj_row: &[f64], state: &PredState) -> Result<(Vec<f64>, Vec<f64>)> {
        let hidden: Vec<f64> = enc_proj_row
            .iter()
            .zip(&state.joint_in)
            .map(|(a, b)| (a + b).tanh())
            .collect();
        let mut logits = row_linear(self.params, "joint.out", &hidden)?;
        let lse = log_sum_exp(&logits);
        for v in &mut logits {
            *v -= lse;
        }
        Ok((logits, hidden))
    }
}

/// What the decoders need from a transducer: label-history state, and
/// output log-probabilities at a lattice node.
pub trait Scorer {
    type State: Clone;

    fn n_frames(&self) -> usize;
    fn blank(&self) -> usize;
    fn start(&self) -> Result<Self::State>;
    fn step(&self, state: &Self::State, token: usize) -> Result<Self::State>;
    /// Log-probabilities over all `V + 1` outputs at frame `t`, plus the
    /// joint hidden activation (may be empty).
    fn joint(&self, t: usize, state: &Self::State) -> Result<(Vec<f64>, Vec<f64>)>;
}

/// A [`Decoder`] bound to one utterance's projected encodings.
pub struct FrameScorer<'d, 'a> {
    pub decoder: &'d Decoder<'a>,
    /// `[T' × J]`, see [`Decoder::project_encodings`].
    pub enc_proj: &'d Tensor,
}

impl Scorer for FrameScorer<'_, '_> {
    type State = PredState;

    fn n_frames(&self) -> usize {
        self.enc_proj.rows()
    }

    fn blank(&self) -> usize {
        self.decoder.blank()
    }

    fn start(&self) -> Result<PredState> {
        self.decoder.start()
    }

    fn step(&self, state: &PredState, token: usize) -> Result<PredState> {
        self.decoder.step(state, token)
    }

    fn joint(&self, t: usize, state: &PredState) -> Result<(Vec<f64>, Vec<f64>)> {
        self.decoder.joint(self.enc_proj.row(t), state)
    }
}

fn entropy(log_probs: &[f64]) -> f64 {
    -log_probs
        .iter()
        .map(|&lp| if lp == f64::NEG_INFINITY { 0.0 } else { lp.exp() * lp })
        .sum::<f64>()
}

fn emission(token: usize, frame: usize, lp: &[f64], hidden: &[f64], collect: bool) -> Emission {
    Emission {
        token,
        frame,
        log_prob: lp[token],
        entropy: entropy(lp),
        joint_hidden: if collect { hidden.to_vec() } else { Vec::new() },
    }
}

/// Index of the first maximum, so ties favour lower ids (and tokens over
/// blank).
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Frame-synchronous greedy decoding: at each frame emit the most likely
/// output until it is blank, forcing a blank after `max_symbols_per_frame`
/// emissions.
pub fn greedy_decode<S: Scorer>(dec: &S, max_symbols_per_frame: usize, collect: bool) -> Result<Hypothesis> {
    let blank = dec.blank();
    let mut state = dec.start()?;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        emissions: Vec::new(),
    };
    for t in 0..dec.n_frames() {
        let mut n = 0;
        loop {
            let (lp, hidden) = dec.joint(t, &state)?;
            let k = if n == max_symbols_per_frame { blank } else { argmax(&lp) };
            hyp.log_prob += lp[k];
            if k == blank {
                break;
            }
            hyp.tokens.push(k);
            hyp.emissions.push(emission(k, t, &lp, &hidden, collect));
            state = dec.step(&state, k)?;
            n += 1;
        }
    }
    Ok(hyp)
}

/// A hypothesis waiting to be expanded within the current frame. The
/// prediction network is stepped only when it is popped.
struct Open<St> {
    tokens: Vec<usize>,
    score: f64,
    state: Rc<St>,
    /// Label appended to `tokens` whose state step is still pending.
    pending: Option<usize>,
    emissions: Vec<Emission>,
    n_sym: usize,
}

/// A hypothesis that has closed the current frame with a blank.
#[derive(Clone)]
struct Closed<St> {
    tokens: Vec<usize>,
    score: f64,
    state: Rc<St>,
    emissions: Vec<Emission>,
}

/// Adds a closed hypothesis, keeping the better path when the same label
/// sequence is already present.
fn push_closed<St>(closed: &mut Vec<Closed<St>>, c: Closed<St>) {
    if let Some(existing) = closed.iter_mut().find(|d| d.tokens == c.tokens) {
        if c.score > existing.score {
            *existing = c;
        }
    } else {
        closed.push(c);
    }
}

/// Frame-synchronous beam search.
///
/// Within a frame the most probable open hypothesis is expanded repeatedly:
/// closing it with a blank yields a finished hypothesis, appending a label
/// yields a new open one. Expansion stops once `beam_size` finished
/// hypotheses score at least as well as the best open one, which no further
/// expansion could overtake. Label sequences reached by several paths keep
/// their best path. `beam_size == 1` is [`greedy_decode`]. Returns the
/// n-best list in descending log-probability.
pub fn beam_decode<S: Scorer>(dec: &S, cfg: &DecodeConfig, collect: bool) -> Result<Vec<Hypothesis>> {
    match cfg.beam_size {
        0 => return Err(contract("beam_size must be at least 1")),
        1 => return Ok(vec![greedy_decode(dec, cfg.max_symbols_per_frame, collect)?]),
        _ => {}
    }
    let width = cfg.beam_size;
    let blank = dec.blank();
    let mut frontier = vec![Closed {
        tokens: Vec::new(),
        score: 0.0,
        state: Rc::new(dec.start()?),
        emissions: Vec::new(),
    }];
    for t in 0..dec.n_frames() {
        let mut open: Vec<Open<S::State>> = frontier
            .drain(..)
            .map(|c| Open {
                tokens: c.tokens,
                score: c.score,
                state: c.state,
                pending: None,
                emissions: c.emissions,
                n_sym: 0,
            })
            .collect();
        let mut closed: Vec<Closed<S::State>> = Vec::new();
        loop {
            // First maximum keeps expansion order deterministic.
            let Some(best) = open
                .iter()
                .enumerate()
                .fold(None, |acc: Option<(usize, f64)>, (i, o)| match acc {
                    Some((_, s)) if s >= o.score => acc,
                    _ => Some((i, o.score)),
                })
            else {
                break;
            };
            if closed.iter().filter(|c| c.score >= best.1).count() >= width {
                break;
            }
            let mut hyp = open.swap_remove(best.0);
            if let Some(token) = hyp.pending.take() {
                hyp.state = Rc::new(dec.step(&hyp.state, token)?);
            }
            let (lp, hidden) = dec.joint(t, &hyp.state)?;
            if hyp.n_sym < cfg.max_symbols_per_frame {
                for k in 0..blank {
                    let mut tokens = hyp.tokens.clone();
                    tokens.push(k);
                    let mut emissions = hyp.emissions.clone();
                    emissions.push(emission(k, t, &lp, &hidden, collect));
                    open.push(Open {
                        tokens,
                        score: hyp.score + lp[k],
                        state: Rc::clone(&hyp.state),
                        pending: Some(k),
                        emissions,
                        n_sym: hyp.n_sym + 1,
                    });
                }
            }
            push_closed(
                &mut closed,
                Closed {
                    tokens: hyp.tokens,
                    score: hyp.score + lp[blank],
                    state: hyp.state,
                    emissions: hyp.emissions,
                },
            );
        }
        closed.sort_by(|a, b| b.score.total_cmp(&a.score));
        closed.truncate(width);
        frontier = closed;
    }
    Ok(frontier
        .into_iter()
        .map(|b| Hypothesis {
            tokens: b.tokens,
            log_prob: b.score,
            emissions: b.emissions,
        })
        .collect())
}
