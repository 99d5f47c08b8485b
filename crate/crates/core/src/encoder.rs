//! Conformer audio encoder with a configurable attention window.
//!
//! Each block is the usual sandwich: half-step feed-forward, windowed
//! multi-head self-attention, convolution module, half-step feed-forward and
//! a final layer norm, with residual connections around every sub-module.
//! Attention at frame `t` sees frames `[t - left_context, t + right_context]`.
//! With `right_context == 0` and a causal convolution the encoder is
//! streaming: output row `t` depends only on input rows `≤ t`.

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::tensor::{Axis, ParamInit, Session, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub n_blocks: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub left_context: usize,
    pub right_context: usize,
    pub conv_kernel: usize,
    /// Causal convolution; otherwise the kernel is centred.
    pub causal_conv: bool,
    pub ff_expansion: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_blocks: 4,
            model_dim: 64,
            n_heads: 4,
            left_context: 16,
            right_context: 0,
            conv_kernel: 7,
            causal_conv: true,
            ff_expansion: 4,
        }
    }
}

impl EncoderConfig {
    /// The full-size configuration the desk-scale defaults are scaled from.
    pub fn full_size() -> Self {
        Self {
            n_blocks: 17,
            model_dim: 512,
            n_heads: 8,
            left_context: 65,
            right_context: 0,
            conv_kernel: 15,
            causal_conv: true,
            ff_expansion: 4,
        }
    }

    /// A non-streaming variant: attention may look `right_context` frames
    /// ahead and the convolution is centred.
    pub fn with_lookahead(&self, right_context: usize) -> Self {
        Self {
            right_context,
            causal_conv: right_context == 0,
            ..self.clone()
        }
    }

    pub fn streaming(&self) -> Self {
        self.with_lookahead(0)
    }

    pub fn is_causal(&self) -> bool {
        self.right_context == 0 && self.causal_conv
    }

    /// Right-hand lookahead of one convolution module.
    pub fn conv_lookahead(&self) -> usize {
        if self.causal_conv {
            0
        } else {
            (self.conv_kernel - 1) / 2
        }
    }

    /// Number of future input frames that can influence an output frame.
    pub fn total_lookahead(&self) -> usize {
        self.n_blocks * (self.right_context + self.conv_lookahead())
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
            return Err(config(format!(
                "model_dim {} must be a positive multiple of n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.conv_kernel == 0 || self.ff_expansion == 0 {
            return Err(config("conv_kernel and ff_expansion must be positive"));
        }
        Ok(())
    }

    /// Student encoders must be streaming.
    pub fn validate_student(&self) -> Result<()> {
        self.validate()?;
        if !self.is_causal() {
            return Err(config(
                "student encoder must have right_context = 0 and a causal convolution",
            ));
        }
        Ok(())
    }

    /// `mask[t·T + j]` is true when frame `t` may attend to frame `j`.
    pub fn attention_mask(&self, t_len: usize) -> Vec<bool> {
        let mut m = vec![false; t_len * t_len];
        for t in 0..t_len {
            let lo = t.saturating_sub(self.left_context);
            let hi = (t + self.right_context).min(t_len - 1);
            for j in lo..=hi {
                m[t * t_len + j] = true;
            }
        }
        m
    }
}

pub struct EncoderOutput {
    /// `[T' × model_dim]`
    pub encodings: Var,
    /// Output of every block (the last equals `encodings`).
    pub layers: Vec<Var>,
}

pub fn init_params(p: &mut ParamInit, cfg: &EncoderConfig, input_dim: usize) {
    let d = cfg.model_dim;
    let e = cfg.ff_expansion * d;
    p.linear("enc.in", input_dim, d);
    for b in 0..cfg.n_blocks {
        let pre = format!("enc.block{b}");
        for ln in ["ln_ff1", "ln_att", "ln_conv", "ln_dw", "ln_ff2", "ln_out"] {
            p.full(&format!("{pre}.{ln}.g"), &[d], 1.0);
            p.zeros(&format!("{pre}.{ln}.b"), &[d]);
        }
        for ff in ["ff1", "ff2"] {
            p.linear(&format!("{pre}.{ff}.l1"), d, e);
            p.linear(&format!("{pre}.{ff}.l2"), e, d);
        }
        for proj in ["q", "k", "v", "o"] {
            p.linear(&format!("{pre}.att.{proj}"), d, d);
        }
        p.linear(&format!("{pre}.conv.pw1"), d, 2 * d);
        let bound = (1.0 / cfg.conv_kernel as f64).sqrt();
        p.uniform(&format!("{pre}.conv.dw"), &[cfg.conv_kernel, d], bound);
        p.zeros(&format!("{pre}.conv.dw_b"), &[d]);
        p.linear(&format!("{pre}.conv.pw2"), d, d);
    }
}

const LN_EPS: f64 = 1e-5;

fn layer_norm(s: &mut Session, x: Var, prefix: &str) -> Result<Var> {
    let y = s.layer_norm(x, LN_EPS)?;
    let g = s.param(&format!("{prefix}.g"))?;
    let b = s.param(&format!("{prefix}.b"))?;
    let y = s.mul(y, g)?;
    s.add(y, b)
}

fn feed_forward(s: &mut Session, x: Var, pre: &str, ff: &str, ln: &str) -> Result<Var> {
    let h = layer_norm(s, x, &format!("{pre}.{ln}"))?;
    let h = s.linear(h, &format!("{pre}.{ff}.l1"))?;
    let h = s.swish(h)?;
    let h = s.linear(h, &format!("{pre}.{ff}.l2"))?;
    let h = s.scale(h, 0.5)?;
    s.add(x, h)
}

/// Windowed multi-head self-attention on `[T × d]`.
pub fn self_attention(s: &mut Session, x: Var, pre: &str, cfg: &EncoderConfig) -> Result<Var> {
    let t_len = s.shape(x)[0];
    let d = cfg.model_dim;
    let dh = d / cfg.n_heads;
    let q = s.linear(x, &format!("{pre}.att.q"))?;
    let k = s.linear(x, &format!("{pre}.att.k"))?;
    let v = s.linear(x, &format!("{pre}.att.v"))?;
    let mask = cfg.attention_mask(t_len);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = s.slice(q, Axis::Last, h * dh, (h + 1) * dh)?;
        let kh = s.slice(k, Axis::Last, h * dh, (h + 1) * dh)?;
        let vh = s.slice(v, Axis::Last, h * dh, (h + 1) * dh)?;
        let kt = s.transpose(kh)?;
        let scores = s.matmul(qh, kt)?;
        let scores = s.scale(scores, scale)?;
        let w = s.masked_softmax_lastdim(scores, Some(&mask))?;
        heads.push(s.matmul(w, vh)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        s.concat(&heads, Axis::Last)?
    };
    s.linear(cat, &format!("{pre}.att.o"))
}

fn conv_module(s: &mut Session, x: Var, pre: &str, cfg: &EncoderConfig) -> Result<Var> {
    let d = cfg.model_dim;
    let h = layer_norm(s, x, &format!("{pre}.ln_conv"))?;
    let h = s.linear(h, &format!("{pre}.conv.pw1"))?;
    // GLU
    let a = s.slice(h, Axis::Last, 0, d)?;
    let gate = s.slice(h, Axis::Last, d, 2 * d)?;
    let gate = s.sigmoid(gate)?;
    let h = s.mul(a, gate)?;
    let w = s.param(&format!("{pre}.conv.dw"))?;
    let h = s.conv1d_depthwise(h, w, cfg.conv_lookahead())?;
    let b = s.param(&format!("{pre}.conv.dw_b"))?;
    let h = s.add(h, b)?;
    let h = layer_norm(s, h, &format!("{pre}.ln_dw"))?;
    let h = s.swish(h)?;
    s.linear(h, &format!("{pre}.conv.pw2"))
}

/// One conformer block on `[T × d]`.
pub fn conformer_block(s: &mut Session, x: Var, index: usize, cfg: &EncoderConfig) -> Result<Var> {
    let pre = format!("enc.block{index}");
    let x = feed_forward(s, x, &pre, "ff1", "ln_ff1")?;
    let h = layer_norm(s, x, &format!("{pre}.ln_att"))?;
    let h = self_attention(s, h, &pre, cfg)?;
    let x = s.add(x, h)?;
    let h = conv_module(s, x, &pre, cfg)?;
    let x = s.add(x, h)?;
    let x = feed_forward(s, x, &pre, "ff2", "ln_ff2")?;
    layer_norm(s, x, &format!("{pre}.ln_out"))
}

/// Encodes `[T' × input_dim]` model inputs already on the tape.
pub fn encode_var(s: &mut Session, input: Var, cfg: &EncoderConfig) -> Result<EncoderOutput> {
    let x = s.linear(input, "enc.in")?;
    let mut layers = Vec::with_capacity(cfg.n_blocks);
    let mut h = x;
    for b in 0..cfg.n_blocks {
        h = conformer_block(s, h, b, cfg).map_err(|e| match e {
            Error::NonFinite { op } => Error::NonFinite {
                op: format!("conformer block {b}: {op}"),
            },
            other => other,
        })?;
        layers.push(h);
    }
    Ok(EncoderOutput { encodings: h, layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::rng_for;
    use crate::tensor::{ParamStore, Tensor};

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            n_blocks: 2,
            model_dim: 8,
            n_heads: 2,
            left_context: 3,
            conv_kernel: 3,
            ff_expansion: 2,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn mask_window() {
        let c = EncoderConfig {
            left_context: 1,
            right_context: 1,
            ..cfg()
        };
        let m = c.attention_mask(4);
        let row = |t: usize| (0..4).filter(|&j| m[t * 4 + j]).collect::<Vec<_>>();
        assert_eq!(row(0), vec![0, 1]);
        assert_eq!(row(2), vec![1, 2, 3]);
    }

    #[test]
    fn validation() {
        assert!(EncoderConfig {
            model_dim: 10,
            n_heads: 4,
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(cfg().validate_student().is_ok());
        assert!(cfg().with_lookahead(2).validate_student().is_err());
    }

    #[test]
    fn single_frame_shape() {
        let c = cfg();
        let mut store = ParamStore::new();
        let mut rng = rng_for(0, 0, 0);
        init_params(&mut ParamInit { store: &mut store, rng: &mut rng }, &c, 5);
        let mut s = Session::inference(&store);
        let x = s.constant(Tensor::full(&[1, 5], 0.3)).unwrap();
        let out = encode_var(&mut s, x, &c).unwrap();
        assert_eq!(s.shape(out.encodings), &[1, 8]);
        assert_eq!(out.layers.len(), 2);
    }
}
