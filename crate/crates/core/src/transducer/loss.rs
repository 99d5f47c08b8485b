//! Exact transducer negative log-likelihood by log-space forward-backward.

use crate::error::{contract, Error, Result};
use crate::tensor::{log_add, Session, Tensor, Var};

/// Per-utterance lattice quantities, all in log space.
///
/// `log_probs` is `[T' × (U+1) × (V+1)]`; `alpha` and `beta` are
/// `[T' × (U+1)]`. `alpha[t][u]` is the log-probability of having emitted
/// `y_1..y_u` before consuming frame `t`; `beta[t][u]` is the log-probability
/// of finishing from node `(t, u)`, including the final blank.
#[derive(Clone, Debug)]
pub struct LatticePosting {
    pub t_len: usize,
    pub u_len: usize,
    pub n_out: usize,
    pub log_probs: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    targets: Vec<usize>,
}

impl LatticePosting {
    /// Normalizes `logits` and runs both recursions.
    pub fn compute(logits: &Tensor, targets: &[usize]) -> Result<Self> {
        let s = logits.shape();
        if s.len() != 3 {
            return Err(Error::Shape {
                op: "rnnt_loss",
                shapes: vec![s.to_vec()],
            });
        }
        let (t_len, u_len, n_out) = (s[0], s[1], s[2]);
        if t_len == 0 {
            return Err(contract("rnnt_loss: utterance has no encoder frames"));
        }
        if u_len != targets.len() + 1 {
            return Err(Error::Shape {
                op: "rnnt_loss",
                shapes: vec![s.to_vec(), vec![targets.len()]],
            });
        }
        let blank = n_out - 1;
        if let Some(&bad) = targets.iter().find(|&&y| y >= blank) {
            return Err(contract(format!("rnnt_loss: target {bad} is not a non-blank id (< {blank})")));
        }
        let mut log_probs = Vec::with_capacity(logits.len());
        for r in 0..t_len * u_len {
            let row = logits.row(r);
            let lse = crate::tensor::log_sum_exp(row);
            log_probs.extend(row.iter().map(|x| x - lse));
        }
        let mut lat = Self {
            t_len,
            u_len,
            n_out,
            log_probs,
            alpha: vec![f64::NEG_INFINITY; t_len * u_len],
            beta: vec![f64::NEG_INFINITY; t_len * u_len],
            targets: targets.to_vec(),
        };
        lat.forward();
        lat.backward();
        Ok(lat)
    }

    fn lp(&self, t: usize, u: usize, k: usize) -> f64 {
        self.log_probs[(t * self.u_len + u) * self.n_out + k]
    }

    fn blank(&self) -> usize {
        self.n_out - 1
    }

    fn forward(&mut self) {
        let (tl, ul, b) = (self.t_len, self.u_len, self.blank());
        self.alpha[0] = 0.0;
        for t in 0..tl {
            for u in 0..ul {
                if t == 0 && u == 0 {
                    continue;
                }
                let mut a = f64::NEG_INFINITY;
                if t > 0 {
                    a = self.alpha[(t - 1) * ul + u] + self.lp(t - 1, u, b);
                }
                if u > 0 {
                    a = log_add(a, self.alpha[t * ul + u - 1] + self.lp(t, u - 1, self.targets[u - 1]));
                }
                self.alpha[t * ul + u] = a;
            }
        }
    }

    fn backward(&mut self) {
        let (tl, ul, b) = (self.t_len, self.u_len, self.blank());
        for t in (0..tl).rev() {
            for u in (0..ul).rev() {
                let v = if t == tl - 1 && u == ul - 1 {
                    self.lp(t, u, b)
                } else {
                    let mut v = f64::NEG_INFINITY;
                    if t + 1 < tl {
                        v = self.beta[(t + 1) * ul + u] + self.lp(t, u, b);
                    }
                    if u + 1 < ul {
                        v = log_add(v, self.beta[t * ul + u + 1] + self.lp(t, u, self.targets[u]));
                    }
                    v
                };
                self.beta[t * ul + u] = v;
            }
        }
    }

    /// `log P(y | x)` from the forward variables.
    pub fn log_likelihood(&self) -> f64 {
        let (tl, ul) = (self.t_len, self.u_len);
        self.alpha[(tl - 1) * ul + ul - 1] + self.lp(tl - 1, ul - 1, self.blank())
    }

    /// `log P(y | x)` from the backward variables.
    pub fn log_likelihood_beta(&self) -> f64 {
        self.beta[0]
    }

    /// Gradient of `−log P(y | x)` with respect to the unnormalized logits.
    pub fn grad_logits(&self) -> Vec<f64> {
        let (tl, ul, n, b) = (self.t_len, self.u_len, self.n_out, self.blank());
        let ll = self.log_likelihood();
        let mut g = vec![0.0; tl * ul * n];
        for t in 0..tl {
            for u in 0..ul {
                let node = t * ul + u;
                let a = self.alpha[node];
                let row = &mut g[node * n..(node + 1) * n];
                // d(−ll)/d log_prob for the two outgoing arcs.
                let blank_next = if t + 1 < tl {
                    self.beta[(t + 1) * ul + u]
                } else if u == ul - 1 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                };
                row[b] = -(a + self.lp(t, u, b) + blank_next - ll).exp();
                if u + 1 < ul {
                    let y = self.targets[u];
                    row[y] = -(a + self.lp(t, u, y) + self.beta[node + 1] - ll).exp();
                }
                // Through the log-softmax.
                let total: f64 = row.iter().sum();
                for k in 0..n {
                    let p = self.log_probs[node * n + k].exp();
                    row[k] -= p * total;
                }
            }
        }
        g
    }
}

/// `−log P(y | x)` recorded on the tape as a single fused node over the
/// `[T' × (U+1) × (V+1)]` logits.
pub fn rnnt_loss(s: &mut Session, logits: Var, targets: &[usize]) -> Result<Var> {
    let lat = LatticePosting::compute(s.value(logits), targets)?;
    let value = -lat.log_likelihood();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            op: "rnnt_loss".into(),
        });
    }
    let grad = lat.grad_logits();
    s.fused_scalar("rnnt_loss", logits, value, grad)
}

/// Loss value without recording anything.
pub fn rnnt_loss_value(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    Ok(-LatticePosting::compute(logits, targets)?.log_likelihood())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_blank_uniform() {
        let l = Tensor::zeros(&[1, 1, 3]);
        assert!((rnnt_loss_value(&l, &[]).unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_one_label_uniform() {
        let l = Tensor::zeros(&[2, 2, 3]);
        let want = -(2.0 * (1.0f64 / 3.0).powi(3)).ln();
        assert!((rnnt_loss_value(&l, &[0]).unwrap() - want).abs() < 1e-12);
        assert!((want - 2.6027).abs() < 1e-4);
    }

    #[test]
    fn empty_utterance_with_labels_is_rejected() {
        let l = Tensor::zeros(&[0, 2, 3]);
        assert!(matches!(rnnt_loss_value(&l, &[1]), Err(Error::Contract(_))));
    }

    #[test]
    fn blank_as_target_is_rejected() {
        let l = Tensor::zeros(&[2, 2, 3]);
        assert!(rnnt_loss_value(&l, &[2]).is_err());
    }
}
