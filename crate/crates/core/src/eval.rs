//! Word error rate over token sequences.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditOp {
    Match,
    Sub,
    /// A hypothesis token with no reference counterpart.
    Ins,
    /// A reference token missing from the hypothesis.
    Del,
}

/// Minimal-cost unit edit alignment of `hyp` against `reference`.
///
/// Among equal-cost paths the backtrace prefers match, then substitution,
/// then insertion, then deletion at every step, so the result is
/// deterministic.
pub fn align<T: PartialEq>(hyp: &[T], reference: &[T]) -> Vec<EditOp> {
    let (n, m) = (hyp.len(), reference.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(hyp[i - 1] != reference[j - 1]);
            let ins = d[(i - 1) * w + j] + 1;
            let del = d[i * w + j - 1] + 1;
            d[i * w + j] = diag.min(ins).min(del);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let cur = d[i * w + j];
        if i > 0 && j > 0 {
            let same = hyp[i - 1] == reference[j - 1];
            let diag = d[(i - 1) * w + j - 1];
            if same && diag == cur {
                ops.push(EditOp::Match);
                i -= 1;
                j -= 1;
                continue;
            }
            if !same && diag + 1 == cur {
                ops.push(EditOp::Sub);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == cur {
            ops.push(EditOp::Ins);
            i -= 1;
        } else {
            ops.push(EditOp::Del);
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub n_ref_tokens: usize,
    pub wer: f64,
}

impl WerBreakdown {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    fn from_counts(s: usize, i: usize, d: usize, n: usize) -> Self {
        let errors = s + i + d;
        let wer = if n > 0 {
            errors as f64 / n as f64
        } else if errors == 0 {
            0.0
        } else {
            1.0
        };
        Self {
            substitutions: s,
            insertions: i,
            deletions: d,
            n_ref_tokens: n,
            wer,
        }
    }

    /// Micro-averaged combination: error and token counts are summed.
    pub fn combine(&self, other: &Self) -> Self {
        Self::from_counts(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.n_ref_tokens + other.n_ref_tokens,
        )
    }
}

pub fn wer<T: PartialEq>(hyp: &[T], reference: &[T]) -> WerBreakdown {
    let (mut s, mut i, mut d) = (0, 0, 0);
    for op in align(hyp, reference) {
        match op {
            EditOp::Match => {}
            EditOp::Sub => s += 1,
            EditOp::Ins => i += 1,
            EditOp::Del => d += 1,
        }
    }
    WerBreakdown::from_counts(s, i, d, reference.len())
}

/// Micro-averaged WER over `(hypothesis, reference)` pairs.
pub fn corpus_wer<'a, T: PartialEq + 'a>(
    pairs: impl IntoIterator<Item = (&'a [T], &'a [T])>,
) -> WerBreakdown {
    pairs
        .into_iter()
        .map(|(h, r)| wer(h, r))
        .fold(WerBreakdown::default(), |acc, w| acc.combine(&w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_is_zero() {
        assert_eq!(wer(&[1, 2, 3], &[1, 2, 3]).wer, 0.0);
        assert_eq!(wer::<u8>(&[], &[]).wer, 0.0);
    }

    #[test]
    fn single_substitution() {
        let w = wer(&['a', 'x', 'c'], &['a', 'b', 'c']);
        assert_eq!(w.substitutions, 1);
        assert!((w.wer - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn insertions_and_deletions() {
        let w = wer(&[1, 2, 9, 3], &[1, 2, 3]);
        assert_eq!((w.substitutions, w.insertions, w.deletions), (0, 1, 0));
        let w = wer(&[1, 3], &[1, 2, 3]);
        assert_eq!((w.substitutions, w.insertions, w.deletions), (0, 0, 1));
        let w = wer(&[], &[1, 2]);
        assert_eq!(w.deletions, 2);
        assert_eq!(w.wer, 1.0);
    }

    #[test]
    fn tie_break_prefers_substitution_over_indel() {
        // "ab" vs "ba": two substitutions and ins+match+del both cost 2.
        assert_eq!(align(&['a', 'b'], &['b', 'a']), vec![EditOp::Sub, EditOp::Sub]);
    }

    #[test]
    fn micro_average_is_emitted() {
        let a: (&[u8], &[u8]) = (&[9], &[1]);
        let b: (&[u8], &[u8]) = (&[1, 2, 3, 4], &[1, 2, 3, 4]);
        let micro = corpus_wer([a, b]);
        assert!((micro.wer - 0.2).abs() < 1e-15);
        let macro_avg = (wer(a.0, a.1).wer + wer(b.0, b.1).wer) / 2.0;
        assert!((macro_avg - 0.5).abs() < 1e-15);
    }
}
