//! Loops, repetition subsequences and the repetition rates used to score
//! generated text. Positions in returned pairs are 1-based.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::Hash;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::markov::TransitionModel;

/// Probability used in place of a zero transition when scoring.
pub const PROB_FLOOR: f64 = 1e-10;

/// All 1-based pairs `(r, t)`, `r < t`, with equal tokens, in lexicographic order.
pub fn find_loops<T: Eq>(s: &[T]) -> Vec<(usize, usize)> {
    let mut loops = Vec::new();
    for r in 0..s.len() {
        for t in r + 1..s.len() {
            if s[r] == s[t] {
                loops.push((r + 1, t + 1));
            }
        }
    }
    loops
}

/// Literal check of `∃ 1 ≤ p < q ≤ |s| - q + p` with `w_{i+q-p} = w_i` for every
/// `i ∈ [p, q]`. Returns the lexicographically smallest witness `(p, q)`.
pub fn has_repetition_subsequence<T: Eq>(s: &[T]) -> Option<(usize, usize)> {
    let len = s.len();
    for p in 1..=len {
        for q in p + 1..=len {
            if 2 * q - p > len {
                break;
            }
            let shift = q - p;
            if (p..=q).all(|i| s[i + shift - 1] == s[i - 1]) {
                return Some((p, q));
            }
        }
    }
    None
}

/// Fraction of positions whose token occurs among the previous `w` tokens.
fn rep_w_single<T: Eq>(s: &[T], w: usize) -> f64 {
    let hits = (1..s.len()).filter(|&t| s[t.saturating_sub(w)..t].contains(&s[t])).count();
    hits as f64 / s.len() as f64
}

/// Mean over sequences of the previous-`w`-token repetition rate.
pub fn rep_w<T: Eq>(sequences: &[Vec<T>], w: usize) -> Result<f64> {
    if w == 0 {
        return Err(Error::InvalidArgument("rep-w window must be at least 1".into()));
    }
    let seqs: Vec<&Vec<T>> = sequences.iter().filter(|s| !s.is_empty()).collect();
    if seqs.is_empty() {
        return Err(Error::EmptySequenceSet);
    }
    Ok(seqs.iter().map(|s| rep_w_single(s, w)).sum::<f64>() / seqs.len() as f64)
}

/// `1 - distinct n-grams / (|s| - n + 1)`.
pub fn rep_n<T: Eq + Hash>(s: &[T], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("n-gram order must be at least 1".into()));
    }
    if s.len() < n {
        return Err(Error::SequenceTooShort { len: s.len(), order: n });
    }
    let total = s.len() - n + 1;
    let distinct: HashSet<&[T]> = s.windows(n).collect();
    Ok(1.0 - distinct.len() as f64 / total as f64)
}

/// Fraction of positions that start or end a bigram occurring elsewhere.
pub fn rep_r<T: Eq + Hash>(s: &[T]) -> f64 {
    if s.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&[T], usize> = HashMap::new();
    for bigram in s.windows(2) {
        *counts.entry(bigram).or_default() += 1;
    }
    let repeated = |start: usize| s.get(start..start + 2).is_some_and(|b| counts[b] > 1);
    let hits = (0..s.len()).filter(|&i| repeated(i) || (i > 0 && repeated(i - 1))).count();
    hits as f64 / s.len() as f64
}

/// How per-sequence rep-n values are combined over a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RepNAggregation {
    /// Mean of per-sequence values.
    #[default]
    Macro,
    /// Pooled: one minus total distinct-per-sequence over total n-grams.
    Micro,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequenceScores {
    pub len: usize,
    pub rep_w: f64,
    pub rep_n: BTreeMap<usize, Option<f64>>,
    pub rep_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepetitionReport {
    pub sequences: usize,
    pub window: usize,
    pub rep_w: f64,
    pub rep_n: BTreeMap<usize, f64>,
    /// Sequences shorter than each order, left out of its rep-n.
    pub rep_n_skipped: BTreeMap<usize, usize>,
    pub rep_r: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ppl_c: Option<PplC>,
    pub per_sequence: Vec<SequenceScores>,
}

/// Scores a set of sequences with rep-w, rep-n for each order, and rep-r.
pub fn repetition_report<T: Eq + Hash>(
    sequences: &[Vec<T>],
    window: usize,
    orders: &[usize],
    aggregation: RepNAggregation,
) -> Result<RepetitionReport> {
    let seqs: Vec<&Vec<T>> = sequences.iter().filter(|s| !s.is_empty()).collect();
    if seqs.is_empty() {
        return Err(Error::EmptySequenceSet);
    }
    if window == 0 || orders.contains(&0) {
        return Err(Error::InvalidArgument("window and n-gram orders must be at least 1".into()));
    }
    let mut per_sequence = Vec::with_capacity(seqs.len());
    for s in &seqs {
        let rep_n = orders.iter().map(|&n| (n, rep_n(s, n).ok())).collect();
        per_sequence.push(SequenceScores { len: s.len(), rep_w: rep_w_single(s, window), rep_n, rep_r: rep_r(s) });
    }
    let count = seqs.len() as f64;
    let mut rep_n_map = BTreeMap::new();
    let mut skipped = BTreeMap::new();
    for &n in orders {
        let eligible: Vec<&&Vec<T>> = seqs.iter().filter(|s| s.len() >= n).collect();
        skipped.insert(n, seqs.len() - eligible.len());
        if eligible.is_empty() {
            continue;
        }
        let value = match aggregation {
            RepNAggregation::Macro => {
                eligible.iter().map(|s| rep_n(s, n).expect("long enough")).sum::<f64>() / eligible.len() as f64
            }
            RepNAggregation::Micro => {
                let (mut distinct, mut total) = (0usize, 0usize);
                for s in &eligible {
                    distinct += s.windows(n).collect::<HashSet<_>>().len();
                    total += s.len() - n + 1;
                }
                1.0 - distinct as f64 / total as f64
            }
        };
        rep_n_map.insert(n, value);
    }
    Ok(RepetitionReport {
        sequences: seqs.len(),
        window,
        rep_w: per_sequence.iter().map(|p| p.rep_w).sum::<f64>() / count,
        rep_n: rep_n_map,
        rep_n_skipped: skipped,
        rep_r: per_sequence.iter().map(|p| p.rep_r).sum::<f64>() / count,
        ppl_c: None,
        per_sequence,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Perplexity {
    pub value: f64,
    pub transitions: usize,
    /// Transitions whose model probability was zero and was floored.
    pub floored: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PplC {
    pub ratio: f64,
    pub generated: Perplexity,
    pub reference: Perplexity,
}

/// Perplexity of sequences under the model, each ending with an EOS transition.
pub fn perplexity<S: AsRef<str>>(model: &TransitionModel, sequences: &[Vec<S>]) -> Result<Perplexity> {
    let eos = model.n();
    let mut log_sum = 0.0;
    let mut transitions = 0;
    let mut floored = 0;
    for seq in sequences.iter().filter(|s| !s.is_empty()) {
        let mut ids = model.vocab().encode(seq)?;
        ids.push(eos);
        for w in ids.windows(2) {
            let p = model.prob(w[0], w[1]);
            let p = if p > 0.0 {
                p
            } else {
                floored += 1;
                PROB_FLOOR
            };
            log_sum += p.ln();
            transitions += 1;
        }
    }
    if transitions == 0 {
        return Err(Error::EmptyInput("no transitions to score"));
    }
    Ok(Perplexity { value: (-log_sum / transitions as f64).exp(), transitions, floored })
}

/// Ratio of generated to reference perplexity under the Markov model.
pub fn ppl_c_markov<S: AsRef<str>, U: AsRef<str>>(
    model: &TransitionModel,
    generated: &[Vec<S>],
    reference: &[Vec<U>],
) -> Result<PplC> {
    let generated = perplexity(model, generated)?;
    let reference = perplexity(model, reference)?;
    Ok(PplC { ratio: generated.value / reference.value, generated, reference })
}
