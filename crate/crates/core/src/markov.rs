//! Markov generation model built from bigram counts, and the exact Average
//! Repetition Probability (series and closed form).
//!
//! The model keeps the sub-transition matrix `B` in sparse row form because a
//! corpus bigram matrix has only a handful of successors per word; dense
//! copies are produced on demand for the spectral machinery.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Precondition, Result};
use crate::linalg::{self, LinearOperator, Matrix};

/// Relative residual for the Perron root of `B^2`.
pub const RHO_TOL: f64 = 1e-10;
/// Iteration cap for the Perron root of `B^2`.
pub const RHO_MAX_ITER: usize = 200_000;
/// Per-term cutoff for the ARP series.
pub const SERIES_EPS: f64 = 1e-12;
/// Default term cap for the ARP series.
pub const SERIES_K_MAX: usize = 10_000;
/// Row-sum tolerance for models assembled from caller-supplied matrices.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Ordered token list with its inverse index. The EOS state is id `len()`
/// and is never a corpus token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::InvalidArgument("empty token in vocabulary".into()));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token {t:?} in vocabulary")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Sorted distinct tokens of a corpus.
    pub fn from_sequences<S: AsRef<str>>(sequences: &[Vec<S>]) -> Self {
        let mut tokens: Vec<String> = sequences.iter().flatten().map(|t| t.as_ref().to_owned()).collect();
        tokens.sort_unstable();
        tokens.dedup();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Synthetic names `w0, w1, ...` for models given directly as matrices.
    pub fn numbered(n: usize) -> Self {
        Self::new((0..n).map(|i| format!("w{i}")).collect()).expect("distinct names")
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    #[inline]
    pub fn eos_id(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, seq: &[S]) -> Result<Vec<usize>> {
        seq.iter().map(|t| self.id(t.as_ref()).ok_or_else(|| Error::UnknownToken(t.as_ref().to_owned()))).collect()
    }
}

/// Sparse row: `(column, value)` pairs with strictly positive values in
/// ascending column order.
pub type SparseRow = Vec<(usize, f64)>;

/// The Markov generation model: `A = [[B, b], [0, 1]]` with EOS absorbing.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionModel {
    vocab: Vocabulary,
    rows: Vec<SparseRow>,
    eos: Vec<f64>,
    zeta: f64,
    counts: Vec<Vec<(usize, u64)>>,
}

impl TransitionModel {
    /// Assembles a model from sparse rows, validating the stochastic
    /// constraints and recomputing the sparsity.
    pub fn from_parts(
        vocab: Vocabulary,
        rows: Vec<SparseRow>,
        eos: Vec<f64>,
        counts: Vec<Vec<(usize, u64)>>,
    ) -> Result<Self> {
        let n = vocab.len();
        if n == 0 {
            return Err(Error::InvalidArgument("model needs at least one token".into()));
        }
        if rows.len() != n || eos.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} rows and {} EOS entries for {n} tokens",
                rows.len(),
                eos.len()
            )));
        }
        if !counts.is_empty() && counts.len() != n {
            return Err(Error::ShapeMismatch(format!("{} count rows for {n} tokens", counts.len())));
        }
        let mut nnz = 0usize;
        for (i, row) in rows.iter().enumerate() {
            let mut last = None;
            let mut sum = eos[i];
            if !(eos[i].is_finite() && eos[i] >= 0.0) {
                return Err(Error::InvalidArgument(format!("EOS probability {} at row {i}", eos[i])));
            }
            for &(j, p) in row {
                if j >= n || last.is_some_and(|l| j <= l) {
                    return Err(Error::InvalidArgument(format!("bad column order at row {i}")));
                }
                if !(p.is_finite() && p > 0.0) {
                    return Err(Error::InvalidArgument(format!("entry {p} at ({i}, {j})")));
                }
                last = Some(j);
                sum += p;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidArgument(format!("row {i} sums to {sum}, expected 1")));
            }
            nnz += row.len();
        }
        let zeta = nnz as f64 / (n as f64 * n as f64);
        Ok(Self { vocab, rows, eos, zeta, counts })
    }

    /// Model from a dense sub-stochastic `B` and EOS column `b`.
    pub fn from_dense(vocab: Vocabulary, b: &Matrix<f64>, eos: &[f64]) -> Result<Self> {
        if !b.is_square() || b.rows() != vocab.len() {
            return Err(Error::ShapeMismatch(format!("{}x{} matrix for {} tokens", b.rows(), b.cols(), vocab.len())));
        }
        let mut rows = Vec::with_capacity(b.rows());
        for i in 0..b.rows() {
            let mut row = Vec::new();
            for (j, &p) in b.row(i).iter().enumerate() {
                if p < 0.0 {
                    return Err(Error::InvalidArgument(format!("negative entry {p} at ({i}, {j})")));
                }
                if p > 0.0 {
                    row.push((j, p));
                }
            }
            rows.push(row);
        }
        Self::from_parts(vocab, rows, eos.to_vec(), Vec::new())
    }

    /// Model whose EOS column absorbs the missing row mass: `b_i = 1 - Σ_j B_ij`.
    pub fn from_sub_stochastic(b: &Matrix<f64>) -> Result<Self> {
        let eos: Vec<f64> = b.row_sums().iter().map(|s| (1.0 - s).max(0.0)).collect();
        Self::from_dense(Vocabulary::numbered(b.rows()), b, &eos)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Fraction of strictly positive entries of `B`.
    #[inline]
    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    /// Average branching factor `zeta * n`.
    #[inline]
    pub fn zeta_n(&self) -> f64 {
        self.zeta * self.n() as f64
    }

    pub fn b_rows(&self) -> &[SparseRow] {
        &self.rows
    }

    pub fn eos_probs(&self) -> &[f64] {
        &self.eos
    }

    /// Raw bigram counts, EOS in column `n`. Empty for models not built from a corpus.
    pub fn counts(&self) -> &[Vec<(usize, u64)>] {
        &self.counts
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// `P(next | current)`; `next == n` is EOS.
    pub fn prob(&self, current: usize, next: usize) -> f64 {
        if next == self.n() {
            return self.eos[current];
        }
        let row = &self.rows[current];
        row.binary_search_by_key(&next, |&(j, _)| j).map_or(0.0, |k| row[k].1)
    }

    /// Full next-token distribution of a row, EOS at index `n`.
    pub fn row_distribution(&self, i: usize) -> SparseRow {
        let mut row = self.rows[i].clone();
        if self.eos[i] > 0.0 {
            row.push((self.n(), self.eos[i]));
        }
        row
    }

    pub fn b_dense(&self) -> Matrix<f64> {
        let n = self.n();
        let mut m = Matrix::zeros(n, n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, p) in row {
                m[(i, j)] = p;
            }
        }
        m
    }

    pub fn b_squared_dense(&self) -> Matrix<f64> {
        let n = self.n();
        let mut m = Matrix::zeros(n, n);
        for (i, row) in self.rows.iter().enumerate() {
            let out = m.row_mut(i);
            for &(k, p) in row {
                for &(j, q) in &self.rows[k] {
                    out[j] += p * q;
                }
            }
        }
        m
    }

    /// `B x`.
    pub fn apply_b(&self, x: &[f64], y: &mut [f64]) {
        for (yi, row) in y.iter_mut().zip(&self.rows) {
            *yi = row.iter().map(|&(j, p)| p * x[j]).sum();
        }
    }

    /// `xᵀ B`.
    pub fn apply_b_transposed(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n()];
        for (xi, row) in x.iter().zip(&self.rows) {
            for &(j, p) in row {
                y[j] += xi * p;
            }
        }
        y
    }

    /// Diagonal of `B^2`.
    pub fn b_squared_diagonal(&self) -> Vec<f64> {
        (0..self.n())
            .map(|i| {
                self.rows[i]
                    .iter()
                    .map(|&(k, p)| {
                        let back = &self.rows[k];
                        back.binary_search_by_key(&i, |&(j, _)| j).map_or(0.0, |pos| p * back[pos].1)
                    })
                    .sum()
            })
            .collect()
    }

    /// `B^2` as a matrix-free operator.
    pub fn b_squared_operator(&self) -> BSquared<'_> {
        BSquared { model: self }
    }

    pub(crate) fn with_rows(&self, rows: Vec<SparseRow>, eos: Vec<f64>) -> Result<Self> {
        Self::from_parts(self.vocab.clone(), rows, eos, self.counts.clone())
    }
}

/// `B^2` applied as `B (B x)`.
pub struct BSquared<'a> {
    model: &'a TransitionModel,
}

impl LinearOperator<f64> for BSquared<'_> {
    fn dim(&self) -> usize {
        self.model.n()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let mut tmp = vec![0.0; x.len()];
        self.model.apply_b(x, &mut tmp);
        self.model.apply_b(&tmp, y);
    }

    fn radius_bound(&self) -> f64 {
        // row sums of B^2 are B applied to the row sums of B
        let sums: Vec<f64> = self.model.rows.iter().map(|r| r.iter().map(|e| e.1).sum()).collect();
        let mut out = vec![0.0; sums.len()];
        self.model.apply_b(&sums, &mut out);
        out.into_iter().fold(0.0, f64::max)
    }
}

/// Counts bigrams per sequence (one EOS event at each sequence end) and
/// normalises each row. Tokens never observed get `b_i = 1`.
pub fn build_model<S: AsRef<str>>(corpus: &[Vec<S>], vocab: Vocabulary) -> Result<TransitionModel> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let n = vocab.len();
    let mut counts: Vec<HashMap<usize, u64>> = vec![HashMap::new(); n];
    for seq in corpus {
        if seq.is_empty() {
            return Err(Error::InvalidArgument("empty sequence in corpus".into()));
        }
        let ids = vocab.encode(seq)?;
        for w in ids.windows(2) {
            *counts[w[0]].entry(w[1]).or_default() += 1;
        }
        *counts[*ids.last().expect("non-empty")].entry(n).or_default() += 1;
    }

    let mut rows = Vec::with_capacity(n);
    let mut eos = Vec::with_capacity(n);
    let mut count_rows = Vec::with_capacity(n);
    for row_counts in counts {
        let mut entries: Vec<(usize, u64)> = row_counts.into_iter().collect();
        entries.sort_unstable();
        let total: u64 = entries.iter().map(|e| e.1).sum();
        if total == 0 {
            rows.push(Vec::new());
            eos.push(1.0);
        } else {
            let total = total as f64;
            let mut row = Vec::with_capacity(entries.len());
            let mut end = 0.0;
            for &(j, c) in &entries {
                if j == n {
                    end = c as f64 / total;
                } else {
                    row.push((j, c as f64 / total));
                }
            }
            rows.push(row);
            eos.push(end);
        }
        count_rows.push(entries);
    }
    TransitionModel::from_parts(vocab, rows, eos, count_rows)
}

/// `(1/n^2) Σ 1(B_ij > 0)` with a strict positivity test.
pub fn sparsity(b: &Matrix<f64>) -> f64 {
    let n = b.rows() as f64;
    b.as_slice().iter().filter(|&&v| v > 0.0).count() as f64 / (n * n)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ArpSeries {
    pub value: f64,
    pub converged: bool,
    pub terms_used: usize,
}

/// `Σ_k tr(B^{2k}) / (zeta n)^k`, stopping at the first term below `eps`.
///
/// Keeps a dense running power `M_k = (B^2 / zeta n)^k` and advances it by two
/// sparse multiplications per term. A model without transitions (`zeta = 0`)
/// has ARP 0 by convention.
pub fn arp_series(model: &TransitionModel, k_max: usize, eps: f64) -> Result<ArpSeries> {
    if k_max == 0 {
        return Err(Error::InvalidArgument("k_max must be at least 1".into()));
    }
    if model.zeta() == 0.0 {
        return Ok(ArpSeries { value: 0.0, converged: true, terms_used: 0 });
    }
    let n = model.n();
    let scale = 1.0 / model.zeta_n();
    let mut power = vec![0.0; n * n];
    for i in 0..n {
        power[i * n + i] = 1.0;
    }
    let mut scratch = vec![0.0; n * n];
    let mut value = 0.0;
    for k in 1..=k_max {
        sparse_times_dense(model.b_rows(), &power, &mut scratch, n, 1.0);
        sparse_times_dense(model.b_rows(), &scratch, &mut power, n, scale);
        let term: f64 = (0..n).map(|i| power[i * n + i]).sum();
        value += term;
        if term < eps {
            return Ok(ArpSeries { value, converged: true, terms_used: k });
        }
    }
    Ok(ArpSeries { value, converged: false, terms_used: k_max })
}

/// `out = scale * B * dense` with `dense` n×n row-major.
fn sparse_times_dense(rows: &[SparseRow], dense: &[f64], out: &mut [f64], n: usize, scale: f64) {
    out.par_chunks_mut(n).zip(rows.par_iter()).for_each(|(out_row, row)| {
        out_row.iter_mut().for_each(|v| *v = 0.0);
        for &(k, p) in row {
            let w = p * scale;
            for (o, &d) in out_row.iter_mut().zip(&dense[k * n..(k + 1) * n]) {
                *o += w * d;
            }
        }
    });
}

/// Perron root of `B^2` by matrix-free power iteration.
pub fn spectral_radius_b2(model: &TransitionModel) -> Result<f64> {
    linalg::spectral_radius(&model.b_squared_operator(), RHO_TOL, RHO_MAX_ITER)
}

/// Checks `zeta n > rho(B^2)`; returns `rho(B^2)` on success.
pub fn check_spectral_precondition(model: &TransitionModel) -> Result<f64> {
    let zeta_n = model.zeta_n();
    let rho = spectral_radius_b2(model).map_err(|e| match e {
        Error::ConvergenceFailure { .. } => {
            Error::PreconditionViolated(Precondition::SpectralRadiusUnverified { zeta_n })
        }
        other => other,
    })?;
    if zeta_n <= rho {
        return Err(Error::PreconditionViolated(Precondition::SpectralRadius { zeta_n, rho }));
    }
    Ok(rho)
}

/// `tr(B^2 (zeta n I - B^2)^{-1})`, computed as the trace of the solution of
/// `(zeta n I - B^2) X = B^2`. Dense: intended for n up to a few thousand.
pub fn arp_closed_form(model: &TransitionModel) -> Result<f64> {
    if model.zeta() == 0.0 {
        return Ok(0.0);
    }
    check_spectral_precondition(model)?;
    let b2 = model.b_squared_dense();
    let shifted = b2.shifted_negation(model.zeta_n());
    let x = linalg::solve_linear(&shifted, &b2)?;
    Ok(x.trace())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(lines: &[&str]) -> Vec<Vec<String>> {
        lines.iter().map(|l| l.split_whitespace().map(str::to_owned).collect()).collect()
    }

    fn model_of(lines: &[&str]) -> TransitionModel {
        let c = corpus(lines);
        build_model(&c, Vocabulary::from_sequences(&c)).unwrap()
    }

    fn two_state() -> TransitionModel {
        let b = Matrix::from_rows(&[vec![0.0, 0.5], vec![0.5, 0.0]]).unwrap();
        TransitionModel::from_sub_stochastic(&b).unwrap()
    }

    fn swap() -> TransitionModel {
        let b = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        TransitionModel::from_sub_stochastic(&b).unwrap()
    }

    #[test]
    fn repeated_pair_corpus() {
        let m = model_of(&["a b", "a b"]);
        assert_eq!(m.b_rows()[0], vec![(1, 1.0)]);
        assert_eq!(m.eos_probs(), &[0.0, 1.0]);
        assert!(m.b_rows()[1].is_empty());
        assert_eq!(m.zeta(), 0.25);
        assert_eq!(m.counts()[0], vec![(1, 2)]);
        assert_eq!(m.counts()[1], vec![(2, 2)]);
    }

    #[test]
    fn single_token_corpus() {
        let m = model_of(&["a"]);
        assert!(m.b_rows()[0].is_empty());
        assert_eq!(m.eos_probs(), &[1.0]);
        assert_eq!(m.zeta(), 0.0);
    }

    #[test]
    fn alternating_corpus() {
        let m = model_of(&["a b a b a b"]);
        assert_eq!(m.prob(0, 1), 1.0);
        assert!((m.prob(1, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.prob(1, 2) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn unseen_vocab_token_is_dangling() {
        let c = corpus(&["a b"]);
        let vocab = Vocabulary::new(vec!["a".into(), "b".into(), "z".into()]).unwrap();
        let m = build_model(&c, vocab).unwrap();
        assert_eq!(m.eos_probs()[2], 1.0);
        assert!(m.b_rows()[2].is_empty());
    }

    #[test]
    fn build_errors() {
        let empty: Vec<Vec<String>> = Vec::new();
        assert!(matches!(build_model(&empty, Vocabulary::numbered(1)), Err(Error::EmptyCorpus)));
        let c = corpus(&["a q"]);
        let vocab = Vocabulary::new(vec!["a".into()]).unwrap();
        assert!(matches!(build_model(&c, vocab), Err(Error::UnknownToken(t)) if t == "q"));
    }

    #[test]
    fn sparsity_examples() {
        assert_eq!(sparsity(&Matrix::zeros(3, 3)), 0.0);
        assert_eq!(sparsity(&Matrix::identity(4)), 0.25);
        let b = Matrix::from_rows(&[vec![0.0, 0.5], vec![0.5, 0.0]]).unwrap();
        assert_eq!(sparsity(&b), 0.5);
    }

    #[test]
    fn series_examples() {
        let zero = TransitionModel::from_sub_stochastic(&Matrix::zeros(3, 3)).unwrap();
        let s = arp_series(&zero, 100, 1e-12).unwrap();
        assert_eq!((s.value, s.converged), (0.0, true));

        let s = arp_series(&two_state(), SERIES_K_MAX, 1e-12).unwrap();
        assert!(s.converged);
        assert!((s.value - 2.0 / 3.0).abs() < 1e-12, "{}", s.value);

        let s = arp_series(&swap(), 50, 1e-12).unwrap();
        assert!(!s.converged);
        assert_eq!(s.terms_used, 50);
        assert_eq!(s.value, 100.0);
    }

    #[test]
    fn closed_form_examples() {
        let zero = TransitionModel::from_sub_stochastic(&Matrix::zeros(2, 2)).unwrap();
        assert_eq!(arp_closed_form(&zero).unwrap(), 0.0);
        assert!((arp_closed_form(&two_state()).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        match arp_closed_form(&swap()) {
            Err(Error::PreconditionViolated(Precondition::SpectralRadius { zeta_n, rho })) => {
                assert_eq!(zeta_n, 1.0);
                assert_eq!(rho, 1.0);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn b_squared_helpers_agree_with_dense() {
        let m = model_of(&["a b c a b", "c a c b", "b b a"]);
        let dense = m.b_dense();
        let sq = dense.matmul(&dense).unwrap();
        assert!(sq.sub(&m.b_squared_dense()).unwrap().max_abs() < 1e-15);
        let diag = m.b_squared_diagonal();
        for i in 0..m.n() {
            assert!((diag[i] - sq[(i, i)]).abs() < 1e-15);
        }
        let ones = vec![1.0; m.n()];
        let mut y = vec![0.0; m.n()];
        m.b_squared_operator().apply(&ones, &mut y);
        for (a, b) in y.iter().zip(sq.row_sums()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn from_parts_validates_rows() {
        let vocab = Vocabulary::numbered(2);
        let bad = TransitionModel::from_parts(vocab, vec![vec![(1, 0.5)], vec![]], vec![0.4, 1.0], vec![]);
        assert!(bad.is_err());
    }
}
