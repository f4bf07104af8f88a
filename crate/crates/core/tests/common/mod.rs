#![allow(dead_code)]

use arplab::{Matrix, TransitionModel};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Rows drawn uniformly from the simplex on a random support, then scaled by a
/// factor in (0, 0.95].
pub fn random_sub_stochastic<R: Rng>(rng: &mut R, n: usize) -> Matrix {
    let mut b = Matrix::zeros(n, n);
    for i in 0..n {
        let k = rng.gen_range(1..=n);
        let cols = index::sample(rng, n, k).into_vec();
        let w: Vec<f64> = cols.iter().map(|_| -rng.gen_range(f64::EPSILON..1.0).ln()).collect();
        let total: f64 = w.iter().sum();
        let scale = rng.gen_range(0.05..=0.95);
        for (&j, x) in cols.iter().zip(w) {
            b[(i, j)] = scale * x / total;
        }
    }
    b
}

pub fn random_model<R: Rng>(rng: &mut R, max_n: usize) -> TransitionModel {
    let n = rng.gen_range(1..=max_n);
    TransitionModel::from_sub_stochastic(&random_sub_stochastic(rng, n)).unwrap()
}

pub fn random_square<R: Rng>(rng: &mut R, n: usize) -> Matrix {
    let data = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Matrix::new(n, n, data).unwrap()
}

/// rep-w from its definition: position t (0-based, t >= 1) counts when its
/// token equals any of the previous w tokens.
pub fn rep_w_oracle(s: &[u8], w: usize) -> f64 {
    let mut hits = 0;
    for t in 1..s.len() {
        let mut found = false;
        for k in 1..=w {
            if k <= t && s[t - k] == s[t] {
                found = true;
            }
        }
        if found {
            hits += 1;
        }
    }
    hits as f64 / s.len() as f64
}

pub fn rep_n_oracle(s: &[u8], n: usize) -> f64 {
    let grams: Vec<&[u8]> = (0..=s.len() - n).map(|i| &s[i..i + n]).collect();
    let mut distinct: Vec<&[u8]> = Vec::new();
    for g in &grams {
        if !distinct.contains(g) {
            distinct.push(g);
        }
    }
    1.0 - distinct.len() as f64 / grams.len() as f64
}

/// Position i counts when the bigram starting or ending at i also occurs at
/// another position.
pub fn rep_r_oracle(s: &[u8]) -> f64 {
    if s.is_empty() {
        return 0.0;
    }
    let bigram_repeats =
        |i: usize| i + 1 < s.len() && (0..s.len() - 1).any(|j| j != i && s[j] == s[i] && s[j + 1] == s[i + 1]);
    let hits = (0..s.len()).filter(|&i| bigram_repeats(i) || (i > 0 && bigram_repeats(i - 1))).count();
    hits as f64 / s.len() as f64
}

/// Two adjacent identical loops: r < t < u, the spans s[r..=t] and s[t..=u]
/// are equal and each starts and ends on the same token.
pub fn adjacent_loops_oracle(s: &[u8]) -> bool {
    let len = s.len();
    for r in 0..len {
        for t in r + 1..len {
            let u = 2 * t - r;
            if u < len && s[r] == s[t] && s[t] == s[u] && s[r..=t] == s[t..=u] {
                return true;
            }
        }
    }
    false
}

pub fn all_sequences(alphabet: u8, max_len: usize) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    let mut layer: Vec<Vec<u8>> = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &layer {
            for a in 0..alphabet {
                let mut t = s.clone();
                t.push(a);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        layer = next;
    }
    out
}
