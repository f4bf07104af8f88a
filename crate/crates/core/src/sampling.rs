//! Decoding transforms on next-token distributions and sequence generation
//! from a (transformed) Markov model.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::markov::{SparseRow, TransitionModel};
use crate::scalar::Real;

/// Probability vector over the vocabulary plus EOS (last index).
#[derive(Debug, Clone, PartialEq)]
pub struct Dist<T> {
    probs: Vec<T>,
}

impl<T: Real> Dist<T> {
    pub fn new(probs: Vec<T>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("no outcomes".into()));
        }
        let mut total = T::zero();
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p < T::zero() {
                return Err(Error::InvalidDistribution(format!("entry {i} is {p}")));
            }
            total += p;
        }
        if (total - T::one()).abs() > T::simplex_tol() {
            return Err(Error::InvalidDistribution(format!("entries sum to {total}")));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn into_vec(self) -> Vec<T> {
        self.probs
    }

    /// `Σ p_i^2`, the collision probability.
    pub fn collision(&self) -> T {
        self.probs.iter().map(|&p| p * p).sum()
    }

    /// Most probable outcome, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// One decoding step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    Stochastic,
    Greedy,
    TopK(usize),
    Nucleus(f64),
    Temperature(f64),
    LengthPenalty(f64),
}

impl Transform {
    fn validate(self) -> std::result::Result<Self, String> {
        match self {
            Transform::TopK(0) => Err("top-k needs k >= 1".into()),
            Transform::Nucleus(p) if !(p > 0.0 && p <= 1.0) => Err(format!("nucleus p = {p} outside (0, 1]")),
            Transform::Temperature(t) if !(t > 0.0 && t.is_finite()) => {
                Err(format!("temperature {t} must be positive"))
            }
            Transform::LengthPenalty(b) if !b.is_finite() => Err(format!("length penalty {b} is not finite")),
            ok => Ok(ok),
        }
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::Stochastic => f.write_str("stochastic"),
            Transform::Greedy => f.write_str("greedy"),
            Transform::TopK(k) => write!(f, "topk:{k}"),
            Transform::Nucleus(p) => write!(f, "nucleus:{p}"),
            Transform::Temperature(t) => write!(f, "temp:{t}"),
            Transform::LengthPenalty(b) => write!(f, "lp:{b}"),
        }
    }
}

/// Transforms applied left to right.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformSpec {
    chain: Vec<Transform>,
}

impl TransformSpec {
    pub fn new(chain: Vec<Transform>) -> Result<Self> {
        if chain.is_empty() {
            return Err(Error::InvalidTransform { spec: String::new(), reason: "empty chain".into() });
        }
        for t in &chain {
            t.validate().map_err(|reason| Error::InvalidTransform { spec: t.to_string(), reason })?;
        }
        Ok(Self { chain })
    }

    pub fn single(t: Transform) -> Result<Self> {
        Self::new(vec![t])
    }

    pub fn stochastic() -> Self {
        Self { chain: vec![Transform::Stochastic] }
    }

    pub fn temperature(t: f64) -> Result<Self> {
        Self::single(Transform::Temperature(t))
    }

    pub fn chain(&self) -> &[Transform] {
        &self.chain
    }

    pub fn is_identity(&self) -> bool {
        self.chain.iter().all(|t| *t == Transform::Stochastic)
    }
}

impl fmt::Display for TransformSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.chain.iter().enumerate() {
            if i > 0 {
                f.write_str("+")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

impl FromStr for TransformSpec {
    type Err = Error;

    /// `kind[:param]` joined by `+`, e.g. `topk:10+temp:0.9`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |reason: String| Error::InvalidTransform { spec: s.to_owned(), reason };
        let mut chain = Vec::new();
        for part in s.split('+') {
            let part = part.trim();
            let (kind, param) = match part.split_once(':') {
                Some((k, p)) => (k.trim(), Some(p.trim())),
                None => (part, None),
            };
            let real = |name: &str| -> Result<f64> {
                let p = param.ok_or_else(|| bad(format!("{name} needs a parameter")))?;
                p.parse().map_err(|_| bad(format!("{name} parameter {p:?} is not a number")))
            };
            let t = match kind {
                "stochastic" | "greedy" if param.is_some() => return Err(bad(format!("{kind} takes no parameter"))),
                "stochastic" => Transform::Stochastic,
                "greedy" => Transform::Greedy,
                "topk" => {
                    let p = param.ok_or_else(|| bad("topk needs a parameter".into()))?;
                    Transform::TopK(p.parse().map_err(|_| bad(format!("topk parameter {p:?} is not a count")))?)
                }
                "nucleus" => Transform::Nucleus(real("nucleus")?),
                "temp" => Transform::Temperature(real("temp")?),
                "lp" => Transform::LengthPenalty(real("lp")?),
                other => return Err(bad(format!("unknown transform {other:?}"))),
            };
            chain.push(t.validate().map_err(bad)?);
        }
        if chain.is_empty() {
            return Err(bad("empty chain".into()));
        }
        Ok(Self { chain })
    }
}

/// Applies `spec` to `d`, whose last index is EOS.
pub fn apply_transform<T: Real>(d: &Dist<T>, spec: &TransformSpec) -> Result<Dist<T>> {
    let eos = d.len() - 1;
    let mut support: Vec<(usize, T)> =
        d.probs.iter().enumerate().filter(|(_, &p)| p > T::zero()).map(|(i, &p)| (i, p)).collect();
    transform_support(&mut support, eos, spec)?;
    let mut probs = vec![T::zero(); d.len()];
    for (i, p) in support {
        probs[i] = p;
    }
    Ok(Dist { probs })
}

/// Transforms a strictly positive support held in ascending index order.
pub(crate) fn transform_support<T: Real>(
    support: &mut Vec<(usize, T)>,
    eos: usize,
    spec: &TransformSpec,
) -> Result<()> {
    for &t in &spec.chain {
        if support.is_empty() {
            return Err(Error::DegenerateSupport);
        }
        match t {
            Transform::Stochastic => {}
            Transform::Greedy => {
                let mut best = 0;
                for (k, e) in support.iter().enumerate() {
                    if e.1 > support[best].1 {
                        best = k;
                    }
                }
                *support = vec![(support[best].0, T::one())];
            }
            Transform::TopK(k) => {
                let keep = ranked(support).into_iter().take(k).collect();
                retain_ranked(support, keep);
            }
            Transform::Nucleus(p) => {
                let target = T::lit(p);
                let mut cumulative = T::zero();
                let mut keep = Vec::new();
                for idx in ranked(support) {
                    keep.push(idx);
                    cumulative += support[idx].1;
                    if cumulative >= target {
                        break;
                    }
                }
                retain_ranked(support, keep);
            }
            Transform::Temperature(temp) => {
                let inv = T::one() / T::lit(temp);
                softmax(support, |_, p| p.ln() * inv);
            }
            Transform::LengthPenalty(beta) => {
                let beta = T::lit(beta);
                softmax(support, |i, p| if i == eos { p.ln() + beta } else { p.ln() });
            }
        }
        support.retain(|e| e.1 > T::zero());
        if support.is_empty() {
            return Err(Error::DegenerateSupport);
        }
    }
    Ok(())
}

/// Positions of `support` by descending probability, lower index first on ties.
fn ranked<T: Real>(support: &[(usize, T)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..support.len()).collect();
    order.sort_by(|&a, &b| support[b].1.partial_cmp(&support[a].1).expect("finite").then(a.cmp(&b)));
    order
}

fn retain_ranked<T: Real>(support: &mut Vec<(usize, T)>, mut keep: Vec<usize>) {
    keep.sort_unstable();
    let kept: Vec<(usize, T)> = keep.into_iter().map(|k| support[k]).collect();
    let total: T = kept.iter().map(|e| e.1).sum();
    *support = kept.into_iter().map(|(i, p)| (i, p / total)).collect();
}

fn softmax<T: Real>(support: &mut [(usize, T)], logit: impl Fn(usize, T) -> T) {
    let logits: Vec<T> = support.iter().map(|&(i, p)| logit(i, p)).collect();
    let top = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (e, &l) in support.iter_mut().zip(&logits) {
        e.1 = (l - top).exp();
        total += e.1;
    }
    for e in support.iter_mut() {
        e.1 /= total;
    }
}

/// Applies `spec` row-wise to `[B_i., b_i]` and recomputes the sparsity.
pub fn transform_model(model: &TransitionModel, spec: &TransformSpec) -> Result<TransitionModel> {
    if spec.is_identity() {
        return Ok(model.clone());
    }
    let n = model.n();
    let mut rows: Vec<SparseRow> = Vec::with_capacity(n);
    let mut eos = Vec::with_capacity(n);
    for i in 0..n {
        let mut support = model.row_distribution(i);
        transform_support(&mut support, n, spec).map_err(|e| match e {
            Error::DegenerateSupport => {
                Error::InvalidDistribution(format!("row {:?} lost its support", model.vocab().token(i)))
            }
            other => other,
        })?;
        let end = match support.last() {
            Some(&(j, p)) if j == n => {
                support.pop();
                p
            }
            _ => 0.0,
        };
        eos.push(end);
        rows.push(support);
    }
    model.with_rows(rows, eos)
}

/// Samples sequences from a model under a decoding transform. Transformed rows
/// are prepared once, as cumulative tables over ascending ids with EOS last.
pub struct Generator<'a> {
    model: &'a TransitionModel,
    cumulative: Vec<Vec<(usize, f64)>>,
}

impl<'a> Generator<'a> {
    pub fn new(model: &'a TransitionModel, spec: &TransformSpec) -> Result<Self> {
        let n = model.n();
        let mut cumulative = Vec::with_capacity(n);
        for i in 0..n {
            let mut support = model.row_distribution(i);
            transform_support(&mut support, n, spec)?;
            let mut acc = 0.0;
            cumulative.push(
                support
                    .into_iter()
                    .map(|(j, p)| {
                        acc += p;
                        (j, acc)
                    })
                    .collect(),
            );
        }
        Ok(Self { model, cumulative })
    }

    /// Sequence of token ids starting at `start`, stopping at EOS or `max_len`.
    pub fn sample_ids<R: Rng>(&self, start: usize, max_len: usize, rng: &mut R) -> Result<Vec<usize>> {
        if max_len == 0 {
            return Err(Error::InvalidArgument("max_len must be at least 1".into()));
        }
        if start >= self.model.n() {
            return Err(Error::InvalidArgument(format!("start id {start} outside vocabulary")));
        }
        let eos = self.model.n();
        let mut seq = vec![start];
        while seq.len() < max_len {
            let table = &self.cumulative[*seq.last().expect("non-empty")];
            let u: f64 = rng.gen();
            let next = table.iter().find(|e| e.1 > u).or(table.last()).map_or(eos, |e| e.0);
            if next == eos {
                break;
            }
            seq.push(next);
        }
        Ok(seq)
    }

    pub fn sample(&self, start: &str, max_len: usize, seed: u64) -> Result<Vec<String>> {
        let id = self.model.vocab().id(start).ok_or_else(|| Error::UnknownToken(start.to_owned()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = self.sample_ids(id, max_len, &mut rng)?;
        Ok(ids.into_iter().map(|i| self.model.vocab().token(i).to_owned()).collect())
    }
}

/// One sequence from `start`, reproducible from `seed`.
pub fn generate(
    model: &TransitionModel,
    spec: &TransformSpec,
    start: &str,
    max_len: usize,
    seed: u64,
) -> Result<Vec<String>> {
    if model.vocab().id(start).is_none() {
        return Err(Error::UnknownToken(start.to_owned()));
    }
    Generator::new(model, spec)?.sample(start, max_len, seed)
}
