//! Byte-pair encoding and Rebalanced Encoding (RE).
//!
//! Subword pieces that continue into the next piece carry the `@@` suffix.
//! RE joins a high-inflow pair `(u, v)` into the single token `u==v` and then
//! deletes every `@@==`, so a subword pair fuses back into plain text
//! (`de@@ crease` becomes `decrease`) while a word pair keeps the `==` joint
//! (`involved in` becomes `involved==in`).

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::hash::Hash;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};

pub const CONTINUATION: &str = "@@";
pub const JOIN: &str = "==";
pub const END_OF_WORD: &str = "</w>";
/// Merge operations learned by default, the usual subword vocabulary budget.
pub const DEFAULT_BPE_MERGES: usize = 10_000;
/// BPE stops once the best pair is seen fewer times than this.
const BPE_MIN_FREQUENCY: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeKind {
    Bpe,
    Re,
}

impl fmt::Display for MergeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MergeKind::Bpe => "bpe",
            MergeKind::Re => "re",
        })
    }
}

impl FromStr for MergeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bpe" => Ok(MergeKind::Bpe),
            "re" => Ok(MergeKind::Re),
            other => Err(Error::Schema(format!("unknown merge table kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct MergeRule {
    pub left: String,
    pub right: String,
    /// Learning iteration that produced the rule, starting at 1.
    pub step: usize,
}

/// Ordered merge rules; application order is list order and a pair appears once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeTable {
    kind: MergeKind,
    rules: Vec<MergeRule>,
    seen: HashSet<(String, String)>,
}

impl MergeTable {
    pub fn new(kind: MergeKind) -> Self {
        Self { kind, rules: Vec::new(), seen: HashSet::new() }
    }

    pub fn from_rules(kind: MergeKind, rules: Vec<MergeRule>) -> Result<Self> {
        let mut table = Self::new(kind);
        for rule in rules {
            if rule.left.is_empty() || rule.right.is_empty() {
                return Err(Error::InvalidArgument("merge rule with an empty side".into()));
            }
            let shown = format!("({}, {})", rule.left, rule.right);
            if !table.push(rule) {
                return Err(Error::InvalidArgument(format!("duplicate merge rule {shown}")));
            }
        }
        Ok(table)
    }

    /// Appends a rule; returns false and drops it when the pair is already present.
    pub fn push(&mut self, rule: MergeRule) -> bool {
        if !self.seen.insert((rule.left.clone(), rule.right.clone())) {
            return false;
        }
        self.rules.push(rule);
        true
    }

    pub fn kind(&self) -> MergeKind {
        self.kind
    }

    pub fn rules(&self) -> &[MergeRule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

/// `left==right` with every `@@==` removed.
pub fn join_tokens(left: &str, right: &str) -> String {
    format!("{left}{JOIN}{right}").replace("@@==", "")
}

#[derive(Default)]
struct Interner {
    ids: HashMap<String, u32>,
    names: Vec<String>,
}

impl Interner {
    fn intern(&mut self, s: &str) -> u32 {
        if let Some(&id) = self.ids.get(s) {
            return id;
        }
        let id = u32::try_from(self.names.len()).expect("fewer than 2^32 symbols");
        self.ids.insert(s.to_owned(), id);
        self.names.push(s.to_owned());
        id
    }

    fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }
}

/// Learns character-level BPE: repeatedly merges the most frequent adjacent
/// symbol pair (ties to the lexicographically smaller pair) inside words whose
/// last character carries `</w>`.
pub fn learn_bpe<S: AsRef<str>>(corpus: &[Vec<S>], num_merges: usize) -> Result<MergeTable> {
    let mut freq: HashMap<&str, u64> = HashMap::new();
    for w in corpus.iter().flatten() {
        *freq.entry(w.as_ref()).or_default() += 1;
    }
    if freq.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut words: Vec<(&str, u64)> = freq.into_iter().collect();
    words.sort_unstable();

    let mut symbols = Interner::default();
    let mut segs: Vec<Vec<u32>> = words.iter().map(|(w, _)| initial_symbols(w, &mut symbols)).collect();
    let weights: Vec<u64> = words.iter().map(|w| w.1).collect();

    let mut pairs: HashMap<(u32, u32), u64> = HashMap::new();
    let mut where_: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (k, seg) in segs.iter().enumerate() {
        for p in seg.windows(2) {
            *pairs.entry((p[0], p[1])).or_default() += weights[k];
            where_.entry((p[0], p[1])).or_default().insert(k);
        }
    }

    let mut table = MergeTable::new(MergeKind::Bpe);
    for step in 1..=num_merges {
        let best = pairs
            .iter()
            .filter(|e| *e.1 > 0)
            .max_by(|a, b| {
                a.1.cmp(b.1).then_with(|| {
                    (symbols.name(b.0 .0), symbols.name(b.0 .1)).cmp(&(symbols.name(a.0 .0), symbols.name(a.0 .1)))
                })
            })
            .map(|(&p, &c)| (p, c));
        let Some(((left, right), count)) = best else { break };
        if count < BPE_MIN_FREQUENCY {
            break;
        }
        let merged = symbols.intern(&format!("{}{}", symbols.name(left), symbols.name(right)));
        table.push(MergeRule { left: symbols.name(left).to_owned(), right: symbols.name(right).to_owned(), step });

        let mut affected: Vec<usize> = where_.remove(&(left, right)).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        for k in affected {
            for p in segs[k].windows(2) {
                *pairs.get_mut(&(p[0], p[1])).expect("counted") -= weights[k];
            }
            merge_pair(&mut segs[k], left, right, merged);
            for p in segs[k].windows(2) {
                *pairs.entry((p[0], p[1])).or_default() += weights[k];
                where_.entry((p[0], p[1])).or_default().insert(k);
            }
        }
        pairs.remove(&(left, right));
    }
    Ok(table)
}

fn initial_symbols(word: &str, symbols: &mut Interner) -> Vec<u32> {
    let chars: Vec<char> = word.chars().collect();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 == chars.len() {
                symbols.intern(&format!("{c}{END_OF_WORD}"))
            } else {
                symbols.intern(&c.to_string())
            }
        })
        .collect()
}

/// Merges every non-overlapping `(left, right)` occurrence, left to right.
fn merge_pair(seg: &mut Vec<u32>, left: u32, right: u32, merged: u32) {
    let mut out = Vec::with_capacity(seg.len());
    let mut i = 0;
    while i < seg.len() {
        if i + 1 < seg.len() && seg[i] == left && seg[i + 1] == right {
            out.push(merged);
            i += 2;
        } else {
            out.push(seg[i]);
            i += 1;
        }
    }
    *seg = out;
}

/// Applies a BPE table word by word, caching segmentations.
pub struct BpeCodec {
    ranks: HashMap<(String, String), usize>,
    cache: HashMap<String, Vec<String>>,
}

impl BpeCodec {
    pub fn new(table: &MergeTable) -> Self {
        let ranks = table.rules().iter().enumerate().map(|(i, r)| ((r.left.clone(), r.right.clone()), i)).collect();
        Self { ranks, cache: HashMap::new() }
    }

    /// Pieces of one word; all but the last end in `@@`.
    pub fn encode_word(&mut self, word: &str) -> Vec<String> {
        if let Some(hit) = self.cache.get(word) {
            return hit.clone();
        }
        let chars: Vec<char> = word.chars().collect();
        let mut pieces: Vec<String> = chars
            .iter()
            .enumerate()
            .map(|(i, c)| if i + 1 == chars.len() { format!("{c}{END_OF_WORD}") } else { c.to_string() })
            .collect();
        loop {
            let best = pieces
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())).map(|&r| (r, p[0].clone(), p[1].clone())))
                .min();
            let Some((_, left, right)) = best else { break };
            let mut out = Vec::with_capacity(pieces.len());
            let mut i = 0;
            while i < pieces.len() {
                if i + 1 < pieces.len() && pieces[i] == left && pieces[i + 1] == right {
                    out.push(format!("{left}{right}"));
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut pieces[i]));
                    i += 1;
                }
            }
            pieces = out;
        }
        let last = pieces.len() - 1;
        let tokens: Vec<String> = pieces
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                if i == last {
                    p.strip_suffix(END_OF_WORD).unwrap_or(&p).to_owned()
                } else {
                    format!("{p}{CONTINUATION}")
                }
            })
            .collect();
        self.cache.insert(word.to_owned(), tokens.clone());
        tokens
    }

    pub fn encode<S: AsRef<str>>(&mut self, words: &[S]) -> Vec<String> {
        words.iter().filter(|w| !w.as_ref().is_empty()).flat_map(|w| self.encode_word(w.as_ref())).collect()
    }
}

pub fn apply_bpe<S: AsRef<str>>(words: &[S], table: &MergeTable) -> Vec<String> {
    BpeCodec::new(table).encode(words)
}

/// Rule lookup for applying an RE table to token sequences.
pub struct ReCodec {
    index: HashMap<(String, String), usize>,
    pairs: Vec<(String, String)>,
    merged: Vec<String>,
}

impl ReCodec {
    pub fn new(table: &MergeTable) -> Self {
        let pairs: Vec<(String, String)> = table.rules().iter().map(|r| (r.left.clone(), r.right.clone())).collect();
        let index = pairs.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        let merged = pairs.iter().map(|(l, r)| join_tokens(l, r)).collect();
        Self { index, pairs, merged }
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<String> {
        let mut seq: Vec<String> = tokens.iter().map(|t| t.as_ref().to_owned()).collect();
        apply_rules(&mut seq, &self.index, &self.pairs, &self.merged);
        seq
    }
}

/// Applies rules in table order, each as one left-to-right scan over a live
/// sequence that re-examines the merged position. A rule whose pair is absent
/// is a no-op, so only rules present in the sequence are visited.
fn apply_rules<T: Eq + Hash + Clone>(seq: &mut Vec<T>, index: &HashMap<(T, T), usize>, pairs: &[(T, T)], merged: &[T]) {
    let mut next = 0;
    loop {
        let found = seq
            .windows(2)
            .filter_map(|p| index.get(&(p[0].clone(), p[1].clone())).copied())
            .filter(|&r| r >= next)
            .min();
        let Some(r) = found else { break };
        let (left, right) = &pairs[r];
        let mut out: Vec<T> = Vec::with_capacity(seq.len());
        for t in seq.drain(..) {
            if t == *right && out.last() == Some(left) {
                out.pop();
                out.push(merged[r].clone());
            } else {
                out.push(t);
            }
        }
        *seq = out;
        next = r + 1;
    }
}

pub fn apply_re<S: AsRef<str>>(tokens: &[S], table: &MergeTable) -> Vec<String> {
    ReCodec::new(table).encode(tokens)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReStep {
    pub step: usize,
    /// Largest entry of the pair-transition matrix before this step's merges.
    pub max_transition: f64,
    pub new_rules: usize,
    pub tokens_before: usize,
    pub tokens_after: usize,
    pub vocab_before: usize,
}

/// Outcome of RE learning: the table, the re-encoded training sequences and a
/// per-step log.
#[derive(Debug, Clone, PartialEq)]
pub struct ReLearning {
    pub table: MergeTable,
    pub encoded: Vec<Vec<String>>,
    pub steps: Vec<ReStep>,
    /// True when the largest transition fell to `gamma` or below within the step cap.
    pub converged: bool,
    /// Largest transition of the final encoding.
    pub final_max: f64,
}

/// RE on one flat token stream, pairing across every position.
pub fn learn_re<S: AsRef<str>>(words: &[S], n_steps: usize, gamma: f64) -> Result<ReLearning> {
    learn_re_sequences(&[words.iter().map(|w| w.as_ref().to_owned()).collect::<Vec<_>>()], n_steps, gamma)
}

/// RE over separate sequences; pairs never cross a sequence boundary.
pub fn learn_re_sequences<S: AsRef<str>>(sequences: &[Vec<S>], n_steps: usize, gamma: f64) -> Result<ReLearning> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidGamma(gamma));
    }
    if n_steps == 0 {
        return Err(Error::InvalidArgument("n_steps must be at least 1".into()));
    }
    let mut names = Interner::default();
    let mut seqs: Vec<Vec<u32>> =
        sequences.iter().map(|s| s.iter().map(|t| names.intern(t.as_ref())).collect()).collect();

    let mut table = MergeTable::new(MergeKind::Re);
    let mut index: HashMap<(u32, u32), usize> = HashMap::new();
    let mut pairs: Vec<(u32, u32)> = Vec::new();
    let mut merged: Vec<u32> = Vec::new();
    let mut steps = Vec::new();
    let mut converged = false;

    for step in 1..=n_steps {
        let (max, mut candidates, vocab) = transition_stats(&seqs, gamma);
        if max <= gamma {
            converged = true;
            break;
        }
        candidates.sort_by(|a, b| (names.name(a.0), names.name(a.1)).cmp(&(names.name(b.0), names.name(b.1))));
        let mut new_rules = 0;
        for (u, v) in candidates {
            let rule = MergeRule { left: names.name(u).to_owned(), right: names.name(v).to_owned(), step };
            if table.push(rule) {
                index.insert((u, v), pairs.len());
                pairs.push((u, v));
                let joined = join_tokens(names.name(u), names.name(v));
                merged.push(names.intern(&joined));
                new_rules += 1;
            }
        }
        let tokens_before: usize = seqs.iter().map(Vec::len).sum();
        seqs.par_iter_mut().for_each(|s| apply_rules(s, &index, &pairs, &merged));
        let tokens_after: usize = seqs.iter().map(Vec::len).sum();
        steps.push(ReStep { step, max_transition: max, new_rules, tokens_before, tokens_after, vocab_before: vocab });
        if new_rules == 0 && tokens_after == tokens_before {
            break;
        }
    }
    let final_max = transition_stats(&seqs, gamma).0;
    converged = converged || final_max <= gamma;
    let encoded = seqs.iter().map(|s| s.iter().map(|&t| names.name(t).to_owned()).collect()).collect();
    Ok(ReLearning { table, encoded, steps, converged, final_max })
}

/// Largest `count(u, v) / max(count(u, .), 1)`, the pairs above `gamma`, and
/// the number of distinct tokens.
fn transition_stats(seqs: &[Vec<u32>], gamma: f64) -> (f64, Vec<(u32, u32)>, usize) {
    let mut pair_counts: HashMap<(u32, u32), u32> = HashMap::new();
    let mut left_counts: HashMap<u32, u32> = HashMap::new();
    let mut vocab: HashSet<u32> = HashSet::new();
    for s in seqs {
        vocab.extend(s.iter().copied());
        for p in s.windows(2) {
            *pair_counts.entry((p[0], p[1])).or_default() += 1;
            *left_counts.entry(p[0]).or_default() += 1;
        }
    }
    let mut max = 0.0f64;
    let mut above = Vec::new();
    for (&(u, v), &c) in &pair_counts {
        let m = f64::from(c) / f64::from(left_counts[&u].max(1));
        max = max.max(m);
        if m > gamma {
            above.push((u, v));
        }
    }
    (max, above, vocab.len())
}

/// Largest pair-transition probability of a set of sequences, as RE measures it.
pub fn max_transition<S: AsRef<str>>(sequences: &[Vec<S>]) -> f64 {
    let mut names = Interner::default();
    let seqs: Vec<Vec<u32>> = sequences.iter().map(|s| s.iter().map(|t| names.intern(t.as_ref())).collect()).collect();
    transition_stats(&seqs, 1.0).0
}

/// Inverts the markers: `@@` continues the word into the next token and `==`
/// separates words inside a token.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> Result<Vec<String>> {
    let mut words = Vec::new();
    let mut current = String::new();
    let mut open = false;
    for tok in tokens {
        let tok = tok.as_ref();
        let (body, continues) = match tok.strip_suffix(CONTINUATION) {
            Some(b) => (b, true),
            None => (tok, false),
        };
        let mut parts = body.split(JOIN);
        current.push_str(parts.next().unwrap_or(""));
        for part in parts {
            finish_word(&mut words, &mut current, tok)?;
            current.push_str(part);
        }
        open = continues;
        if !continues {
            finish_word(&mut words, &mut current, tok)?;
        }
    }
    if open {
        return Err(Error::MalformedMarkers(format!("sequence ends with a {CONTINUATION} continuation")));
    }
    Ok(words)
}

fn finish_word(words: &mut Vec<String>, current: &mut String, tok: &str) -> Result<()> {
    if current.is_empty() {
        return Err(Error::MalformedMarkers(format!("empty word at token {tok:?}")));
    }
    words.push(std::mem::take(current));
    Ok(())
}
