//! Desk-scale experiments on a Markov model: ARP against repetition metrics
//! over a temperature sweep, repetition by high-inflow pair count, and the
//! effect of Rebalanced Encoding. Results are plain rows with CSV writers.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bounds;
use crate::encoding::{self, ReLearning};
use crate::error::{Error, Result};
use crate::markov::{self, build_model, TransitionModel, Vocabulary};
use crate::metrics::{self, RepNAggregation};
use crate::sampling::{transform_model, Generator, TransformSpec};

/// Sequences drawn per sweep point.
pub const DEFAULT_SEQUENCES: usize = 500;
pub const DEFAULT_MAX_LEN: usize = 200;
pub const DEFAULT_WINDOW: usize = 16;
pub const DEFAULT_GAMMA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GenerationConfig {
    pub sequences: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { sequences: DEFAULT_SEQUENCES, max_len: DEFAULT_MAX_LEN, seed: 0 }
    }
}

/// Spreads `count` start words evenly over the vocabulary; sequence `k` uses
/// seed `seed + k` so that sweep points share their random streams.
pub fn generate_corpus(
    model: &TransitionModel,
    spec: &TransformSpec,
    cfg: &GenerationConfig,
) -> Result<Vec<Vec<usize>>> {
    if cfg.sequences == 0 {
        return Err(Error::InvalidArgument("generation budget must be at least 1".into()));
    }
    let generator = Generator::new(model, spec)?;
    let n = model.n();
    (0..cfg.sequences)
        .into_par_iter()
        .map(|k| {
            let start = k * n / cfg.sequences.max(1) % n;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(k as u64));
            generator.sample_ids(start, cfg.max_len, &mut rng)
        })
        .collect()
}

pub fn ids_to_tokens(model: &TransitionModel, seqs: &[Vec<usize>]) -> Vec<Vec<String>> {
    seqs.iter().map(|s| s.iter().map(|&i| model.vocab().token(i).to_owned()).collect()).collect()
}

/// Spearman rank correlation with average ranks for ties. `NaN` when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "paired samples");
    let (rx, ry) = (ranks(x), ranks(y));
    pearson(&rx, &ry)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    cov / (vx * vy).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationRow {
    pub t: f64,
    /// Exact ARP of the transformed model; `None` when the series diverges.
    pub arp: Option<f64>,
    pub zeta_n: f64,
    pub rep_w: f64,
    pub rep_2: f64,
    pub rep_3: f64,
    pub rep_r: f64,
    pub diverged: bool,
    /// ARP of a bigram model re-counted from the generated text.
    pub arp_reestimated: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationConfig {
    pub generation: GenerationConfig,
    pub window: usize,
    pub series_k_max: usize,
    pub series_eps: f64,
}

impl Default for CorrelationConfig {
    fn default() -> Self {
        Self {
            generation: GenerationConfig::default(),
            window: DEFAULT_WINDOW,
            series_k_max: markov::SERIES_K_MAX,
            series_eps: markov::SERIES_EPS,
        }
    }
}

fn exact_arp(model: &TransitionModel, k_max: usize, eps: f64) -> Result<Option<f64>> {
    if model.zeta_n() <= 1.0 && markov::check_spectral_precondition(model).is_err() {
        return Ok(None);
    }
    let s = markov::arp_series(model, k_max, eps)?;
    Ok(s.converged.then_some(s.value))
}

/// For each temperature: transform the model, take its exact ARP, sample text
/// and score it.
pub fn correlation_sweep(
    model: &TransitionModel,
    temperatures: &[f64],
    cfg: &CorrelationConfig,
) -> Result<Vec<CorrelationRow>> {
    let mut rows = Vec::with_capacity(temperatures.len());
    for &t in temperatures {
        let spec = TransformSpec::temperature(t)?;
        let transformed = transform_model(model, &spec)?;
        let arp = exact_arp(&transformed, cfg.series_k_max, cfg.series_eps)?;
        let ids = generate_corpus(model, &spec, &cfg.generation)?;
        let report = metrics::repetition_report(&ids, cfg.window, &[2, 3], RepNAggregation::Macro)?;

        let tokens = ids_to_tokens(model, &ids);
        let vocab = Vocabulary::new(model.vocab().tokens().to_vec())?;
        let recounted = build_model(&tokens, vocab)?;
        let arp_reestimated = exact_arp(&recounted, cfg.series_k_max, cfg.series_eps)?;

        rows.push(CorrelationRow {
            t,
            arp,
            zeta_n: transformed.zeta_n(),
            rep_w: report.rep_w,
            rep_2: report.rep_n.get(&2).copied().unwrap_or(0.0),
            rep_3: report.rep_n.get(&3).copied().unwrap_or(0.0),
            rep_r: report.rep_r,
            diverged: arp.is_none(),
            arp_reestimated,
        });
    }
    Ok(rows)
}

pub fn correlation_csv(rows: &[CorrelationRow]) -> String {
    let mut out = String::from("t,arp,rep_w,rep_2,rep_3,rep_r,diverged\n");
    for r in rows {
        let arp = r.arp.map_or_else(|| "inf".to_owned(), |a| a.to_string());
        writeln!(out, "{},{},{},{},{},{},{}", r.t, arp, r.rep_w, r.rep_2, r.rep_3, r.rep_r, r.diverged)
            .expect("string");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InflowRow {
    pub pair_count: usize,
    pub rep_w: f64,
    /// `None` for sequences shorter than the n-gram order.
    pub rep_n: Option<f64>,
    pub rep_r: f64,
}

/// Adjacent pairs `(u, v)` with `B_uv > gamma`.
pub fn high_inflow_count(model: &TransitionModel, seq: &[usize], gamma: f64) -> usize {
    seq.windows(2).filter(|w| model.prob(w[0], w[1]) > gamma).count()
}

/// Per-sequence high-inflow pair counts with repetition scores.
pub fn inflow_rows(
    model: &TransitionModel,
    gamma: f64,
    sequences: &[Vec<usize>],
    window: usize,
    order: usize,
) -> Result<Vec<InflowRow>> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidGamma(gamma));
    }
    let seqs: Vec<&Vec<usize>> = sequences.iter().filter(|s| !s.is_empty()).collect();
    if seqs.is_empty() {
        return Err(Error::EmptyInput("no generated sequences"));
    }
    let mut rows = Vec::with_capacity(seqs.len());
    for s in seqs {
        if let Some(&bad) = s.iter().find(|&&i| i >= model.n()) {
            return Err(Error::InvalidArgument(format!("token id {bad} outside the model")));
        }
        rows.push(InflowRow {
            pair_count: high_inflow_count(model, s, gamma),
            rep_w: metrics::rep_w(std::slice::from_ref(s), window)?,
            rep_n: metrics::rep_n(s, order).ok(),
            rep_r: metrics::rep_r(s),
        });
    }
    Ok(rows)
}

pub fn inflow_csv(rows: &[InflowRow]) -> String {
    let mut out = String::from("pair_count,rep_w,rep_n,rep_r\n");
    for r in rows {
        let rep_n = r.rep_n.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{}", r.pair_count, r.rep_w, rep_n, r.rep_r).expect("string");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InflowGroup {
    pub pair_count: usize,
    pub sequences: usize,
    pub mean_rep_w: f64,
    pub mean_rep_n: Option<f64>,
    pub mean_rep_r: f64,
}

/// Mean scores per pair count, ascending.
pub fn group_by_pair_count(rows: &[InflowRow]) -> Vec<InflowGroup> {
    let mut groups: BTreeMap<usize, Vec<&InflowRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.pair_count).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(pair_count, members)| {
            let count = members.len() as f64;
            let rep_n: Vec<f64> = members.iter().filter_map(|r| r.rep_n).collect();
            InflowGroup {
                pair_count,
                sequences: members.len(),
                mean_rep_w: members.iter().map(|r| r.rep_w).sum::<f64>() / count,
                mean_rep_n: (!rep_n.is_empty()).then(|| rep_n.iter().sum::<f64>() / rep_n.len() as f64),
                mean_rep_r: members.iter().map(|r| r.rep_r).sum::<f64>() / count,
            }
        })
        .collect()
}

/// Measurements of one side (before or after RE) of the encoding experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EncodingSide {
    pub vocab: usize,
    pub zeta_n: f64,
    pub max_transition: f64,
    pub denominator: f64,
    pub rep_w: f64,
    pub rep_2: f64,
    pub rep_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReEffect {
    pub gamma: f64,
    pub steps_run: usize,
    pub converged: bool,
    pub rules: usize,
    pub before: EncodingSide,
    pub after: EncodingSide,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReEffectConfig {
    pub gamma: f64,
    pub n_steps: usize,
    pub temperature: f64,
    pub generation: GenerationConfig,
    pub window: usize,
}

fn measure_side(model: &TransitionModel, encoded: &[Vec<String>], cfg: &ReEffectConfig) -> Result<EncodingSide> {
    let spec = TransformSpec::temperature(cfg.temperature)?;
    let ids = generate_corpus(model, &spec, &cfg.generation)?;
    let words: Vec<Vec<String>> =
        ids_to_tokens(model, &ids).iter().map(|s| encoding::detokenize(s)).collect::<Result<_>>()?;
    let report = metrics::repetition_report(&words, cfg.window, &[2], RepNAggregation::Macro)?;
    Ok(EncodingSide {
        vocab: model.n(),
        zeta_n: model.zeta_n(),
        max_transition: encoding::max_transition(encoded),
        denominator: bounds::inflow_outflow_denominator(model),
        rep_w: report.rep_w,
        rep_2: report.rep_n.get(&2).copied().unwrap_or(0.0),
        rep_r: report.rep_r,
    })
}

/// Learns RE on the sequences, rebuilds the bigram model on the re-encoded
/// text and compares the two models. Generated text is scored after
/// detokenization so that both sides are measured in words.
pub fn re_effect(sequences: &[Vec<String>], cfg: &ReEffectConfig) -> Result<(ReEffect, ReLearning)> {
    let before_model = build_model(sequences, Vocabulary::from_sequences(sequences))?;
    let learned = encoding::learn_re_sequences(sequences, cfg.n_steps, cfg.gamma)?;
    let after_model = build_model(&learned.encoded, Vocabulary::from_sequences(&learned.encoded))?;
    let effect = ReEffect {
        gamma: cfg.gamma,
        steps_run: learned.steps.len(),
        converged: learned.converged,
        rules: learned.table.len(),
        before: measure_side(&before_model, sequences, cfg)?,
        after: measure_side(&after_model, &learned.encoded, cfg)?,
    };
    Ok((effect, learned))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        // ranks with a tie: x = [1, 2, 2.5, 2.5] vs y increasing
        let r = spearman(&[1.0, 2.0, 3.0, 3.0], &[1.0, 2.0, 3.0, 4.0]);
        assert!((r - 0.9486832980505138).abs() < 1e-12, "{r}");
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_nan());
    }

    #[test]
    fn group_means() {
        let rows = vec![
            InflowRow { pair_count: 1, rep_w: 0.2, rep_n: Some(0.1), rep_r: 0.4 },
            InflowRow { pair_count: 0, rep_w: 0.0, rep_n: None, rep_r: 0.0 },
            InflowRow { pair_count: 1, rep_w: 0.4, rep_n: None, rep_r: 0.2 },
        ];
        let g = group_by_pair_count(&rows);
        assert_eq!(g.len(), 2);
        assert_eq!((g[0].pair_count, g[0].sequences, g[0].mean_rep_n), (0, 1, None));
        assert!((g[1].mean_rep_w - 0.3).abs() < 1e-15 && g[1].mean_rep_n == Some(0.1));
    }

    #[test]
    fn csv_headers() {
        assert!(correlation_csv(&[]).starts_with("t,arp,rep_w,rep_2,rep_3,rep_r,diverged\n"));
        assert_eq!(inflow_csv(&[]), "pair_count,rep_w,rep_n,rep_r\n");
    }

    #[test]
    fn inflow_rows_reject_bad_input() {
        let m =
            TransitionModel::from_sub_stochastic(&crate::Matrix::from_rows(&[vec![0.0, 1.0], vec![0.5, 0.0]]).unwrap())
                .unwrap();
        assert!(matches!(inflow_rows(&m, 0.1, &[], 4, 2), Err(Error::EmptyInput(_))));
        let rows = inflow_rows(&m, 1.0, &[vec![0, 1, 0, 1]], 4, 2).unwrap();
        assert_eq!(rows[0].pair_count, 0);
        let rows = inflow_rows(&m, 0.4, &[vec![0, 1, 0, 1]], 4, 2).unwrap();
        assert_eq!(rows[0].pair_count, 3);
    }
}
