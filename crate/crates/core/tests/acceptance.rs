//! One line per acceptance criterion. Exits nonzero when any criterion fails.

mod common;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use arplab::bounds::{self, ReportOptions, RANK_TOL};
use arplab::encoding::{self, DEFAULT_BPE_MERGES};
use arplab::experiments::{self, CorrelationConfig, GenerationConfig, ReEffectConfig};
use arplab::io;
use arplab::markov::{self, build_model, Vocabulary};
use arplab::metrics;
use arplab::perturb::{self, PerturbationDistribution, PerturbationSpec};
use arplab::sampling::{transform_model, Transform, TransformSpec};
use arplab::{Error, Matrix, Precondition, TransitionModel};
use common::*;
use rand::Rng;

const ARP_REL_TOL: f64 = 1e-8;
const HAND_TOL: f64 = 1e-10;
const BOUND_SLACK: f64 = 1e-9;
const SPEARMAN_MIN: f64 = 0.8;
const SWEEP: [f64; 8] = [1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3];
const GAMMA: f64 = 0.1;
const RE_STEP_CAP: usize = 10;
const RE_TEMPERATURE: f64 = 0.75;
const CONCENTRATION_N: usize = 30;
const CONCENTRATION_BRANCHING: usize = 5;
const CONCENTRATION_ROW_MASS: f64 = 0.9;
const CONCENTRATION_TRIALS: usize = 10_000;
const A_GRID: [f64; 8] = [0.25, 0.3, 0.35, 0.4, 0.5, 0.6, 0.8, 1.0];
const VARIANCE_FACTOR: f64 = 1.1;
const MEAN_SIGMAS: f64 = 4.0;

type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

fn corpus_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/sotu.txt")
}

fn corpus() -> Vec<Vec<String>> {
    io::ingest(corpus_path(), false, None).expect("bundled corpus").sequences
}

fn corpus_model(seqs: &[Vec<String>]) -> TransitionModel {
    build_model(seqs, Vocabulary::from_sequences(seqs)).expect("corpus model")
}

fn arp_consistency() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let (mut checked, mut worst) = (0, 0.0f64);
    while checked < 100 {
        let n = r.gen_range(1..=50);
        let model = TransitionModel::from_sub_stochastic(&random_sub_stochastic(&mut r, n)).unwrap();
        let rho = markov::spectral_radius_b2(&model).unwrap();
        if model.zeta_n() < 1.05 * rho {
            continue;
        }
        let closed = markov::arp_closed_form(&model).unwrap();
        let series = markov::arp_series(&model, markov::SERIES_K_MAX, 1e-12).unwrap();
        let rel = (closed - series.value).abs() / closed.abs().max(f64::MIN_POSITIVE);
        worst = worst.max(if series.converged { rel } else { f64::INFINITY });
        checked += 1;
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= ARP_REL_TOL && within(elapsed, 10),
        format!("100 models, worst relative gap {worst:.2e}, {:.1}s", elapsed.as_secs_f64()),
    )
}

fn hand_oracle() -> Outcome {
    let b = Matrix::from_rows(&[vec![0.0, 0.5], vec![0.5, 0.0]]).unwrap();
    let model = TransitionModel::from_sub_stochastic(&b).unwrap();
    let exact = markov::arp_closed_form(&model).unwrap();
    let thm = bounds::bound_spectral(&model).unwrap();
    let cor2 = bounds::bound_inflow_outflow(&model).unwrap();
    let cor1 = bounds::bound_variance(&model, RANK_TOL).unwrap();
    let expected = [(exact, 2.0 / 3.0), (thm, 2.0 / 3.0), (cor2, 2.0 / 3.0), (cor1, 2f64.sqrt())];
    let pass = model.zeta_n() == 1.0 && expected.iter().all(|(got, want)| (got - want).abs() <= HAND_TOL);
    outcome(pass, format!("exact {exact}, spectral {thm}, inflow/outflow {cor2}, variance {cor1}"))
}

fn bound_chain() -> Outcome {
    let start = Instant::now();
    let mut r = rng(3);
    let (mut instances, mut dominant, mut violations) = (0, 0, 0);
    while instances < 1000 {
        let n = r.gen_range(1..=30);
        let model = TransitionModel::from_sub_stochastic(&random_sub_stochastic(&mut r, n)).unwrap();
        if markov::check_spectral_precondition(&model).is_err() {
            continue;
        }
        let Ok(thm) = bounds::bound_spectral(&model) else { continue };
        instances += 1;
        let exact = markov::arp_closed_form(&model).unwrap();
        let cor1 = bounds::bound_variance(&model, RANK_TOL).unwrap();
        let slack = BOUND_SLACK * thm.max(1.0);
        if exact > thm + slack || thm > cor1 + slack {
            violations += 1;
        }
        if let Ok(cor2) = bounds::bound_inflow_outflow(&model) {
            dominant += 1;
            if thm > cor2 + slack {
                violations += 1;
            }
        }
    }
    let mut sigma_violations = 0;
    for _ in 0..1000 {
        let n = r.gen_range(1..=20);
        let a = random_square(&mut r, n);
        let lb = bounds::sigma_min_lower_bound(&a).unwrap();
        let smin = arplab::linalg::singular_values(&a).unwrap().into_iter().fold(f64::INFINITY, f64::min);
        if lb > smin + HAND_TOL {
            sigma_violations += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        violations == 0 && sigma_violations == 0 && dominant > 0 && within(elapsed, 60),
        format!(
            "1000 instances ({dominant} dominant), {violations} chain violations, {sigma_violations} sigma_min violations, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn greedy_divergence() -> Outcome {
    let mut r = rng(4);
    let greedy = TransformSpec::single(Transform::Greedy).unwrap();
    let (mut models, mut findings) = (0, 0);
    while models < 200 {
        let n = r.gen_range(1..=40);
        let model = TransitionModel::from_sub_stochastic(&random_sub_stochastic(&mut r, n)).unwrap();
        let argmax_internal = (0..n).all(|i| {
            let row = model.row_distribution(i);
            let best = row.iter().fold((n, -1.0), |acc, &(j, p)| if p > acc.1 { (j, p) } else { acc });
            best.0 < n
        });
        if !argmax_internal {
            continue;
        }
        models += 1;
        let g = transform_model(&model, &greedy).unwrap();
        let report = bounds::bound_report(&g, &ReportOptions::default()).unwrap();
        let flagged = report.arp_exact.diverged
            && report.failures.iter().any(|f| matches!(f, Precondition::SpectralRadius { .. }));
        let direct = matches!(markov::check_spectral_precondition(&g), Err(Error::PreconditionViolated(_)));
        if g.zeta_n() == 1.0 && flagged && direct {
            findings += 1;
        }
    }
    outcome(findings == models, format!("{findings}/{models} greedy models with zeta*n = 1 flagged divergent"))
}

fn metric_oracles() -> Outcome {
    let mut r = rng(5);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let alphabet = r.gen_range(1..=10u8);
        let len = r.gen_range(1..=50);
        let s: Vec<u8> = (0..len).map(|_| r.gen_range(0..alphabet)).collect();
        let w = r.gen_range(1..=20);
        let n = r.gen_range(1..=4);
        if metrics::rep_w(std::slice::from_ref(&s), w).unwrap() != rep_w_oracle(&s, w) {
            mismatches += 1;
        }
        if metrics::rep_r(&s) != rep_r_oracle(&s) {
            mismatches += 1;
        }
        if len >= n && metrics::rep_n(&s, n).unwrap() != rep_n_oracle(&s, n) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("1000 sequences, {mismatches} mismatches"))
}

fn loop_equivalence() -> Outcome {
    let start = Instant::now();
    let all = all_sequences(3, 8);
    let mismatches =
        all.iter().filter(|s| metrics::has_repetition_subsequence(s).is_some() != adjacent_loops_oracle(s)).count();
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && all.len() == 9840 && within(elapsed, 10),
        format!("{} sequences, {mismatches} mismatches, {:.1}s", all.len(), elapsed.as_secs_f64()),
    )
}

fn rank_value(v: Option<f64>) -> f64 {
    v.unwrap_or(f64::INFINITY)
}

fn correlation(model: &TransitionModel) -> Outcome {
    let start = Instant::now();
    let rows = experiments::correlation_sweep(model, &SWEEP, &CorrelationConfig::default()).unwrap();
    let elapsed = start.elapsed();
    let arp: Vec<f64> = rows.iter().map(|r| rank_value(r.arp)).collect();
    let col = |f: fn(&experiments::CorrelationRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let (rw, r2, rr) = (col(|r| r.rep_w), col(|r| r.rep_2), col(|r| r.rep_r));
    let rho = [experiments::spearman(&arp, &rw), experiments::spearman(&arp, &r2), experiments::spearman(&arp, &rr)];

    let re_arp: Vec<f64> = rows.iter().map(|r| rank_value(r.arp_reestimated)).collect();
    let re_rho =
        [experiments::spearman(&re_arp, &rw), experiments::spearman(&re_arp, &r2), experiments::spearman(&re_arp, &rr)];
    println!(
        "  info: ARP of bigram models re-counted from the samples gives spearman rep_w {:.3}, rep_2 {:.3}, rep_r {:.3}",
        re_rho[0], re_rho[1], re_rho[2]
    );
    for r in &rows {
        println!(
            "  t={:.1} arp={} rep_w={:.4} rep_2={:.4} rep_r={:.4} recounted_arp={}",
            r.t,
            r.arp.map_or("diverged".into(), |a| format!("{a:.5}")),
            r.rep_w,
            r.rep_2,
            r.rep_r,
            r.arp_reestimated.map_or("diverged".into(), |a| format!("{a:.4}"))
        );
    }
    outcome(
        rho.iter().all(|&x| x > SPEARMAN_MIN) && within(elapsed, 300),
        format!(
            "spearman(arp, rep_w) {:.3}, (arp, rep_2) {:.3}, (arp, rep_r) {:.3}, {:.1}s",
            rho[0],
            rho[1],
            rho[2],
            elapsed.as_secs_f64()
        ),
    )
}

fn inflow(model: &TransitionModel) -> Outcome {
    let start = Instant::now();
    let cfg = GenerationConfig::default();
    let ids = experiments::generate_corpus(model, &TransformSpec::stochastic(), &cfg).unwrap();
    let rows = experiments::inflow_rows(model, GAMMA, &ids, experiments::DEFAULT_WINDOW, 2).unwrap();
    let groups = experiments::group_by_pair_count(&rows);
    let first: Vec<f64> = groups.iter().take(4).map(|g| g.mean_rep_r).collect();
    let elapsed = start.elapsed();
    let counts: Vec<f64> = groups.iter().map(|g| g.pair_count as f64).collect();
    let means: Vec<f64> = groups.iter().map(|g| g.mean_rep_r).collect();
    println!(
        "  info: {} groups, spearman(pair count, mean rep_r) over all groups {:.3}",
        groups.len(),
        experiments::spearman(&counts, &means)
    );
    let listing: Vec<String> =
        groups.iter().take(4).map(|g| format!("{}:{:.4} (n={})", g.pair_count, g.mean_rep_r, g.sequences)).collect();
    outcome(
        first.len() == 4 && first.windows(2).all(|w| w[0] <= w[1]) && within(elapsed, 300),
        format!("mean rep_r by pair count {}, {:.1}s", listing.join(", "), elapsed.as_secs_f64()),
    )
}

fn re_effect(seqs: &[Vec<String>]) -> Outcome {
    let start = Instant::now();
    let cfg = ReEffectConfig {
        gamma: GAMMA,
        n_steps: RE_STEP_CAP,
        temperature: RE_TEMPERATURE,
        generation: GenerationConfig::default(),
        window: experiments::DEFAULT_WINDOW,
    };
    let (e, _) = experiments::re_effect(seqs, &cfg).unwrap();
    let capped = !e.converged && e.steps_run == RE_STEP_CAP;
    let max_ok = e.after.max_transition <= GAMMA || capped;
    let pass = max_ok
        && e.after.denominator > e.before.denominator
        && e.after.rep_w < e.before.rep_w
        && e.after.rep_r < e.before.rep_r;
    outcome(
        pass,
        format!(
            "max transition {:.3}{}, denominator {:.3} -> {:.3}, rep_w {:.4} -> {:.4}, rep_r {:.4} -> {:.4}, vocab {} -> {}, {:.1}s",
            e.after.max_transition,
            if capped { format!(" (step cap {RE_STEP_CAP} reached)") } else { String::new() },
            e.before.denominator,
            e.after.denominator,
            e.before.rep_w,
            e.after.rep_w,
            e.before.rep_r,
            e.after.rep_r,
            e.before.vocab,
            e.after.vocab,
            start.elapsed().as_secs_f64()
        ),
    )
}

fn concentration_run(trials: usize) -> perturb::ConcentrationResult {
    let chain = perturb::synthetic_chain(CONCENTRATION_N, CONCENTRATION_BRANCHING, CONCENTRATION_ROW_MASS, 10).unwrap();
    let delta = (0.5 / CONCENTRATION_N as f64).sqrt();
    let spec = PerturbationSpec::new(delta, PerturbationDistribution::UniformSymmetric);
    perturb::concentration_experiment(&chain.b_dense(), chain.zeta(), &spec, &A_GRID, trials, None, 10).unwrap()
}

fn concentration() -> Outcome {
    let start = Instant::now();
    let c = concentration_run(CONCENTRATION_TRIALS);
    let elapsed = start.elapsed();
    let violations = c.violations();
    let mean_ok = c.mean_diff.abs() <= MEAN_SIGMAS * c.std_diff / (c.trials as f64).sqrt();
    let var_ok = c.variance_diff <= VARIANCE_FACTOR * c.variance_bound;
    outcome(
        c.zeta_n >= 5.0 && violations.is_empty() && mean_ok && var_ok && within(elapsed, 300),
        format!(
            "zeta*n {}, {} grid violations, mean {:.2e} (4 se {:.2e}), variance {:.4} vs bound {:.4}, {:.1}s",
            c.zeta_n,
            violations.len(),
            c.mean_diff,
            MEAN_SIGMAS * c.std_diff / (c.trials as f64).sqrt(),
            c.variance_diff,
            c.variance_bound,
            elapsed.as_secs_f64()
        ),
    )
}

fn encoding_fidelity(seqs: &[Vec<String>]) -> Outcome {
    let fuse = encoding::join_tokens("de@@", "crease");
    let join = encoding::join_tokens("involved", "in");
    let table = encoding::learn_bpe(seqs, DEFAULT_BPE_MERGES).unwrap();
    let mut codec = encoding::BpeCodec::new(&table);
    let bpe: Vec<Vec<String>> = seqs.iter().map(|s| codec.encode(s)).collect();
    let re = encoding::learn_re_sequences(&bpe, RE_STEP_CAP, GAMMA).unwrap();
    let broken = seqs
        .iter()
        .zip(&re.encoded)
        .filter(|(orig, enc)| encoding::detokenize(enc).ok().as_ref() != Some(*orig))
        .count();
    outcome(
        fuse == "decrease" && join == "involved==in" && broken == 0,
        format!("{fuse:?}, {join:?}, {broken} of {} sentences changed by bpe+re", seqs.len()),
    )
}

fn determinism(model: &TransitionModel, seqs: &[Vec<String>]) -> Outcome {
    let dir = std::env::temp_dir().join(format!("arplab-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let run = |tag: &str| -> Vec<PathBuf> {
        let small = GenerationConfig { sequences: 100, max_len: 100, seed: 7 };
        let corr = CorrelationConfig { generation: small, ..Default::default() };
        let rows = experiments::correlation_sweep(model, &[1.0, 0.5], &corr).unwrap();
        let ids = experiments::generate_corpus(model, &TransformSpec::stochastic(), &small).unwrap();
        let inflow = experiments::inflow_rows(model, GAMMA, &ids, experiments::DEFAULT_WINDOW, 2).unwrap();
        let conc = concentration_run(500);
        let re_cfg = ReEffectConfig {
            gamma: GAMMA,
            n_steps: 2,
            temperature: RE_TEMPERATURE,
            generation: small,
            window: experiments::DEFAULT_WINDOW,
        };
        let (effect, _) = experiments::re_effect(&seqs[..500], &re_cfg).unwrap();
        let files = [
            ("correlation.csv", experiments::correlation_csv(&rows)),
            ("inflow.csv", experiments::inflow_csv(&inflow)),
            ("concentration.json", serde_json::to_string(&conc).unwrap()),
            ("re.json", serde_json::to_string(&effect).unwrap()),
        ];
        files
            .into_iter()
            .map(|(name, text)| {
                let p = dir.join(format!("{tag}-{name}"));
                io::write_text(&p, &text).unwrap();
                p
            })
            .collect()
    };
    let (a, b) = (run("a"), run("b"));
    let same = a.iter().zip(&b).filter(|(x, y)| std::fs::read(x).unwrap() == std::fs::read(y).unwrap()).count();
    std::fs::remove_dir_all(&dir).ok();
    outcome(same == a.len(), format!("{same}/{} output files byte-identical across reruns", a.len()))
}

fn main() -> ExitCode {
    let seqs = corpus();
    let model = corpus_model(&seqs);
    let criteria: Vec<(u32, &str, Check)> = vec![
        (1, "closed form matches series", Box::new(arp_consistency)),
        (2, "two-state hand oracle", Box::new(hand_oracle)),
        (3, "bound chain and sigma_min lower bound", Box::new(bound_chain)),
        (4, "greedy decoding diverges", Box::new(greedy_divergence)),
        (5, "metrics match brute force", Box::new(metric_oracles)),
        (6, "repetition subsequence equals adjacent loops", Box::new(loop_equivalence)),
        (7, "ARP rank-correlates with repetition over temperature", Box::new(|| correlation(&model))),
        (8, "rep_r grows with high-inflow pair count", Box::new(|| inflow(&model))),
        (9, "rebalanced encoding lowers repetition", Box::new(|| re_effect(&seqs))),
        (10, "concentration of perturbed ARP", Box::new(concentration)),
        (11, "encoding examples and surface round-trip", Box::new(|| encoding_fidelity(&seqs))),
        (12, "experiments are deterministic", Box::new(|| determinism(&model, &seqs))),
    ];
    let mut failed = Vec::new();
    for (id, name, check) in &criteria {
        let o = check();
        println!("criterion {id:>2} {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(*id);
        }
    }
    println!("acceptance: {} of {} criteria pass", criteria.len() - failed.len(), criteria.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
