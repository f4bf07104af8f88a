//! Per-step perturbations of the transition matrix, the perturbed ARP, and
//! Monte Carlo checks of its concentration around the unperturbed value.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Precondition, Result};
use crate::linalg::{self, Matrix};
use crate::markov::TransitionModel;

/// Truncation target for the unperturbed tail `n (rho / zeta n)^r`.
pub const TAIL_TOL: f64 = 1e-10;
pub const MAX_DEPTH: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationDistribution {
    /// Uniform on `[-√3 δ, √3 δ]`.
    UniformSymmetric,
    /// `±δ` with equal probability.
    TwoPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationMode {
    /// Entries are i.i.d. with mean 0 and variance `δ^2`.
    Unconstrained,
    /// `B + T` is clipped into `[0, 1]`; the moments are no longer controlled.
    Projected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PerturbationSpec {
    pub delta: f64,
    pub distribution: PerturbationDistribution,
    pub mode: PerturbationMode,
}

impl PerturbationSpec {
    pub fn new(delta: f64, distribution: PerturbationDistribution) -> Self {
        Self { delta, distribution, mode: PerturbationMode::Unconstrained }
    }

    /// Requires `δ >= 0` and `δ^2 < 1/n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let delta_sq = self.delta * self.delta;
        let limit = 1.0 / n as f64;
        if !(self.delta >= 0.0 && self.delta.is_finite()) || delta_sq >= limit {
            return Err(Error::InvalidDelta { delta_sq, limit });
        }
        Ok(())
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match self.distribution {
            PerturbationDistribution::UniformSymmetric => {
                let half = 3f64.sqrt() * self.delta;
                rng.gen_range(-1.0..1.0) * half
            }
            PerturbationDistribution::TwoPoint => {
                if rng.gen::<bool>() {
                    self.delta
                } else {
                    -self.delta
                }
            }
        }
    }
}

/// `n × n` matrix of i.i.d. zero-mean entries with variance `δ^2`.
pub fn sample_perturbation<R: Rng>(n: usize, spec: &PerturbationSpec, rng: &mut R) -> Result<Matrix<f64>> {
    spec.validate(n)?;
    let data = (0..n * n).map(|_| spec.draw(rng)).collect();
    Matrix::new(n, n, data)
}

/// [`sample_perturbation`] from a fresh seeded generator.
pub fn sample_perturbation_seeded(n: usize, spec: &PerturbationSpec, seed: u64) -> Result<Matrix<f64>> {
    sample_perturbation(n, spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedSample {
    /// `clip(B + T, 0, 1) - B`.
    pub perturbation: Matrix<f64>,
    pub realized_mean: f64,
    pub realized_variance: f64,
}

/// Draws `T`, clips `B + T` into `[0, 1]` and reports the moments that survive.
pub fn sample_projected<R: Rng>(b: &Matrix<f64>, spec: &PerturbationSpec, rng: &mut R) -> Result<ProjectedSample> {
    let t = sample_perturbation(b.rows(), spec, rng)?;
    let data: Vec<f64> =
        b.as_slice().iter().zip(t.as_slice()).map(|(&base, &d)| (base + d).clamp(0.0, 1.0) - base).collect();
    let count = data.len() as f64;
    let mean = data.iter().sum::<f64>() / count;
    let variance = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
    Ok(ProjectedSample {
        perturbation: Matrix::new(b.rows(), b.cols(), data)?,
        realized_mean: mean,
        realized_variance: variance,
    })
}

/// Smallest `r` with `n (rho / zeta n)^r < 1e-10`, between 1 and 50.
pub fn truncation_depth(n: usize, rho: f64, zeta_n: f64) -> usize {
    let ratio = rho / zeta_n;
    (1..=MAX_DEPTH).find(|&r| n as f64 * ratio.powi(r as i32) < TAIL_TOL).unwrap_or(MAX_DEPTH)
}

fn spectral_precondition(b: &Matrix<f64>, zeta_n: f64) -> Result<f64> {
    let b2 = b.matmul(b)?;
    let rho = b2.spectral_radius(1e-12, 1_000_000).map_err(|e| match e {
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

/// `Σ_{r=1..r_max} tr(Π_{k=1..2r} (B + T_k)) / (zeta n)^r` with perturbations
/// supplied on demand, step `k` starting at 0.
fn perturbed_sum(
    b: &Matrix<f64>,
    zeta_n: f64,
    r_max: usize,
    mut step: impl FnMut(usize) -> Result<Matrix<f64>>,
) -> Result<f64> {
    let n = b.rows();
    let mut product = Matrix::identity(n);
    let mut total = 0.0;
    let mut scale = 1.0;
    for r in 0..r_max {
        for k in [2 * r, 2 * r + 1] {
            let factor = b.add(&step(k)?)?;
            product = product.matmul(&factor)?;
        }
        scale /= zeta_n;
        total += product.trace() * scale;
    }
    Ok(total)
}

/// Perturbed ARP from explicit per-step perturbations `T_1 .. T_{2 r_max}`.
pub fn general_arp(b: &Matrix<f64>, zeta: f64, perturbations: &[Matrix<f64>], r_max: usize) -> Result<f64> {
    if !b.is_square() {
        return Err(Error::ShapeMismatch(format!("{}x{} is not square", b.rows(), b.cols())));
    }
    if perturbations.len() < 2 * r_max {
        return Err(Error::InvalidArgument(format!(
            "{} perturbations for depth {r_max}, need {}",
            perturbations.len(),
            2 * r_max
        )));
    }
    if perturbations.iter().any(|t| t.rows() != b.rows() || t.cols() != b.cols()) {
        return Err(Error::ShapeMismatch("perturbation shape differs from B".into()));
    }
    let zeta_n = zeta * b.rows() as f64;
    spectral_precondition(b, zeta_n)?;
    perturbed_sum(b, zeta_n, r_max, |k| Ok(perturbations[k].clone()))
}

/// `3 zeta n δ^2 / ((zeta n - 4)(zeta n - 1))`.
pub fn variance_bound(zeta_n: f64, delta: f64) -> f64 {
    3.0 * zeta_n * delta * delta / ((zeta_n - 4.0) * (zeta_n - 1.0))
}

/// Chebyshev tail `variance_bound / a^2`.
pub fn tail_bound(zeta_n: f64, delta: f64, a: f64) -> f64 {
    variance_bound(zeta_n, delta) / (a * a)
}

fn column_square_sums(b: &Matrix<f64>) -> Vec<f64> {
    let mut sums = vec![0.0; b.cols()];
    for i in 0..b.rows() {
        for (s, v) in sums.iter_mut().zip(b.row(i)) {
            *s += v * v;
        }
    }
    sums
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConcentrationResult {
    pub a_grid: Vec<f64>,
    pub empirical_prob: Vec<f64>,
    pub theory_bound: Vec<f64>,
    pub trials: usize,
    pub r_exact: f64,
    pub r_max: usize,
    pub zeta_n: f64,
    pub delta: f64,
    pub mean_diff: f64,
    pub std_diff: f64,
    pub variance_diff: f64,
    pub variance_bound: f64,
}

impl ConcentrationResult {
    /// Grid points where the empirical frequency exceeds the bound.
    pub fn violations(&self) -> Vec<f64> {
        self.a_grid
            .iter()
            .zip(self.empirical_prob.iter().zip(&self.theory_bound))
            .filter(|(_, (e, t))| e > t)
            .map(|(a, _)| *a)
            .collect()
    }

    /// `|mean| <= 4 std / √trials`.
    pub fn mean_within_noise(&self) -> bool {
        self.mean_diff.abs() <= 4.0 * self.std_diff / (self.trials as f64).sqrt()
    }
}

fn check_concentration_preconditions(b: &Matrix<f64>, zeta_n: f64, spec: &PerturbationSpec) -> Result<()> {
    if spec.mode == PerturbationMode::Projected {
        return Err(Error::PreconditionViolated(Precondition::ProjectedMode));
    }
    if zeta_n <= 4.0 {
        return Err(Error::PreconditionViolated(Precondition::BranchingTooLow { zeta_n }));
    }
    if let Some((column, &value)) = column_square_sums(b).iter().enumerate().find(|(_, &v)| v >= 1.0) {
        return Err(Error::PreconditionViolated(Precondition::ColumnSquareSum { column, value }));
    }
    Ok(())
}

/// Draws fresh perturbations per trial (seed `seed + trial`), and compares the
/// frequency of `|R - R'| >= a` with the Chebyshev bound at every `a`.
pub fn concentration_experiment(
    b: &Matrix<f64>,
    zeta: f64,
    spec: &PerturbationSpec,
    a_grid: &[f64],
    trials: usize,
    r_max: Option<usize>,
    seed: u64,
) -> Result<ConcentrationResult> {
    if !b.is_square() {
        return Err(Error::ShapeMismatch(format!("{}x{} is not square", b.rows(), b.cols())));
    }
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    if a_grid.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
        return Err(Error::InvalidArgument("thresholds must be positive".into()));
    }
    let n = b.rows();
    let zeta_n = zeta * n as f64;
    spec.validate(n)?;
    check_concentration_preconditions(b, zeta_n, spec)?;
    let rho = spectral_precondition(b, zeta_n)?;
    let depth = r_max.unwrap_or_else(|| truncation_depth(n, rho, zeta_n));

    let b2 = b.matmul(b)?;
    let r_exact = linalg::solve_linear(&b2.shifted_negation(zeta_n), &b2)?.trace();

    let diffs: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(trial as u64));
            perturbed_sum(b, zeta_n, depth, |_| sample_perturbation(n, spec, &mut rng)).map(|r| r - r_exact)
        })
        .collect::<Result<_>>()?;

    let count = trials as f64;
    let mean = diffs.iter().sum::<f64>() / count;
    let variance =
        if trials > 1 { diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (count - 1.0) } else { 0.0 };
    let empirical_prob = a_grid.iter().map(|&a| diffs.iter().filter(|d| d.abs() >= a).count() as f64 / count).collect();
    Ok(ConcentrationResult {
        a_grid: a_grid.to_vec(),
        empirical_prob,
        theory_bound: a_grid.iter().map(|&a| tail_bound(zeta_n, spec.delta, a)).collect(),
        trials,
        r_exact,
        r_max: depth,
        zeta_n,
        delta: spec.delta,
        mean_diff: mean,
        std_diff: variance.sqrt(),
        variance_diff: variance,
        variance_bound: variance_bound(zeta_n, spec.delta),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentProduct {
    /// `T_p B`
    LeftTimesB,
    /// `B T_p`
    BTimesRight,
    /// `T_p T_q`
    PairProduct,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentEntry {
    pub product: MomentProduct,
    pub row: usize,
    pub col: usize,
    pub mean: f64,
    pub std: f64,
    pub variance: f64,
    pub mean_ok: bool,
    pub variance_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentReport {
    pub trials: usize,
    pub delta: f64,
    pub entries: Vec<MomentEntry>,
}

impl MomentReport {
    pub fn all_ok(&self) -> bool {
        self.entries.iter().all(|e| e.mean_ok && e.variance_ok)
    }
}

/// Samples entries of `T_p B`, `B T_p` and `T_p T_q` at a few fixed positions
/// and checks zero mean (within 4 standard errors) and variance at most `1.1 δ^2`.
pub fn moment_check(b: &Matrix<f64>, spec: &PerturbationSpec, trials: usize, seed: u64) -> Result<MomentReport> {
    if !b.is_square() || b.rows() == 0 {
        return Err(Error::ShapeMismatch(format!("{}x{} is not a square matrix", b.rows(), b.cols())));
    }
    if trials < 2 {
        return Err(Error::InvalidArgument("moment check needs at least 2 trials".into()));
    }
    if spec.mode == PerturbationMode::Projected {
        return Err(Error::PreconditionViolated(Precondition::ProjectedMode));
    }
    if let Some((column, &value)) = column_square_sums(b).iter().enumerate().find(|(_, &v)| v > 1.0) {
        return Err(Error::PreconditionViolated(Precondition::ColumnSquareSum { column, value }));
    }
    let n = b.rows();
    spec.validate(n)?;
    let mut positions = vec![(0, 0), (0, n - 1), (n - 1, 0)];
    positions.dedup();

    let samples: Vec<Vec<f64>> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(trial as u64));
            let tp = sample_perturbation(n, spec, &mut rng)?;
            let tq = sample_perturbation(n, spec, &mut rng)?;
            let mut out = Vec::with_capacity(3 * positions.len());
            for &(i, j) in &positions {
                out.push((0..n).map(|k| tp[(i, k)] * b[(k, j)]).sum());
                out.push((0..n).map(|k| b[(i, k)] * tp[(k, j)]).sum());
                out.push((0..n).map(|k| tp[(i, k)] * tq[(k, j)]).sum());
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let count = trials as f64;
    let limit = 1.1 * spec.delta * spec.delta;
    let products = [MomentProduct::LeftTimesB, MomentProduct::BTimesRight, MomentProduct::PairProduct];
    let mut entries = Vec::new();
    for (p, &(row, col)) in positions.iter().enumerate() {
        for (q, &product) in products.iter().enumerate() {
            let column: Vec<f64> = samples.iter().map(|s| s[3 * p + q]).collect();
            let mean = column.iter().sum::<f64>() / count;
            let variance = column.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (count - 1.0);
            let std = variance.sqrt();
            entries.push(MomentEntry {
                product,
                row,
                col,
                mean,
                std,
                variance,
                mean_ok: mean.abs() <= 4.0 * std / count.sqrt(),
                variance_ok: variance <= limit,
            });
        }
    }
    Ok(MomentReport { trials, delta: spec.delta, entries })
}

/// Random chain with exactly `branching` successors per word, each row
/// carrying `row_mass` of probability and the rest on EOS, so `zeta n = branching`.
pub fn synthetic_chain(n: usize, branching: usize, row_mass: f64, seed: u64) -> Result<TransitionModel> {
    if branching == 0 || branching > n {
        return Err(Error::InvalidArgument(format!("branching {branching} outside 1..={n}")));
    }
    if !(row_mass > 0.0 && row_mass <= 1.0) {
        return Err(Error::InvalidArgument(format!("row mass {row_mass} outside (0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Matrix::zeros(n, n);
    for i in 0..n {
        let cols = index::sample(&mut rng, n, branching).into_vec();
        let weights: Vec<f64> = cols.iter().map(|_| rng.gen_range(0.5..1.5)).collect();
        let total: f64 = weights.iter().sum();
        for (&j, w) in cols.iter().zip(weights) {
            b[(i, j)] = row_mass * w / total;
        }
    }
    TransitionModel::from_sub_stochastic(&b)
}
