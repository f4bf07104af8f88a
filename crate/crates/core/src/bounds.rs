//! Upper bounds on ARP: the spectral bound, the row-variance bound and the
//! inflow/outflow bound, with the precondition checks each one needs.

use serde::Serialize;

use crate::error::{DominanceForm, Error, Precondition, Result};
use crate::linalg::{self, Matrix};
use crate::markov::{self, TransitionModel};
use crate::scalar::Real;

/// Singular values below `RANK_TOL * largest` do not count towards the rank.
pub const RANK_TOL: f64 = 1e-10;
/// Dense SVD work is skipped above this many tokens unless asked otherwise.
pub const DEFAULT_DENSE_LIMIT: usize = 400;
const DOMINANCE_SLACK: f64 = 1e-12;

/// Outflow and inflow of every word in the two-step chain `B^2`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WordFlow {
    pub inflow: Vec<f64>,
    pub outflow: Vec<f64>,
}

/// Per-word flow sums: `outflow_i = Σ_j (B^2)_ij`, `inflow_i = Σ_k (B^2)_ki`.
pub fn word_flow(model: &TransitionModel) -> WordFlow {
    let n = model.n();
    let sums: Vec<f64> = model.b_rows().iter().map(|r| r.iter().map(|e| e.1).sum()).collect();
    let mut outflow = vec![0.0; n];
    model.apply_b(&sums, &mut outflow);
    let inflow = model.apply_b_transposed(&model.apply_b_transposed(&vec![1.0; n]));
    WordFlow { inflow, outflow }
}

/// First-order high-inflow pairs `(u, v)` with `B_uv > gamma`, in row order.
pub fn high_inflow_pairs(model: &TransitionModel, gamma: f64) -> Vec<(usize, usize, f64)> {
    let mut pairs = Vec::new();
    for (u, row) in model.b_rows().iter().enumerate() {
        pairs.extend(row.iter().filter(|e| e.1 > gamma).map(|&(v, p)| (u, v, p)));
    }
    pairs
}

/// Gershgorin-type lower bound on the smallest singular value:
/// `min_i |a_ii| - (Σ_{j≠i} |a_ij| + Σ_{j≠i} |a_ji|) / 2`. May be negative.
pub fn sigma_min_lower_bound<T: Real>(a: &Matrix<T>) -> Result<T> {
    if !a.is_square() {
        return Err(Error::ShapeMismatch(format!("{}x{} is not square", a.rows(), a.cols())));
    }
    let n = a.rows();
    let half = T::lit(0.5);
    let mut best = T::infinity();
    for i in 0..n {
        let mut off = T::zero();
        for j in (0..n).filter(|&j| j != i) {
            off += a[(i, j)].abs() + a[(j, i)].abs();
        }
        best = best.min(a[(i, i)].abs() - half * off);
    }
    Ok(if n == 0 { T::zero() } else { best })
}

/// Diagonal, outflow and inflow of `B^2`, all from the sparse rows.
struct SquaredSums {
    diag: Vec<f64>,
    flow: WordFlow,
}

impl SquaredSums {
    fn of(model: &TransitionModel) -> Self {
        Self { diag: model.b_squared_diagonal(), flow: word_flow(model) }
    }

    /// `min_i |zeta n - d_i| - ((out_i - d_i) + (in_i - d_i)) / 2`.
    fn gershgorin(&self, zeta_n: f64) -> f64 {
        (0..self.diag.len())
            .map(|i| {
                let d = self.diag[i];
                (zeta_n - d).abs() - 0.5 * ((self.flow.outflow[i] - d) + (self.flow.inflow[i] - d))
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// `min_i { (zeta n - out_i)/2 + (zeta n - in_i)/2 }`.
    fn denominator(&self, zeta_n: f64) -> f64 {
        self.flow
            .outflow
            .iter()
            .zip(&self.flow.inflow)
            .map(|(o, i)| 0.5 * (zeta_n - o) + 0.5 * (zeta_n - i))
            .fold(f64::INFINITY, f64::min)
    }

    /// Row form first, then column form; the first failing row is reported.
    fn dominance(&self, zeta_n: f64) -> std::result::Result<(), Precondition> {
        let slack = DOMINANCE_SLACK * zeta_n.max(1.0);
        for (form, sums) in [(DominanceForm::Row, &self.flow.outflow), (DominanceForm::Column, &self.flow.inflow)] {
            for (row, (&d, &s)) in self.diag.iter().zip(sums).enumerate() {
                let margin = (zeta_n - d).abs() - (s - d);
                if margin < -slack {
                    return Err(Precondition::DiagonalDominance { row, form, margin });
                }
            }
        }
        Ok(())
    }
}

/// Dense spectral quantities shared by the three bounds.
struct Spectra {
    nuclear: f64,
    rank: usize,
    sigma_min: f64,
}

impl Spectra {
    fn of(model: &TransitionModel, rank_tol: f64) -> Result<Self> {
        let b2 = model.b_squared_dense();
        let sv = linalg::singular_values(&b2)?;
        let largest = sv.first().copied().unwrap_or(0.0);
        let rank = sv.iter().filter(|&&s| largest > 0.0 && s > rank_tol * largest).count();
        let shifted = linalg::singular_values(&b2.shifted_negation(model.zeta_n()))?;
        Ok(Self { nuclear: sv.iter().sum(), rank, sigma_min: shifted.last().copied().unwrap_or(0.0) })
    }

    fn require_nonsingular(&self, zeta_n: f64) -> Result<()> {
        if self.sigma_min > 0.0 {
            Ok(())
        } else {
            Err(Error::PreconditionViolated(Precondition::SingularShift { zeta_n, sigma_min: self.sigma_min }))
        }
    }
}

/// `Σ_ij (B_ij - μ_i)^2 + Σ_i (1 - b_i)^2` with `μ_i` the row mean of `B`.
fn variance_numerator(model: &TransitionModel) -> (f64, f64) {
    let n = model.n() as f64;
    let mut spread = 0.0;
    let mut mass = 0.0;
    let mut mean_sq = 0.0;
    for (row, &b) in model.b_rows().iter().zip(model.eos_probs()) {
        let total: f64 = row.iter().map(|e| e.1).sum();
        let mu = total / n;
        let zeros = n - row.len() as f64;
        spread += row.iter().map(|&(_, p)| (p - mu) * (p - mu)).sum::<f64>() + zeros * mu * mu;
        mass += (1.0 - b) * (1.0 - b);
        mean_sq += mu * mu;
    }
    (spread + mass, spread + n * mean_sq)
}

/// `‖B^2‖_* / σ_min(zeta n I - B^2)`; requires `zeta n > ρ(B^2)`.
pub fn bound_spectral(model: &TransitionModel) -> Result<f64> {
    if model.zeta() == 0.0 {
        return Ok(0.0);
    }
    markov::check_spectral_precondition(model)?;
    let s = Spectra::of(model, RANK_TOL)?;
    s.require_nonsingular(model.zeta_n())?;
    Ok(s.nuclear / s.sigma_min)
}

/// `√r (Σ_ij (B_ij - μ_i)^2 + Σ_i (1 - b_i)^2) / σ_min(zeta n I - B^2)` where
/// `r` is the numerical rank of `B^2`.
pub fn bound_variance(model: &TransitionModel, rank_tol: f64) -> Result<f64> {
    if model.zeta() == 0.0 {
        return Ok(0.0);
    }
    let s = Spectra::of(model, rank_tol)?;
    s.require_nonsingular(model.zeta_n())?;
    Ok((s.rank as f64).sqrt() * variance_numerator(model).0 / s.sigma_min)
}

/// Same as [`bound_variance`] with `n Σ_i μ_i^2` in place of `Σ_i (1 - b_i)^2`.
/// Tighter by a factor of `n` on the mass term; not the published form.
pub fn bound_variance_tightened(model: &TransitionModel, rank_tol: f64) -> Result<f64> {
    if model.zeta() == 0.0 {
        return Ok(0.0);
    }
    let s = Spectra::of(model, rank_tol)?;
    s.require_nonsingular(model.zeta_n())?;
    Ok((s.rank as f64).sqrt() * variance_numerator(model).1 / s.sigma_min)
}

/// Inflow/outflow denominator `min_i { (zeta n - out_i)/2 + (zeta n - in_i)/2 }`.
pub fn inflow_outflow_denominator(model: &TransitionModel) -> f64 {
    SquaredSums::of(model).denominator(model.zeta_n())
}

/// `‖B^2‖_*` over the inflow/outflow denominator; requires both row and column
/// diagonal dominance of `zeta n I - B^2` and a positive denominator.
pub fn bound_inflow_outflow(model: &TransitionModel) -> Result<f64> {
    if model.zeta() == 0.0 {
        return Ok(0.0);
    }
    let zeta_n = model.zeta_n();
    let sums = SquaredSums::of(model);
    sums.dominance(zeta_n).map_err(Error::PreconditionViolated)?;
    let denominator = sums.denominator(zeta_n);
    if denominator <= 0.0 {
        return Err(Error::PreconditionViolated(Precondition::NonPositiveDenominator { denominator }));
    }
    let b2 = model.b_squared_dense();
    let nuclear: f64 = linalg::singular_values(&b2)?.iter().sum();
    Ok(nuclear / denominator)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArpExact {
    /// Finite value when the series converges; `None` on divergence.
    pub value: Option<f64>,
    pub method: ArpMethod,
    pub diverged: bool,
    /// Terms summed when the series was used.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub terms_used: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ArpMethod {
    ClosedForm,
    Series,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreconditionFlags {
    pub zeta_n: f64,
    pub rho_b2: Option<f64>,
    pub spectral: bool,
    pub row_dominant: bool,
    pub column_dominant: bool,
    pub denominator_positive: bool,
}

/// Exact ARP together with every bound and the quantities that gate them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub n: usize,
    pub zeta: f64,
    pub arp_exact: ArpExact,
    pub bound_spectral: Option<f64>,
    pub bound_variance: Option<f64>,
    pub bound_variance_tightened: Option<f64>,
    pub bound_inflow_outflow: Option<f64>,
    pub inflow_outflow_denominator: f64,
    pub sigma_min_used: Option<f64>,
    pub sigma_min_gershgorin: f64,
    pub nuclear_norm_b2: Option<f64>,
    pub rank_b2: Option<usize>,
    pub preconditions: PreconditionFlags,
    /// Every precondition that failed, with its measured quantities.
    pub failures: Vec<Precondition>,
    /// False when the vocabulary exceeded the dense limit and the SVD-based
    /// quantities were skipped.
    pub dense: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportOptions {
    pub rank_tol: f64,
    pub dense_limit: usize,
    pub series_k_max: usize,
    pub series_eps: f64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            rank_tol: RANK_TOL,
            dense_limit: DEFAULT_DENSE_LIMIT,
            series_k_max: markov::SERIES_K_MAX,
            series_eps: markov::SERIES_EPS,
        }
    }
}

/// Builds a [`BoundReport`]. Up to `dense_limit` tokens the exact ARP uses the
/// closed form and all bounds are computed; above it the exact ARP comes from
/// the series and the SVD-based quantities are left empty.
pub fn bound_report(model: &TransitionModel, opts: &ReportOptions) -> Result<BoundReport> {
    let n = model.n();
    let zeta_n = model.zeta_n();
    let sums = SquaredSums::of(model);
    let mut failures = Vec::new();

    let rho = if model.zeta() == 0.0 {
        Some(0.0)
    } else {
        match markov::spectral_radius_b2(model) {
            Ok(r) => Some(r),
            Err(Error::ConvergenceFailure { .. }) => {
                failures.push(Precondition::SpectralRadiusUnverified { zeta_n });
                None
            }
            Err(e) => return Err(e),
        }
    };
    let trivial = model.zeta() == 0.0;
    let spectral = trivial || rho.is_some_and(|r| zeta_n > r);
    if let Some(r) = rho.filter(|_| !spectral) {
        failures.push(Precondition::SpectralRadius { zeta_n, rho: r });
    }

    let dominance = if trivial { Ok(()) } else { sums.dominance(zeta_n) };
    let (row_dominant, column_dominant) = match &dominance {
        Ok(()) => (true, true),
        Err(Precondition::DiagonalDominance { form: DominanceForm::Row, .. }) => {
            // the column form is still informative on its own
            let col_ok = (0..n).all(|i| {
                (zeta_n - sums.diag[i]).abs() - (sums.flow.inflow[i] - sums.diag[i])
                    >= -DOMINANCE_SLACK * zeta_n.max(1.0)
            });
            (false, col_ok)
        }
        Err(_) => (true, false),
    };
    if let Err(p) = dominance {
        failures.push(p);
    }
    let denominator = sums.denominator(zeta_n);
    let denominator_positive = trivial || denominator > 0.0;
    if !denominator_positive {
        failures.push(Precondition::NonPositiveDenominator { denominator });
    }

    let dense = n <= opts.dense_limit;
    let arp_exact = if dense && spectral {
        ArpExact {
            value: Some(markov::arp_closed_form(model)?),
            method: ArpMethod::ClosedForm,
            diverged: false,
            terms_used: None,
        }
    } else if spectral {
        let s = markov::arp_series(model, opts.series_k_max, opts.series_eps)?;
        ArpExact {
            value: s.converged.then_some(s.value),
            method: ArpMethod::Series,
            diverged: !s.converged,
            terms_used: Some(s.terms_used),
        }
    } else {
        ArpExact { value: None, method: ArpMethod::ClosedForm, diverged: true, terms_used: None }
    };

    let mut report = BoundReport {
        n,
        zeta: model.zeta(),
        arp_exact,
        bound_spectral: None,
        bound_variance: None,
        bound_variance_tightened: None,
        bound_inflow_outflow: None,
        inflow_outflow_denominator: denominator,
        sigma_min_used: None,
        sigma_min_gershgorin: sums.gershgorin(zeta_n),
        nuclear_norm_b2: None,
        rank_b2: None,
        preconditions: PreconditionFlags {
            zeta_n,
            rho_b2: rho,
            spectral,
            row_dominant,
            column_dominant,
            denominator_positive,
        },
        failures,
        dense,
    };

    if trivial {
        report.bound_spectral = Some(0.0);
        report.bound_variance = Some(0.0);
        report.bound_variance_tightened = Some(0.0);
        report.bound_inflow_outflow = Some(0.0);
        report.nuclear_norm_b2 = Some(0.0);
        report.rank_b2 = Some(0);
        return Ok(report);
    }
    if !dense {
        return Ok(report);
    }

    let s = Spectra::of(model, opts.rank_tol)?;
    report.sigma_min_used = Some(s.sigma_min);
    report.nuclear_norm_b2 = Some(s.nuclear);
    report.rank_b2 = Some(s.rank);
    if s.sigma_min > 0.0 {
        let (numerator, tightened) = variance_numerator(model);
        let root_rank = (s.rank as f64).sqrt();
        report.bound_variance = Some(root_rank * numerator / s.sigma_min);
        report.bound_variance_tightened = Some(root_rank * tightened / s.sigma_min);
        if spectral {
            report.bound_spectral = Some(s.nuclear / s.sigma_min);
        }
    } else {
        report.failures.push(Precondition::SingularShift { zeta_n, sigma_min: s.sigma_min });
    }
    if row_dominant && column_dominant && denominator_positive {
        report.bound_inflow_outflow = Some(s.nuclear / denominator);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::{build_model, Vocabulary};

    fn model(rows: &[Vec<f64>]) -> TransitionModel {
        TransitionModel::from_sub_stochastic(&Matrix::from_rows(rows).unwrap()).unwrap()
    }

    fn two_state() -> TransitionModel {
        model(&[vec![0.0, 0.5], vec![0.5, 0.0]])
    }

    #[test]
    fn two_state_bounds() {
        let m = two_state();
        assert!((bound_spectral(&m).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((bound_variance(&m, RANK_TOL).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert!((bound_inflow_outflow(&m).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let flow = word_flow(&m);
        assert_eq!(flow.inflow, vec![0.25, 0.25]);
        assert_eq!(flow.outflow, vec![0.25, 0.25]);
    }

    #[test]
    fn zero_model_bounds_vanish() {
        let m = model(&[vec![0.0; 3], vec![0.0; 3], vec![0.0; 3]]);
        assert_eq!(bound_spectral(&m).unwrap(), 0.0);
        assert_eq!(bound_variance(&m, RANK_TOL).unwrap(), 0.0);
        assert_eq!(bound_inflow_outflow(&m).unwrap(), 0.0);
        let flow = word_flow(&m);
        assert!(flow.inflow.iter().chain(&flow.outflow).all(|&v| v == 0.0));
        let r = bound_report(&m, &ReportOptions::default()).unwrap();
        assert_eq!(r.arp_exact.value, Some(0.0));
        assert!(r.failures.is_empty());
    }

    #[test]
    fn uniform_rows_have_no_spread() {
        let c = 0.2;
        let m = model(&[vec![c; 3], vec![c; 3], vec![c; 3]]);
        let (numerator, _) = variance_numerator(&m);
        assert!((numerator - 3.0 * (3.0 * c) * (3.0 * c)).abs() < 1e-15);
    }

    #[test]
    fn gershgorin_examples() {
        assert_eq!(sigma_min_lower_bound(&Matrix::<f64>::identity(3)).unwrap(), 1.0);
        assert_eq!(sigma_min_lower_bound(&Matrix::<f64>::from_diag(&[5.0, 2.0])).unwrap(), 2.0);
        let a = Matrix::from_rows(&[vec![1.0, -0.2], vec![-0.4, 1.0]]).unwrap();
        let lb: f64 = sigma_min_lower_bound(&a).unwrap();
        assert!((lb - 0.7).abs() < 1e-15);
        assert!(linalg::singular_values(&a).unwrap()[1] >= lb);
        assert!(sigma_min_lower_bound(&Matrix::<f64>::zeros(2, 3)).is_err());
    }

    #[test]
    fn high_inflow_pair_from_corpus() {
        let c: Vec<Vec<String>> = vec![vec!["a".into(), "b".into()]; 2];
        let m = build_model(&c, Vocabulary::from_sequences(&c)).unwrap();
        assert_eq!(high_inflow_pairs(&m, 0.9), vec![(0, 1, 1.0)]);
    }

    #[test]
    fn divergent_model_reports_failures() {
        let m = model(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert!(matches!(bound_spectral(&m), Err(Error::PreconditionViolated(Precondition::SpectralRadius { .. }))));
        let r = bound_report(&m, &ReportOptions::default()).unwrap();
        assert!(r.arp_exact.diverged);
        assert!(r.bound_spectral.is_none());
        assert!(!r.preconditions.spectral);
        assert!(r.failures.iter().any(|f| matches!(f, Precondition::SpectralRadius { .. })));
    }

    #[test]
    fn dominance_failure_names_row() {
        // word 0 feeds everything back into itself two steps later
        let m = model(&[vec![0.0, 0.9, 0.0], vec![0.9, 0.0, 0.0], vec![0.0, 0.0, 0.0]]);
        // zeta n = 2/3 < (B^2)_00 = 0.81: the shift flips sign on the diagonal
        match bound_inflow_outflow(&m) {
            Err(Error::PreconditionViolated(Precondition::NonPositiveDenominator { denominator })) => {
                assert!(denominator < 0.0)
            }
            Err(Error::PreconditionViolated(Precondition::DiagonalDominance { .. })) => {}
            other => panic!("expected a precondition failure, got {other:?}"),
        }
    }

    #[test]
    fn report_matches_individual_bounds() {
        let m = two_state();
        let r = bound_report(&m, &ReportOptions::default()).unwrap();
        assert!((r.arp_exact.value.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.bound_spectral, Some(bound_spectral(&m).unwrap()));
        assert_eq!(r.bound_variance, Some(bound_variance(&m, RANK_TOL).unwrap()));
        assert_eq!(r.bound_inflow_outflow, Some(bound_inflow_outflow(&m).unwrap()));
        assert_eq!(r.rank_b2, Some(2));
        assert!((r.sigma_min_used.unwrap() - 0.75).abs() < 1e-12);
        assert!((r.sigma_min_gershgorin - 0.75).abs() < 1e-12);

        let sparse = bound_report(&m, &ReportOptions { dense_limit: 1, ..Default::default() }).unwrap();
        assert!(!sparse.dense);
        assert_eq!(sparse.arp_exact.method, ArpMethod::Series);
        assert!((sparse.arp_exact.value.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!(sparse.bound_spectral.is_none());
    }
}
