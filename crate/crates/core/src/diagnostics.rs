//! Ensemble estimators for density fluctuations and the variance of the
//! quantum-potential fluctuation, with the closed-form predictions they are
//! checked against, and power-law fits over noise amplitude.
//!
//! All estimators work on an ensemble of density fields `n` sharing a
//! companion `n0`. Finite differences are forward, `(n[i+1] − n[i])/λ` and
//! `(n[i+2] − 2n[i+1] + n[i])/λ²`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{Grid1D, PhysicalConstants};
use crate::sqha::istar_with_floor;
use crate::stencil;

pub const MIN_MEMBERS: usize = 100;

/// Second-order statistics of an ensemble of fluctuations `δ = n − n0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FluctuationStats {
    /// Single-point variance, an estimate of `g(0)·Δt`.
    pub g_hat: f64,
    /// Normalized correlation at lags `0, λ, 2λ, ...`.
    #[serde(rename = "G_hat")]
    pub corr: Vec<f64>,
    #[serde(rename = "G_hat_se")]
    pub corr_se: Vec<f64>,
    /// Spatial mean of `(∂q n0)²`.
    #[serde(rename = "A")]
    pub mean_gradient_sq: f64,
    pub d1: Option<f64>,
    pub d2: Option<f64>,
    pub delta_t: f64,
    pub spacing: f64,
    pub members: usize,
}

fn check_ensemble(fields: &[Vec<f64>], grid: &Grid1D) -> Result<()> {
    if fields.len() < MIN_MEMBERS {
        return Err(Error::analysis(format!(
            "ensemble has {} members, at least {MIN_MEMBERS} are needed",
            fields.len()
        )));
    }
    for f in fields {
        grid.check_len(f.len(), "ensemble member")?;
    }
    Ok(())
}

/// Per-cell sample statistics of `x[m][i]` over members `m`.
struct CellMoments {
    mean: Vec<f64>,
    var: Vec<f64>,
    /// Standard error of each `var[i]`.
    var_se: Vec<f64>,
}

/// Values are shifted by member 0 before accumulating, so identical members
/// give exactly zero variance.
fn cell_moments(x: &[Vec<f64>]) -> CellMoments {
    let m = x.len() as f64;
    let len = x[0].len();
    let mut mean = vec![0.0; len];
    let mut var = vec![0.0; len];
    let mut var_se = vec![0.0; len];
    for i in 0..len {
        let origin = x[0][i];
        let mu = x.iter().map(|r| r[i] - origin).sum::<f64>() / m;
        let (mut m2, mut m4) = (0.0, 0.0);
        for r in x {
            let d = r[i] - origin - mu;
            m2 += d * d;
            m4 += d.powi(4);
        }
        let v = m2 / (m - 1.0);
        mean[i] = origin + mu;
        var[i] = v;
        var_se[i] = ((m4 / m - (m2 / m).powi(2)).max(0.0) / m).sqrt();
    }
    CellMoments { mean, var, var_se }
}

fn deviations(fields: &[Vec<f64>], n0: Option<&[f64]>) -> Vec<Vec<f64>> {
    fields
        .iter()
        .map(|f| match n0 {
            Some(z) => f.iter().zip(z).map(|(a, b)| a - b).collect(),
            None => f.clone(),
        })
        .collect()
}

/// `∫n0² dq / ∫n0 dq`, which is `n0` itself for a uniform density.
pub fn weighted_mean_density(n0: &[f64], grid: &Grid1D) -> Option<f64> {
    let mass = grid.integrate(n0);
    let sq: Vec<f64> = n0.iter().map(|v| v * v).collect();
    (mass > 0.0).then(|| grid.integrate(&sq) / mass)
}

/// Sample covariance of the fluctuations at lags `0..=max_lag` cells,
/// normalized by the lag-0 value. Standard errors are jackknife over members.
pub fn estimate_correlation(
    fields: &[Vec<f64>],
    n0: Option<&[f64]>,
    grid: &Grid1D,
    delta_t: f64,
    max_lag: usize,
) -> Result<FluctuationStats> {
    check_ensemble(fields, grid)?;
    if let Some(z) = n0 {
        grid.check_len(z.len(), "n0")?;
    }
    let delta = deviations(fields, n0);
    let centred = {
        let mom = cell_moments(&delta);
        delta
            .iter()
            .map(|r| {
                r.iter()
                    .zip(&mom.mean)
                    .map(|(a, b)| a - b)
                    .collect::<Vec<f64>>()
            })
            .collect::<Vec<_>>()
    };
    let members = fields.len();
    let len = grid.len();
    // per-member contributions y[m][k]
    let y: Vec<Vec<f64>> = centred
        .iter()
        .map(|r| {
            (0..=max_lag)
                .map(|k| {
                    (0..len)
                        .map(|i| r[i] * r[grid.neighbor(i, k as isize)])
                        .sum::<f64>()
                        / len as f64
                })
                .collect()
        })
        .collect();
    let totals: Vec<f64> = (0..=max_lag)
        .map(|k| y.iter().map(|r| r[k]).sum())
        .collect();
    let g_hat = totals[0] / (members as f64 - 1.0);
    let (corr, corr_se) = if totals[0] > 0.0 {
        let corr: Vec<f64> = totals.iter().map(|t| t / totals[0]).collect();
        let m = members as f64;
        let se = (0..=max_lag)
            .map(|k| {
                let loo: Vec<f64> = y
                    .iter()
                    .map(|r| (totals[k] - r[k]) / (totals[0] - r[0]))
                    .collect();
                let mean = loo.iter().sum::<f64>() / m;
                ((m - 1.0) / m * loo.iter().map(|v| (v - mean).powi(2)).sum::<f64>()).sqrt()
            })
            .collect();
        (corr, se)
    } else {
        let mut corr = vec![0.0; max_lag + 1];
        corr[0] = 1.0;
        (corr, vec![0.0; max_lag + 1])
    };
    let (mean_gradient_sq, d) = match n0 {
        Some(z) => {
            let g = stencil::central_gradient(z, grid);
            (
                g.iter().map(|v| v * v).sum::<f64>() / len as f64,
                weighted_mean_density(z, grid),
            )
        }
        None => (0.0, None),
    };
    Ok(FluctuationStats {
        g_hat,
        corr,
        corr_se,
        mean_gradient_sq,
        d1: d,
        d2: d,
        delta_t,
        spacing: grid.spacing(),
        members,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceCheck {
    /// Closed-form prediction from the fluctuation statistics.
    pub formula: f64,
    /// Cell-averaged ensemble variance.
    pub direct: f64,
    /// Standard error of `direct`, taken as fully correlated across cells.
    pub direct_se: f64,
}

impl VarianceCheck {
    pub fn relative_gap(&self) -> f64 {
        if self.direct == 0.0 && self.formula == 0.0 {
            0.0
        } else {
            (self.formula - self.direct).abs() / self.direct.abs()
        }
    }
}

fn forward_gradients(fields: &[Vec<f64>], grid: &Grid1D) -> Vec<Vec<f64>> {
    fields
        .iter()
        .map(|f| stencil::forward_difference(f, grid))
        .collect()
}

fn forward_laplacians(fields: &[Vec<f64>], grid: &Grid1D) -> Vec<Vec<f64>> {
    fields
        .iter()
        .map(|f| stencil::forward_second_difference(f, grid))
        .collect()
}

fn averaged(mom: &CellMoments, cells: &[usize]) -> (f64, f64) {
    let k = cells.len() as f64;
    (
        cells.iter().map(|&i| mom.var[i]).sum::<f64>() / k,
        cells.iter().map(|&i| mom.var_se[i]).sum::<f64>() / k,
    )
}

fn stats_lag(stats: &FluctuationStats, k: usize) -> Result<f64> {
    stats
        .corr
        .get(k)
        .copied()
        .ok_or_else(|| Error::analysis(format!("fluctuation stats lack lag {k}")))
}

/// `S = 2ĝ[1 − Ĝ(λ)]/λ²`, the variance of the forward gradient of δ.
fn gradient_variance(stats: &FluctuationStats) -> Result<f64> {
    Ok(2.0 * stats.g_hat * (1.0 - stats_lag(stats, 1)?) / stats.spacing.powi(2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradsqVariance {
    #[serde(flatten)]
    pub check: VarianceCheck,
    /// The literal four-fold product form, kept for comparison.
    pub formula_printed: f64,
}

/// Variance of `(∂q n)²`. The prediction for a gaussian forward gradient of
/// variance `S` and mean² `A` is `2S² + 4AS`.
pub fn gradsq_variance(
    fields: &[Vec<f64>],
    grid: &Grid1D,
    stats: &FluctuationStats,
) -> Result<GradsqVariance> {
    check_ensemble(fields, grid)?;
    let s = gradient_variance(stats)?;
    let a = stats.mean_gradient_sq;
    let one_minus = 1.0 - stats_lag(stats, 1)?;
    let l = stats.spacing;
    let formula = 2.0 * s * s + 4.0 * a * s;
    let formula_printed = (4.0 * stats.g_hat.powi(2) * one_minus).powi(2) / l.powi(4)
        + 4.0 * a * stats.g_hat * one_minus / (l * l);
    let sq: Vec<Vec<f64>> = forward_gradients(fields, grid)
        .into_iter()
        .map(|r| r.into_iter().map(|d| d * d).collect())
        .collect();
    let all: Vec<usize> = (0..grid.len()).collect();
    let (direct, direct_se) = averaged(&cell_moments(&sq), &all);
    Ok(GradsqVariance {
        check: VarianceCheck {
            formula,
            direct,
            direct_se,
        },
        formula_printed,
    })
}

/// Variance of the forward second difference, predicted as
/// `2ĝ[3 + Ĝ(2λ) − 4Ĝ(λ)]/λ⁴`.
pub fn laplacian_variance(
    fields: &[Vec<f64>],
    grid: &Grid1D,
    stats: &FluctuationStats,
) -> Result<VarianceCheck> {
    check_ensemble(fields, grid)?;
    let formula = 2.0 * stats.g_hat * (3.0 + stats_lag(stats, 2)? - 4.0 * stats_lag(stats, 1)?)
        / stats.spacing.powi(4);
    let all: Vec<usize> = (0..grid.len()).collect();
    let (direct, direct_se) = averaged(&cell_moments(&forward_laplacians(fields, grid)), &all);
    Ok(VarianceCheck {
        formula,
        direct,
        direct_se,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CrossTerm {
    pub value: f64,
    pub se: f64,
}

impl CrossTerm {
    pub fn z(&self) -> f64 {
        if self.se > 0.0 {
            self.value / self.se
        } else if self.value == 0.0 {
            0.0
        } else {
            f64::INFINITY.copysign(self.value)
        }
    }
}

/// Cell-averaged covariance of `∂q²n` with `(∂q n)²`. Its standard error comes
/// from the spread of per-member contributions.
pub fn cross_term(fields: &[Vec<f64>], grid: &Grid1D) -> Result<CrossTerm> {
    check_ensemble(fields, grid)?;
    let lap = forward_laplacians(fields, grid);
    let sq: Vec<Vec<f64>> = forward_gradients(fields, grid)
        .into_iter()
        .map(|r| r.into_iter().map(|d| d * d).collect())
        .collect();
    let ml = cell_moments(&lap).mean;
    let ms = cell_moments(&sq).mean;
    let len = grid.len();
    let per_member: Vec<f64> = lap
        .iter()
        .zip(&sq)
        .map(|(l, s)| {
            (0..len)
                .map(|i| (l[i] - ml[i]) * (s[i] - ms[i]))
                .sum::<f64>()
                / len as f64
        })
        .collect();
    let m = per_member.len() as f64;
    let mean = per_member.iter().sum::<f64>() / m;
    let spread = per_member.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (m - 1.0);
    Ok(CrossTerm {
        value: mean * m / (m - 1.0),
        se: (spread / m).sqrt() * m / (m - 1.0),
    })
}

/// Direct ensemble variances of `I*` and of its central gradient, averaged
/// over `cells`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IstarVariance {
    pub var_istar: f64,
    pub var_istar_se: f64,
    pub var_grad_istar: f64,
    pub var_grad_istar_se: f64,
}

pub fn istar_variance(
    fields: &[Vec<f64>],
    n0: &[f64],
    grid: &Grid1D,
    constants: &PhysicalConstants,
    floor: f64,
    cells: &[usize],
) -> Result<IstarVariance> {
    if cells.is_empty() {
        return Err(Error::analysis("no cells selected for the I* variance"));
    }
    let mut values = Vec::with_capacity(fields.len());
    let mut grads = Vec::with_capacity(fields.len());
    for f in fields {
        let ist = istar_with_floor(f, n0, grid, constants, floor)?;
        if cells.iter().any(|&i| ist.mask[i]) {
            return Err(Error::analysis(
                "a selected cell falls below the density floor",
            ));
        }
        grads.push(stencil::central_gradient(&ist.values, grid));
        values.push(ist.values);
    }
    let (var_istar, var_istar_se) = averaged(&cell_moments(&values), cells);
    let (var_grad_istar, var_grad_istar_se) = averaged(&cell_moments(&grads), cells);
    Ok(IstarVariance {
        var_istar,
        var_istar_se,
        var_grad_istar,
        var_grad_istar_se,
    })
}

/// Cells whose companion density lies within 10 % of `d`.
pub fn cells_near_density(n0: &[f64], d: f64) -> Vec<usize> {
    (0..n0.len())
        .filter(|&i| (n0[i] - d).abs() <= 0.1 * d)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QpVariance {
    /// `(ħ²/2m)²·[d1⁻²·Var(∂q²n) − d2⁻⁴·Var((∂q n)²)]`.
    pub formula: f64,
    /// Linearization of `V_qu = −(ħ²/2m)[∂q²n/(2n) − (∂q n)²/(4n²)]`:
    /// `(ħ²/2m)²·[Var(∂q²n)/(4d1²) + Var((∂q n)²)/(16d2⁴)]`.
    pub formula_linearized: f64,
    /// Ensemble variance of `I*` over cells whose density is near `d1`.
    pub direct: f64,
    pub direct_se: f64,
    pub var_grad_istar: f64,
    pub cells: usize,
    pub warnings: Vec<String>,
}

pub fn qp_variance(
    fields: &[Vec<f64>],
    n0: &[f64],
    grid: &Grid1D,
    constants: &PhysicalConstants,
    stats: &FluctuationStats,
    floor: f64,
) -> Result<QpVariance> {
    check_ensemble(fields, grid)?;
    let (d1, d2) = match (stats.d1, stats.d2) {
        (Some(a), Some(b)) if a > 0.0 && b > 0.0 => (a, b),
        _ => return Err(Error::analysis("QP variance needs positive d1 and d2")),
    };
    let grad = gradsq_variance(fields, grid, stats)?;
    let lap = laplacian_variance(fields, grid, stats)?;
    let pre = constants.qp_prefactor().powi(2);
    let formula = pre * (lap.formula / (d1 * d1) - grad.check.formula / d2.powi(4));
    let formula_linearized =
        pre * (lap.formula / (4.0 * d1 * d1) + grad.check.formula / (16.0 * d2.powi(4)));
    let cells = cells_near_density(n0, d1);
    let direct = istar_variance(fields, n0, grid, constants, floor, &cells)?;
    let mut warnings = Vec::new();
    if formula < 0.0 {
        warnings.push(format!(
            "difference-of-terms QP variance is negative ({formula:e}) at spacing {}",
            stats.spacing
        ));
    }
    Ok(QpVariance {
        formula,
        formula_linearized,
        direct: direct.var_istar,
        direct_se: direct.var_istar_se,
        var_grad_istar: direct.var_grad_istar,
        cells: cells.len(),
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingFitResult {
    pub exponent: f64,
    pub exponent_se: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub theta_values: Vec<f64>,
}

/// Least-squares slope of `ln v` against `ln Θ`.
pub fn scaling_fit(thetas: &[f64], variances: &[f64]) -> Result<ScalingFitResult> {
    if thetas.len() != variances.len() {
        return Err(Error::analysis("theta and variance lists differ in length"));
    }
    if thetas.len() < 4 {
        return Err(Error::analysis(
            "a scaling fit needs at least 4 theta values",
        ));
    }
    if let Some(v) = variances.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::analysis(format!(
            "nonpositive variance {v} in scaling fit"
        )));
    }
    if thetas.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::analysis("theta values must be > 0"));
    }
    let lo = thetas.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = thetas.iter().copied().fold(0.0, f64::max);
    if (hi / lo).log10() < 1.5 - 1e-12 {
        return Err(Error::analysis(format!(
            "theta values span {:.2} decades, at least 1.5 are needed",
            (hi / lo).log10()
        )));
    }
    let x: Vec<f64> = thetas.iter().map(|t| t.ln()).collect();
    let y: Vec<f64> = variances.iter().map(|v| v.ln()).collect();
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x
        .iter()
        .zip(&y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let r_squared = if syy > 0.0 {
        (1.0 - sse / syy).clamp(0.0, 1.0)
    } else {
        1.0
    };
    let exponent_se = if n > 2.0 {
        (sse / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(ScalingFitResult {
        exponent: slope,
        exponent_se,
        intercept,
        r_squared,
        theta_values: thetas.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingSummary {
    pub exponent: f64,
    pub r2: f64,
}

impl From<&ScalingFitResult> for ScalingSummary {
    fn from(r: &ScalingFitResult) -> Self {
        Self {
            exponent: r.exponent,
            r2: r.r_squared,
        }
    }
}

/// The diagnostics JSON document.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub g_hat: f64,
    #[serde(rename = "G_hat")]
    pub corr: Vec<f64>,
    #[serde(rename = "A")]
    pub mean_gradient_sq: f64,
    pub d1: Option<f64>,
    pub d2: Option<f64>,
    pub gradsq_var_formula: f64,
    pub gradsq_var_formula_printed: f64,
    pub gradsq_var_direct: f64,
    pub laplacian_var_formula: f64,
    pub laplacian_var_direct: f64,
    pub cross_term: f64,
    pub cross_term_se: f64,
    pub qp_var_formula: Option<f64>,
    pub qp_var_formula_linearized: Option<f64>,
    pub qp_var_direct: Option<f64>,
    pub scaling: Option<ScalingSummary>,
    pub warnings: Vec<String>,
}

/// Runs every estimator on one ensemble. The QP variance is skipped, with a
/// warning, when no cell has a density near `d1`.
pub fn diagnose(
    fields: &[Vec<f64>],
    n0: &[f64],
    grid: &Grid1D,
    constants: &PhysicalConstants,
    delta_t: f64,
    floor: f64,
) -> Result<DiagnosticsReport> {
    let stats = estimate_correlation(fields, Some(n0), grid, delta_t, (grid.len() / 2).min(64))?;
    let grad = gradsq_variance(fields, grid, &stats)?;
    let lap = laplacian_variance(fields, grid, &stats)?;
    let cross = cross_term(fields, grid)?;
    let mut warnings = Vec::new();
    let qp = match qp_variance(fields, n0, grid, constants, &stats, floor) {
        Ok(q) => {
            warnings.extend(q.warnings.iter().cloned());
            Some(q)
        }
        Err(e) => {
            warnings.push(format!("QP variance skipped: {e}"));
            None
        }
    };
    Ok(DiagnosticsReport {
        g_hat: stats.g_hat,
        corr: stats.corr.clone(),
        mean_gradient_sq: stats.mean_gradient_sq,
        d1: stats.d1,
        d2: stats.d2,
        gradsq_var_formula: grad.check.formula,
        gradsq_var_formula_printed: grad.formula_printed,
        gradsq_var_direct: grad.check.direct,
        laplacian_var_formula: lap.formula,
        laplacian_var_direct: lap.direct,
        cross_term: cross.value,
        cross_term_se: cross.se,
        qp_var_formula: qp.as_ref().map(|q| q.formula),
        qp_var_formula_linearized: qp.as_ref().map(|q| q.formula_linearized),
        qp_var_direct: qp.as_ref().map(|q| q.direct),
        scaling: None,
        warnings,
    })
}
