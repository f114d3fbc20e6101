//! Tail exponents of stationary profiles, convergence of the quantum-force
//! integral `∫ |q⁻¹ dV_qu/dq| dq`, the nonlocal length λ_L and the regime
//! classifier.
//!
//! Integrals run over the right-hand tail, `q > 0`, measured from the grid
//! origin.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid1D, PhysicalConstants, WfmField};
use crate::noise::LengthScale;
use crate::quantum_potential::{qp_sqrt_density, DEFAULT_FLOOR};

/// Asymptotic tail: the window must lie where `n < TAIL_LEVEL · max n`.
pub const TAIL_LEVEL: f64 = 1e-3;
pub const MIN_WINDOW_CELLS: usize = 10;
/// Relative increment per doubling window above which the partial integrals
/// are still growing.
pub const CAUCHY_TOL: f64 = 1e-3;
const CAUCHY_WINDOWS: usize = 3;
/// Integrand below this fraction of its maximum is treated as vanishing.
const VANISHING: f64 = 1e-9;
const MAX_PHASE_DEGREE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailFit {
    pub h: f64,
    /// `3 − 2h`; the force integral converges for `phi > 0`.
    pub phi: f64,
    pub fit_window: (f64, f64),
    pub cells: usize,
    /// RMS residual of the log-log fit.
    pub residual: f64,
    /// `h` refitted together with the prefactor power.
    pub h_with_prefactor: f64,
    /// Power `m` in `n^{1/2} ≈ c·q^m·exp(−a q^h)`.
    pub m_exp: f64,
    /// Lowest polynomial degree that reproduces `S/ħ` on the window, if any
    /// up to 4 does.
    pub p_deg: Option<usize>,
}

fn window_cells(grid: &Grid1D, window: (f64, f64)) -> Vec<usize> {
    (0..grid.len())
        .filter(|&i| {
            let q = grid.center(i);
            q >= window.0 && q <= window.1
        })
        .collect()
}

/// The right-hand cells with `floor < n/max n < TAIL_LEVEL`.
pub fn auto_tail_window(field: &WfmField, grid: &Grid1D, floor: f64) -> Result<(f64, f64)> {
    let max = field.max_density();
    let cells: Vec<usize> = (0..grid.len())
        .filter(|&i| {
            let r = field.n[i] / max;
            grid.center(i) > 0.0 && r > floor && r < TAIL_LEVEL
        })
        .collect();
    match (cells.first(), cells.last()) {
        (Some(&a), Some(&b)) => Ok((grid.center(a), grid.center(b))),
        _ => Err(Error::analysis(
            "no cells in the asymptotic right-hand tail",
        )),
    }
}

/// Least-squares `(slope, intercept, rms residual)`.
fn line_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    (slope, intercept, (sse / n).sqrt())
}

fn least_squares(columns: &[Vec<f64>], y: &[f64]) -> Result<(Vec<f64>, f64)> {
    let rows = y.len();
    let a = DMatrix::from_fn(rows, columns.len(), |r, c| columns[c][r]);
    let b = DVector::from_column_slice(y);
    let coef = a
        .clone()
        .svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|e| Error::analysis(format!("least squares failed: {e}")))?;
    let rms = ((&a * &coef - &b).norm_squared() / rows as f64).sqrt();
    Ok((coef.iter().copied().collect(), rms))
}

/// Fits `log(−log(n/max n)^{1/2})` against `log|q|` over `window`.
pub fn tail_exponent(
    field: &WfmField,
    grid: &Grid1D,
    constants: &PhysicalConstants,
    window: (f64, f64),
    floor: f64,
) -> Result<TailFit> {
    grid.check_len(field.len(), "field")?;
    if !(window.0 < window.1) || window.0 < grid.x_min() || window.1 > grid.x_max() {
        return Err(Error::analysis(format!(
            "fit window ({}, {}) is not inside the grid",
            window.0, window.1
        )));
    }
    let cells = window_cells(grid, window);
    if cells.len() < MIN_WINDOW_CELLS {
        return Err(Error::analysis(format!(
            "fit window holds {} cells, at least {MIN_WINDOW_CELLS} are needed",
            cells.len()
        )));
    }
    let max = field.max_density();
    let (mut x, mut y, mut decay) = (Vec::new(), Vec::new(), Vec::new());
    for &i in &cells {
        let q = grid.center(i).abs();
        let r = field.n[i] / max;
        if !(r > floor) {
            return Err(Error::analysis(format!(
                "density below the floor at q = {q}"
            )));
        }
        if r >= TAIL_LEVEL {
            return Err(Error::analysis(format!(
                "q = {q} is not in the asymptotic tail (n/max n = {r:e})"
            )));
        }
        let l = -0.5 * r.ln();
        if !(l > 0.0) || q == 0.0 {
            return Err(Error::analysis("profile does not decay over the window"));
        }
        x.push(q.ln());
        y.push(l.ln());
        decay.push((q, 0.5 * r.ln()));
    }
    let (h, _, residual) = line_fit(&x, &y);
    if !(h > 0.0) {
        return Err(Error::analysis(format!(
            "non-decaying profile, fitted h = {h}"
        )));
    }
    let (h_with_prefactor, m_exp) = prefactor_fit(&decay)?;
    let p_deg = phase_degree(field, grid, constants, &cells)?;
    Ok(TailFit {
        h,
        phi: 3.0 - 2.0 * h,
        fit_window: window,
        cells: cells.len(),
        residual,
        h_with_prefactor,
        m_exp,
        p_deg,
    })
}

/// Fits `ln n^{1/2} = c − a·q^h + m·ln q`. The model is linear for fixed `h`,
/// so `h` is found by golden-section search on the residual.
fn prefactor_fit(decay: &[(f64, f64)]) -> Result<(f64, f64)> {
    let ones = vec![1.0; decay.len()];
    let lq: Vec<f64> = decay.iter().map(|(q, _)| q.ln()).collect();
    let target: Vec<f64> = decay.iter().map(|(_, l)| *l).collect();
    let solve = |h: f64| {
        let qh: Vec<f64> = decay.iter().map(|(q, _)| -q.powf(h)).collect();
        least_squares(&[ones.clone(), qh, lq.clone()], &target)
    };
    let ratio = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (0.05, 4.0);
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (solve(c)?.1, solve(d)?.1);
    while b - a > 1e-6 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = solve(c)?.1;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = solve(d)?.1;
        }
    }
    let h = 0.5 * (a + b);
    Ok((h, solve(h)?.0[2]))
}

fn phase_degree(
    field: &WfmField,
    grid: &Grid1D,
    constants: &PhysicalConstants,
    cells: &[usize],
) -> Result<Option<usize>> {
    let q: Vec<f64> = cells.iter().map(|&i| grid.center(i)).collect();
    let phase: Vec<f64> = cells.iter().map(|&i| field.s[i] / constants.hbar).collect();
    let scale = phase.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    // centre and scale q so the monomials stay well conditioned
    let (lo, hi) = (q[0], q[q.len() - 1]);
    let t: Vec<f64> = q.iter().map(|v| (2.0 * v - lo - hi) / (hi - lo)).collect();
    for deg in 0..=MAX_PHASE_DEGREE.min(cells.len() - 2) {
        let cols: Vec<Vec<f64>> = (0..=deg)
            .map(|k| t.iter().map(|v| v.powi(k as i32)).collect())
            .collect();
        let (_, rms) = least_squares(&cols, &phase)?;
        if rms <= 1e-9 * scale {
            return Ok(Some(deg));
        }
    }
    Ok(None)
}

/// A prefactor `q^m·Σ a_n exp(i A_n(q))` with `A_n` of degree `p_deg` keeps the
/// force integral finite for any real `m` as long as `p_deg ≤ 1`.
pub fn prefactor_admissible(_m_exp: f64, p_deg: usize) -> bool {
    p_deg <= 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convergence {
    Converges,
    Diverges,
    Indeterminate,
}

impl fmt::Display for Convergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Convergence::Converges => "converges",
            Convergence::Diverges => "diverges",
            Convergence::Indeterminate => "indeterminate",
        })
    }
}

/// How the part of the integral beyond the resolved tail is judged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailMode {
    /// Doubling-window Cauchy test and fitted integrand power must agree.
    #[default]
    Grid,
    /// The fitted power decides, and a converging power-law tail is added.
    Extrapolate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForceIntegral {
    /// Integral over the resolved tail, plus the extrapolated remainder in
    /// [`TailMode::Extrapolate`] when it converges.
    pub value: f64,
    pub resolved_value: f64,
    /// End of the resolved tail.
    pub q_end: f64,
    pub cauchy: Convergence,
    /// Power of the integrand on the outermost doubling window; `-inf` when
    /// the integrand vanishes there.
    pub fitted_power: f64,
    pub verdict: Convergence,
    pub diverges: bool,
}

/// `|q⁻¹·f|` for q > 0 at unmasked cells.
fn integrand(force: &[f64], grid: &Grid1D, i: usize) -> f64 {
    (force[i] / grid.center(i)).abs()
}

/// Last right-hand cell reachable from `q_min` without touching the mask.
fn resolved_end(mask: &[bool], grid: &Grid1D, q_min: f64) -> Result<usize> {
    let start = (0..grid.len())
        .find(|&i| grid.center(i) >= q_min)
        .ok_or_else(|| Error::analysis(format!("q_min = {q_min} lies beyond the grid")))?;
    let mut end = None;
    for i in start..grid.len() {
        if mask[i] {
            break;
        }
        end = Some(i);
    }
    match end {
        Some(e) if e > start => Ok(e),
        _ => Err(Error::analysis("the density mask covers the tail")),
    }
}

/// Trapezoid of `f` over cell centres between `lo` and `grid.center(end)`,
/// with `f(lo)` interpolated from the bracketing centres.
fn trapezoid_from(f: impl Fn(usize) -> f64, grid: &Grid1D, lo: f64, end: usize) -> f64 {
    let first = (0..=end).find(|&i| grid.center(i) >= lo).unwrap_or(end);
    let mut total = 0.0;
    if first > 0 && grid.center(first) > lo {
        let (qa, qb) = (grid.center(first - 1), grid.center(first));
        let w = (lo - qa) / (qb - qa);
        let f_lo = (1.0 - w) * f(first - 1) + w * f(first);
        total += 0.5 * (f_lo + f(first)) * (qb - lo);
    }
    for i in first..end {
        total += 0.5 * (f(i) + f(i + 1)) * (grid.center(i + 1) - grid.center(i));
    }
    total
}

fn power_fit(force: &[f64], grid: &Grid1D, end: usize) -> (f64, f64) {
    let q_end = grid.center(end);
    let all_max = (0..=end)
        .filter(|&i| grid.center(i) > 0.0)
        .map(|i| integrand(force, grid, i))
        .fold(0.0, f64::max);
    let window: Vec<usize> = (0..=end)
        .filter(|&i| grid.center(i) >= 0.5 * q_end)
        .collect();
    let tail_max = window
        .iter()
        .map(|&i| integrand(force, grid, i))
        .fold(0.0, f64::max);
    if window.len() < 3 || tail_max <= VANISHING * all_max {
        return (f64::NEG_INFINITY, 0.0);
    }
    let (x, y): (Vec<f64>, Vec<f64>) = window
        .iter()
        .map(|&i| (grid.center(i).ln(), integrand(force, grid, i)))
        .filter(|(_, v)| *v > 0.0)
        .map(|(a, v)| (a, v.ln()))
        .unzip();
    if x.len() < 3 {
        return (f64::NEG_INFINITY, 0.0);
    }
    let (p, c, _) = line_fit(&x, &y);
    (p, c)
}

/// `∫_{q_min} |q⁻¹·force| dq` over the resolved right-hand tail, with a
/// convergence verdict. `force` is `dV_qu/dq` (the sign is irrelevant).
pub fn force_integral(
    force: &[f64],
    mask: &[bool],
    grid: &Grid1D,
    q_min: f64,
    mode: TailMode,
) -> Result<ForceIntegral> {
    grid.check_len(force.len(), "force")?;
    grid.check_len(mask.len(), "mask")?;
    if !(q_min > 0.0) {
        return Err(Error::analysis(format!("q_min must be > 0, got {q_min}")));
    }
    if let Some(i) = (0..grid.len()).find(|&i| !mask[i] && !force[i].is_finite()) {
        return Err(Error::analysis(format!(
            "force is not finite at q = {}",
            grid.center(i)
        )));
    }
    let end = resolved_end(mask, grid, q_min)?;
    let q_end = grid.center(end);
    let f = |i: usize| integrand(force, grid, i);
    let resolved_value = trapezoid_from(f, grid, q_min, end);

    // doubling windows counted inwards from the end of the resolved tail
    let mut edges = vec![q_end];
    while edges[edges.len() - 1] * 0.5 >= q_min {
        edges.push(edges[edges.len() - 1] * 0.5);
    }
    edges.reverse();
    let cauchy = if edges.len() < CAUCHY_WINDOWS + 1 {
        Convergence::Indeterminate
    } else {
        let partial = |q: f64| {
            let last = (0..=end).rev().find(|&i| grid.center(i) <= q).unwrap_or(0);
            trapezoid_from(f, grid, q_min, last)
        };
        let growing = edges.windows(2).rev().take(CAUCHY_WINDOWS).all(|w| {
            let (a, b) = (partial(w[0]), partial(w[1]));
            b > 0.0 && (b - a) / b > CAUCHY_TOL
        });
        if growing {
            Convergence::Diverges
        } else {
            Convergence::Converges
        }
    };
    let (fitted_power, log_c) = power_fit(force, grid, end);
    let by_power = if fitted_power >= -1.0 {
        Convergence::Diverges
    } else {
        Convergence::Converges
    };
    let verdict = match mode {
        TailMode::Extrapolate => by_power,
        TailMode::Grid if cauchy == by_power => by_power,
        TailMode::Grid => Convergence::Indeterminate,
    };
    let mut value = resolved_value;
    if mode == TailMode::Extrapolate
        && verdict == Convergence::Converges
        && fitted_power.is_finite()
    {
        value += log_c.exp() * q_end.powf(fitted_power + 1.0) / (-(fitted_power + 1.0));
    }
    Ok(ForceIntegral {
        value,
        resolved_value,
        q_end,
        cauchy,
        fitted_power,
        verdict,
        diverges: verdict == Convergence::Diverges,
    })
}

/// `dV_qu/dq` by central differences of the √n-form potential, with the
/// cells whose stencil touches the density mask marked.
pub fn qp_force(
    field: &WfmField,
    grid: &Grid1D,
    constants: &PhysicalConstants,
    floor: f64,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let qp = qp_sqrt_density(&field.n, grid, constants, floor)?;
    let len = grid.len();
    let mut mask = vec![false; len];
    let mut force = vec![0.0; len];
    for i in 0..len {
        let (l, r) = (grid.neighbor(i, -1), grid.neighbor(i, 1));
        mask[i] = qp.floor_mask[l] || qp.floor_mask[i] || qp.floor_mask[r] || l == i || r == i;
        if !mask[i] {
            force[i] = (qp.v_qu[r] - qp.v_qu[l]) / (grid.center(r) - grid.center(l));
        }
    }
    Ok((force, mask))
}

/// `λ_L = 2·∫₀^∞ |q⁻¹ dV_qu/dq| dq / (λc⁻¹·|dV_qu/dq|(λc))`.
///
/// Infinite when the integral diverges. Errors when the verdict is
/// indeterminate or the force vanishes at `q = λc`.
pub fn lambda_l(
    force: &[f64],
    mask: &[bool],
    grid: &Grid1D,
    lambda_c: f64,
    integral: &ForceIntegral,
) -> Result<LengthScale> {
    match integral.verdict {
        Convergence::Diverges => return Ok(LengthScale::Infinite),
        Convergence::Indeterminate => {
            return Err(Error::analysis(
                "λ_L undefined: force-integral convergence is indeterminate",
            ))
        }
        Convergence::Converges => {}
    }
    if !(lambda_c > 0.0 && lambda_c.is_finite()) {
        return Err(Error::analysis(format!(
            "λ_L needs a finite λc > 0, got {lambda_c}"
        )));
    }
    let end = resolved_end(mask, grid, grid.spacing() * 0.5)?;
    if lambda_c > grid.center(end) {
        return Err(Error::analysis("λc lies beyond the resolved tail"));
    }
    let f = |i: usize| integrand(force, grid, i);
    let tail = integral.value - integral.resolved_value;
    let numerator = 2.0 * (trapezoid_from(f, grid, 0.0, end) + tail);
    let k = (0..end)
        .find(|&i| grid.center(i + 1) >= lambda_c)
        .unwrap_or(end - 1);
    let (qa, qb) = (grid.center(k), grid.center(k + 1));
    let w = (lambda_c - qa) / (qb - qa);
    let at_lc = ((1.0 - w) * force[k] + w * force[k + 1]).abs();
    let denominator = at_lc / lambda_c;
    let scale = (0..=end).map(|i| force[i].abs()).fold(0.0, f64::max);
    if !(denominator > 0.0) || at_lc <= VANISHING * scale {
        return Err(Error::analysis(
            "λ_L undefined: the force vanishes at q = λc",
        ));
    }
    Ok(LengthScale::Finite(numerator / denominator))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    NonLocalDeterministic,
    LocalDeterministic,
    MicroscopicStochastic,
    MacroscopicNonlocalStochastic,
    MacroscopicLocalStochastic,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::NonLocalDeterministic => "non_local_deterministic",
            Regime::LocalDeterministic => "local_deterministic",
            Regime::MicroscopicStochastic => "microscopic_stochastic",
            Regime::MacroscopicNonlocalStochastic => "macroscopic_nonlocal_stochastic",
            Regime::MacroscopicLocalStochastic => "macroscopic_local_stochastic",
        })
    }
}

/// "Much larger" and "much smaller" as ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegimeThresholds {
    /// Resolution over λc at or above which the description is macroscopic.
    pub macroscopic_ratio: f64,
    /// λ_L over resolution at or below which it is local.
    pub local_ratio: f64,
}

impl Default for RegimeThresholds {
    fn default() -> Self {
        Self {
            macroscopic_ratio: 10.0,
            local_ratio: 0.1,
        }
    }
}

pub fn classify_regime(
    lambda_c: LengthScale,
    lambda_l: LengthScale,
    resolution: f64,
    system_length: f64,
    theta: f64,
    hbar: f64,
    thresholds: &RegimeThresholds,
) -> Result<Regime> {
    if !(resolution > 0.0) || resolution > system_length {
        return Err(Error::config(format!(
            "resolution {resolution} must be > 0 and ≤ system length {system_length}"
        )));
    }
    if theta < 0.0 || hbar < 0.0 {
        return Err(Error::config("theta and hbar must be ≥ 0"));
    }
    if theta == 0.0 {
        if let LengthScale::Finite(v) = lambda_c {
            return Err(Error::config(format!(
                "theta = 0 requires an infinite λc, got {v}"
            )));
        }
        return Ok(if hbar == 0.0 {
            Regime::LocalDeterministic
        } else {
            Regime::NonLocalDeterministic
        });
    }
    let lc = match lambda_c {
        LengthScale::Finite(v) if v >= 0.0 => v,
        _ => {
            return Err(Error::config("theta > 0 requires a finite λc"));
        }
    };
    if resolution < thresholds.macroscopic_ratio * lc {
        return Ok(Regime::MicroscopicStochastic);
    }
    let local = match lambda_l {
        LengthScale::Finite(l) => l <= thresholds.local_ratio * resolution,
        LengthScale::Infinite => false,
    };
    Ok(if local {
        Regime::MacroscopicLocalStochastic
    } else {
        Regime::MacroscopicNonlocalStochastic
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NonlocalityOptions {
    pub window: Option<(f64, f64)>,
    /// Lower end of the force integral; two cells when unset.
    pub q_min: Option<f64>,
    pub tail_mode: TailMode,
    pub floor: f64,
    pub thresholds: RegimeThresholds,
}

impl Default for NonlocalityOptions {
    fn default() -> Self {
        Self {
            window: None,
            q_min: None,
            tail_mode: TailMode::Grid,
            floor: DEFAULT_FLOOR,
            thresholds: RegimeThresholds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NonlocalityReport {
    pub tail: TailFit,
    pub prefactor_admissible: bool,
    pub integral: ForceIntegral,
    pub lambda_l: Option<LengthScale>,
    pub lambda_c: LengthScale,
    pub regime: Option<Regime>,
    pub notes: Vec<String>,
}

impl NonlocalityReport {
    pub fn verdict(&self) -> String {
        let l = self
            .lambda_l
            .map_or_else(|| "undefined".to_string(), |v| v.to_string());
        let r = self
            .regime
            .map_or_else(|| "unclassified".to_string(), |v| v.to_string());
        format!(
            "h = {:.3} (phi = {:.3}), force integral {}, lambda_L = {l}, regime {r}",
            self.tail.h, self.tail.phi, self.integral.verdict
        )
    }
}

/// Runs the tail fit, force integral, λ_L and classifier on one profile.
/// `resolution` is the coarse-graining length of the description.
pub fn analyze(
    field: &WfmField,
    grid: &Grid1D,
    constants: &PhysicalConstants,
    theta: f64,
    lambda_c: LengthScale,
    resolution: f64,
    options: &NonlocalityOptions,
) -> Result<NonlocalityReport> {
    let window = match options.window {
        Some(w) => w,
        None => auto_tail_window(field, grid, options.floor)?,
    };
    let tail = tail_exponent(field, grid, constants, window, options.floor)?;
    let (force, mask) = qp_force(field, grid, constants, options.floor)?;
    let q_min = options.q_min.unwrap_or(2.0 * grid.spacing());
    let integral = force_integral(&force, &mask, grid, q_min, options.tail_mode)?;
    let mut notes = Vec::new();
    let lambda_l = match (integral.verdict, lambda_c) {
        (Convergence::Diverges, _) => Some(LengthScale::Infinite),
        (_, LengthScale::Finite(lc)) => match lambda_l(&force, &mask, grid, lc, &integral) {
            Ok(v) => Some(v),
            Err(e) => {
                notes.push(e.to_string());
                None
            }
        },
        (_, LengthScale::Infinite) => {
            notes.push("λ_L needs a finite λc".into());
            None
        }
    };
    let regime = if theta == 0.0 {
        Some(classify_regime(
            lambda_c,
            lambda_l.unwrap_or(LengthScale::Infinite),
            resolution,
            grid.length(),
            theta,
            constants.hbar,
            &options.thresholds,
        )?)
    } else {
        match lambda_l {
            Some(l) => Some(classify_regime(
                lambda_c,
                l,
                resolution,
                grid.length(),
                theta,
                constants.hbar,
                &options.thresholds,
            )?),
            None => {
                notes.push("regime left unclassified because λ_L is undefined".into());
                None
            }
        }
    };
    Ok(NonlocalityReport {
        prefactor_admissible: tail
            .p_deg
            .is_some_and(|p| prefactor_admissible(tail.m_exp, p)),
        tail,
        integral,
        lambda_l,
        lambda_c,
        regime,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{init_profile, Boundary, ProfileSpec};
    use proptest::prelude::*;

    const UNIT: PhysicalConstants = PhysicalConstants {
        hbar: 1.0,
        mass: 1.0,
        boltzmann: 1.0,
        light_speed: 1.0,
    };

    fn profile(half: f64, cells: usize, spec: ProfileSpec) -> (Grid1D, WfmField) {
        let g = Grid1D::symmetric(half, cells, Boundary::Periodic).unwrap();
        let f = init_profile(&g, &spec, &UNIT).unwrap();
        (g, f)
    }

    fn stretched(h: f64) -> (Grid1D, WfmField) {
        // the density reaches the 1e-12 floor at |q|^h ≈ 13.8
        let reach = 13.8f64.powf(1.0 / h);
        let half = 1.3 * reach;
        profile(
            half,
            ((half / 0.02) as usize).min(20000) & !1,
            ProfileSpec::StretchedExp { h, scale: 1.0 },
        )
    }

    fn fit(g: &Grid1D, f: &WfmField) -> TailFit {
        let w = auto_tail_window(f, g, DEFAULT_FLOOR).unwrap();
        tail_exponent(f, g, &UNIT, w, DEFAULT_FLOOR).unwrap()
    }

    #[test]
    fn tail_exponents_of_constructed_profiles() {
        for h in [1.0, 1.2] {
            let (g, f) = stretched(h);
            let t = fit(&g, &f);
            assert!((t.h - h).abs() < 0.05, "h = {h}: {t:?}");
            assert!((t.phi - (3.0 - 2.0 * t.h)).abs() < 1e-15);
        }
        let (g, f) = profile(
            9.0,
            900,
            ProfileSpec::Gaussian {
                sigma: 1.0,
                q0: 0.0,
            },
        );
        let t = fit(&g, &f);
        assert!((t.h - 2.0).abs() < 0.05, "{t:?}");
        assert_eq!(t.p_deg, Some(0));
    }

    #[test]
    fn tail_fit_rejects_bad_windows() {
        let (g, f) = profile(
            9.0,
            900,
            ProfileSpec::Gaussian {
                sigma: 1.0,
                q0: 0.0,
            },
        );
        let small = tail_exponent(&f, &g, &UNIT, (2.0, 2.1), DEFAULT_FLOOR);
        assert!(matches!(small, Err(Error::Analysis(m)) if m.contains("cells")));
        let core = tail_exponent(&f, &g, &UNIT, (0.5, 2.5), DEFAULT_FLOOR);
        assert!(matches!(core, Err(Error::Analysis(m)) if m.contains("asymptotic")));
        let outside = tail_exponent(&f, &g, &UNIT, (2.0, 7.0), DEFAULT_FLOOR);
        assert!(outside.is_err());
        // density rising towards the right edge
        let rising =
            WfmField::from_density(g.centers().iter().map(|q| (3.0 * q).exp()).collect()).unwrap();
        let r = tail_exponent(&rising, &g, &UNIT, (1.0, 3.0), DEFAULT_FLOOR);
        assert!(matches!(r, Err(Error::Analysis(m)) if m.contains("non-decaying")));
    }

    #[test]
    fn prefactor_power_and_phase_degree() {
        let g = Grid1D::symmetric(30.0, 3000, Boundary::Periodic).unwrap();
        let q = g.centers();
        let amp: Vec<f64> = q
            .iter()
            .map(|v| v.abs().powf(1.5) * (-v.abs()).exp())
            .collect();
        let n: Vec<f64> = amp.iter().map(|a| a * a).collect();
        for (s_of, want) in [
            (Box::new(|_: f64| 0.0) as Box<dyn Fn(f64) -> f64>, 0),
            (Box::new(|x: f64| 0.7 * x), 1),
            (Box::new(|x: f64| 0.3 * x * x - x), 2),
        ] {
            let f = WfmField::new(n.clone(), q.iter().map(|v| s_of(*v)).collect()).unwrap();
            let t = tail_exponent(&f, &g, &UNIT, (10.0, 16.0), DEFAULT_FLOOR).unwrap();
            assert!((t.m_exp - 1.5).abs() < 0.05, "{t:?}");
            assert!((t.h_with_prefactor - 1.0).abs() < 0.01, "{t:?}");
            assert_eq!(t.p_deg, Some(want));
        }
    }

    #[test]
    fn prefactor_condition() {
        assert!(prefactor_admissible(3.7, 1));
        assert!(!prefactor_admissible(0.0, 2));
        assert!(prefactor_admissible(-2.0, 0));
    }

    fn integral_of(g: &Grid1D, f: &WfmField, mode: TailMode) -> ForceIntegral {
        let (force, mask) = qp_force(f, g, &UNIT, DEFAULT_FLOOR).unwrap();
        force_integral(&force, &mask, g, 2.0 * g.spacing(), mode).unwrap()
    }

    #[test]
    fn smooth_exponential_tail_converges_and_gaussian_diverges() {
        let (g, f) = profile(20.0, 2000, ProfileSpec::SmoothTail { h: 1.0, scale: 1.0 });
        let i = integral_of(&g, &f, TailMode::Grid);
        assert_eq!(
            (i.cauchy, i.verdict),
            (Convergence::Converges, Convergence::Converges),
            "{i:?}"
        );
        assert!(i.fitted_power < -3.5, "{i:?}");
        let (g, f) = profile(
            9.0,
            900,
            ProfileSpec::Gaussian {
                sigma: 1.0,
                q0: 0.0,
            },
        );
        let i = integral_of(&g, &f, TailMode::Grid);
        assert_eq!(i.verdict, Convergence::Diverges, "{i:?}");
        assert!(i.diverges);
        assert!(i.fitted_power.abs() < 0.1, "{i:?}");
    }

    #[test]
    fn inverse_square_integrand_matches_closed_form() {
        let g = Grid1D::new(-50.0, 50.0, 10000, Boundary::Periodic).unwrap();
        let force: Vec<f64> = g.centers().iter().map(|q| 1.0 / q).collect();
        let mask = vec![false; g.len()];
        let i = force_integral(&force, &mask, &g, 1.0, TailMode::Extrapolate).unwrap();
        assert_eq!(i.verdict, Convergence::Converges);
        assert!((i.value - 1.0).abs() < 0.01, "{i:?}");
        assert!((i.fitted_power + 2.0).abs() < 1e-3);
        // the doubling test alone still sees the slow q⁻¹ approach
        let i = force_integral(&force, &mask, &g, 1.0, TailMode::Grid).unwrap();
        assert_eq!(i.cauchy, Convergence::Diverges);
        assert_eq!(i.verdict, Convergence::Indeterminate);
    }

    #[test]
    fn force_integral_errors() {
        let g = Grid1D::symmetric(5.0, 100, Boundary::Periodic).unwrap();
        let force = vec![1.0; 100];
        let mut mask = vec![false; 100];
        assert!(force_integral(&force, &mask, &g, 0.0, TailMode::Grid).is_err());
        for m in mask.iter_mut().skip(50) {
            *m = true;
        }
        let e = force_integral(&force, &mask, &g, 1.0, TailMode::Grid);
        assert!(matches!(e, Err(Error::Analysis(m)) if m.contains("mask")));
    }

    #[test]
    fn convergence_follows_the_exponent_across_the_family() {
        for h in [0.5, 1.0, 1.4, 1.6, 2.0] {
            let (g, f) = stretched(h);
            let i = integral_of(&g, &f, TailMode::Extrapolate);
            assert_eq!(i.diverges, h >= 1.5, "h = {h}: {i:?}");
        }
    }

    fn smooth_tail_lambda_l(scale: f64) -> f64 {
        let x = 1.0 / scale;
        let u = (1.0 + x * x).sqrt();
        let num = (std::f64::consts::FRAC_PI_2 + 2.0) / (2.0 * scale.powi(3));
        let den = (2.0 * x / u.powi(4) + 3.0 * x / u.powi(5)) / (2.0 * scale.powi(3));
        2.0 * num / den
    }

    #[test]
    fn lambda_l_of_smooth_exponential_tail_matches_closed_form() {
        let (g, f) = profile(20.0, 2000, ProfileSpec::SmoothTail { h: 1.0, scale: 1.0 });
        let (force, mask) = qp_force(&f, &g, &UNIT, DEFAULT_FLOOR).unwrap();
        let i = force_integral(&force, &mask, &g, 2.0 * g.spacing(), TailMode::Grid).unwrap();
        let l = lambda_l(&force, &mask, &g, 1.0, &i).unwrap().value();
        let want = smooth_tail_lambda_l(1.0);
        assert!((l / want - 1.0).abs() < 0.02, "{l} vs {want}");

        let scaled = WfmField::new(f.n.iter().map(|v| v * 37.5).collect(), f.s.clone()).unwrap();
        let (force2, mask2) = qp_force(&scaled, &g, &UNIT, DEFAULT_FLOOR).unwrap();
        let i2 = force_integral(&force2, &mask2, &g, 2.0 * g.spacing(), TailMode::Grid).unwrap();
        let l2 = lambda_l(&force2, &mask2, &g, 1.0, &i2).unwrap().value();
        assert!((l2 / l - 1.0).abs() < 1e-10);
    }

    #[test]
    fn gaussian_lambda_l_is_infinite() {
        let (g, f) = profile(
            9.0,
            900,
            ProfileSpec::Gaussian {
                sigma: 1.0,
                q0: 0.0,
            },
        );
        let (force, mask) = qp_force(&f, &g, &UNIT, DEFAULT_FLOOR).unwrap();
        let i = force_integral(&force, &mask, &g, 0.05, TailMode::Grid).unwrap();
        assert_eq!(
            lambda_l(&force, &mask, &g, 1.0, &i).unwrap(),
            LengthScale::Infinite
        );
    }

    #[test]
    fn compact_force_gives_a_short_lambda_l() {
        let g = Grid1D::symmetric(10.0, 2000, Boundary::Periodic).unwrap();
        let r = 2.0;
        let force: Vec<f64> = g
            .centers()
            .iter()
            .map(|q| {
                if q.abs() < r {
                    q * (r * r - q * q)
                } else {
                    0.0
                }
            })
            .collect();
        let mask = vec![false; g.len()];
        let i = force_integral(&force, &mask, &g, 0.01, TailMode::Grid).unwrap();
        assert_eq!(i.verdict, Convergence::Converges, "{i:?}");
        let l = lambda_l(&force, &mask, &g, 1.0, &i).unwrap().value();
        let want = 2.0 * (2.0 * r.powi(3) / 3.0) / (r * r - 1.0);
        assert!((l / want - 1.0).abs() < 1e-3, "{l} vs {want}");
        assert!(l <= 2.0 * r);
        // λc outside the core: the denominator vanishes
        let e = lambda_l(&force, &mask, &g, 3.0, &i);
        assert!(matches!(e, Err(Error::Analysis(m)) if m.contains("vanishes")));
    }

    #[test]
    fn regime_examples() {
        let t = RegimeThresholds::default();
        let inf = LengthScale::Infinite;
        assert_eq!(
            classify_regime(inf, inf, 1.0, 10.0, 0.0, 1.0, &t).unwrap(),
            Regime::NonLocalDeterministic
        );
        assert_eq!(
            classify_regime(inf, inf, 1.0, 10.0, 0.0, 0.0, &t).unwrap(),
            Regime::LocalDeterministic
        );
        let lc = LengthScale::Finite(1e-3);
        assert_eq!(
            classify_regime(lc, LengthScale::Finite(1e-2), 1.0, 10.0, 1.0, 1.0, &t).unwrap(),
            Regime::MacroscopicLocalStochastic
        );
        assert_eq!(
            classify_regime(lc, inf, 1.0, 10.0, 1.0, 1.0, &t).unwrap(),
            Regime::MacroscopicNonlocalStochastic
        );
        assert_eq!(
            classify_regime(LengthScale::Finite(0.5), inf, 1.0, 10.0, 1.0, 1.0, &t).unwrap(),
            Regime::MicroscopicStochastic
        );
        assert!(classify_regime(lc, inf, 1.0, 10.0, 0.0, 1.0, &t).is_err());
        assert!(classify_regime(inf, inf, 20.0, 10.0, 1.0, 1.0, &t).is_err());
    }

    #[test]
    fn harmonic_ground_state_report() {
        let (g, f) = profile(9.0, 900, ProfileSpec::HarmonicGround { omega: 1.0 });
        let r = analyze(
            &f,
            &g,
            &UNIT,
            0.0,
            LengthScale::Infinite,
            1.0,
            &NonlocalityOptions::default(),
        )
        .unwrap();
        assert!((r.tail.h - 2.0).abs() < 0.05);
        assert!(r.integral.diverges);
        assert_eq!(r.lambda_l, Some(LengthScale::Infinite));
        assert_eq!(r.regime, Some(Regime::NonLocalDeterministic));
        assert!(r.prefactor_admissible);
        assert!(r.verdict().contains("non_local_deterministic"));
        serde_json::to_string(&r).unwrap();
    }

    proptest! {
        #[test]
        fn classifier_is_total(
            theta in prop_oneof![Just(0.0), 1e-6f64..1e3],
            hbar in prop_oneof![Just(0.0), 1e-3f64..10.0],
            lc in 1e-6f64..10.0,
            ll in prop_oneof![Just(None), (1e-6f64..10.0).prop_map(Some)],
            res in 1e-3f64..10.0,
        ) {
            let lambda_c = if theta == 0.0 { LengthScale::Infinite } else { LengthScale::Finite(lc) };
            let lambda_l = ll.map_or(LengthScale::Infinite, LengthScale::Finite);
            let r = classify_regime(lambda_c, lambda_l, res, 10.0, theta, hbar, &RegimeThresholds::default()).unwrap();
            let deterministic = matches!(r, Regime::NonLocalDeterministic | Regime::LocalDeterministic);
            prop_assert_eq!(deterministic, theta == 0.0);
            prop_assert_eq!(r == Regime::LocalDeterministic, theta == 0.0 && hbar == 0.0);
            if theta > 0.0 {
                prop_assert_eq!(r == Regime::MicroscopicStochastic, res < 10.0 * lc);
            }
        }
    }
}
