//! Spatially correlated, time-white gaussian noise on the density, and the
//! analysis of a covariance kernel near the origin.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::grid::{parse_two_columns, Boundary, Grid1D, PhysicalConstants};

/// Negative covariance eigenvalues above `-CLIP_TOLERANCE * max` are set to 0.
pub const CLIP_TOLERANCE: f64 = 1e-12;
/// Largest grid the dense sampler accepts.
pub const DENSE_LIMIT: usize = 256;
pub const ADMISSIBILITY_TOL: f64 = 1e-6;
const FIT_RESIDUAL_TOL: f64 = 1e-5;

/// A length that may be infinite, e.g. the coherence length at Θ = 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum LengthScale {
    Finite(f64),
    Infinite,
}

impl LengthScale {
    pub fn value(&self) -> f64 {
        match self {
            LengthScale::Finite(v) => *v,
            LengthScale::Infinite => f64::INFINITY,
        }
    }

    pub fn finite(&self) -> Option<f64> {
        match self {
            LengthScale::Finite(v) => Some(*v),
            LengthScale::Infinite => None,
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, LengthScale::Infinite)
    }
}

impl fmt::Display for LengthScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LengthScale::Finite(v) => write!(f, "{v}"),
            LengthScale::Infinite => write!(f, "inf"),
        }
    }
}

/// Normalized covariance kernel `G(x)` of the dimensionless distance
/// `x = λ/λc`, with `G(0) = 1`.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Kernel {
    /// `exp(−x²)`
    #[default]
    Gaussian,
    /// `max(1 − |x|, 0)`, which has a kink at the origin.
    Triangle,
    /// Piecewise-linear table, held at its last value beyond the end.
    Table {
        x: Vec<f64>,
        g: Vec<f64>,
        source: String,
    },
}

impl Kernel {
    /// `"gaussian"`, `"triangle"` or `"table:<path>"`.
    pub fn parse(name: &str) -> Result<Self> {
        match name.trim() {
            "gaussian" => Ok(Kernel::Gaussian),
            "triangle" => Ok(Kernel::Triangle),
            other => match other.strip_prefix("table:") {
                Some(path) => Self::from_file(Path::new(path)),
                None => Err(Error::config(format!(
                    "unknown kernel '{other}' (expected gaussian, triangle or table:<path>)"
                ))),
            },
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read kernel table {}: {e}", path.display()))
        })?;
        let (x, g) = parse_two_columns(&text, "kernel table")?;
        Self::from_table(x, g, path.display().to_string())
    }

    pub fn from_table(x: Vec<f64>, g: Vec<f64>, source: impl Into<String>) -> Result<Self> {
        if x.len() < 2 || x.len() != g.len() {
            return Err(Error::config("kernel table needs at least two (x, G) rows"));
        }
        if x.iter().chain(&g).any(|v| !v.is_finite()) {
            return Err(Error::config("kernel table has non-finite entries"));
        }
        if x.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("kernel table x must be strictly increasing"));
        }
        if x[0] != 0.0 || (g[0] - 1.0).abs() > 1e-9 {
            return Err(Error::config("kernel table must start at x = 0 with G = 1"));
        }
        Ok(Kernel::Table {
            x,
            g,
            source: source.into(),
        })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let x = x.abs();
        match self {
            Kernel::Gaussian => (-x * x).exp(),
            Kernel::Triangle => (1.0 - x).max(0.0),
            Kernel::Table { x: xs, g, .. } => {
                let last = xs.len() - 1;
                if x >= xs[last] {
                    return g[last];
                }
                let k = xs.partition_point(|&v| v <= x).clamp(1, last);
                let w = (x - xs[k - 1]) / (xs[k] - xs[k - 1]);
                g[k - 1] * (1.0 - w) + g[k] * w
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            Kernel::Gaussian => "gaussian".into(),
            Kernel::Triangle => "triangle".into(),
            Kernel::Table { source, .. } => format!("table:{source}"),
        }
    }
}

impl Serialize for Kernel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

/// Coherence length of the noise. Θ = 0 yields [`LengthScale::Infinite`].
pub fn lambda_c(constants: &PhysicalConstants, theta: f64) -> Result<LengthScale> {
    if !(theta >= 0.0) || !theta.is_finite() {
        return Err(Error::config(format!(
            "theta must be finite and >= 0, got {theta}"
        )));
    }
    if theta == 0.0 {
        return Ok(LengthScale::Infinite);
    }
    if constants.hbar <= 0.0 {
        return Err(Error::config("a finite coherence length needs hbar > 0"));
    }
    let kt = constants.boltzmann * theta;
    Ok(LengthScale::Finite(
        (PI / 2.0).powf(1.5) * constants.hbar / (2.0 * constants.mass * kt).sqrt(),
    ))
}

/// Noise strength `g(0)` per unit time.
pub fn g0(constants: &PhysicalConstants, theta: f64, form_factor: f64) -> f64 {
    if theta == 0.0 {
        return 0.0;
    }
    let kt = constants.boltzmann * theta;
    form_factor * 8.0 * constants.mass * kt * kt / (PI.powi(3) * constants.hbar.powi(2))
}

/// `μ = ΔL²/ħ` for a vessel of side `ΔL`.
pub fn mobility(constants: &PhysicalConstants, vessel_side: f64) -> f64 {
    vessel_side * vessel_side / constants.hbar
}

/// `μ̲ = μ/ΔL⁶`.
pub fn form_factor_for_vessel(constants: &PhysicalConstants, vessel_side: f64) -> f64 {
    mobility(constants, vessel_side) / vessel_side.powi(6)
}

#[derive(Debug, Clone, Serialize)]
pub struct NoiseModel {
    theta: f64,
    lambda_c: LengthScale,
    g0: f64,
    form_factor: f64,
    vessel_side: Option<f64>,
    kernel: Kernel,
}

impl NoiseModel {
    /// Form factor 1.
    pub fn new(constants: &PhysicalConstants, theta: f64, kernel: Kernel) -> Result<Self> {
        Self::with_form_factor(constants, theta, 1.0, kernel)
    }

    pub fn with_form_factor(
        constants: &PhysicalConstants,
        theta: f64,
        form_factor: f64,
        kernel: Kernel,
    ) -> Result<Self> {
        if !(form_factor > 0.0) || !form_factor.is_finite() {
            return Err(Error::config(format!(
                "form factor must be finite and > 0, got {form_factor}"
            )));
        }
        let lc = lambda_c(constants, theta)?;
        Ok(Self {
            theta,
            lambda_c: lc,
            g0: g0(constants, theta, form_factor),
            form_factor,
            vessel_side: None,
            kernel,
        })
    }

    pub fn with_vessel_side(
        constants: &PhysicalConstants,
        theta: f64,
        vessel_side: f64,
        kernel: Kernel,
    ) -> Result<Self> {
        if !(vessel_side > 0.0) || !vessel_side.is_finite() {
            return Err(Error::config(format!(
                "vessel side must be finite and > 0, got {vessel_side}"
            )));
        }
        if constants.hbar <= 0.0 {
            return Err(Error::config("the vessel form factor needs hbar > 0"));
        }
        let mut model = Self::with_form_factor(
            constants,
            theta,
            form_factor_for_vessel(constants, vessel_side),
            kernel,
        )?;
        model.vessel_side = Some(vessel_side);
        Ok(model)
    }

    pub fn deterministic() -> Self {
        Self {
            theta: 0.0,
            lambda_c: LengthScale::Infinite,
            g0: 0.0,
            form_factor: 1.0,
            vessel_side: None,
            kernel: Kernel::Gaussian,
        }
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn lambda_c(&self) -> LengthScale {
        self.lambda_c
    }

    pub fn g0(&self) -> f64 {
        self.g0
    }

    pub fn form_factor(&self) -> f64 {
        self.form_factor
    }

    pub fn vessel_side(&self) -> Option<f64> {
        self.vessel_side
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn is_active(&self) -> bool {
        self.theta > 0.0
    }

    /// Covariance per unit time between two points a distance `lambda` apart.
    pub fn covariance(&self, lambda: f64) -> f64 {
        match self.lambda_c {
            LengthScale::Finite(lc) => self.g0 * self.kernel.eval(lambda / lc),
            LengthScale::Infinite => 0.0,
        }
    }
}

pub fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// First row of the circulant covariance of one increment of length `dt`.
pub fn circulant_row(grid: &Grid1D, model: &NoiseModel, dt: f64) -> Vec<f64> {
    let len = grid.len();
    (0..len)
        .map(|j| model.covariance(j.min(len - j) as f64 * grid.spacing()) * dt)
        .collect()
}

fn clip_spectrum(eigs: &mut [f64]) -> Result<()> {
    let max = eigs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min < -CLIP_TOLERANCE * max {
        return Err(Error::NotPositiveDefinite {
            min_eigenvalue: min,
        });
    }
    for e in eigs.iter_mut() {
        *e = e.max(0.0);
    }
    Ok(())
}

fn check_sampling(grid: &Grid1D, dt: f64) -> Result<()> {
    if grid.boundary() != Boundary::Periodic {
        return Err(Error::config("noise sampling needs a periodic grid"));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::config(format!(
            "dt must be finite and > 0, got {dt}"
        )));
    }
    Ok(())
}

/// Spectral sampler for a fixed grid, model and `dt`. Cheap to share across
/// threads; each draw takes its own RNG.
pub struct NoiseSampler {
    amplitude: Vec<f64>,
    fft: Option<Arc<dyn Fft<f64>>>,
    min_eigenvalue: f64,
}

impl NoiseSampler {
    pub fn new(grid: &Grid1D, model: &NoiseModel, dt: f64) -> Result<Self> {
        check_sampling(grid, dt)?;
        let len = grid.len();
        if !model.is_active() {
            return Ok(Self {
                amplitude: vec![0.0; len],
                fft: None,
                min_eigenvalue: 0.0,
            });
        }
        let mut buf: Vec<Complex64> = circulant_row(grid, model, dt)
            .into_iter()
            .map(|c| Complex64::new(c, 0.0))
            .collect();
        let mut planner = FftPlanner::new();
        planner.plan_fft_forward(len).process(&mut buf);
        let mut eigs: Vec<f64> = buf.iter().map(|c| c.re).collect();
        let min_eigenvalue = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
        clip_spectrum(&mut eigs)?;
        Ok(Self {
            amplitude: eigs.iter().map(|e| (e / len as f64).sqrt()).collect(),
            fft: Some(planner.plan_fft_inverse(len)),
            min_eigenvalue,
        })
    }

    /// Smallest covariance eigenvalue before clipping.
    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eigenvalue
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let Some(fft) = &self.fft else {
            return vec![0.0; self.amplitude.len()];
        };
        // Re and Im of the transform are independent draws with the target
        // covariance; only Re is kept.
        let mut buf: Vec<Complex64> = self
            .amplitude
            .iter()
            .map(|a| {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                Complex64::new(a * re, a * im)
            })
            .collect();
        fft.process(&mut buf);
        buf.into_iter().map(|c| c.re).collect()
    }
}

/// One noise increment with covariance `g0·G(λ/λc)·dt`.
pub fn sample_increment(grid: &Grid1D, model: &NoiseModel, dt: f64, seed: u64) -> Result<Vec<f64>> {
    Ok(NoiseSampler::new(grid, model, dt)?.sample(&mut rng_for(seed)))
}

/// Same distribution as [`sample_increment`] through a dense eigendecomposition.
pub fn sample_increment_dense(
    grid: &Grid1D,
    model: &NoiseModel,
    dt: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    check_sampling(grid, dt)?;
    let len = grid.len();
    if len > DENSE_LIMIT {
        return Err(Error::config(format!(
            "dense sampler is limited to {DENSE_LIMIT} cells, grid has {len}"
        )));
    }
    if !model.is_active() {
        return Ok(vec![0.0; len]);
    }
    let row = circulant_row(grid, model, dt);
    let cov = DMatrix::from_fn(len, len, |i, j| row[(i + len - j) % len]);
    let eig = SymmetricEigen::new(cov);
    let mut values: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
    clip_spectrum(&mut values)?;
    let mut rng = rng_for(seed);
    let z: Vec<f64> = (0..len)
        .map(|k| values[k].sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok((0..len)
        .map(|i| (0..len).map(|k| eig.eigenvectors[(i, k)] * z[k]).sum())
        .collect())
}

/// Taylor coefficients of `G(λ/λc)` in powers of `λ/λc`, taken one-sided
/// from `λ = 0+` when odd terms are present.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KernelCoeffs {
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
    /// Largest misfit of the quartic against the kernel near the origin.
    pub fit_residual: f64,
}

impl KernelCoeffs {
    pub fn violations(&self, tol: f64) -> Vec<String> {
        let mut out = Vec::new();
        if (self.a0 - 1.0).abs() > tol {
            out.push(format!("a0 = {} != 1", self.a0));
        }
        if self.a1.abs() > tol {
            out.push(format!("a1 = {} != 0", self.a1));
        }
        if self.a3.abs() > tol {
            out.push(format!("a3 = {} != 0", self.a3));
        }
        out
    }

    pub fn is_admissible(&self, tol: f64) -> bool {
        self.violations(tol).is_empty()
    }
}

/// Richardson tableau over values at `h, h/2, h/4, ...` whose error series
/// runs in powers `p0, p0 + step, ...`. Returns the estimate and the size
/// of the last correction.
fn richardson(values: &[f64], p0: i32, step: i32) -> (f64, f64) {
    let mut t = values.to_vec();
    let last = t.len() - 1;
    let mut correction = f64::INFINITY;
    for k in 1..t.len() {
        let factor = 2f64.powi(p0 + (k as i32 - 1) * step) - 1.0;
        let before = t[last];
        for i in (k..t.len()).rev() {
            t[i] += (t[i] - t[i - 1]) / factor;
        }
        correction = (t[last] - before).abs();
    }
    (t[last], correction)
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// `Δ^j f(0) / h^j` with forward steps.
fn forward_derivative(f: &dyn Fn(f64) -> f64, j: usize, h: f64) -> f64 {
    let sum: f64 = (0..=j)
        .map(|k| {
            let sign = if (j - k).is_multiple_of(2) { 1.0 } else { -1.0 };
            sign * binomial(j, k) * f(k as f64 * h)
        })
        .sum();
    sum / h.powi(j as i32)
}

/// Central differences of orders 2 and 4.
fn central_derivative(f: &dyn Fn(f64) -> f64, j: usize, h: f64) -> f64 {
    match j {
        2 => (f(h) - 2.0 * f(0.0) + f(-h)) / (h * h),
        4 => (f(2.0 * h) - 4.0 * f(h) + 6.0 * f(0.0) - 4.0 * f(-h) + f(-2.0 * h)) / h.powi(4),
        _ => unreachable!(),
    }
}

/// Coefficients of a kernel given as a function of the physical distance.
pub fn taylor_coeffs_of(f: impl Fn(f64) -> f64, lambda_c: f64) -> Result<KernelCoeffs> {
    if !(lambda_c > 0.0) || !lambda_c.is_finite() {
        return Err(Error::config(
            "Taylor coefficients need a finite lambda_c > 0",
        ));
    }
    let f: &dyn Fn(f64) -> f64 = &f;
    let scaled = |d: f64, j: usize| d * lambda_c.powi(j as i32) / factorial(j);
    let one_sided = |j: usize| {
        let h0 = 0.04 * lambda_c;
        let seq: Vec<f64> = (0..5)
            .map(|k| forward_derivative(f, j, h0 / 2f64.powi(k)))
            .collect();
        scaled(richardson(&seq, 1, 1).0, j)
    };
    let central = |j: usize| {
        let h0 = 0.2 * lambda_c;
        let seq: Vec<f64> = (0..3)
            .map(|k| central_derivative(f, j, h0 / 2f64.powi(k)))
            .collect();
        scaled(richardson(&seq, 2, 2).0, j)
    };
    let a0 = f(0.0);
    let a1 = one_sided(1);
    let a3 = one_sided(3);
    let (a2, a4) = if a1.abs() <= ADMISSIBILITY_TOL && a3.abs() <= ADMISSIBILITY_TOL {
        (central(2), central(4))
    } else {
        (one_sided(2), one_sided(4))
    };
    let fit_residual = [0.02, 0.05, 0.1]
        .iter()
        .map(|&x: &f64| {
            let poly = a0 + x * (a1 + x * (a2 + x * (a3 + x * a4)));
            (f(x * lambda_c) - poly).abs()
        })
        .fold(0.0, f64::max);
    let coeffs = KernelCoeffs {
        a0,
        a1,
        a2,
        a3,
        a4,
        fit_residual,
    };
    if !(fit_residual <= FIT_RESIDUAL_TOL) {
        return Err(Error::analysis(format!(
            "kernel is not smooth at the origin: quartic misfit {fit_residual:e}"
        )));
    }
    Ok(coeffs)
}

pub fn kernel_taylor_coeffs(kernel: &Kernel, lambda_c: f64) -> Result<KernelCoeffs> {
    taylor_coeffs_of(|d| kernel.eval(d / lambda_c), lambda_c)
}

/// Small-separation limits of the three kernel combinations that enter the
/// fluctuation estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiscreteLimits {
    /// `lim λ⁻²[1 − G(λ)]`
    pub first: f64,
    /// `lim λ⁻⁴[1 − G(λ)]²`
    pub second: f64,
    /// `lim λ⁻⁴[3 + G(2λ) − 4G(λ)]`
    pub third: f64,
    /// `−a2/λc²`
    pub first_taylor: f64,
    /// `a2²/λc⁴`
    pub second_taylor: f64,
    /// `12·a4/λc⁴`, from expanding the third combination.
    pub third_taylor: f64,
    /// `16·a4/λc⁴`, the alternative coefficient, kept for comparison.
    pub third_alt: f64,
    pub coeffs: KernelCoeffs,
}

pub fn discrete_limits(kernel: &Kernel, lambda_c: f64) -> Result<DiscreteLimits> {
    let coeffs = kernel_taylor_coeffs(kernel, lambda_c)?;
    let bad = coeffs.violations(ADMISSIBILITY_TOL);
    if !bad.is_empty() {
        return Err(Error::analysis(format!(
            "inadmissible kernel: {}",
            bad.join(", ")
        )));
    }
    let g = |l: f64| kernel.eval(l / lambda_c);
    let limit = |name: &str, expr: &dyn Fn(f64) -> f64| -> Result<f64> {
        let seq: Vec<f64> = [10.0, 20.0, 40.0]
            .iter()
            .map(|d| expr(lambda_c / d))
            .collect();
        let (value, correction) = richardson(&seq, 2, 2);
        if !value.is_finite() || correction > 1e-3 * value.abs().max(f64::MIN_POSITIVE) {
            return Err(Error::analysis(format!(
                "{name} limit does not converge: {seq:?}"
            )));
        }
        Ok(value)
    };
    let first = limit("first", &|l| (1.0 - g(l)) / (l * l))?;
    let second = limit("second", &|l| (1.0 - g(l)).powi(2) / l.powi(4))?;
    let third = limit("third", &|l| (3.0 + g(2.0 * l) - 4.0 * g(l)) / l.powi(4))?;
    let l2 = lambda_c * lambda_c;
    Ok(DiscreteLimits {
        first,
        second,
        third,
        first_taylor: -coeffs.a2 / l2,
        second_taylor: coeffs.a2 * coeffs.a2 / (l2 * l2),
        third_taylor: 12.0 * coeffs.a4 / (l2 * l2),
        third_alt: 16.0 * coeffs.a4 / (l2 * l2),
        coeffs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const UNIT: PhysicalConstants = PhysicalConstants {
        hbar: 1.0,
        mass: 1.0,
        boltzmann: 1.0,
        light_speed: 1.0,
    };

    fn gaussian_model(theta: f64) -> NoiseModel {
        NoiseModel::new(&UNIT, theta, Kernel::Gaussian).unwrap()
    }

    /// 64 cells, spacing λc/4 at Θ = 1.
    fn quarter_grid() -> Grid1D {
        let lc = lambda_c(&UNIT, 1.0).unwrap().value();
        Grid1D::new(0.0, 16.0 * lc, 64, Boundary::Periodic).unwrap()
    }

    #[test]
    fn coherence_length_and_strength() {
        let lc = lambda_c(&UNIT, 1.0).unwrap().value();
        assert!((lc - (PI / 2.0).powf(1.5) / 2f64.sqrt()).abs() < 1e-14);
        assert!((lc - 1.3921).abs() < 1e-4);
        let l4 = lambda_c(&UNIT, 4.0).unwrap().value();
        assert!((l4 - lc / 2.0).abs() < 1e-14);
        assert_eq!(lambda_c(&UNIT, 0.0).unwrap(), LengthScale::Infinite);
        assert!(lambda_c(&UNIT, -1.0).is_err());
        assert!((g0(&UNIT, 1.0, 1.0) - 0.258012).abs() < 1e-6);
        assert_eq!(g0(&UNIT, 0.0, 1.0), 0.0);
        assert!((g0(&UNIT, 2.0, 1.0) / g0(&UNIT, 1.0, 1.0) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn proton_coherence_length() {
        let lc = lambda_c(&PhysicalConstants::PROTON_CGS, 1.0)
            .unwrap()
            .value();
        // about 9.66e-8 cm, neither 4.7e-6 nor 4.7e-7
        assert!((lc / 9.6605e-8 - 1.0).abs() < 1e-4, "{lc}");
    }

    #[test]
    fn vessel_form_factor() {
        let m = NoiseModel::with_vessel_side(&UNIT, 1.0, 2.0, Kernel::Gaussian).unwrap();
        assert!((m.form_factor() - 4.0 / 64.0).abs() < 1e-15);
        assert!((m.g0() - g0(&UNIT, 1.0, 1.0) / 16.0).abs() < 1e-15);
        assert_eq!(m.vessel_side(), Some(2.0));
    }

    #[test]
    fn length_scale_json() {
        let f = serde_json::to_string(&LengthScale::Finite(1.5)).unwrap();
        let i = serde_json::to_string(&LengthScale::Infinite).unwrap();
        assert_eq!(
            serde_json::from_str::<LengthScale>(&f).unwrap(),
            LengthScale::Finite(1.5)
        );
        assert_eq!(
            serde_json::from_str::<LengthScale>(&i).unwrap(),
            LengthScale::Infinite
        );
    }

    #[test]
    fn zero_theta_gives_zero_field() {
        let g = quarter_grid();
        let x = sample_increment(&g, &NoiseModel::deterministic(), 0.1, 3).unwrap();
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_same_field() {
        let g = quarter_grid();
        let m = gaussian_model(1.0);
        let a = sample_increment(&g, &m, 0.01, 42).unwrap();
        let b = sample_increment(&g, &m, 0.01, 42).unwrap();
        let c = sample_increment(&g, &m, 0.01, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_clamped_grid_and_bad_dt() {
        let m = gaussian_model(1.0);
        let clamped = Grid1D::new(0.0, 10.0, 32, Boundary::Clamped).unwrap();
        assert!(sample_increment(&clamped, &m, 0.1, 0).is_err());
        assert!(sample_increment(&quarter_grid(), &m, 0.0, 0).is_err());
    }

    #[test]
    fn indefinite_kernel_is_rejected() {
        let k = Kernel::from_table(vec![0.0, 0.5, 1.0], vec![1.0, 1.0, -1.0], "test").unwrap();
        let m = NoiseModel::new(&UNIT, 1.0, k).unwrap();
        let err = sample_increment(&quarter_grid(), &m, 0.1, 0).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { .. }));
    }

    fn variance_of(samples: &[f64]) -> f64 {
        let m = samples.iter().sum::<f64>() / samples.len() as f64;
        samples.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (samples.len() - 1) as f64
    }

    #[test]
    fn variance_scales_with_dt() {
        let g = quarter_grid();
        let m = gaussian_model(1.0);
        let dt = 0.01;
        let draws = 100_000;
        let whole = NoiseSampler::new(&g, &m, dt).unwrap();
        let quarter = NoiseSampler::new(&g, &m, dt / 4.0).unwrap();
        let mut rng = rng_for(7);
        let mut single = Vec::with_capacity(draws);
        let mut summed = Vec::with_capacity(draws);
        for _ in 0..draws {
            single.push(whole.sample(&mut rng)[10]);
            summed.push((0..4).map(|_| quarter.sample(&mut rng)[10]).sum::<f64>());
        }
        let expected = m.g0() * dt;
        let se = expected * (2.0 / draws as f64).sqrt();
        for v in [variance_of(&single), variance_of(&summed)] {
            assert!(
                (v - expected).abs() < 3.0 * se,
                "{v} vs {expected} (se {se})"
            );
        }
    }

    #[test]
    fn mean_and_skewness_vanish() {
        let g = quarter_grid();
        let s = NoiseSampler::new(&g, &gaussian_model(1.0), 1.0).unwrap();
        let mut rng = rng_for(11);
        let draws = 20_000;
        let x: Vec<f64> = (0..draws).map(|_| s.sample(&mut rng)[5]).collect();
        let n = draws as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = variance_of(&x);
        assert!(mean.abs() < 5.0 * (var / n).sqrt(), "mean {mean}");
        let m3 = x.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
        let skew = m3 / var.powf(1.5);
        assert!(skew.abs() < 5.0 * (6.0 / n).sqrt(), "skew {skew}");
    }

    /// Per-lag covariance estimates, averaged over cells, with standard errors
    /// taken across independent draws.
    fn lag_covariance(fields: &[Vec<f64>], lag: usize) -> (f64, f64) {
        let len = fields[0].len();
        let per_draw: Vec<f64> = fields
            .iter()
            .map(|x| (0..len).map(|i| x[i] * x[(i + lag) % len]).sum::<f64>() / len as f64)
            .collect();
        let n = per_draw.len() as f64;
        let mean = per_draw.iter().sum::<f64>() / n;
        (mean, (variance_of(&per_draw) / n).sqrt())
    }

    #[test]
    fn empirical_kernel_matches_gaussian() {
        let g = quarter_grid();
        let m = gaussian_model(1.0);
        let s = NoiseSampler::new(&g, &m, 1.0).unwrap();
        let mut rng = rng_for(5);
        let fields: Vec<Vec<f64>> = (0..10_000).map(|_| s.sample(&mut rng)).collect();
        let (c0, _) = lag_covariance(&fields, 0);
        let (c1, _) = lag_covariance(&fields, 4);
        assert!((c1 / c0 - (-1f64).exp()).abs() < 0.02, "{}", c1 / c0);
        // pointwise up to 3λc, and the large-separation decay
        for lag in (0..=12).chain([24, 32]) {
            let (c, se) = lag_covariance(&fields, lag);
            let expected = m.covariance(lag as f64 * g.spacing());
            assert!(
                (c - expected).abs() < 3.0 * se,
                "lag {lag}: {c} vs {expected} (se {se})"
            );
        }
    }

    #[test]
    fn dense_sampler_agrees_in_distribution() {
        let g = Grid1D::new(
            0.0,
            16.0 * lambda_c(&UNIT, 1.0).unwrap().value(),
            32,
            Boundary::Periodic,
        )
        .unwrap();
        let m = gaussian_model(1.0);
        let fields: Vec<Vec<f64>> = (0..8_000)
            .map(|k| sample_increment_dense(&g, &m, 1.0, k).unwrap())
            .collect();
        for lag in 0..5 {
            let (c, se) = lag_covariance(&fields, lag);
            let expected = m.covariance(lag as f64 * g.spacing());
            assert!(
                (c - expected).abs() < 3.0 * se,
                "lag {lag}: {c} vs {expected}"
            );
        }
        let big = Grid1D::new(0.0, 10.0, 300, Boundary::Periodic).unwrap();
        assert!(sample_increment_dense(&big, &m, 1.0, 0).is_err());
    }

    #[test]
    fn gaussian_taylor_coefficients() {
        for lc in [1.3921, 0.3, 7.0] {
            let c = kernel_taylor_coeffs(&Kernel::Gaussian, lc).unwrap();
            let expected = [1.0, 0.0, -1.0, 0.0, 0.5];
            let got = [c.a0, c.a1, c.a2, c.a3, c.a4];
            for (g, e) in got.iter().zip(expected) {
                assert!((g - e).abs() < 1e-6, "lc {lc}: {got:?}");
            }
            assert!(c.is_admissible(ADMISSIBILITY_TOL));
        }
    }

    #[test]
    fn triangle_is_inadmissible() {
        let c = kernel_taylor_coeffs(&Kernel::Triangle, 1.0).unwrap();
        assert!((c.a1 + 1.0).abs() < 1e-6);
        assert!(!c.is_admissible(ADMISSIBILITY_TOL));
        assert!(discrete_limits(&Kernel::Triangle, 1.0).is_err());
    }

    #[test]
    fn cusp_kernel_fails_fit() {
        let err = taylor_coeffs_of(|d: f64| 1.0 - d.abs().sqrt(), 1.0).unwrap_err();
        assert!(matches!(err, Error::Analysis(_)));
    }

    #[test]
    fn gaussian_discrete_limits() {
        let lc = 1.3921;
        let d = discrete_limits(&Kernel::Gaussian, lc).unwrap();
        let rel = |a: f64, b: f64| (a / b - 1.0).abs();
        assert!(rel(d.first, 1.0 / lc.powi(2)) < 0.01);
        assert!(rel(d.second, 1.0 / lc.powi(4)) < 0.01);
        assert!(rel(d.third, 6.0 / lc.powi(4)) < 0.01);
        assert!(rel(d.third, d.third_taylor) < 1e-4);
        assert!(rel(d.third_alt, 8.0 / lc.powi(4)) < 1e-4);
    }

    #[test]
    fn kernel_names_round_trip() {
        assert_eq!(Kernel::parse("gaussian").unwrap(), Kernel::Gaussian);
        assert_eq!(Kernel::parse("triangle").unwrap(), Kernel::Triangle);
        assert!(Kernel::parse("lorentzian").is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.csv");
        std::fs::write(&path, "x,G\n0,1\n1,0.5\n2,0\n").unwrap();
        let k = Kernel::parse(&format!("table:{}", path.display())).unwrap();
        assert!((k.eval(0.5) - 0.75).abs() < 1e-15);
        assert!((k.eval(-1.5) - 0.25).abs() < 1e-15);
        assert_eq!(k.eval(9.0), 0.0);
        assert!(Kernel::from_table(vec![0.0, 1.0], vec![0.9, 0.0], "t").is_err());
    }

    proptest! {
        #[test]
        fn kernel_is_one_at_origin_and_even(x in -5.0f64..5.0) {
            for k in [Kernel::Gaussian, Kernel::Triangle] {
                prop_assert_eq!(k.eval(0.0), 1.0);
                prop_assert_eq!(k.eval(x), k.eval(-x));
            }
        }

        #[test]
        fn sampling_is_deterministic(seed in any::<u64>(), theta in 1.0f64..10.0) {
            let g = Grid1D::new(0.0, 20.0, 32, Boundary::Periodic).unwrap();
            let m = gaussian_model(theta);
            prop_assert_eq!(
                sample_increment(&g, &m, 0.01, seed).unwrap(),
                sample_increment(&g, &m, 0.01, seed).unwrap()
            );
        }

        #[test]
        fn coherence_length_scaling(theta in 0.01f64..100.0) {
            let a = lambda_c(&UNIT, theta).unwrap().value();
            let b = lambda_c(&UNIT, 4.0 * theta).unwrap().value();
            prop_assert!((a / b - 2.0).abs() < 1e-12);
        }
    }
}
