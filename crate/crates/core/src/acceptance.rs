//! The end-to-end acceptance checks, shared by the `acceptance` test target
//! and the `validate` command. Each check returns an [`Outcome`] with the
//! measured numbers; errors inside a check become a failing outcome.

use std::f64::consts::{E, PI};
use std::fmt;

use serde::Serialize;

use crate::deterministic::{
    discrete_ground_state, evolve, stationarity_residual, Dynamics, EvolveConfig, Integrator,
};
use crate::diagnostics::{
    cross_term, estimate_correlation, gradsq_variance, istar_variance, laplacian_variance,
    scaling_fit,
};
use crate::error::{Error, Result};
use crate::grid::{
    distance, init_profile, Boundary, Grid1D, Metric, PhysicalConstants, ProfileSpec, WfmField,
};
use crate::noise::{
    discrete_limits, kernel_taylor_coeffs, lambda_c, rng_for, Kernel, LengthScale, NoiseModel,
    NoiseSampler,
};
use crate::nonlocality::{
    auto_tail_window, classify_regime, force_integral, lambda_l, qp_force, tail_exponent, Regime,
    RegimeThresholds, TailMode,
};
use crate::potential::PotentialSpec;
use crate::quantum_potential::{qp_sqrt_form, DEFAULT_FLOOR};
use crate::sqha::{run_ensemble, write_trace_csv, PositivityPolicy, SqhaConfig, SqhaSolver};

pub const CRITERIA: [u8; 10] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];

const UNIT: PhysicalConstants = PhysicalConstants {
    hbar: 1.0,
    mass: 1.0,
    boltzmann: 1.0,
    light_speed: 1.0,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Outcome {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} [{:>2}] {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail
        )
    }
}

/// Deliberate defects used to check that the suite can fail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Mutation {
    /// Multiplies every quantum potential the checks evaluate directly.
    pub qp_scale: f64,
}

impl Default for Mutation {
    fn default() -> Self {
        Self { qp_scale: 1.0 }
    }
}

pub fn name_of(id: u8) -> &'static str {
    match id {
        1 => "eigenstate stationarity",
        2 => "oracle equivalence",
        3 => "quantum potential reproduction",
        4 => "kernel fidelity",
        5 => "kernel admissibility",
        6 => "scaling laws",
        7 => "estimator closure",
        8 => "tails and non-locality",
        9 => "regime classifier",
        10 => "zero-noise reduction and reproducibility",
        _ => "unknown",
    }
}

pub fn run(id: u8, mutation: &Mutation) -> Outcome {
    let result = match id {
        1 => stationarity(mutation),
        2 => oracle_equivalence(),
        3 => qp_reproduction(mutation),
        4 => kernel_fidelity(),
        5 => kernel_admissibility(),
        6 => scaling_laws(),
        7 => estimator_closure(),
        8 => tails(),
        9 => regimes(),
        10 => reproducibility(),
        _ => Err(Error::config(format!("no acceptance criterion {id}"))),
    };
    let (passed, detail) = match result {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    Outcome {
        id,
        name: name_of(id),
        passed,
        detail,
    }
}

pub fn run_all(mutation: &Mutation) -> Vec<Outcome> {
    CRITERIA.iter().map(|&id| run(id, mutation)).collect()
}

type Check = Result<(bool, String)>;

/// Harmonic well, ω = 1, on `[−half, half]`.
fn harmonic_setup(half: f64, cells: usize) -> Result<(Grid1D, Vec<f64>)> {
    let grid = Grid1D::symmetric(half, cells, Boundary::Periodic)?;
    let v = PotentialSpec::Harmonic { omega: 1.0 }.sample(&grid, &UNIT)?;
    Ok((grid, v))
}

fn stationarity(mutation: &Mutation) -> Check {
    let (grid, v) = harmonic_setup(6.4, 512)?;
    let ground = discrete_ground_state(&grid, &v, &UNIT)?;
    let config = EvolveConfig {
        dt: 6e-5,
        t_end: 10.0,
        record_every: 2000,
        ..EvolveConfig::default()
    };
    let traj = evolve(&ground, &v, &grid, &UNIT, &config)?;
    let drift = traj
        .frames
        .iter()
        .map(|f| distance(f, &ground, &grid, Metric::Linf))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let scaled = mutated_constants(mutation);
    let residual = stationarity_residual(traj.last(), &v, &grid, &scaled)?;
    Ok((
        drift < 1e-4 && residual < 1e-6,
        format!(
            "max Linf drift {drift:.3e} (< 1e-4), stationarity residual {residual:.3e} (< 1e-6)"
        ),
    ))
}

/// Constants whose quantum-potential prefactor carries the mutation.
fn mutated_constants(mutation: &Mutation) -> PhysicalConstants {
    PhysicalConstants {
        hbar: UNIT.hbar * mutation.qp_scale.sqrt(),
        ..UNIT
    }
}

/// The box keeps both edges below the density floor over the whole orbit
/// while the masked fraction stays under the 20 % limit.
fn oracle_equivalence() -> Check {
    let (grid, v) = harmonic_setup(6.0, 512)?;
    let start = init_profile(
        &grid,
        &ProfileSpec::Gaussian {
            sigma: 0.5f64.sqrt(),
            q0: 0.5,
        },
        &UNIT,
    )?;
    let base = EvolveConfig {
        dt: 5e-5,
        t_end: 2.0 * PI,
        record_every: usize::MAX,
        ..EvolveConfig::default()
    };
    let madelung = evolve(&start, &v, &grid, &UNIT, &base)?;
    let oracle = evolve(
        &start,
        &v,
        &grid,
        &UNIT,
        &EvolveConfig {
            integrator: Integrator::SplitStepOracle,
            ..base
        },
    )?;
    let gap = distance(madelung.last(), oracle.last(), &grid, Metric::L2)?;
    let m0 = start.mass(&grid);
    let dm = (madelung.last().mass(&grid) - m0).abs();
    let doracle = (oracle.last().mass(&grid) - m0).abs();
    Ok((
        gap < 1e-3 && dm < 1e-10 && doracle < 1e-10,
        format!(
            "L2 density gap {gap:.3e} (< 1e-3), norm drift Madelung {dm:.1e}, oracle {doracle:.1e} (< 1e-10)"
        ),
    ))
}

/// Convergence orders between successive refinements.
fn orders(spacings: &[f64], errors: &[f64]) -> Vec<f64> {
    spacings
        .windows(2)
        .zip(errors.windows(2))
        .map(|(h, e)| (e[0] / e[1]).ln() / (h[0] / h[1]).ln())
        .collect()
}

fn qp_reproduction(mutation: &Mutation) -> Check {
    let constants = mutated_constants(mutation);
    let cells = [101usize, 201, 401, 801];
    let (mut spacing, mut centre_err, mut flat_err) = (Vec::new(), Vec::new(), Vec::new());
    for &n in &cells {
        let grid = Grid1D::symmetric(10.0, n, Boundary::Periodic)?;
        let g = init_profile(
            &grid,
            &ProfileSpec::Gaussian {
                sigma: 1.0,
                q0: 0.0,
            },
            &UNIT,
        )?;
        let qp = qp_sqrt_form(&g, &grid, &constants, DEFAULT_FLOOR)?;
        centre_err.push((qp.v_qu[grid.nearest_index(0.0)] - 0.25).abs());

        let v = PotentialSpec::Harmonic { omega: 1.0 }.sample(&grid, &UNIT)?;
        let ground = init_profile(&grid, &ProfileSpec::HarmonicGround { omega: 1.0 }, &UNIT)?;
        let qp = qp_sqrt_form(&ground, &grid, &constants, DEFAULT_FLOOR)?;
        let total: Vec<f64> = (0..n)
            .filter(|&i| grid.center(i).abs() <= 3.0)
            .map(|i| v[i] + qp.v_qu[i])
            .collect();
        let mean = total.iter().sum::<f64>() / total.len() as f64;
        flat_err.push(total.iter().map(|t| (t - mean).abs()).fold(0.0, f64::max));
        spacing.push(grid.spacing());
    }
    let oc = orders(&spacing, &centre_err);
    let of = orders(&spacing, &flat_err);
    let ok = |o: &[f64]| o.iter().all(|p| (p - 2.0).abs() <= 0.2);
    let fmt_orders = |o: &[f64]| {
        o.iter()
            .map(|p| format!("{p:.3}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    Ok((
        ok(&oc) && ok(&of),
        format!(
            "v_qu(0) error {:.2e} at λ={:.4}, orders [{}]; V+V_qu spread {:.2e}, orders [{}] (2 ± 0.2)",
            centre_err[cells.len() - 1],
            spacing[cells.len() - 1],
            fmt_orders(&oc),
            flat_err[cells.len() - 1],
            fmt_orders(&of)
        ),
    ))
}

fn kernel_fidelity() -> Check {
    let model = NoiseModel::new(&UNIT, 1.0, Kernel::Gaussian)?;
    let lc = model.lambda_c().value();
    let grid = Grid1D::symmetric(10.0, 256, Boundary::Periodic)?;
    let dt = 1e-3;
    let sampler = NoiseSampler::new(&grid, &model, dt)?;
    let fields: Vec<Vec<f64>> = (0..10_000u64)
        .map(|m| sampler.sample(&mut rng_for(m)))
        .collect();
    let max_lag = (lc / grid.spacing()).ceil() as usize + 1;
    let stats = estimate_correlation(&fields, None, &grid, dt, max_lag)?;
    let x = lc / grid.spacing();
    let k = x.floor() as usize;
    let w = x - k as f64;
    let g_lc = (1.0 - w) * stats.corr[k] + w * stats.corr[k + 1];
    // zero-mean field: per-member mean squares are independent draws
    let per_member: Vec<f64> = fields
        .iter()
        .map(|f| f.iter().map(|v| v * v).sum::<f64>() / f.len() as f64)
        .collect();
    let m = per_member.len() as f64;
    let mean = per_member.iter().sum::<f64>() / m;
    let se = (per_member.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0) / m).sqrt();
    let want = model.g0() * dt;
    let z = (mean - want) / se;
    let g0_unit = 8.0 / PI.powi(3);
    Ok((
        (g_lc - (-1.0f64).exp()).abs() < 0.02
            && stats.corr[0] == 1.0
            && z.abs() <= 3.0
            && ((lc - 1.3921) / 1.3921).abs() < 1e-4
            && ((model.g0() - g0_unit) / g0_unit).abs() < 1e-12,
        format!(
            "λc {lc:.4}, Ĝ(λc) {g_lc:.4} vs 1/e {:.4}, Ĝ(0) {}, variance {mean:.5e} vs g0·dt {want:.5e} ({z:+.2} SE)",
            1.0 / E,
            stats.corr[0]
        ),
    ))
}

fn kernel_admissibility() -> Check {
    let lc = lambda_c(&UNIT, 1.0)?.value();
    let c = kernel_taylor_coeffs(&Kernel::Gaussian, lc)?;
    let want = [1.0, 0.0, -1.0, 0.0, 0.5];
    let got = [c.a0, c.a1, c.a2, c.a3, c.a4];
    let coeff_err = got
        .iter()
        .zip(want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let d = discrete_limits(&Kernel::Gaussian, lc)?;
    let first_gap = (d.first * lc * lc - 1.0).abs();
    let third_gap = (d.third / d.third_taylor - 1.0).abs();
    Ok((
        coeff_err < 1e-6 && first_gap < 0.01 && third_gap < 0.01,
        format!(
            "Taylor coefficient error {coeff_err:.1e}; λ⁻²[1−G] limit × λc² = {:.5}; third limit {:.5} vs 12·a4/λc⁴ {:.5} (printed 16·a4/λc⁴ = {:.5} disagrees by {:.0}%)",
            d.first * lc * lc,
            d.third,
            d.third_taylor,
            d.third_alt,
            100.0 * (d.third_alt / d.third - 1.0)
        ),
    ))
}

/// SQHA ensemble around a companion made stationary by `V = −V_qu(n0)`,
/// advanced by `steps` of `dt` without re-anchoring or renormalization.
fn stationary_ensemble(
    grid: &Grid1D,
    n0: &WfmField,
    noise: &NoiseModel,
    dt: f64,
    steps: usize,
    members: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let qp = qp_sqrt_form(n0, grid, &UNIT, DEFAULT_FLOOR)?;
    let v: Vec<f64> = qp.v_qu.iter().map(|q| -q).collect();
    let config = SqhaConfig {
        dt,
        t_end: dt * steps as f64,
        positivity_policy: PositivityPolicy::ClipOnly,
        renormalize_each_step: false,
        record_every: steps.max(1),
        mask_limit: 1.0,
        ..SqhaConfig::default()
    };
    let solver = SqhaSolver::new(grid, &UNIT, &v, noise, config, Dynamics::Quantum)?;
    let ensemble = run_ensemble(&solver, n0, members, seed, None)?;
    Ok(ensemble.runs.into_iter().map(|r| r.final_state.n).collect())
}

pub const SCALING_THETAS: [f64; 5] = [1e-3, 2.371e-3, 5.623e-3, 1.334e-2, 3.163e-2];

/// Measured variances of `I*` and `∂qI*` over a Θ sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingSweep {
    pub thetas: Vec<f64>,
    pub var_istar: Vec<f64>,
    pub var_grad_istar: Vec<f64>,
}

/// Exponential-tail companion (`n ∝ e^{−2|q|}` beyond the core), one SQHA
/// window per member, variances on the cells with `3 ≤ q ≤ 6`.
pub fn scaling_sweep(thetas: &[f64], members: usize) -> Result<ScalingSweep> {
    let grid = Grid1D::symmetric(256.0, 4096, Boundary::Periodic)?;
    let n0 = init_profile(
        &grid,
        &ProfileSpec::SmoothTail { h: 1.0, scale: 1.0 },
        &UNIT,
    )?;
    let cells: Vec<usize> = (0..grid.len())
        .filter(|&i| (3.0..=6.0).contains(&grid.center(i)))
        .collect();
    let mut out = ScalingSweep {
        thetas: thetas.to_vec(),
        var_istar: Vec::new(),
        var_grad_istar: Vec::new(),
    };
    for (k, &theta) in thetas.iter().enumerate() {
        let noise = NoiseModel::with_form_factor(&UNIT, theta, 1e-8, Kernel::Gaussian)?;
        let fields = stationary_ensemble(&grid, &n0, &noise, 1e-3, 10, members, 1000 * k as u64)?;
        let v = istar_variance(&fields, &n0.n, &grid, &UNIT, DEFAULT_FLOOR, &cells)?;
        out.var_istar.push(v.var_istar);
        out.var_grad_istar.push(v.var_grad_istar);
    }
    Ok(out)
}

fn scaling_laws() -> Check {
    let sweep = scaling_sweep(&SCALING_THETAS, 200)?;
    let a = scaling_fit(&sweep.thetas, &sweep.var_istar)?;
    let b = scaling_fit(&sweep.thetas, &sweep.var_grad_istar)?;
    Ok((
        (a.exponent - 3.0).abs() <= 0.3 && (b.exponent - 4.0).abs() <= 0.4,
        format!(
            "Θ {:.0e}..{:.1e}, 200 members: Var(I*) exponent {:.3} (3 ± 0.3, r² {:.4}); Var(∂qI*) exponent {:.3} (4 ± 0.4, r² {:.4})",
            sweep.thetas[0],
            sweep.thetas[sweep.thetas.len() - 1],
            a.exponent,
            a.r_squared,
            b.exponent,
            b.r_squared
        ),
    ))
}

fn estimator_closure() -> Check {
    let grid = Grid1D::symmetric(32.0, 512, Boundary::Periodic)?;
    let noise = NoiseModel::with_form_factor(&UNIT, 4.0, 2.4e-9, Kernel::Gaussian)?;
    let (dt, steps, members) = (1e-3, 10, 1000);
    let broad = init_profile(
        &grid,
        &ProfileSpec::Gaussian {
            sigma: 8.0,
            q0: 0.0,
        },
        &UNIT,
    )?;
    let fields = stationary_ensemble(&grid, &broad, &noise, dt, steps, members, 7)?;
    let stats = estimate_correlation(&fields, Some(&broad.n), &grid, dt * steps as f64, 4)?;
    let grad = gradsq_variance(&fields, &grid, &stats)?;
    let lap = laplacian_variance(&fields, &grid, &stats)?;

    let flat = WfmField::from_density(vec![1.0 / grid.length(); grid.len()])?;
    let flat_fields = stationary_ensemble(&grid, &flat, &noise, dt, steps, members, 70_000)?;
    let cross = cross_term(&flat_fields, &grid)?;
    let (gg, lg) = (grad.check.relative_gap(), lap.relative_gap());
    Ok((
        gg < 0.1 && lg < 0.1 && cross.z().abs() < 3.0,
        format!(
            "gradsq formula/direct gap {:.1}% (printed form {:.1}%), laplacian gap {:.1}% (< 10%), cross term z {:+.2} (|z| < 3)",
            100.0 * gg,
            100.0 * (grad.formula_printed / grad.check.direct - 1.0).abs(),
            100.0 * lg,
            cross.z()
        ),
    ))
}

fn stretched(h: f64) -> Result<(Grid1D, WfmField)> {
    let half = 1.3 * 13.8f64.powf(1.0 / h);
    let cells = (((half / 0.02) as usize).min(20_000)) & !1;
    let grid = Grid1D::symmetric(half, cells, Boundary::Periodic)?;
    let f = init_profile(&grid, &ProfileSpec::StretchedExp { h, scale: 1.0 }, &UNIT)?;
    Ok((grid, f))
}

fn tails() -> Check {
    let mut ok = true;
    let mut notes = Vec::new();
    for h in [0.5, 1.0, 1.2, 2.0] {
        let (grid, f) = stretched(h)?;
        let w = auto_tail_window(&f, &grid, DEFAULT_FLOOR)?;
        let fit = tail_exponent(&f, &grid, &UNIT, w, DEFAULT_FLOOR)?;
        ok &= (fit.h - h).abs() <= 0.05;
        notes.push(format!("h {h} → {:.3}", fit.h));
    }
    for h in [0.5, 1.0, 1.2, 1.4, 1.6, 2.0] {
        let (grid, f) = stretched(h)?;
        let (force, mask) = qp_force(&f, &grid, &UNIT, DEFAULT_FLOOR)?;
        let i = force_integral(
            &force,
            &mask,
            &grid,
            2.0 * grid.spacing(),
            TailMode::Extrapolate,
        )?;
        ok &= i.diverges == (h >= 1.5);
        notes.push(format!("∫ at h {h}: {}", i.verdict));
    }
    let grid = Grid1D::symmetric(20.0, 2000, Boundary::Periodic)?;
    let smooth = init_profile(
        &grid,
        &ProfileSpec::SmoothTail { h: 1.0, scale: 1.0 },
        &UNIT,
    )?;
    let (force, mask) = qp_force(&smooth, &grid, &UNIT, DEFAULT_FLOOR)?;
    let i = force_integral(&force, &mask, &grid, 2.0 * grid.spacing(), TailMode::Grid)?;
    let l_one = lambda_l(&force, &mask, &grid, 1.0, &i)?;
    ok &= matches!(l_one, LengthScale::Finite(v) if v > 0.0);

    let grid = Grid1D::symmetric(9.0, 900, Boundary::Periodic)?;
    let ground = init_profile(&grid, &ProfileSpec::HarmonicGround { omega: 1.0 }, &UNIT)?;
    let (force, mask) = qp_force(&ground, &grid, &UNIT, DEFAULT_FLOOR)?;
    let i = force_integral(&force, &mask, &grid, 2.0 * grid.spacing(), TailMode::Grid)?;
    let l_gauss = lambda_l(&force, &mask, &grid, 1.0, &i)?;
    ok &= l_gauss.is_infinite();
    notes.push(format!("λ_L(h=1) {l_one}, λ_L(gaussian) {l_gauss}"));
    Ok((ok, notes.join("; ")))
}

fn regimes() -> Check {
    let t = RegimeThresholds::default();
    let inf = LengthScale::Infinite;
    let fin = LengthScale::Finite;
    let table = [
        (inf, inf, 1.0, 0.0, 1.0, Regime::NonLocalDeterministic),
        (inf, fin(0.01), 1.0, 0.0, 1.0, Regime::NonLocalDeterministic),
        (inf, inf, 1.0, 0.0, 0.0, Regime::LocalDeterministic),
        (fin(0.5), inf, 1.0, 1.0, 1.0, Regime::MicroscopicStochastic),
        (
            fin(0.5),
            fin(0.01),
            1.0,
            1.0,
            1.0,
            Regime::MicroscopicStochastic,
        ),
        (
            fin(0.01),
            inf,
            1.0,
            1.0,
            1.0,
            Regime::MacroscopicNonlocalStochastic,
        ),
        (
            fin(0.01),
            fin(0.5),
            1.0,
            1.0,
            1.0,
            Regime::MacroscopicNonlocalStochastic,
        ),
        (
            fin(0.01),
            fin(0.05),
            1.0,
            1.0,
            1.0,
            Regime::MacroscopicLocalStochastic,
        ),
        (
            fin(0.1),
            fin(0.1),
            1.0,
            1.0,
            1.0,
            Regime::MacroscopicLocalStochastic,
        ),
    ];
    let mut wrong = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (lc, ll, res, theta, hbar, want) in table {
        match classify_regime(lc, ll, res, 10.0, theta, hbar, &t) {
            Ok(r) if r == want => {
                seen.insert(r.to_string());
            }
            other => wrong.push(format!("{lc}/{ll}/θ={theta}/ħ={hbar}: {other:?}")),
        }
    }
    let rejects = classify_regime(fin(1.0), inf, 1.0, 10.0, 0.0, 1.0, &t).is_err()
        && classify_regime(inf, inf, 1.0, 10.0, 1.0, 1.0, &t).is_err();
    Ok((
        wrong.is_empty() && seen.len() == 5 && rejects,
        if wrong.is_empty() {
            format!(
                "{} rows, {} labels covered, inconsistent inputs rejected: {rejects}",
                table.len(),
                seen.len()
            )
        } else {
            format!("mismatches: {}", wrong.join("; "))
        },
    ))
}

fn reproducibility() -> Check {
    let (grid, v) = harmonic_setup(6.0, 128)?;
    let start = init_profile(
        &grid,
        &ProfileSpec::Gaussian {
            sigma: 0.72,
            q0: 0.2,
        },
        &UNIT,
    )?;
    let config = SqhaConfig {
        dt: 8e-4,
        t_end: 0.4,
        reanchor_interval: Some(0.04),
        record_every: 50,
        ..SqhaConfig::default()
    };
    let quiet = SqhaSolver::new(
        &grid,
        &UNIT,
        &v,
        &NoiseModel::deterministic(),
        config,
        Dynamics::Quantum,
    )?;
    let stochastic_run = quiet.run(&start, 0, 11)?;
    let det = evolve(
        &start,
        &v,
        &grid,
        &UNIT,
        &EvolveConfig {
            dt: config.dt,
            t_end: config.t_end,
            record_every: usize::MAX,
            ..EvolveConfig::default()
        },
    )?;
    let exact = stochastic_run.final_state.n == det.last().n
        && stochastic_run.final_state.s0 == det.last().s;

    let noise = NoiseModel::with_form_factor(&UNIT, 4.0, 1e-4, Kernel::Gaussian)?;
    // no re-anchoring: clipped noise folded into n0 would mask the tails
    let noisy_config = SqhaConfig {
        reanchor_interval: None,
        ..config
    };
    let noisy = SqhaSolver::new(&grid, &UNIT, &v, &noise, noisy_config, Dynamics::Quantum)?;
    let csv = |threads: Option<usize>| -> Result<Vec<u8>> {
        let e = run_ensemble(&noisy, &start, 6, 42, threads)?;
        let mut buf = Vec::new();
        write_trace_csv(&e.trace(), &mut buf)?;
        Ok(buf)
    };
    let (a, b, c) = (csv(Some(1))?, csv(Some(1))?, csv(Some(3))?);
    let other = {
        let e = run_ensemble(&noisy, &start, 6, 43, Some(1))?;
        let mut buf = Vec::new();
        write_trace_csv(&e.trace(), &mut buf)?;
        buf
    };
    let same = a == b && a == c;
    Ok((
        exact && same && a != other,
        format!(
            "Θ=0 trajectory bit-identical: {exact}; CSV ({} bytes) identical across repeats and thread counts: {same}; another seed differs: {}",
            a.len(),
            a != other
        ),
    ))
}
