//! First-order stochastic hydrodynamics: a noisy density `n` carried next to
//! its deterministic companion `(n0, S0)`.
//!
//! The drift of `n` is linear in `n` at fixed `S0`, so `n` is advanced as
//! `n0(t+dt) + δ + dt·[−∂q(δ ∂qS0/m)] + η` with `δ = n − n0`. With no noise
//! `δ` stays exactly zero and `n` reproduces the companion bit for bit.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deterministic::{
    advection_rate, check_cfl, face_velocity, phase_velocity, wave_particle_residual, Dynamics,
    Madelung, DEFAULT_CFL, DEFAULT_MASK_LIMIT,
};
use crate::error::{Error, Result};
use crate::grid::{Grid1D, PhysicalConstants, WfmField};
use crate::noise::{rng_for, NoiseModel, NoiseSampler};
use crate::quantum_potential::{qp_sqrt_density, DEFAULT_FLOOR};
use crate::stencil;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositivityPolicy {
    /// Clip negative cells to zero and rescale to the initial mass.
    #[default]
    ClipRenormalize,
    /// Clip negative cells to zero, leaving the mass as it falls.
    ClipOnly,
    /// Redraw the noise until no cell is negative.
    RejectStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SqhaConfig {
    pub dt: f64,
    pub t_end: f64,
    /// Length of the perturbative window; `None` never re-anchors.
    pub reanchor_interval: Option<f64>,
    pub positivity_policy: PositivityPolicy,
    pub renormalize_each_step: bool,
    /// Redraws allowed per step under [`PositivityPolicy::RejectStep`].
    pub max_retries: usize,
    pub record_every: usize,
    pub c_cfl: f64,
    pub floor: f64,
    /// Largest masked fraction tolerated by the companion solver.
    pub mask_limit: f64,
}

impl Default for SqhaConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            t_end: 1.0,
            reanchor_interval: None,
            positivity_policy: PositivityPolicy::ClipRenormalize,
            renormalize_each_step: true,
            max_retries: 10,
            record_every: 100,
            c_cfl: DEFAULT_CFL,
            floor: DEFAULT_FLOOR,
            mask_limit: DEFAULT_MASK_LIMIT,
        }
    }
}

impl SqhaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config(format!("dt must be > 0, got {}", self.dt)));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(Error::config(format!(
                "t_end must be >= 0, got {}",
                self.t_end
            )));
        }
        if let Some(w) = self.reanchor_interval {
            if !(w >= self.dt) {
                return Err(Error::config(format!(
                    "reanchor_interval {w} must be >= dt {}",
                    self.dt
                )));
            }
        }
        if self.record_every == 0 {
            return Err(Error::config("record_every must be >= 1"));
        }
        if !(self.c_cfl > 0.0) {
            return Err(Error::config("c_cfl must be > 0"));
        }
        if !(self.floor >= 0.0 && self.floor < 1.0) {
            return Err(Error::config("floor must lie in [0, 1)"));
        }
        if !(self.mask_limit > 0.0 && self.mask_limit <= 1.0) {
            return Err(Error::config("mask_limit must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    /// Steps per perturbative window.
    pub fn window_steps(&self) -> Option<usize> {
        self.reanchor_interval
            .map(|w| ((w / self.dt).round() as usize).max(1))
    }
}

#[derive(Debug, Clone)]
pub struct SqhaState {
    pub n: Vec<f64>,
    pub n0: Vec<f64>,
    pub s0: Vec<f64>,
    pub t: f64,
    pub step: usize,
    pub realization_seed: u64,
    /// Mass the density is rescaled to.
    pub target_mass: f64,
    /// Running `−∫∂q I* dt`.
    pub momentum_kick: Vec<f64>,
    rng: ChaCha8Rng,
}

impl SqhaState {
    pub fn new(field: &WfmField, grid: &Grid1D, seed: u64) -> Result<Self> {
        grid.check_len(field.len(), "field")?;
        Ok(Self {
            n: field.n.clone(),
            n0: field.n.clone(),
            s0: field.s.clone(),
            t: 0.0,
            step: 0,
            realization_seed: seed,
            target_mass: field.mass(grid),
            momentum_kick: vec![0.0; field.len()],
            rng: rng_for(seed),
        })
    }

    pub fn companion(&self) -> WfmField {
        WfmField {
            n: self.n0.clone(),
            s: self.s0.clone(),
            normalized: false,
        }
    }

    /// The noisy density paired with the companion action.
    pub fn field(&self) -> WfmField {
        WfmField {
            n: self.n.clone(),
            s: self.s0.clone(),
            normalized: false,
        }
    }
}

/// Resets the perturbative window: `n0 ← n`, `S0` kept.
pub fn reanchor(state: &SqhaState) -> SqhaState {
    let mut next = state.clone();
    next.n0.clone_from(&state.n);
    next
}

#[derive(Debug, Clone, PartialEq)]
pub struct Istar {
    pub values: Vec<f64>,
    /// Cells masked in either density; `values` is 0 there.
    pub mask: Vec<bool>,
}

impl Istar {
    /// Mean of `I*²` over unmasked cells.
    pub fn mean_square(&self) -> f64 {
        let (sum, count) = self
            .values
            .iter()
            .zip(&self.mask)
            .filter(|(_, m)| !**m)
            .fold((0.0, 0usize), |(s, c), (v, _)| (s + v * v, c + 1));
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }
}

/// `I* = V_qu(n) − V_qu(n0)`.
pub fn istar(n: &[f64], n0: &[f64], grid: &Grid1D, constants: &PhysicalConstants) -> Result<Istar> {
    istar_with_floor(n, n0, grid, constants, DEFAULT_FLOOR)
}

pub fn istar_with_floor(
    n: &[f64],
    n0: &[f64],
    grid: &Grid1D,
    constants: &PhysicalConstants,
    floor: f64,
) -> Result<Istar> {
    let a = qp_sqrt_density(n, grid, constants, floor)?;
    let b = qp_sqrt_density(n0, grid, constants, floor)?;
    let mask: Vec<bool> = a
        .floor_mask
        .iter()
        .zip(&b.floor_mask)
        .map(|(x, y)| *x || *y)
        .collect();
    let values = (0..n.len())
        .map(|i| if mask[i] { 0.0 } else { a.v_qu[i] - b.v_qu[i] })
        .collect();
    Ok(Istar { values, mask })
}

/// Current that carries a density increment `η` in from the left edge,
/// `−∂q j = η/dt`, evaluated at cell centres.
pub fn noise_current(eta: &[f64], grid: &Grid1D, dt: f64) -> Vec<f64> {
    let scale = grid.spacing() / dt;
    let mut acc = 0.0;
    eta.iter()
        .map(|e| {
            let j = -(acc + 0.5 * e) * scale;
            acc += e;
            j
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepReport {
    /// Mass before any rescaling, minus the target mass.
    pub mass_drift: f64,
    pub clip_fraction: f64,
    pub retries: usize,
    pub wave_particle_residual: f64,
}

/// Stepper for one noise model, potential and step size.
pub struct SqhaSolver<'a> {
    grid: &'a Grid1D,
    constants: &'a PhysicalConstants,
    madelung: Madelung<'a>,
    sampler: NoiseSampler,
    noise_active: bool,
    config: SqhaConfig,
}

impl<'a> SqhaSolver<'a> {
    pub fn new(
        grid: &'a Grid1D,
        constants: &'a PhysicalConstants,
        potential: &'a [f64],
        noise: &NoiseModel,
        config: SqhaConfig,
        dynamics: Dynamics,
    ) -> Result<Self> {
        config.validate()?;
        grid.check_len(potential.len(), "potential")?;
        check_cfl(config.dt, grid, constants, config.c_cfl)?;
        let mut madelung = Madelung::new(grid, constants, potential);
        madelung.c_cfl = config.c_cfl;
        madelung.floor = config.floor;
        madelung.mask_limit = config.mask_limit;
        madelung.dynamics = dynamics;
        Ok(Self {
            grid,
            constants,
            madelung,
            sampler: NoiseSampler::new(grid, noise, config.dt)?,
            noise_active: noise.is_active(),
            config,
        })
    }

    pub fn config(&self) -> &SqhaConfig {
        &self.config
    }

    pub fn step(&self, state: &mut SqhaState) -> Result<StepReport> {
        let grid = self.grid;
        let dt = self.config.dt;
        let len = grid.len();
        let next = self.madelung.step(&state.companion(), dt, state.t)?;
        let u = face_velocity(&state.s0, grid, self.constants);
        let delta: Vec<f64> = state.n.iter().zip(&state.n0).map(|(a, b)| a - b).collect();
        let drift = advection_rate(&delta, &u, grid);
        let base: Vec<f64> = (0..len)
            .map(|i| next.n[i] + (delta[i] + dt * drift[i]))
            .collect();

        let mut report = StepReport {
            mass_drift: 0.0,
            clip_fraction: 0.0,
            retries: 0,
            wave_particle_residual: 0.0,
        };
        let (mut n, eta) = if self.noise_active {
            let mut attempt = 0;
            loop {
                let eta = self.sampler.sample(&mut state.rng);
                let cand: Vec<f64> = base.iter().zip(&eta).map(|(b, e)| b + e).collect();
                let negative = cand.iter().any(|&v| v < 0.0);
                if negative && self.config.positivity_policy == PositivityPolicy::RejectStep {
                    if attempt == self.config.max_retries {
                        return Err(Error::PositivityExhausted {
                            retries: attempt,
                            t: state.t,
                        });
                    }
                    attempt += 1;
                    continue;
                }
                report.retries = attempt;
                break (cand, Some(eta));
            }
        } else {
            (base, None)
        };

        // Without noise n is the companion itself, round-off tails included.
        let clipped = if self.noise_active {
            let count = n.iter().filter(|&&v| v < 0.0).count();
            for v in n.iter_mut() {
                *v = v.max(0.0);
            }
            count
        } else {
            0
        };
        report.clip_fraction = clipped as f64 / len as f64;
        let mass = grid.integrate(&n);
        report.mass_drift = mass - state.target_mass;
        let rescale = self.noise_active
            && (self.config.renormalize_each_step
                || (clipped > 0
                    && self.config.positivity_policy == PositivityPolicy::ClipRenormalize));
        if rescale {
            if !(mass > 0.0) {
                return Err(Error::AllMasked);
            }
            let k = state.target_mass / mass;
            for v in n.iter_mut() {
                *v *= k;
            }
        }

        let force = istar_force(&n, &next.n, grid, self.constants, self.config.floor)?;
        for (p, f) in state.momentum_kick.iter_mut().zip(&force) {
            *p += f * dt;
        }
        state.n = n;
        state.n0 = next.n;
        state.s0 = next.s;
        state.step += 1;
        state.t = state.step as f64 * dt;

        if let Some(eta) = eta {
            let j = noise_current(&eta, grid, dt);
            let u0 = phase_velocity(&state.s0, grid, self.constants);
            let max = state.n.iter().copied().fold(0.0, f64::max);
            let velocity: Vec<f64> = (0..len)
                .map(|i| {
                    let ni = state.n[i];
                    if ni > self.config.floor * max {
                        u0[i] + j[i] / ni
                    } else {
                        u0[i]
                    }
                })
                .collect();
            report.wave_particle_residual =
                wave_particle_residual(&state.field(), grid, self.constants, &velocity)?;
        }

        if let Some(w) = self.config.window_steps() {
            if state.step.is_multiple_of(w) {
                *state = reanchor(state);
            }
        }
        Ok(report)
    }

    /// Runs one realization to `t_end`, recording every `record_every` steps
    /// and at the end.
    pub fn run(&self, field: &WfmField, index: usize, seed: u64) -> Result<RealizationRun> {
        let mut state = SqhaState::new(field, self.grid, seed)?;
        let mut run = RealizationRun {
            index,
            seed,
            trace: Vec::new(),
            snapshots: vec![Snapshot::of(&state)],
            final_state: state.clone(),
        };
        let steps = self.config.steps();
        for k in 1..=steps {
            let report = self.step(&mut state)?;
            if k % self.config.record_every == 0 || k == steps {
                let ist = istar_with_floor(
                    &state.n,
                    &state.n0,
                    self.grid,
                    self.constants,
                    self.config.floor,
                )?;
                let t = state.t;
                for (observable, value) in [
                    ("mass_drift", report.mass_drift),
                    ("clip_fraction", report.clip_fraction),
                    ("istar_variance", ist.mean_square()),
                    ("wave_particle_residual", report.wave_particle_residual),
                ] {
                    run.trace.push(TraceRow {
                        realization: index,
                        t,
                        observable,
                        value,
                    });
                }
                run.snapshots.push(Snapshot::of(&state));
            }
        }
        run.final_state = state;
        Ok(run)
    }
}

fn istar_force(
    n: &[f64],
    n0: &[f64],
    grid: &Grid1D,
    constants: &PhysicalConstants,
    floor: f64,
) -> Result<Vec<f64>> {
    if constants.hbar == 0.0 {
        return Ok(vec![0.0; n.len()]);
    }
    let ist = istar_with_floor(n, n0, grid, constants, floor)?;
    let grad = stencil::central_gradient(&ist.values, grid);
    Ok((0..n.len())
        .map(|i| if ist.mask[i] { 0.0 } else { -grad[i] })
        .collect())
}

/// One step of the noisy density with full quantum companion dynamics.
pub fn sqha_step(
    state: &SqhaState,
    potential: &[f64],
    grid: &Grid1D,
    constants: &PhysicalConstants,
    noise: &NoiseModel,
    dt: f64,
) -> Result<SqhaState> {
    single_step(
        state,
        potential,
        grid,
        constants,
        noise,
        dt,
        Dynamics::Quantum,
    )
}

/// As [`sqha_step`] with the quantum potential dropped from the companion
/// action update.
pub fn classical_stochastic_step(
    state: &SqhaState,
    potential: &[f64],
    grid: &Grid1D,
    constants: &PhysicalConstants,
    noise: &NoiseModel,
    dt: f64,
) -> Result<SqhaState> {
    single_step(
        state,
        potential,
        grid,
        constants,
        noise,
        dt,
        Dynamics::Classical,
    )
}

fn single_step(
    state: &SqhaState,
    potential: &[f64],
    grid: &Grid1D,
    constants: &PhysicalConstants,
    noise: &NoiseModel,
    dt: f64,
    dynamics: Dynamics,
) -> Result<SqhaState> {
    let config = SqhaConfig {
        dt,
        t_end: dt,
        ..SqhaConfig::default()
    };
    let solver = SqhaSolver::new(grid, constants, potential, noise, config, dynamics)?;
    let mut next = state.clone();
    solver.step(&mut next)?;
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub realization: usize,
    pub t: f64,
    pub observable: &'static str,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub t: f64,
    pub n: Vec<f64>,
    pub n0: Vec<f64>,
    pub s0: Vec<f64>,
}

impl Snapshot {
    fn of(state: &SqhaState) -> Self {
        Self {
            t: state.t,
            n: state.n.clone(),
            n0: state.n0.clone(),
            s0: state.s0.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RealizationRun {
    pub index: usize,
    pub seed: u64,
    pub trace: Vec<TraceRow>,
    pub snapshots: Vec<Snapshot>,
    pub final_state: SqhaState,
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub runs: Vec<RealizationRun>,
}

/// Runs `members` realizations in parallel with seeds `base_seed + index`.
/// Results are stored in index order, so every reduction over them is
/// independent of the thread count.
pub fn run_ensemble(
    solver: &SqhaSolver<'_>,
    field: &WfmField,
    members: usize,
    base_seed: u64,
    threads: Option<usize>,
) -> Result<Ensemble> {
    if members == 0 {
        return Err(Error::config("ensemble needs at least one member"));
    }
    let job = || -> Result<Vec<RealizationRun>> {
        (0..members)
            .into_par_iter()
            .map(|k| solver.run(field, k, base_seed.wrapping_add(k as u64)))
            .collect()
    };
    let runs = match threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?
            .install(job)?,
        None => job()?,
    };
    Ok(Ensemble { runs })
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn snapshot_times(&self) -> Vec<f64> {
        self.runs[0].snapshots.iter().map(|s| s.t).collect()
    }

    /// Cellwise mean and standard error of `f(snapshot)` over members.
    pub fn cell_stats(
        &self,
        snapshot: usize,
        f: impl Fn(&Snapshot) -> Vec<f64>,
    ) -> (Vec<f64>, Vec<f64>) {
        let values: Vec<Vec<f64>> = self
            .runs
            .iter()
            .map(|r| f(&r.snapshots[snapshot]))
            .collect();
        let m = values.len() as f64;
        let len = values[0].len();
        let mut mean = vec![0.0; len];
        for v in &values {
            for (a, b) in mean.iter_mut().zip(v) {
                *a += b;
            }
        }
        mean.iter_mut().for_each(|a| *a /= m);
        let mut var = vec![0.0; len];
        for v in &values {
            for i in 0..len {
                var[i] += (v[i] - mean[i]).powi(2);
            }
        }
        let se = var
            .iter()
            .map(|s| (s / (m - 1.0).max(1.0) / m).sqrt())
            .collect();
        (mean, se)
    }

    pub fn trace(&self) -> Vec<TraceRow> {
        self.runs
            .iter()
            .flat_map(|r| r.trace.iter().cloned())
            .collect()
    }
}

pub fn write_trace_csv<W: std::io::Write>(rows: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["realization", "t", "observable", "value"])?;
    for r in rows {
        w.write_record([
            r.realization.to_string(),
            r.t.to_string(),
            r.observable.to_string(),
            r.value.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deterministic::{discrete_ground_state, evolve, EvolveConfig};
    use crate::grid::{init_profile, Boundary, ProfileSpec};
    use crate::noise::Kernel;
    use crate::potential::PotentialSpec;

    const UNIT: PhysicalConstants = PhysicalConstants {
        hbar: 1.0,
        mass: 1.0,
        boltzmann: 1.0,
        light_speed: 1.0,
    };

    struct Setup {
        grid: Grid1D,
        v: Vec<f64>,
        ground: WfmField,
    }

    fn harmonic(cells: usize) -> Setup {
        let grid = Grid1D::symmetric(6.0, cells, Boundary::Periodic).unwrap();
        let v = PotentialSpec::Harmonic { omega: 1.0 }
            .sample(&grid, &UNIT)
            .unwrap();
        let ground = discrete_ground_state(&grid, &v, &UNIT).unwrap();
        Setup { grid, v, ground }
    }

    /// Θ = 4 keeps λc ≈ 0.7 well inside the 12-wide box; the form factor
    /// sets the strength.
    fn weak_noise(form_factor: f64) -> NoiseModel {
        NoiseModel::with_form_factor(&UNIT, 4.0, form_factor, Kernel::Gaussian).unwrap()
    }

    #[test]
    fn zero_noise_reproduces_deterministic_trajectory() {
        let s = harmonic(128);
        let f = init_profile(
            &s.grid,
            &ProfileSpec::Gaussian {
                sigma: 0.72,
                q0: 0.2,
            },
            &UNIT,
        )
        .unwrap();
        let config = SqhaConfig {
            dt: 8e-4,
            t_end: 0.5,
            reanchor_interval: Some(0.01),
            ..SqhaConfig::default()
        };
        let solver = SqhaSolver::new(
            &s.grid,
            &UNIT,
            &s.v,
            &NoiseModel::deterministic(),
            config,
            Dynamics::Quantum,
        )
        .unwrap();
        let run = solver.run(&f, 0, 9).unwrap();
        let det = evolve(
            &f,
            &s.v,
            &s.grid,
            &UNIT,
            &EvolveConfig {
                dt: 8e-4,
                t_end: 0.5,
                record_every: 1000,
                ..EvolveConfig::default()
            },
        )
        .unwrap();
        let last = &run.final_state;
        assert_eq!(last.n, det.last().n);
        assert_eq!(last.n0, det.last().n);
        assert_eq!(last.s0, det.last().s);
        assert!(run
            .trace
            .iter()
            .filter(|r| r.observable == "wave_particle_residual")
            .all(|r| r.value == 0.0));
    }

    #[test]
    fn istar_vanishes_after_reanchor() {
        let s = harmonic(128);
        let solver = SqhaSolver::new(
            &s.grid,
            &UNIT,
            &s.v,
            &weak_noise(1e-3),
            SqhaConfig {
                dt: 8e-4,
                ..SqhaConfig::default()
            },
            Dynamics::Quantum,
        )
        .unwrap();
        let mut state = SqhaState::new(&s.ground, &s.grid, 1).unwrap();
        for _ in 0..20 {
            solver.step(&mut state).unwrap();
        }
        assert!(
            istar(&state.n, &state.n0, &s.grid, &UNIT)
                .unwrap()
                .mean_square()
                > 0.0
        );
        let r = reanchor(&state);
        assert!(istar(&r.n, &r.n0, &s.grid, &UNIT)
            .unwrap()
            .values
            .iter()
            .all(|v| *v == 0.0));
        assert_eq!(r.s0, state.s0);
    }

    #[test]
    fn istar_matches_linear_perturbation() {
        let g = Grid1D::symmetric(8.0, 1024, Boundary::Periodic).unwrap();
        let eps = 0.01;
        let sigma: f64 = 1.0;
        let n0: Vec<f64> = g
            .centers()
            .iter()
            .map(|q| (-q * q / (2.0 * sigma * sigma)).exp())
            .collect();
        let n: Vec<f64> = g
            .centers()
            .iter()
            .zip(&n0)
            .map(|(q, a)| a * (1.0 + eps * q.sin()))
            .collect();
        let ist = istar(&n, &n0, &g, &UNIT).unwrap();
        // I* ≈ −(ħ²/2m) ε [(R'/R) s' + s''/2] with R = √n0, s = sin q
        let (mut num, mut den) = (0.0, 0.0);
        for (i, q) in g.centers().iter().enumerate() {
            if q.abs() > 4.0 {
                continue;
            }
            let expected = -0.5 * eps * (-q / (2.0 * sigma * sigma) * q.cos() - 0.5 * q.sin());
            num += (ist.values[i] - expected).powi(2);
            den += expected * expected;
        }
        let rel = (num / den).sqrt();
        assert!(rel < 0.05, "relative error {rel}");
    }

    #[test]
    fn ensemble_mean_follows_companion() {
        let s = harmonic(128);
        let config = SqhaConfig {
            dt: 8e-4,
            t_end: 1.0,
            positivity_policy: PositivityPolicy::ClipOnly,
            renormalize_each_step: false,
            record_every: 1000,
            ..SqhaConfig::default()
        };
        let noise = weak_noise(1e-4);
        let solver =
            SqhaSolver::new(&s.grid, &UNIT, &s.v, &noise, config, Dynamics::Quantum).unwrap();
        let ens = run_ensemble(&solver, &s.ground, 200, 100, None).unwrap();
        let last = ens.snapshot_times().len() - 1;
        let (mean, se) = ens.cell_stats(last, |sn| {
            sn.n.iter().zip(&sn.n0).map(|(a, b)| a - b).collect()
        });
        for q in [-1.0, -0.5, 0.0, 0.5, 1.0] {
            let i = s.grid.nearest_index(q);
            assert!(
                mean[i].abs() < 3.0 * se[i],
                "q {q}: {} vs se {}",
                mean[i],
                se[i]
            );
        }
    }

    #[test]
    fn single_cell_variance_grows_linearly() {
        let s = harmonic(128);
        let dt = 8e-4;
        let config = SqhaConfig {
            dt,
            t_end: 0.1,
            positivity_policy: PositivityPolicy::ClipOnly,
            renormalize_each_step: false,
            record_every: 25,
            ..SqhaConfig::default()
        };
        let noise = weak_noise(1e-3);
        let solver =
            SqhaSolver::new(&s.grid, &UNIT, &s.v, &noise, config, Dynamics::Quantum).unwrap();
        let members = 400;
        let ens = run_ensemble(&solver, &s.ground, members, 7, None).unwrap();
        let centre = s.grid.nearest_index(0.0);
        for (k, t) in ens.snapshot_times().iter().enumerate().skip(1) {
            let x: Vec<f64> = ens
                .runs
                .iter()
                .map(|r| r.snapshots[k].n[centre] - r.snapshots[k].n0[centre])
                .collect();
            let m = x.iter().sum::<f64>() / members as f64;
            let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (members - 1) as f64;
            let expected = noise.g0() * t;
            let se = expected * (2.0 / members as f64).sqrt();
            assert!(
                (var - expected).abs() < 3.0 * se,
                "t {t}: {var} vs {expected}"
            );
        }
    }

    #[test]
    fn ensemble_is_reproducible_across_thread_counts() {
        let s = harmonic(64);
        let config = SqhaConfig {
            dt: 2e-3,
            t_end: 0.05,
            record_every: 5,
            ..SqhaConfig::default()
        };
        let noise = weak_noise(1e-3);
        let solver =
            SqhaSolver::new(&s.grid, &UNIT, &s.v, &noise, config, Dynamics::Quantum).unwrap();
        let a = run_ensemble(&solver, &s.ground, 6, 42, Some(1)).unwrap();
        let b = run_ensemble(&solver, &s.ground, 6, 42, Some(3)).unwrap();
        assert_eq!(a.trace(), b.trace());
        for (x, y) in a.runs.iter().zip(&b.runs) {
            assert_eq!(x.final_state.n, y.final_state.n);
            assert_eq!(x.seed, 42 + x.index as u64);
        }
    }

    #[test]
    fn positivity_policies() {
        let s = harmonic(64);
        let strong = weak_noise(1.0);
        for policy in [
            PositivityPolicy::ClipRenormalize,
            PositivityPolicy::ClipOnly,
        ] {
            let config = SqhaConfig {
                dt: 2e-3,
                positivity_policy: policy,
                renormalize_each_step: false,
                ..SqhaConfig::default()
            };
            let solver =
                SqhaSolver::new(&s.grid, &UNIT, &s.v, &strong, config, Dynamics::Quantum).unwrap();
            let mut state = SqhaState::new(&s.ground, &s.grid, 3).unwrap();
            let report = solver.step(&mut state).unwrap();
            assert!(report.clip_fraction > 0.0);
            assert!(state.n.iter().all(|&v| v >= 0.0));
            let mass = s.grid.integrate(&state.n);
            if policy == PositivityPolicy::ClipRenormalize {
                assert!((mass - 1.0).abs() < 1e-12);
            } else {
                assert!((mass - 1.0 - report.mass_drift).abs() < 1e-12);
            }
        }
        let config = SqhaConfig {
            dt: 2e-3,
            positivity_policy: PositivityPolicy::RejectStep,
            max_retries: 3,
            ..SqhaConfig::default()
        };
        let solver =
            SqhaSolver::new(&s.grid, &UNIT, &s.v, &strong, config, Dynamics::Quantum).unwrap();
        let mut state = SqhaState::new(&s.ground, &s.grid, 3).unwrap();
        assert!(matches!(
            solver.step(&mut state),
            Err(Error::PositivityExhausted { retries: 3, .. })
        ));
    }

    #[test]
    fn classical_stochastic_has_wave_particle_residual() {
        let s = harmonic(64);
        let noise = weak_noise(1e-3);
        let state = SqhaState::new(&s.ground, &s.grid, 5).unwrap();
        let next = classical_stochastic_step(&state, &s.v, &s.grid, &UNIT, &noise, 2e-3).unwrap();
        assert_ne!(next.n, next.n0);
        let config = SqhaConfig {
            dt: 2e-3,
            ..SqhaConfig::default()
        };
        let solver =
            SqhaSolver::new(&s.grid, &UNIT, &s.v, &noise, config, Dynamics::Classical).unwrap();
        let mut st = state.clone();
        assert!(solver.step(&mut st).unwrap().wave_particle_residual > 0.0);
    }

    #[test]
    fn classical_free_advection() {
        let g = Grid1D::new(0.0, 2.0 * std::f64::consts::PI, 64, Boundary::Periodic).unwrap();
        let n = vec![1.0 / g.length(); 64];
        let f = WfmField::new(n.clone(), g.centers().iter().map(|q| 2.0 * q).collect()).unwrap();
        let state = SqhaState::new(&f, &g, 0).unwrap();
        let v = vec![0.0; 64];
        let next =
            classical_stochastic_step(&state, &v, &g, &UNIT, &NoiseModel::deterministic(), 5e-4)
                .unwrap();
        for i in 0..64 {
            assert!((next.n[i] - n[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn trace_csv_has_header() {
        let rows = vec![TraceRow {
            realization: 2,
            t: 0.5,
            observable: "mass_drift",
            value: 1e-3,
        }];
        let mut out = Vec::new();
        write_trace_csv(&rows, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "realization,t,observable,value\n2,0.5,mass_drift,0.001\n"
        );
    }

    #[test]
    fn config_validation() {
        let bad = SqhaConfig {
            dt: 0.1,
            reanchor_interval: Some(0.01),
            ..SqhaConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(
            SqhaConfig {
                dt: 0.01,
                reanchor_interval: Some(0.1),
                ..SqhaConfig::default()
            }
            .window_steps(),
            Some(10)
        );
    }
}
