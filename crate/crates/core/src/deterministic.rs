//! Deterministic quantum hydrodynamics in Eulerian (quantum Hamilton–Jacobi)
//! form:
//!
//! ```text
//! ∂t n = −∂q(n ∂qS / m)
//! ∂t S = −[(∂qS)² / 2m + V + V_qu(n)]
//! ```
//!
//! The continuity equation is written in flux form on cell faces so total
//! mass is conserved to rounding. Face velocities are `(S[i+1] − S[i]) / mλ`
//! with the phase difference wrapped into `(−πħ, πħ]` when ħ > 0, since `S`
//! is only defined modulo `2πħ`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Boundary, Grid1D, PhysicalConstants, WfmField};
use crate::quantum_potential::{floor_mask, qp_sqrt_density, DEFAULT_FLOOR};
use crate::split_step;
use crate::stencil;

pub const DEFAULT_CFL: f64 = 0.1;
pub const DEFAULT_MASK_LIMIT: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    #[default]
    Rk4Madelung,
    SplitStepOracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvolveConfig {
    pub dt: f64,
    pub t_end: f64,
    pub record_every: usize,
    pub integrator: Integrator,
    pub c_cfl: f64,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        Self {
            dt: 1e-4,
            t_end: 1.0,
            record_every: 100,
            integrator: Integrator::Rk4Madelung,
            c_cfl: DEFAULT_CFL,
        }
    }
}

impl EvolveConfig {
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
        if self.record_every == 0 {
            return Err(Error::config("record_every must be >= 1"));
        }
        if !(self.c_cfl > 0.0) {
            return Err(Error::config("c_cfl must be > 0"));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }
}

/// Largest stable step `c_cfl · m λ² / ħ` (unbounded when ħ = 0).
pub fn cfl_bound(grid: &Grid1D, constants: &PhysicalConstants, c_cfl: f64) -> f64 {
    if constants.hbar == 0.0 {
        f64::INFINITY
    } else {
        c_cfl * constants.mass * grid.spacing().powi(2) / constants.hbar
    }
}

pub fn check_cfl(dt: f64, grid: &Grid1D, constants: &PhysicalConstants, c_cfl: f64) -> Result<()> {
    let bound = cfl_bound(grid, constants, c_cfl);
    if dt.abs() > bound {
        return Err(Error::Cfl { dt, bound });
    }
    Ok(())
}

/// Phase difference reduced to the principal branch `(−πħ, πħ]`.
pub(crate) fn wrap_phase(ds: f64, hbar: f64) -> f64 {
    if hbar > 0.0 {
        let period = 2.0 * PI * hbar;
        ds - period * (ds / period).round()
    } else {
        ds
    }
}

/// Velocities `∂qS/m` on the faces `i + 1/2`.
pub fn face_velocity(s: &[f64], grid: &Grid1D, constants: &PhysicalConstants) -> Vec<f64> {
    let scale = 1.0 / (constants.mass * grid.spacing());
    (0..s.len())
        .map(|i| {
            let j = grid.neighbor(i, 1);
            if j == i {
                0.0
            } else {
                wrap_phase(s[j] - s[i], constants.hbar) * scale
            }
        })
        .collect()
}

/// Cell-centered velocity `∂qS/m` (central difference, wrapped phase).
pub fn phase_velocity(s: &[f64], grid: &Grid1D, constants: &PhysicalConstants) -> Vec<f64> {
    let scale = 0.5 / (constants.mass * grid.spacing());
    (0..s.len())
        .map(|i| {
            let (l, r) = (grid.neighbor(i, -1), grid.neighbor(i, 1));
            (wrap_phase(s[r] - s[i], constants.hbar) + wrap_phase(s[i] - s[l], constants.hbar))
                * scale
        })
        .collect()
}

/// `−∂q(n u)` in flux form with face velocities `u`. Face densities are
/// geometric means, which keeps relative accuracy in exponential tails.
pub fn advection_rate(n: &[f64], u_face: &[f64], grid: &Grid1D) -> Vec<f64> {
    let flux: Vec<f64> = (0..n.len())
        .map(|i| (n[i].max(0.0) * n[grid.neighbor(i, 1)].max(0.0)).sqrt() * u_face[i])
        .collect();
    let inv = 1.0 / grid.spacing();
    (0..n.len())
        .map(|i| {
            let l = grid.neighbor(i, -1);
            let left = if l == i { 0.0 } else { flux[l] };
            -(flux[i] - left) * inv
        })
        .collect()
}

/// Which forces drive the action equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dynamics {
    /// Full quantum hydrodynamics (`V + V_qu`).
    Quantum,
    /// Quantum potential dropped: `∂t S = −[(∂qS)²/2m + V]`.
    Classical,
}

/// RK4 integrator for the Madelung system, with `V_qu` recomputed at each
/// stage.
#[derive(Debug, Clone, Copy)]
pub struct Madelung<'a> {
    pub grid: &'a Grid1D,
    pub constants: &'a PhysicalConstants,
    pub potential: &'a [f64],
    pub floor: f64,
    pub c_cfl: f64,
    pub mask_limit: f64,
    pub dynamics: Dynamics,
}

impl<'a> Madelung<'a> {
    pub fn new(grid: &'a Grid1D, constants: &'a PhysicalConstants, potential: &'a [f64]) -> Self {
        Self {
            grid,
            constants,
            potential,
            floor: DEFAULT_FLOOR,
            c_cfl: DEFAULT_CFL,
            mask_limit: DEFAULT_MASK_LIMIT,
            dynamics: Dynamics::Quantum,
        }
    }

    pub fn classical(mut self) -> Self {
        self.dynamics = Dynamics::Classical;
        self
    }

    fn rates(&self, n: &[f64], s: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let periodic = self.grid.boundary() == Boundary::Periodic;
        let qp = match self.dynamics {
            Dynamics::Quantum if self.constants.hbar > 0.0 => {
                let qp = qp_sqrt_density(n, self.grid, self.constants, self.floor)?;
                let fraction = qp.masked_fraction();
                if fraction > self.mask_limit {
                    return Err(Error::MaskOverflow {
                        fraction,
                        limit: self.mask_limit,
                        t,
                    });
                }
                Some(qp)
            }
            _ => None,
        };
        // Vacuum cells carry no usable phase: the flow there continues the
        // edge velocity of each resolved side, and the face where two
        // continuations meet carries no flux.
        let mask = qp
            .as_ref()
            .map(|qp| &qp.floor_mask)
            .filter(|m| m.iter().any(|&x| x));
        let u = match mask {
            Some(mask) => {
                let mut ghost = s.to_vec();
                let cuts = bridge_masked(&mut ghost, mask, periodic);
                let mut u = face_velocity(&ghost, self.grid, self.constants);
                for c in cuts {
                    u[c] = 0.0;
                }
                u
            }
            None => face_velocity(s, self.grid, self.constants),
        };
        let dn = advection_rate(n, &u, self.grid);
        let total: Option<Vec<f64>> = qp.as_ref().map(|qp| {
            self.potential
                .iter()
                .zip(&qp.v_qu)
                .map(|(a, b)| a + b)
                .collect()
        });
        let quarter_m = 0.25 * self.constants.mass;
        let mut ds: Vec<f64> = (0..n.len())
            .map(|i| {
                let l = self.grid.neighbor(i, -1);
                let ul = if l == i { 0.0 } else { u[l] };
                let kinetic = quarter_m * (u[i] * u[i] + ul * ul);
                let potential = total.as_ref().map_or(self.potential[i], |v| v[i]);
                -(kinetic + potential)
            })
            .collect();
        if let Some(mask) = mask {
            bridge_masked(&mut ds, mask, periodic);
        }
        Ok((dn, ds))
    }

    /// One RK4 step of size `dt` (may be negative) starting at time `t`.
    pub fn step(&self, field: &WfmField, dt: f64, t: f64) -> Result<WfmField> {
        check_cfl(dt, self.grid, self.constants, self.c_cfl)?;
        self.grid.check_len(field.len(), "field")?;
        self.grid.check_len(self.potential.len(), "potential")?;
        let axpy = |x: &[f64], k: &[f64], h: f64| -> Vec<f64> {
            x.iter().zip(k).map(|(a, b)| a + h * b).collect()
        };
        let (n, s) = (&field.n, &field.s);
        let (k1n, k1s) = self.rates(n, s, t)?;
        let (k2n, k2s) = self.rates(&axpy(n, &k1n, 0.5 * dt), &axpy(s, &k1s, 0.5 * dt), t)?;
        let (k3n, k3s) = self.rates(&axpy(n, &k2n, 0.5 * dt), &axpy(s, &k2s, 0.5 * dt), t)?;
        let (k4n, k4s) = self.rates(&axpy(n, &k3n, dt), &axpy(s, &k3s, dt), t)?;
        let combine = |x: &[f64], k1: &[f64], k2: &[f64], k3: &[f64], k4: &[f64]| -> Vec<f64> {
            (0..x.len())
                .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
                .collect()
        };
        let n = combine(n, &k1n, &k2n, &k3n, &k4n);
        let mut s = combine(s, &k1s, &k2s, &k3s, &k4s);
        // keep the stored vacuum phase on the continuation, so a cell that
        // crosses the floor does not carry a stale phase into the flow
        if self.dynamics == Dynamics::Quantum && self.constants.hbar > 0.0 {
            let mask = floor_mask(&n, self.floor)?;
            if mask.iter().any(|&m| m) {
                bridge_masked(&mut s, &mask, self.grid.boundary() == Boundary::Periodic);
            }
        }
        Ok(WfmField {
            n,
            s,
            normalized: field.normalized,
        })
    }
}

/// Fills each run of masked cells by extending both bounding sides linearly
/// along their last resolved slope, each over its half of the run. Periodic
/// grids wrap; runs that touch a clamped edge are extended from the one
/// resolved side. Returns the faces (face `i` joins cells `i` and `i + 1`)
/// where two extensions meet.
pub(crate) fn bridge_masked(values: &mut [f64], mask: &[bool], periodic: bool) -> Vec<usize> {
    let len = values.len();
    let resolved: Vec<usize> = (0..len).filter(|&i| !mask[i]).collect();
    let (Some(&first), Some(&last)) = (resolved.first(), resolved.last()) else {
        return Vec::new();
    };
    let idx = |j: isize| -> Option<usize> {
        if periodic {
            Some(j.rem_euclid(len as isize) as usize)
        } else if (0..len as isize).contains(&j) {
            Some(j as usize)
        } else {
            None
        }
    };
    // slope per cell leaving cell `i` in direction `dir`
    let slope = |values: &[f64], i: usize, dir: isize| -> f64 {
        match idx(i as isize - dir) {
            Some(k) if !mask[k] => values[i] - values[k],
            _ => 0.0,
        }
    };
    let mut cuts = Vec::new();
    let mut fill = |values: &mut [f64], a: usize, b: usize| {
        // b may exceed len by wrapping
        let (va, vb) = (values[a], values[b % len]);
        let (sa, sb) = (slope(values, a, 1), slope(values, b % len, -1));
        let mid = a + (b - a) / 2;
        for j in a + 1..=mid {
            values[j % len] = va + sa * (j - a) as f64;
        }
        for j in mid + 1..b {
            values[j % len] = vb + sb * (b - j) as f64;
        }
        cuts.push(mid % len);
    };
    for w in resolved.windows(2) {
        if w[1] > w[0] + 1 {
            fill(values, w[0], w[1]);
        }
    }
    if periodic {
        if first + len > last + 1 {
            fill(values, last, first + len);
        }
    } else {
        let (vf, sf) = (values[first], slope(values, first, -1));
        let (vl, sl) = (values[last], slope(values, last, 1));
        for j in 0..first {
            values[j] = vf + sf * (first - j) as f64;
        }
        for j in last + 1..len {
            values[j] = vl + sl * (j - last) as f64;
        }
    }
    cuts
}

/// One RK4 step of the quantum Madelung system with default settings.
pub fn madelung_step(
    field: &WfmField,
    potential: &[f64],
    grid: &Grid1D,
    constants: &PhysicalConstants,
    dt: f64,
) -> Result<WfmField> {
    Madelung::new(grid, constants, potential).step(field, dt, 0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub frames: Vec<WfmField>,
}

impl Trajectory {
    pub fn last(&self) -> &WfmField {
        self.frames
            .last()
            .expect("trajectory has the initial frame")
    }

    /// CSV rows `(t, cell_index, q, n, S)`.
    pub fn write_csv<W: std::io::Write>(&self, grid: &Grid1D, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "cell_index", "q", "n", "S"])?;
        for (t, f) in self.times.iter().zip(&self.frames) {
            for i in 0..f.len() {
                w.write_record(&[
                    format!("{t:.12e}"),
                    i.to_string(),
                    format!("{:.12e}", grid.center(i)),
                    format!("{:.17e}", f.n[i]),
                    format!("{:.17e}", f.s[i]),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Evolves `field` with the configured integrator, recording every
/// `record_every` steps plus the initial and final states.
pub fn evolve(
    field: &WfmField,
    potential: &[f64],
    grid: &Grid1D,
    constants: &PhysicalConstants,
    config: &EvolveConfig,
) -> Result<Trajectory> {
    config.validate()?;
    check_cfl(config.dt, grid, constants, config.c_cfl)?;
    match config.integrator {
        Integrator::SplitStepOracle => {
            split_step::split_step_oracle(field, potential, grid, constants, config)
        }
        Integrator::Rk4Madelung => {
            let mut integrator = Madelung::new(grid, constants, potential);
            integrator.c_cfl = config.c_cfl;
            let steps = config.steps();
            let mut traj = Trajectory {
                times: vec![0.0],
                frames: vec![field.clone()],
            };
            let mut state = field.clone();
            for k in 1..=steps {
                let t = (k - 1) as f64 * config.dt;
                state = integrator.step(&state, config.dt, t)?;
                if k % config.record_every == 0 || k == steps {
                    traj.times.push(k as f64 * config.dt);
                    traj.frames.push(state.clone());
                }
            }
            Ok(traj)
        }
    }
}

/// Ground state of the discretized Hamiltonian `−(ħ²/2m)∇² + V` using the
/// same three-point Laplacian as the quantum potential. `V + V_qu` of the
/// result is constant to rounding on unmasked cells.
pub fn discrete_ground_state(
    grid: &Grid1D,
    potential: &[f64],
    constants: &PhysicalConstants,
) -> Result<WfmField> {
    grid.check_len(potential.len(), "potential")?;
    if constants.hbar <= 0.0 {
        return Err(Error::config("ground state needs hbar > 0"));
    }
    let len = grid.len();
    let off = -constants.qp_prefactor() / grid.spacing().powi(2);
    let shift = potential.iter().copied().fold(f64::INFINITY, f64::min);
    let diag: Vec<f64> = potential.iter().map(|v| v - shift - 2.0 * off).collect();
    let periodic = matches!(grid.boundary(), crate::grid::Boundary::Periodic);
    let mut diag = diag;
    if !periodic {
        // ghost cell repeats the edge value
        diag[0] += off;
        diag[len - 1] += off;
    }
    let solve = |rhs: &[f64]| -> Vec<f64> {
        if periodic {
            cyclic_tridiagonal(&diag, off, rhs)
        } else {
            tridiagonal(&diag, off, rhs)
        }
    };
    let mut psi: Vec<f64> = grid
        .centers()
        .iter()
        .map(|q| (-(q * q) / (grid.length() * grid.length()) * 16.0).exp())
        .collect();
    let mut prev = f64::NAN;
    for _ in 0..2000 {
        let next = solve(&psi);
        let norm = next.iter().map(|v| v * v).sum::<f64>().sqrt();
        let next: Vec<f64> = next.iter().map(|v| v.abs() / norm).collect();
        let change = next
            .iter()
            .zip(&psi)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        psi = next;
        if change < 1e-15 || change == prev {
            break;
        }
        prev = change;
    }
    let n: Vec<f64> = psi.iter().map(|v| v * v).collect();
    crate::grid::normalize(&WfmField::from_density(n)?, grid)
}

/// Symmetric tridiagonal solve with constant off-diagonal (Thomas).
fn tridiagonal(diag: &[f64], off: f64, rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = off / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - off * c[i - 1];
        c[i] = off / m;
        d[i] = (rhs[i] - off * d[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

/// Periodic tridiagonal solve via Sherman–Morrison.
fn cyclic_tridiagonal(diag: &[f64], off: f64, rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let gamma = -diag[0];
    let mut b = diag.to_vec();
    b[0] -= gamma;
    b[n - 1] -= off * off / gamma;
    let x = tridiagonal(&b, off, rhs);
    let mut u = vec![0.0; n];
    u[0] = gamma;
    u[n - 1] = off;
    let z = tridiagonal(&b, off, &u);
    let factor = (x[0] + off * x[n - 1] / gamma) / (1.0 + z[0] + off * z[n - 1] / gamma);
    x.iter().zip(&z).map(|(a, b)| a - factor * b).collect()
}

/// n-weighted L2 norm of `velocity − ∂qS/m`.
pub fn wave_particle_residual(
    field: &WfmField,
    grid: &Grid1D,
    constants: &PhysicalConstants,
    velocity: &[f64],
) -> Result<f64> {
    grid.check_len(field.len(), "field")?;
    grid.check_len(velocity.len(), "velocity")?;
    let u = phase_velocity(&field.s, grid, constants);
    let acc: f64 = (0..field.len())
        .map(|i| field.n[i] * (velocity[i] - u[i]).powi(2))
        .sum();
    Ok((acc * grid.spacing()).sqrt())
}

/// n-weighted L2 norm of `∂q(V + V_qu)` over cells whose whole stencil is
/// unmasked.
pub fn stationarity_residual(
    field: &WfmField,
    potential: &[f64],
    grid: &Grid1D,
    constants: &PhysicalConstants,
) -> Result<f64> {
    grid.check_len(potential.len(), "potential")?;
    let qp = qp_sqrt_density(&field.n, grid, constants, DEFAULT_FLOOR)?;
    let total: Vec<f64> = potential.iter().zip(&qp.v_qu).map(|(a, b)| a + b).collect();
    let grad = stencil::central_gradient(&total, grid);
    let mask = &qp.floor_mask;
    let acc: f64 = (0..field.len())
        .filter(|&i| !mask[i] && !mask[grid.neighbor(i, -1)] && !mask[grid.neighbor(i, 1)])
        .map(|i| field.n[i] * grad[i] * grad[i])
        .sum();
    Ok((acc * grid.spacing()).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{distance, init_profile, Boundary, Metric, ProfileSpec};
    use crate::potential::PotentialSpec;

    const UNIT: PhysicalConstants = PhysicalConstants {
        hbar: 1.0,
        mass: 1.0,
        boltzmann: 1.0,
        light_speed: 1.0,
    };

    fn well(grid: &Grid1D) -> Vec<f64> {
        PotentialSpec::Harmonic { omega: 1.0 }
            .sample(grid, &UNIT)
            .unwrap()
    }

    #[test]
    fn cfl_is_enforced() {
        let g = Grid1D::symmetric(6.4, 256, Boundary::Periodic).unwrap();
        let f = init_profile(&g, &ProfileSpec::HarmonicGround { omega: 1.0 }, &UNIT).unwrap();
        let v = well(&g);
        assert!(matches!(
            madelung_step(&f, &v, &g, &UNIT, 1.0),
            Err(Error::Cfl { .. })
        ));
    }

    #[test]
    fn tridiagonal_solvers_invert() {
        let diag = vec![4.0, 5.0, 6.0, 4.5, 3.5];
        let off = -1.0;
        let rhs = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let x = cyclic_tridiagonal(&diag, off, &rhs);
        for i in 0..5 {
            let l = (i + 4) % 5;
            let r = (i + 1) % 5;
            let ax = diag[i] * x[i] + off * (x[l] + x[r]);
            assert!((ax - rhs[i]).abs() < 1e-12);
        }
        let y = tridiagonal(&diag, off, &rhs);
        for i in 0..5 {
            let mut ax = diag[i] * y[i];
            if i > 0 {
                ax += off * y[i - 1];
            }
            if i < 4 {
                ax += off * y[i + 1];
            }
            assert!((ax - rhs[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn discrete_ground_state_is_balanced() {
        let g = Grid1D::symmetric(6.4, 512, Boundary::Periodic).unwrap();
        let v = well(&g);
        let f = discrete_ground_state(&g, &v, &UNIT).unwrap();
        let r = stationarity_residual(&f, &v, &g, &UNIT).unwrap();
        assert!(r < 1e-9, "residual {r}");
        let analytic =
            init_profile(&g, &ProfileSpec::HarmonicGround { omega: 1.0 }, &UNIT).unwrap();
        assert!(distance(&f, &analytic, &g, Metric::Linf).unwrap() < 1e-3);
    }

    #[test]
    fn ground_state_is_stationary_over_one_step() {
        let g = Grid1D::symmetric(6.4, 512, Boundary::Periodic).unwrap();
        let v = well(&g);
        let f = discrete_ground_state(&g, &v, &UNIT).unwrap();
        let dt = 0.05 * g.spacing().powi(2);
        let next = madelung_step(&f, &v, &g, &UNIT, dt).unwrap();
        assert!(distance(&f, &next, &g, Metric::Linf).unwrap() < 1e-8);
    }

    #[test]
    fn plane_wave_keeps_uniform_density() {
        let g = Grid1D::new(0.0, 2.0 * PI, 64, Boundary::Periodic).unwrap();
        let p0 = 3.0;
        let f = WfmField::new(
            vec![1.0 / (2.0 * PI); 64],
            g.centers().iter().map(|q| p0 * q).collect(),
        )
        .unwrap();
        let v = vec![0.7; 64];
        let dt = 5e-4;
        let next = madelung_step(&f, &v, &g, &UNIT, dt).unwrap();
        for i in 0..64 {
            assert!((next.n[i] - f.n[i]).abs() < 1e-14);
            let expected = f.s[i] - (0.5 * p0 * p0 + 0.7) * dt;
            assert!((next.s[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn mass_is_conserved_and_steps_reverse() {
        // edges below the density floor so the periodic wrap is smooth
        let g = Grid1D::symmetric(8.5, 256, Boundary::Periodic).unwrap();
        let v = well(&g);
        let f = init_profile(
            &g,
            &ProfileSpec::Gaussian {
                sigma: 1.0,
                q0: 0.5,
            },
            &UNIT,
        )
        .unwrap();
        let dt = 0.05 * g.spacing().powi(2);
        let m = Madelung::new(&g, &UNIT, &v);
        let mut state = f.clone();
        for k in 0..200 {
            state = m.step(&state, dt, k as f64 * dt).unwrap();
        }
        assert!((state.mass(&g) - 1.0).abs() < 1e-12);
        let fwd = m.step(&f, dt, 0.0).unwrap();
        let back = m.step(&fwd, -dt, dt).unwrap();
        assert!(distance(&f, &back, &g, Metric::Linf).unwrap() < 1e-9);
        let ds =
            f.s.iter()
                .zip(&back.s)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
        assert!(ds < 1e-9, "ds {ds}");
    }

    #[test]
    fn residuals() {
        let g = Grid1D::symmetric(6.4, 256, Boundary::Periodic).unwrap();
        let v = well(&g);
        let displaced = init_profile(
            &g,
            &ProfileSpec::Gaussian {
                sigma: 0.5f64.sqrt(),
                q0: 1.0,
            },
            &UNIT,
        )
        .unwrap();
        assert!(stationarity_residual(&displaced, &v, &g, &UNIT).unwrap() > 0.1);
        let uniform = WfmField::from_density(vec![1.0 / g.length(); 256]).unwrap();
        assert!(stationarity_residual(&uniform, &vec![0.0; 256], &g, &UNIT).unwrap() < 1e-14);

        let with_phase = WfmField::new(
            displaced.n.clone(),
            g.centers().iter().map(|q| 0.3 * q * q).collect(),
        )
        .unwrap();
        let u = phase_velocity(&with_phase.s, &g, &UNIT);
        assert_eq!(
            wave_particle_residual(&with_phase, &g, &UNIT, &u).unwrap(),
            0.0
        );
        let off: Vec<f64> = u.iter().map(|x| x + 1.0).collect();
        let r = wave_particle_residual(&with_phase, &g, &UNIT, &off).unwrap();
        assert!((r - 1.0).abs() < 1e-9);
    }

    #[test]
    fn classical_dynamics_spreads_the_ground_state() {
        let g = Grid1D::symmetric(6.4, 256, Boundary::Periodic).unwrap();
        let v = well(&g);
        let f = discrete_ground_state(&g, &v, &UNIT).unwrap();
        let dt = 0.05 * g.spacing().powi(2);
        let q = Madelung::new(&g, &UNIT, &v);
        let c = Madelung::new(&g, &UNIT, &v).classical();
        let (mut a, mut b) = (f.clone(), f.clone());
        for k in 0..2000 {
            a = q.step(&a, dt, k as f64 * dt).unwrap();
            b = c.step(&b, dt, k as f64 * dt).unwrap();
        }
        let da = distance(&f, &a, &g, Metric::Linf).unwrap();
        let db = distance(&f, &b, &g, Metric::Linf).unwrap();
        assert!(da < 1e-9, "quantum drift {da}");
        assert!(db > 1e-3, "classical drift {db}");
    }
}
