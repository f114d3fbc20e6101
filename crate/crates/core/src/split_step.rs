//! Strang split-step Fourier solver for `iħ ∂tψ = [−(ħ²/2m)∂q² + V]ψ`,
//! used as an independent oracle for the hydrodynamic integrator.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::deterministic::{check_cfl, EvolveConfig, Trajectory};
use crate::error::{Error, Result};
use crate::grid::{Boundary, Grid1D, PhysicalConstants, WfmField};

/// Precomputed half-potential and kinetic phase factors for a fixed `dt`.
pub struct SplitStep {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    half_potential: Vec<Complex64>,
    kinetic: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl SplitStep {
    pub fn new(
        grid: &Grid1D,
        potential: &[f64],
        constants: &PhysicalConstants,
        dt: f64,
    ) -> Result<Self> {
        if grid.boundary() != Boundary::Periodic {
            return Err(Error::config("split-step oracle needs a periodic grid"));
        }
        if constants.hbar <= 0.0 {
            return Err(Error::config("split-step oracle needs hbar > 0"));
        }
        grid.check_len(potential.len(), "potential")?;
        let len = grid.len();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(len);
        let inverse = planner.plan_fft_inverse(len);
        let hbar = constants.hbar;
        let half_potential = potential
            .iter()
            .map(|v| Complex64::from_polar(1.0, -v * dt / (2.0 * hbar)))
            .collect();
        let dk = 2.0 * PI / grid.length();
        let kinetic = (0..len)
            .map(|j| {
                let k = if j <= len / 2 {
                    j as f64
                } else {
                    j as f64 - len as f64
                } * dk;
                Complex64::from_polar(1.0, -hbar * k * k * dt / (2.0 * constants.mass))
            })
            .collect();
        let scratch = vec![Complex64::new(0.0, 0.0); forward.get_inplace_scratch_len()];
        Ok(Self {
            forward,
            inverse,
            half_potential,
            kinetic,
            scratch,
        })
    }

    pub fn step(&mut self, psi: &mut [Complex64]) {
        let scale = 1.0 / psi.len() as f64;
        for (p, h) in psi.iter_mut().zip(&self.half_potential) {
            *p *= h;
        }
        self.forward.process_with_scratch(psi, &mut self.scratch);
        for (p, k) in psi.iter_mut().zip(&self.kinetic) {
            *p *= k * scale;
        }
        self.inverse.process_with_scratch(psi, &mut self.scratch);
        for (p, h) in psi.iter_mut().zip(&self.half_potential) {
            *p *= h;
        }
    }
}

/// `ψ = √n · exp(iS/ħ)`.
pub fn to_wavefunction(field: &WfmField, hbar: f64) -> Vec<Complex64> {
    field
        .n
        .iter()
        .zip(&field.s)
        .map(|(n, s)| Complex64::from_polar(n.sqrt(), s / hbar))
        .collect()
}

/// `n = |ψ|²` and `S = ħ · arg ψ`, unwrapped from the left edge by picking
/// the branch nearest the previous cell.
pub fn from_wavefunction(psi: &[Complex64], hbar: f64) -> WfmField {
    let n = psi.iter().map(|p| p.norm_sqr()).collect();
    let mut s = Vec::with_capacity(psi.len());
    let mut prev = 0.0;
    for (i, p) in psi.iter().enumerate() {
        let raw = p.arg();
        let phase = if i == 0 {
            raw
        } else {
            raw + 2.0 * PI * ((prev - raw) / (2.0 * PI)).round()
        };
        s.push(hbar * phase);
        prev = phase;
    }
    WfmField {
        n,
        s,
        normalized: false,
    }
}

/// Evolves the state as a Schrödinger wavefunction.
pub fn split_step_oracle(
    field: &WfmField,
    potential: &[f64],
    grid: &Grid1D,
    constants: &PhysicalConstants,
    config: &EvolveConfig,
) -> Result<Trajectory> {
    config.validate()?;
    check_cfl(config.dt, grid, constants, config.c_cfl)?;
    grid.check_len(field.len(), "field")?;
    let mut solver = SplitStep::new(grid, potential, constants, config.dt)?;
    let mut psi = to_wavefunction(field, constants.hbar);
    let steps = config.steps();
    let mut traj = Trajectory {
        times: vec![0.0],
        frames: vec![field.clone()],
    };
    for k in 1..=steps {
        solver.step(&mut psi);
        if k % config.record_every == 0 || k == steps {
            let mut f = from_wavefunction(&psi, constants.hbar);
            f.normalized = field.normalized;
            traj.times.push(k as f64 * config.dt);
            traj.frames.push(f);
        }
    }
    Ok(traj)
}
