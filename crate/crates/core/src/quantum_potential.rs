//! Quantum pseudo-potential `V_qu = −(ħ²/2m) n^{-1/2} ∇²n^{1/2}` and the
//! quantum force `−∇V_qu`.
//!
//! Two discretizations are provided. [`qp_sqrt_form`] applies the three-point
//! Laplacian to `√n` and is the one the solvers use. [`qp_grad_form`] works on
//! `n` directly with forward differences, matching the stencils used by the
//! fluctuation estimators in [`crate::diagnostics`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid1D, PhysicalConstants, WfmField};
use crate::stencil;

/// Default relative density floor below which `V_qu` is not evaluated.
pub const DEFAULT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpField {
    pub v_qu: Vec<f64>,
    pub force: Vec<f64>,
    /// Cells whose density fell below `floor · max(n)`.
    pub floor_mask: Vec<bool>,
}

impl QpField {
    pub fn masked_fraction(&self) -> f64 {
        self.floor_mask.iter().filter(|m| **m).count() as f64 / self.floor_mask.len() as f64
    }
}

pub(crate) fn floor_mask(n: &[f64], floor: f64) -> Result<Vec<bool>> {
    let max = n.iter().copied().fold(0.0, f64::max);
    let threshold = floor * max;
    let mask: Vec<bool> = n.iter().map(|&v| !(v > threshold) || v <= 0.0).collect();
    if mask.iter().all(|m| *m) {
        return Err(Error::AllMasked);
    }
    Ok(mask)
}

/// Replaces masked entries with the value of the nearest unmasked cell
/// (ties go left). At least one cell must be unmasked.
pub(crate) fn clamp_masked(values: &mut [f64], mask: &[bool]) {
    let len = values.len();
    let mut left = vec![None; len];
    let mut last = None;
    for i in 0..len {
        if !mask[i] {
            last = Some(i);
        }
        left[i] = last;
    }
    let mut next = None;
    for i in (0..len).rev() {
        if !mask[i] {
            next = Some(i);
            continue;
        }
        let src = match (left[i], next) {
            (Some(l), Some(r)) => {
                if i - l <= r - i {
                    l
                } else {
                    r
                }
            }
            (Some(l), None) => l,
            (None, Some(r)) => r,
            (None, None) => unreachable!("at least one cell is unmasked"),
        };
        values[i] = values[src];
    }
}

fn finish(mut v_qu: Vec<f64>, mask: Vec<bool>, grid: &Grid1D) -> QpField {
    clamp_masked(&mut v_qu, &mask);
    let force = force_from(&v_qu, &mask, grid);
    QpField {
        v_qu,
        force,
        floor_mask: mask,
    }
}

fn force_from(v_qu: &[f64], mask: &[bool], grid: &Grid1D) -> Vec<f64> {
    stencil::central_gradient(v_qu, grid)
        .into_iter()
        .zip(mask)
        .map(|(g, &m)| if m { 0.0 } else { -g })
        .collect()
}

/// `V_qu` via the three-point Laplacian of `√n`.
pub fn qp_sqrt_form(
    field: &WfmField,
    grid: &Grid1D,
    constants: &PhysicalConstants,
    floor: f64,
) -> Result<QpField> {
    grid.check_len(field.len(), "field")?;
    qp_sqrt_density(&field.n, grid, constants, floor)
}

/// [`qp_sqrt_form`] on a raw density slice. Non-positive cells are masked,
/// so intermediate solver states with slightly negative tails are accepted.
pub fn qp_sqrt_density(
    n: &[f64],
    grid: &Grid1D,
    constants: &PhysicalConstants,
    floor: f64,
) -> Result<QpField> {
    grid.check_len(n.len(), "density")?;
    let mask = floor_mask(n, floor)?;
    let amp: Vec<f64> = n.iter().map(|v| v.max(0.0).sqrt()).collect();
    let lap = stencil::laplacian(&amp, grid);
    let pre = constants.qp_prefactor();
    let v_qu = amp
        .iter()
        .zip(&lap)
        .zip(&mask)
        .map(|((a, l), &m)| if m { 0.0 } else { -pre * l / a })
        .collect();
    Ok(finish(v_qu, mask, grid))
}

/// `V_qu = −(ħ²/2m)[∇²n/(2n) − (∇n)²/(4n²)]` with the forward stencils
/// `(n[i+1]−n[i])/λ` and `(n[i+2]−2n[i+1]+n[i])/λ²`. First-order accurate.
pub fn qp_grad_form(
    field: &WfmField,
    grid: &Grid1D,
    constants: &PhysicalConstants,
    floor: f64,
) -> Result<QpField> {
    grid.check_len(field.len(), "field")?;
    let mask = floor_mask(&field.n, floor)?;
    let grad = stencil::forward_difference(&field.n, grid);
    let lap = stencil::forward_second_difference(&field.n, grid);
    let pre = constants.qp_prefactor();
    let v_qu = (0..field.len())
        .map(|i| {
            if mask[i] {
                return 0.0;
            }
            let n = field.n[i];
            -pre * (lap[i] / (2.0 * n) - grad[i] * grad[i] / (4.0 * n * n))
        })
        .collect();
    Ok(finish(v_qu, mask, grid))
}

/// Central-difference `−∇V_qu`; masked cells carry zero force.
pub fn quantum_force(qp: &QpField, grid: &Grid1D) -> Result<Vec<f64>> {
    grid.check_len(qp.v_qu.len(), "quantum potential")?;
    Ok(force_from(&qp.v_qu, &qp.floor_mask, grid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{init_profile, Boundary, ProfileSpec};
    use crate::potential::PotentialSpec;
    use proptest::prelude::*;

    fn unit() -> PhysicalConstants {
        PhysicalConstants::default()
    }

    fn gaussian(grid: &Grid1D) -> WfmField {
        init_profile(
            grid,
            &ProfileSpec::Gaussian {
                sigma: 1.0,
                q0: 0.0,
            },
            &unit(),
        )
        .unwrap()
    }

    /// Max |v_qu − (1/4 − q²/8)| on |q| ≤ 4.
    fn gaussian_error(cells: usize) -> f64 {
        let g = Grid1D::symmetric(10.0, cells, Boundary::Periodic).unwrap();
        let qp = qp_sqrt_form(&gaussian(&g), &g, &unit(), DEFAULT_FLOOR).unwrap();
        g.centers()
            .iter()
            .zip(&qp.v_qu)
            .filter(|(q, _)| q.abs() <= 4.0)
            .map(|(q, v)| (v - (0.25 - q * q / 8.0)).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn uniform_density_has_no_quantum_potential() {
        let g = Grid1D::new(0.0, 1.0, 32, Boundary::Periodic).unwrap();
        let f = WfmField::from_density(vec![1.0; 32]).unwrap();
        for qp in [
            qp_sqrt_form(&f, &g, &unit(), DEFAULT_FLOOR).unwrap(),
            qp_grad_form(&f, &g, &unit(), DEFAULT_FLOOR).unwrap(),
        ] {
            assert!(qp.v_qu.iter().all(|v| v.abs() < 1e-12));
            assert!(quantum_force(&qp, &g)
                .unwrap()
                .iter()
                .all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn gaussian_matches_analytic_at_second_order() {
        let (e1, e2) = (gaussian_error(400), gaussian_error(800));
        assert!(e1 < 1e-3);
        let ratio = e1 / e2;
        assert!((ratio - 4.0).abs() < 0.8, "ratio {ratio}");
    }

    #[test]
    fn gaussian_force_is_linear() {
        let g = Grid1D::symmetric(10.0, 800, Boundary::Periodic).unwrap();
        let qp = qp_sqrt_form(&gaussian(&g), &g, &unit(), DEFAULT_FLOOR).unwrap();
        for (q, f) in g.centers().iter().zip(&qp.force) {
            if q.abs() <= 4.0 {
                assert!((f - q / 4.0).abs() < 1e-3, "q={q} f={f}");
            }
        }
    }

    #[test]
    fn harmonic_ground_balances_external_potential() {
        let c = unit();
        let g = Grid1D::symmetric(8.0, 800, Boundary::Periodic).unwrap();
        let f = init_profile(&g, &ProfileSpec::HarmonicGround { omega: 1.0 }, &c).unwrap();
        let v = PotentialSpec::Harmonic { omega: 1.0 }
            .sample(&g, &c)
            .unwrap();
        let qp = qp_sqrt_form(&f, &g, &c, DEFAULT_FLOOR).unwrap();
        let dv = crate::stencil::central_gradient(&v, &g);
        for i in 0..g.len() {
            if g.center(i).abs() <= 3.0 {
                assert!((v[i] + qp.v_qu[i] - 0.5).abs() < 1e-3);
                assert!((qp.force[i] - dv[i]).abs() < 2e-3);
            }
        }
    }

    #[test]
    fn grad_form_agrees_at_first_order() {
        let diff = |cells: usize| {
            let g = Grid1D::symmetric(10.0, cells, Boundary::Periodic).unwrap();
            let f = gaussian(&g);
            let a = qp_sqrt_form(&f, &g, &unit(), DEFAULT_FLOOR).unwrap();
            let b = qp_grad_form(&f, &g, &unit(), DEFAULT_FLOOR).unwrap();
            g.centers()
                .iter()
                .zip(a.v_qu.iter().zip(&b.v_qu))
                .filter(|(q, _)| q.abs() <= 3.0)
                .map(|(_, (x, y))| (x - y).abs())
                .fold(0.0, f64::max)
        };
        let (d1, d2) = (diff(400), diff(800));
        assert!(d1 < 0.1, "d1 {d1}");
        let ratio = d1 / d2;
        assert!((ratio - 2.0).abs() < 0.3, "ratio {ratio}");
    }

    #[test]
    fn spike_is_masked_and_finite() {
        let g = Grid1D::new(0.0, 1.0, 32, Boundary::Periodic).unwrap();
        let mut n = vec![0.0; 32];
        n[10] = 1.0;
        let f = WfmField::from_density(n).unwrap();
        for qp in [
            qp_sqrt_form(&f, &g, &unit(), DEFAULT_FLOOR).unwrap(),
            qp_grad_form(&f, &g, &unit(), DEFAULT_FLOOR).unwrap(),
        ] {
            assert!(qp.v_qu.iter().chain(&qp.force).all(|v| v.is_finite()));
            assert_eq!(qp.floor_mask.iter().filter(|m| !**m).count(), 1);
            // clamped to the single valid value
            assert!(qp.v_qu.iter().all(|v| *v == qp.v_qu[10]));
        }
    }

    #[test]
    fn all_zero_density_is_rejected() {
        let g = Grid1D::new(0.0, 1.0, 16, Boundary::Periodic).unwrap();
        let f = WfmField::from_density(vec![0.0; 16]).unwrap();
        assert!(matches!(
            qp_sqrt_form(&f, &g, &unit(), DEFAULT_FLOOR),
            Err(Error::AllMasked)
        ));
    }

    #[test]
    fn clamp_picks_nearest() {
        let mut v = vec![0.0, 1.0, 0.0, 0.0, 0.0, 2.0, 0.0];
        let m = vec![true, false, true, true, true, false, true];
        clamp_masked(&mut v, &m);
        assert_eq!(v, vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    proptest! {
        #[test]
        fn gauge_invariance(c in 1e-4f64..1e4, sigma in 0.5f64..2.0) {
            let g = Grid1D::symmetric(10.0, 256, Boundary::Periodic).unwrap();
            let f = init_profile(&g, &ProfileSpec::Gaussian { sigma, q0: 0.3 }, &unit()).unwrap();
            let scaled = WfmField::from_density(f.n.iter().map(|v| v * c).collect()).unwrap();
            let a = qp_sqrt_form(&f, &g, &unit(), DEFAULT_FLOOR).unwrap();
            let b = qp_sqrt_form(&scaled, &g, &unit(), DEFAULT_FLOOR).unwrap();
            prop_assert_eq!(&a.floor_mask, &b.floor_mask);
            for (x, y) in a.v_qu.iter().zip(&b.v_qu) {
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
            }
        }

        #[test]
        fn symmetric_density_gives_symmetric_potential(sigma in 0.5f64..2.0) {
            let g = Grid1D::symmetric(10.0, 200, Boundary::Periodic).unwrap();
            let f = init_profile(&g, &ProfileSpec::Gaussian { sigma, q0: 0.0 }, &unit()).unwrap();
            let qp = qp_sqrt_form(&f, &g, &unit(), DEFAULT_FLOOR).unwrap();
            for i in 0..100 {
                let j = 199 - i;
                prop_assert!((qp.v_qu[i] - qp.v_qu[j]).abs() <= 1e-9 * qp.v_qu[i].abs().max(1.0));
                prop_assert!((qp.force[i] + qp.force[j]).abs() <= 1e-9 * qp.force[i].abs().max(1.0));
            }
        }
    }
}
