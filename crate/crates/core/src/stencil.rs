//! Finite-difference stencils on a [`Grid1D`] honoring its boundary policy.

use crate::grid::Grid1D;

/// Second-order central first derivative.
pub fn central_gradient(f: &[f64], grid: &Grid1D) -> Vec<f64> {
    let inv = 0.5 / grid.spacing();
    (0..f.len())
        .map(|i| (f[grid.neighbor(i, 1)] - f[grid.neighbor(i, -1)]) * inv)
        .collect()
}

/// Three-point Laplacian.
pub fn laplacian(f: &[f64], grid: &Grid1D) -> Vec<f64> {
    let inv = 1.0 / (grid.spacing() * grid.spacing());
    (0..f.len())
        .map(|i| (f[grid.neighbor(i, 1)] - 2.0 * f[i] + f[grid.neighbor(i, -1)]) * inv)
        .collect()
}

/// `(f[i+1] − f[i]) / λ`.
pub fn forward_difference(f: &[f64], grid: &Grid1D) -> Vec<f64> {
    let inv = 1.0 / grid.spacing();
    (0..f.len())
        .map(|i| (f[grid.neighbor(i, 1)] - f[i]) * inv)
        .collect()
}

/// `(f[i+2] − 2 f[i+1] + f[i]) / λ²`.
pub fn forward_second_difference(f: &[f64], grid: &Grid1D) -> Vec<f64> {
    let inv = 1.0 / (grid.spacing() * grid.spacing());
    (0..f.len())
        .map(|i| (f[grid.neighbor(i, 2)] - 2.0 * f[grid.neighbor(i, 1)] + f[i]) * inv)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Boundary;
    use std::f64::consts::PI;

    #[test]
    fn periodic_sine_derivatives_converge_at_second_order() {
        let err = |n: usize| {
            let g = Grid1D::new(0.0, 2.0 * PI, n, Boundary::Periodic).unwrap();
            let f: Vec<f64> = g.centers().iter().map(|x| x.sin()).collect();
            let d = central_gradient(&f, &g);
            let l = laplacian(&f, &g);
            let e1 = g
                .centers()
                .iter()
                .zip(&d)
                .map(|(x, v)| (v - x.cos()).abs())
                .fold(0.0, f64::max);
            let e2 = g
                .centers()
                .iter()
                .zip(&l)
                .map(|(x, v)| (v + x.sin()).abs())
                .fold(0.0, f64::max);
            (e1, e2)
        };
        let (a1, a2) = err(64);
        let (b1, b2) = err(128);
        assert!((a1 / b1 - 4.0).abs() < 0.1);
        assert!((a2 / b2 - 4.0).abs() < 0.1);
    }

    #[test]
    fn forward_stencils_are_first_order_offset() {
        let g = Grid1D::new(0.0, 1.0, 10, Boundary::Periodic).unwrap();
        let f: Vec<f64> = (0..10).map(|i| (i * i) as f64).collect();
        let d = forward_difference(&f, &g);
        assert_eq!(d[2], (9.0 - 4.0) * 10.0);
        let s = forward_second_difference(&f, &g);
        assert!((s[3] - 2.0 * 100.0).abs() < 1e-9);
        // wrap-around at the last cell
        assert_eq!(d[9], (0.0 - 81.0) * 10.0);
    }

    #[test]
    fn clamped_edges_use_edge_values() {
        let g = Grid1D::new(0.0, 1.0, 8, Boundary::Clamped).unwrap();
        let f = vec![3.0; 8];
        assert!(laplacian(&f, &g).iter().all(|v| *v == 0.0));
        assert!(central_gradient(&f, &g).iter().all(|v| *v == 0.0));
    }
}
