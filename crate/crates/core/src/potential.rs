//! External (Hamiltonian) potentials.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid1D, PhysicalConstants};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PotentialSpec {
    #[default]
    None,
    /// `V = m ω² q² / 2`.
    Harmonic { omega: f64 },
    /// Tabulated `(q, V)`, interpolated linearly and held constant outside.
    Table { q: Vec<f64>, v: Vec<f64> },
}

impl PotentialSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            PotentialSpec::None => Ok(()),
            PotentialSpec::Harmonic { omega } if *omega > 0.0 && omega.is_finite() => Ok(()),
            PotentialSpec::Harmonic { omega } => Err(Error::config(format!(
                "potential omega must be > 0, got {omega}"
            ))),
            PotentialSpec::Table { q, v } => {
                if q.len() != v.len() || q.len() < 2 {
                    return Err(Error::config(
                        "potential table needs matching columns of length >= 2",
                    ));
                }
                if q.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::config("potential table positions must increase"));
                }
                Ok(())
            }
        }
    }

    /// Potential sampled at the cell centers.
    pub fn sample(&self, grid: &Grid1D, constants: &PhysicalConstants) -> Result<Vec<f64>> {
        self.validate()?;
        Ok(grid
            .centers()
            .into_iter()
            .map(|q| match self {
                PotentialSpec::None => 0.0,
                PotentialSpec::Harmonic { omega } => 0.5 * constants.mass * omega * omega * q * q,
                PotentialSpec::Table { q: qs, v } => {
                    let x = q.clamp(qs[0], qs[qs.len() - 1]);
                    let k = qs.partition_point(|&p| p <= x).clamp(1, qs.len() - 1);
                    let w = (x - qs[k - 1]) / (qs[k] - qs[k - 1]);
                    v[k - 1] * (1.0 - w) + v[k] * w
                }
            })
            .collect())
    }
}

/// Parses a two-column `(q, V)` table with one header line, in the same
/// layout as profile tables.
pub fn parse_potential_table(text: &str) -> Result<PotentialSpec> {
    let (q, v) = crate::grid::parse_two_columns(text, "potential table")?;
    let spec = PotentialSpec::Table { q, v };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Boundary;

    #[test]
    fn table_text() {
        let spec = parse_potential_table("q,V\n-1,0\n1,2\n").unwrap();
        assert_eq!(
            spec,
            PotentialSpec::Table {
                q: vec![-1.0, 1.0],
                v: vec![0.0, 2.0]
            }
        );
        assert!(parse_potential_table("q,V\n1,0\n").is_err());
    }

    #[test]
    fn harmonic_and_table() {
        let g = Grid1D::new(-1.0, 1.0, 8, Boundary::Periodic).unwrap();
        let c = PhysicalConstants::default();
        let v = PotentialSpec::Harmonic { omega: 2.0 }
            .sample(&g, &c)
            .unwrap();
        assert!((v[0] - 2.0 * 0.875 * 0.875).abs() < 1e-15);
        let t = PotentialSpec::Table {
            q: vec![-1.0, 1.0],
            v: vec![0.0, 2.0],
        }
        .sample(&g, &c)
        .unwrap();
        assert!((t[4] - 1.125).abs() < 1e-15);
        assert!(PotentialSpec::Harmonic { omega: -1.0 }
            .sample(&g, &c)
            .is_err());
        assert!(PotentialSpec::None
            .sample(&g, &c)
            .unwrap()
            .iter()
            .all(|x| *x == 0.0));
    }
}
