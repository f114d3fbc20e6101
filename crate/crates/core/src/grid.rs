//! Spatial discretization, physical constants and the density/action state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_CELLS: usize = 8;

/// Physical constants. The internal default system is ħ = m = k = 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalConstants {
    pub hbar: f64,
    pub mass: f64,
    pub boltzmann: f64,
    pub light_speed: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self {
            hbar: 1.0,
            mass: 1.0,
            boltzmann: 1.0,
            light_speed: 1.0,
        }
    }
}

impl PhysicalConstants {
    /// Proton in CGS units.
    pub const PROTON_CGS: Self = Self {
        hbar: 1.054_571_817e-27,
        mass: 1.672_621_923_69e-24,
        boltzmann: 1.380_649e-16,
        light_speed: 2.997_924_58e10,
    };

    pub fn new(hbar: f64, mass: f64, boltzmann: f64, light_speed: f64) -> Result<Self> {
        let c = Self {
            hbar,
            mass,
            boltzmann,
            light_speed,
        };
        c.validate()?;
        Ok(c)
    }

    /// ħ may be exactly zero (classical-limit experiments); everything else
    /// must be strictly positive.
    pub fn validate(&self) -> Result<()> {
        if !(self.hbar >= 0.0 && self.hbar.is_finite()) {
            return Err(Error::config(format!(
                "hbar must be >= 0, got {}",
                self.hbar
            )));
        }
        for (name, v) in [
            ("mass", self.mass),
            ("boltzmann", self.boltzmann),
            ("light_speed", self.light_speed),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn compton_length(&self) -> f64 {
        self.hbar / (self.mass * self.light_speed)
    }

    /// ħ²/2m, the prefactor of the quantum potential.
    pub fn qp_prefactor(&self) -> f64 {
        self.hbar * self.hbar / (2.0 * self.mass)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    #[default]
    Periodic,
    /// Ghost cells repeat the edge value (zero normal derivative).
    Clamped,
}

/// Uniform one-dimensional grid of cell-centered values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    x_min: f64,
    x_max: f64,
    n_cells: usize,
    boundary: Boundary,
}

pub fn make_grid(x_min: f64, x_max: f64, n_cells: usize, boundary: Boundary) -> Result<Grid1D> {
    Grid1D::new(x_min, x_max, n_cells, boundary)
}

impl Grid1D {
    pub fn new(x_min: f64, x_max: f64, n_cells: usize, boundary: Boundary) -> Result<Self> {
        if !(x_min.is_finite() && x_max.is_finite()) || x_max <= x_min {
            return Err(Error::config(format!(
                "degenerate domain [{x_min}, {x_max}]"
            )));
        }
        if n_cells < MIN_CELLS {
            return Err(Error::config(format!(
                "need at least {MIN_CELLS} cells, got {n_cells}"
            )));
        }
        Ok(Self {
            x_min,
            x_max,
            n_cells,
            boundary,
        })
    }

    /// Grid centered on zero with the given half width.
    pub fn symmetric(half_width: f64, n_cells: usize, boundary: Boundary) -> Result<Self> {
        Self::new(-half_width, half_width, n_cells, boundary)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn len(&self) -> usize {
        self.n_cells
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn length(&self) -> f64 {
        self.x_max - self.x_min
    }

    /// Cell spacing λ.
    pub fn spacing(&self) -> f64 {
        (self.x_max - self.x_min) / self.n_cells as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.x_min + (i as f64 + 0.5) * self.spacing()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_cells).map(|i| self.center(i)).collect()
    }

    /// Index of `i + offset` under the boundary policy. Periodic wrap is a
    /// bijection on `0..len`; clamped saturates at the edges.
    pub fn neighbor(&self, i: usize, offset: isize) -> usize {
        let n = self.n_cells as isize;
        let j = i as isize + offset;
        match self.boundary {
            Boundary::Periodic => j.rem_euclid(n) as usize,
            Boundary::Clamped => j.clamp(0, n - 1) as usize,
        }
    }

    /// Index of the cell whose center is closest to `q`.
    pub fn nearest_index(&self, q: f64) -> usize {
        let k = ((q - self.x_min) / self.spacing() - 0.5).round();
        k.clamp(0.0, (self.n_cells - 1) as f64) as usize
    }

    /// Integral of cell values over the domain. On a periodic grid this is
    /// the trapezoid rule; on a clamped grid it is the matching cell-centered
    /// rule over [x_min, x_max].
    pub fn integrate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.n_cells);
        values.iter().sum::<f64>() * self.spacing()
    }

    /// Same grid refined by an integer factor.
    pub fn refined(&self, factor: usize) -> Result<Self> {
        Self::new(self.x_min, self.x_max, self.n_cells * factor, self.boundary)
    }

    pub fn check_len(&self, len: usize, what: &str) -> Result<()> {
        if len != self.n_cells {
            return Err(Error::GridMismatch(format!(
                "{what} has {len} values, grid has {} cells",
                self.n_cells
            )));
        }
        Ok(())
    }
}

/// Density `n = |ψ|²` and action `S` on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WfmField {
    pub n: Vec<f64>,
    pub s: Vec<f64>,
    pub normalized: bool,
}

impl WfmField {
    /// Field with zero action; fails on negative or non-finite density.
    pub fn from_density(n: Vec<f64>) -> Result<Self> {
        let len = n.len();
        Self::new(n, vec![0.0; len])
    }

    pub fn new(n: Vec<f64>, s: Vec<f64>) -> Result<Self> {
        if n.len() != s.len() {
            return Err(Error::GridMismatch(format!(
                "density has {} cells, action has {}",
                n.len(),
                s.len()
            )));
        }
        if let Some(v) = n.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(Error::config(format!(
                "density must be finite and >= 0, found {v}"
            )));
        }
        Ok(Self {
            n,
            s,
            normalized: false,
        })
    }

    pub fn len(&self) -> usize {
        self.n.len()
    }

    pub fn is_empty(&self) -> bool {
        self.n.is_empty()
    }

    pub fn mass(&self, grid: &Grid1D) -> f64 {
        grid.integrate(&self.n)
    }

    pub fn max_density(&self) -> f64 {
        self.n.iter().copied().fold(0.0, f64::max)
    }

    /// Density-weighted mean position.
    pub fn mean_position(&self, grid: &Grid1D) -> f64 {
        let m: f64 = self.n.iter().sum();
        let qm: f64 = self
            .n
            .iter()
            .enumerate()
            .map(|(i, v)| v * grid.center(i))
            .sum();
        qm / m
    }
}

/// Shape of an initial density profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProfileSpec {
    /// `n ∝ exp(−(q−q0)²/(2σ²))`.
    Gaussian { sigma: f64, q0: f64 },
    /// `n^{1/2} ∝ exp(−|q/scale|^h)`.
    StretchedExp { h: f64, scale: f64 },
    /// `n^{1/2} ∝ exp(−[(1 + (q/scale)²)^{h/2} − 1])`: the same tail as
    /// `StretchedExp` with a smooth core. `h = 2` is exactly gaussian.
    SmoothTail { h: f64, scale: f64 },
    /// `n ∝ exp(−mωq²/ħ)`.
    HarmonicGround { omega: f64 },
    /// Tabulated `(q, n)` pairs, interpolated linearly, zero outside.
    Table { q: Vec<f64>, n: Vec<f64> },
}

impl ProfileSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!(
                    "profile {name} must be > 0, got {v}"
                )))
            }
        };
        match self {
            ProfileSpec::Gaussian { sigma, q0 } => {
                positive("sigma", *sigma)?;
                if !q0.is_finite() {
                    return Err(Error::config("profile q0 must be finite"));
                }
                Ok(())
            }
            ProfileSpec::StretchedExp { h, scale } | ProfileSpec::SmoothTail { h, scale } => {
                positive("h", *h)?;
                positive("scale", *scale)
            }
            ProfileSpec::HarmonicGround { omega } => positive("omega", *omega),
            ProfileSpec::Table { q, n } => {
                if q.len() != n.len() {
                    return Err(Error::config(format!(
                        "profile table has {} positions but {} densities",
                        q.len(),
                        n.len()
                    )));
                }
                if q.len() < 2 {
                    return Err(Error::config("profile table needs at least two rows"));
                }
                if let Some(v) = n.iter().find(|v| !(**v >= 0.0)) {
                    return Err(Error::config(format!("negative table density {v}")));
                }
                if q.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::config("table positions must be strictly increasing"));
                }
                Ok(())
            }
        }
    }

    /// Unnormalized density at `q`.
    fn density_at(&self, q: f64, constants: &PhysicalConstants) -> f64 {
        match self {
            ProfileSpec::Gaussian { sigma, q0 } => {
                let z = (q - q0) / sigma;
                (-0.5 * z * z).exp()
            }
            ProfileSpec::StretchedExp { h, scale } => (-2.0 * (q / scale).abs().powf(*h)).exp(),
            ProfileSpec::SmoothTail { h, scale } => {
                let x = q / scale;
                (-2.0 * ((1.0 + x * x).powf(0.5 * h) - 1.0)).exp()
            }
            ProfileSpec::HarmonicGround { omega } => {
                (-constants.mass * omega * q * q / constants.hbar).exp()
            }
            ProfileSpec::Table { q: qs, n } => interpolate(qs, n, q),
        }
    }
}

fn interpolate(qs: &[f64], vals: &[f64], q: f64) -> f64 {
    if q < qs[0] || q > qs[qs.len() - 1] {
        return 0.0;
    }
    let k = qs.partition_point(|&x| x <= q).clamp(1, qs.len() - 1);
    let (x0, x1) = (qs[k - 1], qs[k]);
    let w = (q - x0) / (x1 - x0);
    vals[k - 1] * (1.0 - w) + vals[k] * w
}

/// Parses a two-column `(q, n)` table with one header line. Columns may be
/// separated by commas or whitespace.
pub fn parse_profile_table(text: &str) -> Result<ProfileSpec> {
    let (q, n) = parse_two_columns(text, "profile table")?;
    let spec = ProfileSpec::Table { q, n };
    spec.validate()?;
    Ok(spec)
}

pub(crate) fn parse_two_columns(text: &str, what: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .collect();
        if cols.len() != 2 {
            return Err(Error::config(format!(
                "{what} line {}: expected 2 columns, got {}",
                lineno + 1,
                cols.len()
            )));
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::config(format!("{what} line {}: {e}", lineno + 1)))
        };
        a.push(parse(cols[0])?);
        b.push(parse(cols[1])?);
    }
    Ok((a, b))
}

/// Builds a unit-mass field from a profile. The action is zero.
pub fn init_profile(
    grid: &Grid1D,
    spec: &ProfileSpec,
    constants: &PhysicalConstants,
) -> Result<WfmField> {
    spec.validate()?;
    if matches!(spec, ProfileSpec::HarmonicGround { .. }) && constants.hbar <= 0.0 {
        return Err(Error::config("harmonic ground state needs hbar > 0"));
    }
    let n: Vec<f64> = (0..grid.len())
        .map(|i| spec.density_at(grid.center(i), constants))
        .collect();
    normalize(&WfmField::from_density(n)?, grid)
}

/// Rescales the density to unit mass; the action is untouched.
pub fn normalize(field: &WfmField, grid: &Grid1D) -> Result<WfmField> {
    grid.check_len(field.len(), "field")?;
    let mass = field.mass(grid);
    if !(mass > 0.0) {
        return Err(Error::config("cannot normalize a field with zero mass"));
    }
    Ok(WfmField {
        n: field.n.iter().map(|v| v / mass).collect(),
        s: field.s.clone(),
        normalized: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    L2,
    Linf,
}

/// Plain elementwise distance between two densities (no shift matching).
pub fn distance(a: &WfmField, b: &WfmField, grid: &Grid1D, metric: Metric) -> Result<f64> {
    grid.check_len(a.len(), "first field")?;
    grid.check_len(b.len(), "second field")?;
    let diffs = a.n.iter().zip(&b.n).map(|(x, y)| x - y);
    Ok(match metric {
        Metric::L2 => (diffs.map(|d| d * d).sum::<f64>() * grid.spacing()).sqrt(),
        Metric::Linf => diffs.map(f64::abs).fold(0.0, f64::max),
    })
}
