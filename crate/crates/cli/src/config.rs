//! Run configuration. The file is TOML; every key is checked against the
//! known set and all problems are reported together.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sqha_core::deterministic::{EvolveConfig, Integrator, DEFAULT_CFL, DEFAULT_MASK_LIMIT};
use sqha_core::error::Error;
use sqha_core::grid::{parse_profile_table, Boundary, Grid1D, PhysicalConstants, ProfileSpec};
use sqha_core::noise::{Kernel, NoiseModel};
use sqha_core::nonlocality::{NonlocalityOptions, RegimeThresholds, TailMode};
use sqha_core::potential::{parse_potential_table, PotentialSpec};
use sqha_core::quantum_potential::DEFAULT_FLOOR;
use sqha_core::sqha::{PositivityPolicy, SqhaConfig};

pub const DEFAULT_OUT: &str = "sqha-out";
const DEFAULT_HALF_WIDTH: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstantsSection {
    pub hbar: f64,
    pub mass: f64,
    pub boltzmann: f64,
    pub light_speed: f64,
}

impl Default for ConstantsSection {
    fn default() -> Self {
        let c = PhysicalConstants::default();
        Self {
            hbar: c.hbar,
            mass: c.mass,
            boltzmann: c.boltzmann,
            light_speed: c.light_speed,
        }
    }
}

/// Either `half_width` or both of `x_min`, `x_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub half_width: Option<f64>,
    pub x_min: Option<f64>,
    pub x_max: Option<f64>,
    pub cells: usize,
    pub boundary: Boundary,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            half_width: None,
            x_min: None,
            x_max: None,
            cells: 256,
            boundary: Boundary::Periodic,
        }
    }
}

/// `kind` is one of gaussian, stretched_exp, smooth_tail, harmonic_ground,
/// table or discrete_ground (ground state of the discretized Hamiltonian
/// with the configured potential).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileSection {
    pub kind: String,
    pub sigma: Option<f64>,
    pub q0: Option<f64>,
    pub h: Option<f64>,
    pub scale: Option<f64>,
    pub omega: Option<f64>,
    pub path: Option<PathBuf>,
}

impl Default for ProfileSection {
    fn default() -> Self {
        Self {
            kind: "gaussian".into(),
            sigma: None,
            q0: None,
            h: None,
            scale: None,
            omega: None,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PotentialSection {
    pub kind: String,
    pub omega: Option<f64>,
    pub path: Option<PathBuf>,
}

impl Default for PotentialSection {
    fn default() -> Self {
        Self {
            kind: "none".into(),
            omega: None,
            path: None,
        }
    }
}

/// Θ itself is a top-level key. `form_factor` and `vessel_side` exclude
/// each other.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub kernel: String,
    pub form_factor: Option<f64>,
    pub vessel_side: Option<f64>,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            kernel: "gaussian".into(),
            form_factor: None,
            vessel_side: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolveSection {
    pub dt: f64,
    pub t_end: f64,
    pub record_every: usize,
    pub integrator: Integrator,
    pub c_cfl: f64,
    pub reanchor_interval: Option<f64>,
    pub positivity_policy: PositivityPolicy,
    pub renormalize_each_step: bool,
    pub max_retries: usize,
    pub floor: f64,
    pub mask_limit: f64,
}

impl Default for EvolveSection {
    fn default() -> Self {
        let e = EvolveConfig::default();
        let s = SqhaConfig::default();
        Self {
            dt: e.dt,
            t_end: e.t_end,
            record_every: e.record_every,
            integrator: e.integrator,
            c_cfl: DEFAULT_CFL,
            reanchor_interval: None,
            positivity_policy: s.positivity_policy,
            renormalize_each_step: s.renormalize_each_step,
            max_retries: s.max_retries,
            floor: DEFAULT_FLOOR,
            mask_limit: DEFAULT_MASK_LIMIT,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanSection {
    pub thetas: Vec<f64>,
    /// Analytic variances instead of ensembles.
    pub synthetic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSection {
    pub window: Option<[f64; 2]>,
    pub q_min: Option<f64>,
    pub tail_mode: TailMode,
    /// Coarse-graining length; the system length when unset.
    pub resolution: Option<f64>,
    /// Saved field to analyze instead of the configured profile.
    pub data: Option<PathBuf>,
    pub macroscopic_ratio: f64,
    pub local_ratio: f64,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        let t = RegimeThresholds::default();
        Self {
            window: None,
            q_min: None,
            tail_mode: TailMode::Grid,
            resolution: None,
            data: None,
            macroscopic_ratio: t.macroscopic_ratio,
            local_ratio: t.local_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub theta: f64,
    pub seed: u64,
    pub members: usize,
    pub out: Option<PathBuf>,
    pub constants: ConstantsSection,
    pub grid: GridSection,
    pub profile: ProfileSection,
    pub potential: PotentialSection,
    pub noise: NoiseSection,
    pub evolve: EvolveSection,
    pub scan: ScanSection,
    pub analyze: AnalyzeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            theta: 0.0,
            seed: 0,
            members: 1,
            out: None,
            constants: ConstantsSection::default(),
            grid: GridSection::default(),
            profile: ProfileSection::default(),
            potential: PotentialSection::default(),
            noise: NoiseSection::default(),
            evolve: EvolveSection::default(),
            scan: ScanSection::default(),
            analyze: AnalyzeSection::default(),
        }
    }
}

const TOP_KEYS: &[&str] = &["theta", "seed", "members", "out"];
const SECTIONS: &[(&str, &[&str])] = &[
    ("constants", &["hbar", "mass", "boltzmann", "light_speed"]),
    (
        "grid",
        &["half_width", "x_min", "x_max", "cells", "boundary"],
    ),
    (
        "profile",
        &["kind", "sigma", "q0", "h", "scale", "omega", "path"],
    ),
    ("potential", &["kind", "omega", "path"]),
    ("noise", &["kernel", "form_factor", "vessel_side"]),
    (
        "evolve",
        &[
            "dt",
            "t_end",
            "record_every",
            "integrator",
            "c_cfl",
            "reanchor_interval",
            "positivity_policy",
            "renormalize_each_step",
            "max_retries",
            "floor",
            "mask_limit",
        ],
    ),
    ("scan", &["thetas", "synthetic"]),
    (
        "analyze",
        &[
            "window",
            "q_min",
            "tail_mode",
            "resolution",
            "data",
            "macroscopic_ratio",
            "local_ratio",
        ],
    ),
];

/// Reads and validates a configuration file. Relative paths inside it are
/// taken relative to the file's directory.
pub fn parse_config(path: &Path) -> Result<RunConfig, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Validation(vec![format!("cannot read {}: {e}", path.display())]))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config_str(&text, base)
}

pub fn parse_config_str(text: &str, base: &Path) -> Result<RunConfig, Error> {
    let table: toml::Table =
        toml::from_str(text).map_err(|e| Error::Validation(vec![format!("syntax: {e}")]))?;
    let mut errors = Vec::new();
    let mut cfg = RunConfig::default();

    for (key, value) in &table {
        if let Some((_, allowed)) = SECTIONS.iter().find(|(s, _)| s == key) {
            let Some(section) = value.as_table() else {
                errors.push(format!("{key}: expected a [{key}] section"));
                continue;
            };
            let mut known = toml::Table::new();
            for (k, v) in section {
                if allowed.contains(&k.as_str()) {
                    known.insert(k.clone(), v.clone());
                } else {
                    errors.push(format!("{key}.{k}: unknown key"));
                }
            }
            let known = toml::Value::Table(known);
            match key.as_str() {
                "constants" => section_into(known, key, &mut cfg.constants, &mut errors),
                "grid" => section_into(known, key, &mut cfg.grid, &mut errors),
                "profile" => section_into(known, key, &mut cfg.profile, &mut errors),
                "potential" => section_into(known, key, &mut cfg.potential, &mut errors),
                "noise" => section_into(known, key, &mut cfg.noise, &mut errors),
                "evolve" => section_into(known, key, &mut cfg.evolve, &mut errors),
                "scan" => section_into(known, key, &mut cfg.scan, &mut errors),
                _ => section_into(known, key, &mut cfg.analyze, &mut errors),
            }
        } else if TOP_KEYS.contains(&key.as_str()) {
            match key.as_str() {
                "theta" => value_into(value, key, &mut cfg.theta, &mut errors),
                "seed" => value_into(value, key, &mut cfg.seed, &mut errors),
                "members" => value_into(value, key, &mut cfg.members, &mut errors),
                _ => value_into(value, key, &mut cfg.out, &mut errors),
            }
        } else {
            errors.push(format!("{key}: unknown key"));
        }
    }

    for p in [
        &mut cfg.out,
        &mut cfg.profile.path,
        &mut cfg.potential.path,
        &mut cfg.analyze.data,
    ]
    .into_iter()
    .flatten()
    {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    if let Some(rest) = cfg.noise.kernel.strip_prefix("table:") {
        let p = Path::new(rest);
        if p.is_relative() {
            cfg.noise.kernel = format!("table:{}", base.join(p).display());
        }
    }

    cfg.fill_defaults();
    errors.extend(cfg.validate());
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Validation(errors))
    }
}

fn value_into<T: DeserializeOwned>(
    value: &toml::Value,
    key: &str,
    slot: &mut T,
    errors: &mut Vec<String>,
) {
    match value.clone().try_into() {
        Ok(v) => *slot = v,
        Err(e) => errors.push(format!("{key}: {}", e.to_string().trim())),
    }
}

fn section_into<T: DeserializeOwned>(
    value: toml::Value,
    key: &str,
    slot: &mut T,
    errors: &mut Vec<String>,
) {
    match value.try_into() {
        Ok(v) => *slot = v,
        Err(e) => errors.push(format!("[{key}]: {}", e.to_string().trim())),
    }
}

fn positive(errors: &mut Vec<String>, key: &str, v: f64) {
    if !(v > 0.0 && v.is_finite()) {
        errors.push(format!("{key}: must be > 0, got {v}"));
    }
}

fn require(errors: &mut Vec<String>, key: &str, v: Option<f64>) {
    match v {
        None => errors.push(format!("{key}: required")),
        Some(v) => positive(errors, key, v),
    }
}

impl RunConfig {
    /// Writes the implied values into optional keys, so the echo shows what
    /// a run actually used.
    fn fill_defaults(&mut self) {
        let g = &mut self.grid;
        if g.half_width.is_none() && g.x_min.is_none() && g.x_max.is_none() {
            g.half_width = Some(DEFAULT_HALF_WIDTH);
        }
        let p = &mut self.profile;
        match p.kind.as_str() {
            "gaussian" => {
                p.sigma.get_or_insert(1.0);
                p.q0.get_or_insert(0.0);
            }
            "stretched_exp" | "smooth_tail" => {
                p.scale.get_or_insert(1.0);
            }
            "harmonic_ground" => {
                p.omega.get_or_insert(1.0);
            }
            _ => {}
        }
        if self.potential.kind == "harmonic" {
            self.potential.omega.get_or_insert(1.0);
        }
        if self.noise.form_factor.is_none() && self.noise.vessel_side.is_none() {
            self.noise.form_factor = Some(1.0);
        }
    }

    /// Every problem, each naming its key.
    pub fn validate(&self) -> Vec<String> {
        let mut e = Vec::new();
        if !(self.theta >= 0.0 && self.theta.is_finite()) {
            e.push(format!("theta: must be >= 0, got {}", self.theta));
        }
        if self.members == 0 {
            e.push("members: must be >= 1".into());
        }

        let c = &self.constants;
        if !(c.hbar >= 0.0 && c.hbar.is_finite()) {
            e.push(format!("constants.hbar: must be >= 0, got {}", c.hbar));
        }
        positive(&mut e, "constants.mass", c.mass);
        positive(&mut e, "constants.boltzmann", c.boltzmann);
        positive(&mut e, "constants.light_speed", c.light_speed);

        let g = &self.grid;
        match (g.half_width, g.x_min, g.x_max) {
            (Some(w), None, None) => positive(&mut e, "grid.half_width", w),
            (None, Some(a), Some(b)) => {
                if !(b > a && a.is_finite() && b.is_finite()) {
                    e.push(format!(
                        "grid.x_max: must exceed grid.x_min, got [{a}, {b}]"
                    ));
                }
            }
            _ => e.push("grid: give either half_width or both x_min and x_max".into()),
        }
        if g.cells < sqha_core::grid::MIN_CELLS {
            e.push(format!(
                "grid.cells: must be >= {}, got {}",
                sqha_core::grid::MIN_CELLS,
                g.cells
            ));
        }

        let p = &self.profile;
        let used: &[&str] = match p.kind.as_str() {
            "gaussian" => {
                positive(&mut e, "profile.sigma", p.sigma.unwrap_or(1.0));
                if !p.q0.unwrap_or(0.0).is_finite() {
                    e.push("profile.q0: must be finite".into());
                }
                &["sigma", "q0"]
            }
            "stretched_exp" | "smooth_tail" => {
                require(&mut e, "profile.h", p.h);
                positive(&mut e, "profile.scale", p.scale.unwrap_or(1.0));
                &["h", "scale"]
            }
            "harmonic_ground" => {
                positive(&mut e, "profile.omega", p.omega.unwrap_or(1.0));
                if c.hbar <= 0.0 {
                    e.push("profile.kind: harmonic_ground needs constants.hbar > 0".into());
                }
                &["omega"]
            }
            "table" => {
                if p.path.is_none() {
                    e.push("profile.path: required for kind table".into());
                }
                &["path"]
            }
            "discrete_ground" => {
                if c.hbar <= 0.0 {
                    e.push("profile.kind: discrete_ground needs constants.hbar > 0".into());
                }
                &[]
            }
            other => {
                e.push(format!(
                    "profile.kind: unknown '{other}' (gaussian, stretched_exp, smooth_tail, harmonic_ground, table, discrete_ground)"
                ));
                &["sigma", "q0", "h", "scale", "omega", "path"]
            }
        };
        for (name, set) in [
            ("sigma", p.sigma.is_some()),
            ("q0", p.q0.is_some()),
            ("h", p.h.is_some()),
            ("scale", p.scale.is_some()),
            ("omega", p.omega.is_some()),
            ("path", p.path.is_some()),
        ] {
            if set && !used.contains(&name) {
                e.push(format!("profile.{name}: not used by kind {}", p.kind));
            }
        }

        let v = &self.potential;
        match v.kind.as_str() {
            "none" => {
                if v.omega.is_some() || v.path.is_some() {
                    e.push("potential: kind none takes no parameters".into());
                }
            }
            "harmonic" => {
                positive(&mut e, "potential.omega", v.omega.unwrap_or(1.0));
                if v.path.is_some() {
                    e.push("potential.path: not used by kind harmonic".into());
                }
            }
            "table" => {
                if v.path.is_none() {
                    e.push("potential.path: required for kind table".into());
                }
                if v.omega.is_some() {
                    e.push("potential.omega: not used by kind table".into());
                }
            }
            other => e.push(format!(
                "potential.kind: unknown '{other}' (none, harmonic, table)"
            )),
        }

        let n = &self.noise;
        let k = n.kernel.trim();
        if !(k == "gaussian" || k == "triangle" || k.starts_with("table:")) {
            e.push(format!(
                "noise.kernel: unknown '{k}' (gaussian, triangle, table:<path>)"
            ));
        }
        match (n.form_factor, n.vessel_side) {
            (Some(_), Some(_)) => {
                e.push("noise.vessel_side: give either form_factor or vessel_side".into())
            }
            (Some(f), None) => positive(&mut e, "noise.form_factor", f),
            (None, Some(l)) => positive(&mut e, "noise.vessel_side", l),
            (None, None) => {}
        }

        let ev = &self.evolve;
        positive(&mut e, "evolve.dt", ev.dt);
        if !(ev.t_end >= 0.0 && ev.t_end.is_finite()) {
            e.push(format!("evolve.t_end: must be >= 0, got {}", ev.t_end));
        }
        if ev.record_every == 0 {
            e.push("evolve.record_every: must be >= 1".into());
        }
        positive(&mut e, "evolve.c_cfl", ev.c_cfl);
        if let Some(w) = ev.reanchor_interval {
            if !(w >= ev.dt) {
                e.push(format!("evolve.reanchor_interval: must be >= dt, got {w}"));
            }
        }
        if !(ev.floor >= 0.0 && ev.floor < 1.0) {
            e.push(format!(
                "evolve.floor: must lie in [0, 1), got {}",
                ev.floor
            ));
        }
        if !(ev.mask_limit > 0.0 && ev.mask_limit <= 1.0) {
            e.push(format!(
                "evolve.mask_limit: must lie in (0, 1], got {}",
                ev.mask_limit
            ));
        }

        if let Some(t) = self
            .scan
            .thetas
            .iter()
            .find(|t| !(**t > 0.0 && t.is_finite()))
        {
            e.push(format!("scan.thetas: every value must be > 0, got {t}"));
        }

        let a = &self.analyze;
        if let Some([lo, hi]) = a.window {
            if !(hi > lo) {
                e.push(format!("analyze.window: need lo < hi, got [{lo}, {hi}]"));
            }
        }
        if let Some(q) = a.q_min {
            positive(&mut e, "analyze.q_min", q);
        }
        if let Some(r) = a.resolution {
            positive(&mut e, "analyze.resolution", r);
        }
        positive(&mut e, "analyze.macroscopic_ratio", a.macroscopic_ratio);
        positive(&mut e, "analyze.local_ratio", a.local_ratio);
        e
    }

    pub fn physical_constants(&self) -> Result<PhysicalConstants, Error> {
        let c = &self.constants;
        PhysicalConstants::new(c.hbar, c.mass, c.boltzmann, c.light_speed)
    }

    pub fn grid(&self) -> Result<Grid1D, Error> {
        let g = &self.grid;
        match (g.half_width, g.x_min, g.x_max) {
            (Some(w), _, _) => Grid1D::symmetric(w, g.cells, g.boundary),
            (None, Some(a), Some(b)) => Grid1D::new(a, b, g.cells, g.boundary),
            _ => Err(Error::Validation(vec![
                "grid: give either half_width or both x_min and x_max".into(),
            ])),
        }
    }

    /// `None` for the discrete ground state, which depends on the potential.
    pub fn profile_spec(&self) -> Result<Option<ProfileSpec>, Error> {
        let p = &self.profile;
        Ok(Some(match p.kind.as_str() {
            "gaussian" => ProfileSpec::Gaussian {
                sigma: p.sigma.unwrap_or(1.0),
                q0: p.q0.unwrap_or(0.0),
            },
            "stretched_exp" => ProfileSpec::StretchedExp {
                h: p.h.unwrap_or(f64::NAN),
                scale: p.scale.unwrap_or(1.0),
            },
            "smooth_tail" => ProfileSpec::SmoothTail {
                h: p.h.unwrap_or(f64::NAN),
                scale: p.scale.unwrap_or(1.0),
            },
            "harmonic_ground" => ProfileSpec::HarmonicGround {
                omega: p.omega.unwrap_or(1.0),
            },
            "table" => {
                let path = p.path.as_deref().unwrap_or(Path::new(""));
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::Validation(vec![format!(
                        "profile.path: cannot read {}: {e}",
                        path.display()
                    )])
                })?;
                parse_profile_table(&text)?
            }
            _ => return Ok(None),
        }))
    }

    pub fn potential_spec(&self) -> Result<PotentialSpec, Error> {
        let v = &self.potential;
        Ok(match v.kind.as_str() {
            "harmonic" => PotentialSpec::Harmonic {
                omega: v.omega.unwrap_or(1.0),
            },
            "table" => {
                let path = v.path.as_deref().unwrap_or(Path::new(""));
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::Validation(vec![format!(
                        "potential.path: cannot read {}: {e}",
                        path.display()
                    )])
                })?;
                parse_potential_table(&text)?
            }
            _ => PotentialSpec::None,
        })
    }

    /// Noise model at the configured Θ, or at `theta` when given.
    pub fn noise_model(&self, theta: Option<f64>) -> Result<NoiseModel, Error> {
        let theta = theta.unwrap_or(self.theta);
        let constants = self.physical_constants()?;
        if theta == 0.0 {
            return Ok(NoiseModel::deterministic());
        }
        let kernel = Kernel::parse(&self.noise.kernel)?;
        match self.noise.vessel_side {
            Some(l) => NoiseModel::with_vessel_side(&constants, theta, l, kernel),
            None => NoiseModel::with_form_factor(
                &constants,
                theta,
                self.noise.form_factor.unwrap_or(1.0),
                kernel,
            ),
        }
    }

    pub fn evolve_config(&self) -> EvolveConfig {
        let e = &self.evolve;
        EvolveConfig {
            dt: e.dt,
            t_end: e.t_end,
            record_every: e.record_every,
            integrator: e.integrator,
            c_cfl: e.c_cfl,
        }
    }

    pub fn sqha_config(&self) -> SqhaConfig {
        let e = &self.evolve;
        SqhaConfig {
            dt: e.dt,
            t_end: e.t_end,
            reanchor_interval: e.reanchor_interval,
            positivity_policy: e.positivity_policy,
            renormalize_each_step: e.renormalize_each_step,
            max_retries: e.max_retries,
            record_every: e.record_every,
            c_cfl: e.c_cfl,
            floor: e.floor,
            mask_limit: e.mask_limit,
        }
    }

    pub fn nonlocality_options(&self) -> NonlocalityOptions {
        let a = &self.analyze;
        NonlocalityOptions {
            window: a.window.map(|[lo, hi]| (lo, hi)),
            q_min: a.q_min,
            tail_mode: a.tail_mode,
            floor: self.evolve.floor,
            thresholds: RegimeThresholds {
                macroscopic_ratio: a.macroscopic_ratio,
                local_ratio: a.local_ratio,
            },
        }
    }
}
