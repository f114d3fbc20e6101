//! Subcommand implementations. Each writes its artifacts into the output
//! directory and returns a short summary for the terminal.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context as _, Result};
use serde::Serialize;
use sqha_core::acceptance::{self, Mutation, Outcome};
use sqha_core::deterministic::{
    discrete_ground_state, evolve, stationarity_residual, Dynamics, Trajectory,
};
use sqha_core::diagnostics::{
    cells_near_density, diagnose, estimate_correlation, istar_variance, scaling_fit,
    weighted_mean_density, DiagnosticsReport, FluctuationStats, ScalingFitResult, MIN_MEMBERS,
};
use sqha_core::error::Error;
use sqha_core::grid::{init_profile, Boundary, Grid1D, PhysicalConstants, WfmField};
use sqha_core::noise::{rng_for, LengthScale, NoiseModel, NoiseSampler};
use sqha_core::nonlocality::{analyze as analyze_profile, NonlocalityReport};
use sqha_core::sqha::{run_ensemble, write_trace_csv, Ensemble, SqhaSolver};

use crate::config::{RunConfig, DEFAULT_OUT};
use crate::svg::{Plot, Series};

pub const REPORT_SCHEMA: &str = "sqha-report/1";
pub const TRAJECTORY_SCHEMA: &str = "sqha-trajectory/1";
pub const TRACE_SCHEMA: &str = "sqha-trace/1";
pub const SCAN_SCHEMA: &str = "sqha-scan/1";
pub const NOISE_SCHEMA: &str = "sqha-noise/1";

/// Where the seed of a run came from, highest precedence first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedSource {
    Flag,
    Env,
    Config,
}

/// `--seed` beats `SQHA_SEED`, which beats the config file.
pub fn resolve_seed(
    flag: Option<u64>,
    env: Option<&str>,
    config: u64,
) -> Result<(u64, SeedSource)> {
    if let Some(s) = flag {
        return Ok((s, SeedSource::Flag));
    }
    if let Some(text) = env {
        let s = text
            .trim()
            .parse()
            .with_context(|| format!("SQHA_SEED must be an unsigned integer, got '{text}'"))?;
        return Ok((s, SeedSource::Env));
    }
    Ok((config, SeedSource::Config))
}

#[derive(Debug, Clone)]
pub struct Context {
    pub out: PathBuf,
    pub seed: u64,
    pub seed_source: SeedSource,
    pub threads: Option<usize>,
    pub timestamp: bool,
}

impl Context {
    pub fn new(
        cfg: &RunConfig,
        out: Option<PathBuf>,
        seed: (u64, SeedSource),
        threads: Option<usize>,
        timestamp: bool,
    ) -> Self {
        let out = out
            .or_else(|| cfg.out.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        Self {
            out,
            seed: seed.0,
            seed_source: seed.1,
            threads,
            timestamp,
        }
    }

    fn prepare(&self) -> Result<()> {
        fs::create_dir_all(&self.out)
            .with_context(|| format!("cannot create output directory {}", self.out.display()))
    }

    fn write(&self, name: &str, bytes: &[u8], artifacts: &mut Vec<String>) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, bytes).with_context(|| format!("cannot write {}", path.display()))?;
        artifacts.push(name.to_string());
        Ok(())
    }

    fn stamp(&self) -> Option<u64> {
        self.timestamp.then(|| {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs())
        })
    }

    fn svg(&self, name: &str, plot: &Plot, artifacts: &mut Vec<String>) -> Result<()> {
        let stamp = self.stamp().map(|s| format!("unix {s}"));
        self.write(name, plot.render(stamp.as_deref()).as_bytes(), artifacts)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TimeSeries {
    pub t: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanPoint {
    pub theta: f64,
    pub var_istar: f64,
    pub var_istar_se: f64,
    pub var_grad_istar: f64,
    pub var_grad_istar_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanReport {
    pub synthetic: bool,
    pub points: Vec<ScanPoint>,
    pub istar_fit: Option<ScalingFitResult>,
    pub grad_istar_fit: Option<ScalingFitResult>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub schema: &'static str,
    pub command: &'static str,
    pub config: RunConfig,
    pub seed: u64,
    pub seed_source: SeedSource,
    pub grid: Grid1D,
    pub lambda_c: LengthScale,
    pub generated_unix: Option<u64>,
    pub wall_clock_s: Option<f64>,
    pub steps: usize,
    pub members: usize,
    pub series: BTreeMap<String, TimeSeries>,
    pub diagnostics: Option<DiagnosticsReport>,
    pub nonlocality: Option<NonlocalityReport>,
    pub scan: Option<ScanReport>,
    pub notes: Vec<String>,
    pub artifacts: Vec<String>,
}

impl RunReport {
    fn new(
        command: &'static str,
        cfg: &RunConfig,
        ctx: &Context,
        grid: Grid1D,
        lambda_c: LengthScale,
    ) -> Self {
        Self {
            schema: REPORT_SCHEMA,
            command,
            config: cfg.clone(),
            seed: ctx.seed,
            seed_source: ctx.seed_source,
            grid,
            lambda_c,
            generated_unix: ctx.stamp(),
            wall_clock_s: None,
            steps: 0,
            members: 0,
            series: BTreeMap::new(),
            diagnostics: None,
            nonlocality: None,
            scan: None,
            notes: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    fn finish(&mut self, ctx: &Context, started: Instant) -> Result<()> {
        if ctx.timestamp {
            self.wall_clock_s = Some(started.elapsed().as_secs_f64());
        }
        self.artifacts.push("report.json".into());
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        fs::write(ctx.out.join("report.json"), json)
            .with_context(|| format!("cannot write report into {}", ctx.out.display()))?;
        Ok(())
    }
}

fn with_schema(schema: &str, body: Vec<u8>) -> Vec<u8> {
    let mut out = format!("# schema: {schema}\n").into_bytes();
    out.extend(body);
    out
}

struct Setup {
    constants: PhysicalConstants,
    grid: Grid1D,
    potential: Vec<f64>,
    field: WfmField,
}

fn setup(cfg: &RunConfig) -> Result<Setup> {
    let constants = cfg.physical_constants()?;
    let grid = cfg.grid()?;
    let potential = cfg.potential_spec()?.sample(&grid, &constants)?;
    let field = match cfg.profile_spec()? {
        Some(spec) => init_profile(&grid, &spec, &constants)?,
        None => discrete_ground_state(&grid, &potential, &constants)?,
    };
    Ok(Setup {
        constants,
        grid,
        potential,
        field,
    })
}

fn resolution(cfg: &RunConfig, grid: &Grid1D) -> f64 {
    cfg.analyze.resolution.unwrap_or(grid.length())
}

/// Deterministic trajectory at Θ = 0, SQHA ensemble otherwise.
pub fn simulate(cfg: &RunConfig, ctx: &Context) -> Result<RunReport> {
    let started = Instant::now();
    let s = setup(cfg)?;
    let model = cfg.noise_model(None)?;
    ctx.prepare()?;
    let mut report = RunReport::new("simulate", cfg, ctx, s.grid, model.lambda_c());

    match analyze_profile(
        &s.field,
        &s.grid,
        &s.constants,
        cfg.theta,
        model.lambda_c(),
        resolution(cfg, &s.grid),
        &cfg.nonlocality_options(),
    ) {
        Ok(r) => report.nonlocality = Some(r),
        Err(e) => report
            .notes
            .push(format!("nonlocality analysis of the initial profile: {e}")),
    }

    if model.is_active() {
        simulate_ensemble(cfg, ctx, &s, &model, &mut report)?;
    } else {
        simulate_deterministic(cfg, ctx, &s, &mut report)?;
    }
    report.finish(ctx, started)?;
    Ok(report)
}

fn simulate_deterministic(
    cfg: &RunConfig,
    ctx: &Context,
    s: &Setup,
    report: &mut RunReport,
) -> Result<()> {
    if cfg.members > 1 {
        report.notes.push(
            "theta = 0: the ensemble would repeat one trajectory, so a single run was made".into(),
        );
    }
    let traj = evolve(
        &s.field,
        &s.potential,
        &s.grid,
        &s.constants,
        &cfg.evolve_config(),
    )
    .context("deterministic evolution")?;
    report.steps = cfg.evolve_config().steps();
    report.members = 1;

    let mut csv = Vec::new();
    traj.write_csv(&s.grid, &mut csv)?;
    ctx.write(
        "trajectory.csv",
        &with_schema(TRAJECTORY_SCHEMA, csv),
        &mut report.artifacts,
    )?;

    let n0 = &traj.frames[0].n;
    let mut series: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for f in &traj.frames {
        let change =
            f.n.iter()
                .zip(n0)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
        let residual =
            stationarity_residual(f, &s.potential, &s.grid, &s.constants).unwrap_or(f64::NAN);
        for (k, v) in [
            ("mass", f.mass(&s.grid)),
            ("mean_position", f.mean_position(&s.grid)),
            ("max_density_change", change),
            ("stationarity_residual", residual),
        ] {
            series.entry(k).or_default().push(v);
        }
    }
    for (k, v) in series {
        report.series.insert(
            k.to_string(),
            TimeSeries {
                t: traj.times.clone(),
                values: v,
            },
        );
    }

    ctx.svg(
        "density.svg",
        &density_plot(&traj, &s.grid),
        &mut report.artifacts,
    )?;
    let obs = Plot {
        title: "Deviation from the initial state".into(),
        x_label: "t".into(),
        y_label: "value".into(),
        series: ["max_density_change", "stationarity_residual"]
            .iter()
            .map(|k| {
                let ts = &report.series[*k];
                Series::line(*k, ts.t.clone(), ts.values.clone())
            })
            .collect(),
        ..Plot::default()
    };
    ctx.svg("observables.svg", &obs, &mut report.artifacts)?;
    Ok(())
}

fn density_plot(traj: &Trajectory, grid: &Grid1D) -> Plot {
    let last = traj.frames.len() - 1;
    let mut picks = vec![0, last / 2, last];
    picks.dedup();
    Plot {
        title: "Density snapshots".into(),
        x_label: "q".into(),
        y_label: "n".into(),
        series: picks
            .into_iter()
            .map(|k| {
                Series::line(
                    format!("t = {:.4}", traj.times[k]),
                    grid.centers(),
                    traj.frames[k].n.clone(),
                )
            })
            .collect(),
        ..Plot::default()
    }
}

fn run_members(cfg: &RunConfig, ctx: &Context, s: &Setup, model: &NoiseModel) -> Result<Ensemble> {
    let solver = SqhaSolver::new(
        &s.grid,
        &s.constants,
        &s.potential,
        model,
        cfg.sqha_config(),
        Dynamics::Quantum,
    )?;
    run_ensemble(&solver, &s.field, cfg.members, ctx.seed, ctx.threads)
        .with_context(|| format!("ensemble at theta = {}", model.theta()))
}

/// Cellwise mean of one per-member vector.
fn member_mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut mean = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, b) in mean.iter_mut().zip(r) {
            *a += b;
        }
    }
    let m = rows.len() as f64;
    mean.iter_mut().for_each(|a| *a /= m);
    mean
}

/// Time since the last re-anchoring at the end of the run.
fn accumulation_time(cfg: &RunConfig) -> f64 {
    let sc = cfg.sqha_config();
    let steps = sc.steps();
    let since = match sc.window_steps() {
        Some(w) => steps % w,
        None => steps,
    };
    since as f64 * sc.dt
}

fn simulate_ensemble(
    cfg: &RunConfig,
    ctx: &Context,
    s: &Setup,
    model: &NoiseModel,
    report: &mut RunReport,
) -> Result<()> {
    let ensemble = run_members(cfg, ctx, s, model)?;
    report.steps = cfg.sqha_config().steps();
    report.members = ensemble.len();

    let rows = ensemble.trace();
    let mut csv = Vec::new();
    write_trace_csv(&rows, &mut csv)?;
    ctx.write(
        "trace.csv",
        &with_schema(TRACE_SCHEMA, csv),
        &mut report.artifacts,
    )?;

    // ensemble means, accumulated in member order
    let mut acc: BTreeMap<&str, BTreeMap<usize, (f64, f64, usize)>> = BTreeMap::new();
    let mut slot: BTreeMap<(usize, &str), usize> = BTreeMap::new();
    for r in &rows {
        let k = slot.entry((r.realization, r.observable)).or_insert(0);
        let e = acc
            .entry(r.observable)
            .or_default()
            .entry(*k)
            .or_insert((r.t, 0.0, 0));
        e.1 += r.value;
        e.2 += 1;
        *k += 1;
    }
    for (name, points) in acc {
        let (t, values) = points
            .values()
            .map(|&(t, sum, c)| (t, sum / c as f64))
            .unzip();
        report
            .series
            .insert(name.to_string(), TimeSeries { t, values });
    }

    let last = ensemble.runs[0].snapshots.len() - 1;
    let fields: Vec<Vec<f64>> = ensemble
        .runs
        .iter()
        .map(|r| r.snapshots[last].n.clone())
        .collect();
    let companions: Vec<Vec<f64>> = ensemble
        .runs
        .iter()
        .map(|r| r.snapshots[last].n0.clone())
        .collect();
    let n0 = member_mean(&companions);
    let delta_t = accumulation_time(cfg);
    if ensemble.len() < MIN_MEMBERS {
        report.notes.push(format!(
            "fluctuation diagnostics need at least {MIN_MEMBERS} members, got {}",
            ensemble.len()
        ));
    } else if delta_t == 0.0 {
        report
            .notes
            .push("the final snapshot coincides with a re-anchoring, so there are no fluctuations to diagnose".into());
    } else {
        match diagnose(
            &fields,
            &n0,
            &s.grid,
            &s.constants,
            delta_t,
            cfg.evolve.floor,
        ) {
            Ok(d) => report.diagnostics = Some(d),
            Err(e) => report.notes.push(format!("fluctuation diagnostics: {e}")),
        }
    }

    let density = Plot {
        title: format!("Ensemble density, {} members", ensemble.len()),
        x_label: "q".into(),
        y_label: "n".into(),
        series: vec![
            Series::line("initial", s.grid.centers(), s.field.n.clone()),
            Series::line("final mean n", s.grid.centers(), member_mean(&fields)),
            Series::line("final mean n0", s.grid.centers(), n0),
        ],
        ..Plot::default()
    };
    ctx.svg("density.svg", &density, &mut report.artifacts)?;
    let obs = Plot {
        title: "Ensemble-mean observables".into(),
        x_label: "t".into(),
        y_label: "value".into(),
        series: ["istar_variance", "mass_drift", "clip_fraction"]
            .iter()
            .filter_map(|k| {
                report
                    .series
                    .get(*k)
                    .map(|ts| Series::line(*k, ts.t.clone(), ts.values.clone()))
            })
            .collect(),
        ..Plot::default()
    };
    ctx.svg("observables.svg", &obs, &mut report.artifacts)?;
    Ok(())
}

/// Leading gradient term of the linearized I* variance at density `d`:
/// `(ħ²/2m)²·2ĝ/λc² / (4d²)` with `ĝ = g0·Δt`. It scales as Θ³.
fn synthetic_point(
    constants: &PhysicalConstants,
    model: &NoiseModel,
    delta_t: f64,
    d: f64,
) -> ScanPoint {
    let lc = model.lambda_c().value();
    let p = constants.qp_prefactor();
    let var = p * p * 2.0 * model.g0() * delta_t / (lc * lc) / (4.0 * d * d);
    ScanPoint {
        theta: model.theta(),
        var_istar: var,
        var_istar_se: 0.0,
        var_grad_istar: var / (lc * lc),
        var_grad_istar_se: 0.0,
    }
}

pub fn scan_theta(
    cfg: &RunConfig,
    ctx: &Context,
    thetas: &[f64],
    synthetic: bool,
) -> Result<RunReport> {
    if thetas.len() < 4 {
        return Err(Error::Validation(vec![format!(
            "scan.thetas: a scaling fit needs at least 4 values, got {}",
            thetas.len()
        )])
        .into());
    }
    if let Some(t) = thetas.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
        return Err(Error::Validation(vec![format!(
            "scan.thetas: every value must be > 0, got {t}"
        )])
        .into());
    }
    let started = Instant::now();
    let s = setup(cfg)?;
    ctx.prepare()?;
    let mut report = RunReport::new("scan-theta", cfg, ctx, s.grid, LengthScale::Infinite);
    let d = weighted_mean_density(&s.field.n, &s.grid).context("initial profile has no mass")?;
    let delta_t = accumulation_time(cfg);
    if delta_t == 0.0 {
        bail!("evolve.t_end ends on a re-anchoring, so no fluctuation survives to be measured");
    }

    let mut points = Vec::with_capacity(thetas.len());
    for &theta in thetas {
        let model = cfg.noise_model(Some(theta))?;
        if synthetic {
            points.push(synthetic_point(&s.constants, &model, delta_t, d));
            continue;
        }
        let ensemble = run_members(cfg, ctx, &s, &model)?;
        let last = ensemble.runs[0].snapshots.len() - 1;
        let fields: Vec<Vec<f64>> = ensemble
            .runs
            .iter()
            .map(|r| r.snapshots[last].n.clone())
            .collect();
        let companions: Vec<Vec<f64>> = ensemble
            .runs
            .iter()
            .map(|r| r.snapshots[last].n0.clone())
            .collect();
        let n0 = member_mean(&companions);
        let cells = cells_near_density(&n0, weighted_mean_density(&n0, &s.grid).unwrap_or(d));
        let v = istar_variance(
            &fields,
            &n0,
            &s.grid,
            &s.constants,
            cfg.evolve.floor,
            &cells,
        )
        .with_context(|| format!("I* variance at theta = {theta}"))?;
        points.push(ScanPoint {
            theta,
            var_istar: v.var_istar,
            var_istar_se: v.var_istar_se,
            var_grad_istar: v.var_grad_istar,
            var_grad_istar_se: v.var_grad_istar_se,
        });
    }
    report.steps = if synthetic {
        0
    } else {
        cfg.sqha_config().steps()
    };
    report.members = if synthetic { 0 } else { cfg.members };

    let fit = |f: fn(&ScanPoint) -> f64, what: &str, notes: &mut Vec<String>| {
        let v: Vec<f64> = points.iter().map(f).collect();
        scaling_fit(thetas, &v)
            .map_err(|e| notes.push(format!("{what} fit: {e}")))
            .ok()
    };
    let istar_fit = fit(|p| p.var_istar, "Var(I*)", &mut report.notes);
    let grad_istar_fit = fit(|p| p.var_grad_istar, "Var(dI*/dq)", &mut report.notes);

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "theta",
        "var_istar",
        "var_istar_se",
        "var_grad_istar",
        "var_grad_istar_se",
    ])?;
    for p in &points {
        w.write_record(
            [
                p.theta,
                p.var_istar,
                p.var_istar_se,
                p.var_grad_istar,
                p.var_grad_istar_se,
            ]
            .map(|v| format!("{v:e}")),
        )?;
    }
    let body = w.into_inner().map_err(|e| anyhow::anyhow!("csv: {e}"))?;
    ctx.write(
        "scan.csv",
        &with_schema(SCAN_SCHEMA, body),
        &mut report.artifacts,
    )?;

    let xs: Vec<f64> = thetas.to_vec();
    let plot = Plot {
        title: "Fluctuation variance against theta".into(),
        x_label: "theta".into(),
        y_label: "variance".into(),
        log_x: true,
        log_y: true,
        series: vec![
            Series::scatter(
                "Var(I*)",
                xs.clone(),
                points.iter().map(|p| p.var_istar).collect(),
            ),
            Series::scatter(
                "Var(dI*/dq)",
                xs,
                points.iter().map(|p| p.var_grad_istar).collect(),
            ),
        ],
    };
    ctx.svg("scan.svg", &plot, &mut report.artifacts)?;
    report.scan = Some(ScanReport {
        synthetic,
        points,
        istar_fit,
        grad_istar_fit,
    });
    report.finish(ctx, started)?;
    Ok(report)
}

/// A field read from CSV with columns `q`, `n` and optionally `S` and `t`.
/// With a `t` column the rows of the latest time are used.
pub fn read_field(path: &Path, boundary: Boundary) -> Result<(Grid1D, WfmField)> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(qc), Some(nc)) = (col("q"), col("n")) else {
        bail!("{}: needs columns q and n", path.display());
    };
    let (sc, tc) = (col("S"), col("t"));
    let mut rows: Vec<(f64, f64, f64, f64)> = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec?;
        let get = |c: usize| -> Result<f64> {
            rec.get(c)
                .unwrap_or("")
                .parse()
                .with_context(|| format!("{} row {}: bad number", path.display(), k + 2))
        };
        let t = tc.map(get).transpose()?.unwrap_or(0.0);
        let s = sc.map(get).transpose()?.unwrap_or(0.0);
        rows.push((t, get(qc)?, get(nc)?, s));
    }
    let t_last = rows.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
    rows.retain(|r| r.0 == t_last);
    if rows.len() < sqha_core::grid::MIN_CELLS {
        bail!(
            "{}: need at least {} cells, got {}",
            path.display(),
            sqha_core::grid::MIN_CELLS,
            rows.len()
        );
    }
    let h = rows[1].1 - rows[0].1;
    let first = rows[0].1;
    if !(h > 0.0)
        || rows
            .iter()
            .enumerate()
            .any(|(i, r)| (r.1 - (first + i as f64 * h)).abs() > 1e-6 * h)
    {
        bail!(
            "{}: q must be uniformly spaced and increasing",
            path.display()
        );
    }
    let grid = Grid1D::new(
        first - 0.5 * h,
        rows[rows.len() - 1].1 + 0.5 * h,
        rows.len(),
        boundary,
    )?;
    let field = WfmField::new(
        rows.iter().map(|r| r.2).collect(),
        rows.iter().map(|r| r.3).collect(),
    )?;
    Ok((grid, field))
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisOutput {
    pub schema: &'static str,
    pub command: &'static str,
    pub config: RunConfig,
    pub source: String,
    pub grid: Grid1D,
    pub theta: f64,
    pub resolution: f64,
    pub generated_unix: Option<u64>,
    pub report: NonlocalityReport,
    pub lambda_l_line: String,
    pub verdict: String,
}

/// `"lambda_L: infinite; regime candidate: non-local"` and the like.
pub fn lambda_l_line(report: &NonlocalityReport, resolution: f64, local_ratio: f64) -> String {
    let (value, candidate) = match report.lambda_l {
        Some(LengthScale::Infinite) => ("infinite".to_string(), "non-local"),
        Some(LengthScale::Finite(l)) => (
            format!("{l:.6e}"),
            if l <= local_ratio * resolution {
                "local"
            } else {
                "non-local"
            },
        ),
        None => ("undefined".to_string(), "undetermined"),
    };
    format!("lambda_L: {value}; regime candidate: {candidate}")
}

pub fn analyze(cfg: &RunConfig, ctx: &Context, data: Option<&Path>) -> Result<AnalysisOutput> {
    let constants = cfg.physical_constants()?;
    let data = data
        .map(Path::to_path_buf)
        .or_else(|| cfg.analyze.data.clone());
    let (grid, field, source) = match &data {
        Some(p) => {
            let (g, f) = read_field(p, cfg.grid.boundary)?;
            (g, f, p.display().to_string())
        }
        None => {
            let s = setup(cfg)?;
            (s.grid, s.field, format!("profile {}", cfg.profile.kind))
        }
    };
    let model = cfg.noise_model(None)?;
    let resolution = resolution(cfg, &grid);
    let report = analyze_profile(
        &field,
        &grid,
        &constants,
        cfg.theta,
        model.lambda_c(),
        resolution,
        &cfg.nonlocality_options(),
    )
    .context("non-locality analysis")?;
    ctx.prepare()?;
    let out = AnalysisOutput {
        schema: REPORT_SCHEMA,
        command: "analyze",
        config: cfg.clone(),
        source,
        grid,
        theta: cfg.theta,
        resolution,
        generated_unix: ctx.stamp(),
        lambda_l_line: lambda_l_line(&report, resolution, cfg.analyze.local_ratio),
        verdict: report.verdict(),
        report,
    };
    let mut json = serde_json::to_vec_pretty(&out)?;
    json.push(b'\n');
    fs::write(ctx.out.join("nonlocality.json"), json)?;
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct NoiseOutput {
    pub schema: &'static str,
    pub command: &'static str,
    pub config: RunConfig,
    pub seed: u64,
    pub seed_source: SeedSource,
    pub generated_unix: Option<u64>,
    pub model: NoiseModel,
    pub dt: f64,
    pub members: usize,
    /// `g0·dt`, the single-point variance the sampler targets.
    pub expected_variance: f64,
    /// Cell-averaged sample variance.
    pub sample_variance: f64,
    pub stats: Option<FluctuationStats>,
}

/// Dumps `members` sampled noise increments of one step `dt`.
pub fn gen_noise(cfg: &RunConfig, ctx: &Context) -> Result<NoiseOutput> {
    if !(cfg.theta > 0.0) {
        return Err(Error::Validation(vec!["theta: gen-noise needs theta > 0".into()]).into());
    }
    let grid = cfg.grid()?;
    let model = cfg.noise_model(None)?;
    let dt = cfg.evolve.dt;
    let sampler = NoiseSampler::new(&grid, &model, dt)?;
    let fields: Vec<Vec<f64>> = (0..cfg.members)
        .map(|k| sampler.sample(&mut rng_for(ctx.seed.wrapping_add(k as u64))))
        .collect();
    ctx.prepare()?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["realization", "cell_index", "q", "eta"])?;
    for (k, f) in fields.iter().enumerate() {
        for (i, v) in f.iter().enumerate() {
            w.write_record([
                k.to_string(),
                i.to_string(),
                format!("{:.12e}", grid.center(i)),
                format!("{v:.12e}"),
            ])?;
        }
    }
    let body = w.into_inner().map_err(|e| anyhow::anyhow!("csv: {e}"))?;
    let mut artifacts = Vec::new();
    ctx.write(
        "noise.csv",
        &with_schema(NOISE_SCHEMA, body),
        &mut artifacts,
    )?;

    let m = fields.len() as f64;
    let sample_variance = (0..grid.len())
        .map(|i| fields.iter().map(|f| f[i] * f[i]).sum::<f64>() / m)
        .sum::<f64>()
        / grid.len() as f64;
    let stats = (fields.len() >= 2)
        .then(|| estimate_correlation(&fields, None, &grid, dt, (grid.len() / 2).min(64)).ok())
        .flatten();
    let out = NoiseOutput {
        schema: REPORT_SCHEMA,
        command: "gen-noise",
        config: cfg.clone(),
        seed: ctx.seed,
        seed_source: ctx.seed_source,
        generated_unix: ctx.stamp(),
        expected_variance: model.g0() * dt,
        model,
        dt,
        members: fields.len(),
        sample_variance,
        stats,
    };
    let mut json = serde_json::to_vec_pretty(&out)?;
    json.push(b'\n');
    fs::write(ctx.out.join("noise.json"), json)?;
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationOutput {
    pub schema: &'static str,
    pub command: &'static str,
    pub mutation: Mutation,
    pub generated_unix: Option<u64>,
    pub outcomes: Vec<Outcome>,
    pub passed: bool,
}

/// Runs the acceptance criteria `ids` (all when empty), printing each line as
/// it completes.
pub fn validate(ctx: &Context, ids: &[u8], mutation: Mutation) -> Result<ValidationOutput> {
    if let Some(bad) = ids.iter().find(|i| !acceptance::CRITERIA.contains(i)) {
        bail!(
            "no acceptance criterion {bad} (expected 1 to {})",
            acceptance::CRITERIA.len()
        );
    }
    if !(mutation.qp_scale > 0.0 && mutation.qp_scale.is_finite()) {
        bail!("--mutate-qp must be > 0, got {}", mutation.qp_scale);
    }
    ctx.prepare()?;
    let ids: Vec<u8> = if ids.is_empty() {
        acceptance::CRITERIA.to_vec()
    } else {
        ids.to_vec()
    };
    let outcomes: Vec<Outcome> = ids
        .iter()
        .map(|&id| {
            let o = acceptance::run(id, &mutation);
            println!("{o}");
            o
        })
        .collect();
    let out = ValidationOutput {
        schema: REPORT_SCHEMA,
        command: "validate",
        mutation,
        generated_unix: ctx.stamp(),
        passed: outcomes.iter().all(|o| o.passed),
        outcomes,
    };
    let mut json = serde_json::to_vec_pretty(&out)?;
    json.push(b'\n');
    fs::write(ctx.out.join("validate.json"), json)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sqha_core::grid::ProfileSpec;

    #[test]
    fn seed_precedence() {
        assert_eq!(
            resolve_seed(Some(3), Some("5"), 7).unwrap(),
            (3, SeedSource::Flag)
        );
        assert_eq!(
            resolve_seed(None, Some(" 5 "), 7).unwrap(),
            (5, SeedSource::Env)
        );
        assert_eq!(
            resolve_seed(None, None, 7).unwrap(),
            (7, SeedSource::Config)
        );
        assert!(resolve_seed(None, Some("x"), 7).is_err());
    }

    #[test]
    fn synthetic_variance_scales_as_theta_cubed() {
        let c = PhysicalConstants::default();
        let thetas = [1e-3, 3.2e-3, 1e-2, 3.2e-2];
        let v: Vec<f64> = thetas
            .iter()
            .map(|&t| {
                let m = NoiseModel::new(&c, t, Default::default()).unwrap();
                synthetic_point(&c, &m, 0.1, 0.3).var_istar
            })
            .collect();
        let fit = scaling_fit(&thetas, &v).unwrap();
        assert!((fit.exponent - 3.0).abs() < 1e-12, "{}", fit.exponent);
    }

    #[test]
    fn field_round_trip_through_trajectory_csv() {
        let grid = Grid1D::symmetric(4.0, 32, Boundary::Periodic).unwrap();
        let c = PhysicalConstants::default();
        let f = init_profile(
            &grid,
            &ProfileSpec::Gaussian {
                sigma: 1.0,
                q0: 0.0,
            },
            &c,
        )
        .unwrap();
        let traj = Trajectory {
            times: vec![0.0, 1.0],
            frames: vec![WfmField::from_density(vec![1.0; 32]).unwrap(), f.clone()],
        };
        let mut body = Vec::new();
        traj.write_csv(&grid, &mut body).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        fs::write(&path, with_schema(TRAJECTORY_SCHEMA, body)).unwrap();
        let (g, back) = read_field(&path, Boundary::Periodic).unwrap();
        assert_eq!(g.len(), 32);
        assert!((g.x_min() + 4.0).abs() < 1e-9 && (g.x_max() - 4.0).abs() < 1e-9);
        for (a, b) in back.n.iter().zip(&f.n) {
            assert!((a - b).abs() <= 1e-11 * b.abs().max(1e-300));
        }
    }

    #[test]
    fn uneven_field_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        let rows: String = (0..10).map(|i| format!("{},1\n", (i * i) as f64)).collect();
        fs::write(&path, format!("q,n\n{rows}")).unwrap();
        assert!(read_field(&path, Boundary::Periodic).is_err());
    }
}
