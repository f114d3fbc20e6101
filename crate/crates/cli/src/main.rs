use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand};
use sqha_cli::commands::{self, resolve_seed, Context};
use sqha_cli::config::{parse_config, RunConfig};
use sqha_core::acceptance::Mutation;

#[derive(Parser)]
#[command(
    name = "sqha",
    version,
    about = "Stochastic quantum hydrodynamics in one dimension"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, created when missing.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base seed; overrides SQHA_SEED and the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for ensembles.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Leave wall-clock and generation time out of every artifact.
    #[arg(long, global = true)]
    no_timestamp: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Evolve the configured state (ensemble when theta > 0).
    Simulate,
    /// Run one ensemble per theta and fit the variance scaling.
    ScanTheta {
        /// Comma-separated thetas; replaces scan.thetas.
        #[arg(long, value_delimiter = ',')]
        thetas: Option<Vec<f64>>,
        /// Analytic variances, no dynamics.
        #[arg(long)]
        synthetic: bool,
    },
    /// Tail exponent, force integral, lambda_L and regime of a profile.
    Analyze {
        /// CSV field (q, n and optionally S, t) instead of the configured profile.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Dump sampled noise increments.
    GenNoise,
    /// Run the built-in acceptance suite.
    Validate {
        /// Comma-separated criterion numbers; all when omitted.
        #[arg(long, value_delimiter = ',')]
        only: Option<Vec<u8>>,
        /// Scale every quantum potential by this factor (mutation check).
        #[arg(long, default_value_t = 1.0)]
        mutate_qp: f64,
    },
}

fn load(global: &Global, required: bool) -> Result<RunConfig> {
    match &global.config {
        Some(p) => Ok(parse_config(p)?),
        None if required => bail!("--config <path> is required for this command"),
        None => Ok(RunConfig::default()),
    }
}

fn context(global: &Global, cfg: &RunConfig) -> Result<Context> {
    let env = std::env::var("SQHA_SEED").ok();
    let seed = resolve_seed(global.seed, env.as_deref(), cfg.seed)?;
    if global.threads == Some(0) {
        bail!("--threads must be >= 1");
    }
    Ok(Context::new(
        cfg,
        global.out.clone(),
        seed,
        global.threads,
        !global.no_timestamp,
    ))
}

fn run(cli: Cli) -> Result<bool> {
    let g = &cli.global;
    match cli.command {
        Command::Simulate => {
            let cfg = load(g, true)?;
            let ctx = context(g, &cfg)?;
            let report = commands::simulate(&cfg, &ctx)?;
            println!(
                "simulate: {} steps, {} member(s), seed {} -> {}",
                report.steps,
                report.members,
                report.seed,
                ctx.out.display()
            );
            for k in ["max_density_change", "istar_variance"] {
                if let Some(v) = report.series.get(k).and_then(|s| s.values.last()) {
                    println!("{k} at t_end: {v:.6e}");
                }
            }
            for n in &report.notes {
                println!("note: {n}");
            }
        }
        Command::ScanTheta { thetas, synthetic } => {
            let cfg = load(g, true)?;
            let ctx = context(g, &cfg)?;
            let thetas = thetas.unwrap_or_else(|| cfg.scan.thetas.clone());
            let report =
                commands::scan_theta(&cfg, &ctx, &thetas, synthetic || cfg.scan.synthetic)?;
            let scan = report.scan.as_ref().context("scan report missing")?;
            for (label, fit) in [
                ("Var(I*)", &scan.istar_fit),
                ("Var(dI*/dq)", &scan.grad_istar_fit),
            ] {
                match fit {
                    Some(f) => println!(
                        "{label} slope: {:.4} +- {:.4} (r2 {:.4})",
                        f.exponent, f.exponent_se, f.r_squared
                    ),
                    None => println!("{label} slope: no fit"),
                }
            }
            for n in &report.notes {
                println!("note: {n}");
            }
        }
        Command::Analyze { data } => {
            let cfg = load(g, data.is_none())?;
            let ctx = context(g, &cfg)?;
            let out = commands::analyze(&cfg, &ctx, data.as_deref())?;
            println!("{}", out.lambda_l_line);
            println!(
                "regime: {}",
                out.report
                    .regime
                    .map_or_else(|| "unclassified".to_string(), |r| r.to_string())
            );
            println!("{}", out.verdict);
            for n in &out.report.notes {
                println!("note: {n}");
            }
        }
        Command::GenNoise => {
            let cfg = load(g, true)?;
            let ctx = context(g, &cfg)?;
            let out = commands::gen_noise(&cfg, &ctx)?;
            println!(
                "gen-noise: {} field(s), lambda_c {}, sample variance {:.6e} (target {:.6e})",
                out.members,
                out.model.lambda_c(),
                out.sample_variance,
                out.expected_variance
            );
        }
        Command::Validate { only, mutate_qp } => {
            let cfg = RunConfig::default();
            let ctx = context(g, &cfg)?;
            let out = commands::validate(
                &ctx,
                &only.unwrap_or_default(),
                Mutation {
                    qp_scale: mutate_qp,
                },
            )?;
            let failed = out.outcomes.iter().filter(|o| !o.passed).count();
            println!(
                "{} of {} criteria passed",
                out.outcomes.len() - failed,
                out.outcomes.len()
            );
            return Ok(out.passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
