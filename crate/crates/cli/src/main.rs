use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nmqj::OrphanPolicy;
use nmqj::io::{RunConfig, load_config_seeded};
use nmqj::run;

#[derive(Parser)]
#[command(name = "nmqj", version, about = "Non-Markovian quantum jump simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the compressed ensemble and write time series, events and a summary.
    Run(Common),
    /// Follow a single member of the ensemble.
    Trajectory(Common),
    /// Integrate the master equation directly.
    Oracle(Common),
    /// Run the ensemble and the oracle and check agreement; exits 1 on failure.
    Compare(Common),
    /// Time the compressed engine against the uncompressed reference.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Args)]
struct Overrides {
    /// Root seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Abort when a negative channel has no source state (default).
    #[arg(long, conflicts_with = "permissive")]
    strict: bool,
    /// Log and skip negative channels without a source state.
    #[arg(long)]
    permissive: bool,
    /// Halve the step when jump probabilities get too large.
    #[arg(long, value_enum)]
    adaptive_dt: Option<Toggle>,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct BenchArgs {
    /// One or more configs to benchmark.
    #[arg(long, required = true)]
    config: Vec<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Ensemble sizes to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [1_000u64, 10_000, 100_000])]
    members: Vec<u64>,
    /// Skip the uncompressed reference.
    #[arg(long)]
    no_naive: bool,
    #[command(flatten)]
    overrides: Overrides,
}

fn load(path: &Path, o: &Overrides) -> Result<RunConfig> {
    let mut cfg =
        load_config_seeded(path, o.seed).with_context(|| format!("loading {}", path.display()))?;
    if o.permissive {
        cfg.step.orphan_policy = OrphanPolicy::Permissive;
    } else if o.strict {
        cfg.step.orphan_policy = OrphanPolicy::Strict;
    }
    if let Some(t) = o.adaptive_dt {
        cfg.step.adaptive_dt = matches!(t, Toggle::On);
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run(c) => {
            let cfg = load(&c.config, &c.overrides)?;
            let out = run::run_ensemble(&cfg)?;
            run::write_ensemble_outputs(&c.out, &out)?;
            eprintln!(
                "run: {} steps, peak N_eff {}, {:.3} s",
                out.summary.substeps, out.summary.peak_n_eff, out.wall_seconds
            );
        }
        Command::Trajectory(c) => {
            let cfg = load(&c.config, &c.overrides)?;
            let out = run::run_trajectory(&cfg)?;
            run::write_trajectory_outputs(&c.out, &out)?;
            eprintln!(
                "trajectory: {} tracked jumps, {:.3} s",
                out.tracked_events.len(),
                out.wall_seconds
            );
        }
        Command::Oracle(c) => {
            let cfg = load(&c.config, &c.overrides)?;
            let out = run::run_oracle(&cfg)?;
            run::write_oracle_outputs(&c.out, &out)?;
            eprintln!(
                "oracle: substep {:e}, {:.3} s",
                out.solution.substep, out.wall_seconds
            );
        }
        Command::Compare(c) => {
            let cfg = load(&c.config, &c.overrides)?;
            let out = run::run_compare(&cfg)?;
            run::write_compare_outputs(&c.out, &out)?;
            for r in &out.reports {
                eprintln!(
                    "{}: max |error| {:.3e}, {} points over bound -> {}",
                    r.observable,
                    r.max_error,
                    r.exceedances,
                    if r.passed { "pass" } else { "FAIL" }
                );
            }
            return Ok(out.passed());
        }
        Command::Bench(b) => {
            let configs = b
                .config
                .iter()
                .map(|p| {
                    let label = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
                    Ok((label, load(p, &b.overrides)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let rows = run::run_bench(&configs, &b.members, !b.no_naive)?;
            run::write_bench_outputs(&b.out, &rows)?;
            println!("{:<20} {:>10} {:>6} {:>12} {:>12} {:>10}", "config", "N", "N_eff", "compressed_s", "naive_s", "ratio");
            for r in &rows {
                let opt = |x: Option<f64>, p: usize| x.map_or_else(|| "-".to_string(), |v| format!("{v:.p$}"));
                println!(
                    "{:<20} {:>10} {:>6} {:>12.4} {:>12} {:>10}",
                    r.label,
                    r.members,
                    r.peak_n_eff,
                    r.compressed_seconds,
                    opt(r.naive_seconds, 4),
                    opt(r.ratio, 1)
                );
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
