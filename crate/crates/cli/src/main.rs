mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use commands::EstimateFlags;
use config::{resolve, Overrides};

#[derive(Parser)]
#[command(name = "oal", version, about = "One-atom laser: master equation, g2, trajectories and estimators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config with flat, unit-suffixed keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// fig3, fig4_low or fig4_high.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    /// Master seed for all randomness.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Steady-state pump sweep, quantum and mean-field.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Regression g²(τ) at one pump value.
    G2 {
        #[command(flatten)]
        common: Common,
        /// Pump ratio, overriding config and preset.
        #[arg(long)]
        x: Option<f64>,
    },
    /// Quantum-trajectory click records.
    Trajectories {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        x: Option<f64>,
    },
    /// g²(τ) and n̄ from click record files.
    Estimate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bin_width_ns: Option<u64>,
        #[arg(long)]
        tau_max_ns: Option<f64>,
        /// Background rate per detector.
        #[arg(long)]
        background_hz: Option<f64>,
        #[arg(long)]
        sigma_ns: Option<f64>,
        #[arg(required = true)]
        records: Vec<PathBuf>,
    },
}

fn setup(common: &Common, x: Option<f64>, needs_seed: bool) -> Result<config::RunConfig> {
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let ov = Overrides {
        preset: common.preset.clone(),
        out_dir: common.out_dir.clone(),
        seed: common.seed,
        x,
    };
    let mut cfg = resolve(common.config.as_deref(), &ov)?;
    if needs_seed && cfg.seed.is_none() {
        let nanos = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(0);
        cfg.seed = Some(nanos);
        eprintln!("generated seed: {nanos}");
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Sweep { common } => commands::cmd_sweep(&setup(&common, None, false)?),
        Command::G2 { common, x } => commands::cmd_g2(&setup(&common, x, false)?),
        Command::Trajectories { common, x } => commands::cmd_trajectories(&setup(&common, x, true)?),
        Command::Estimate {
            common,
            bin_width_ns,
            tau_max_ns,
            background_hz,
            sigma_ns,
            records,
        } => {
            let flags = EstimateFlags {
                bin_width_ns,
                tau_max_ns,
                background_hz,
                sigma_ns,
            };
            commands::cmd_estimate(&setup(&common, None, false)?, &records, &flags)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
