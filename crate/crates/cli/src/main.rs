//! `bess`: characterize, optimize, simulate and backtest a battery storage
//! system on day-ahead style price series.
//!
//! Settings are layered: flags override the `--config` file, which overrides
//! the built-in defaults. Every command writes its outputs and a replayable
//! `config.toml` snapshot into the output directory.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use bess_core::analytics::SweepKind;
use bess_core::mpc::{Optimizer, TerminalSoc};
use chrono::NaiveDateTime;
use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing::info;

use config::CliConfig;

#[derive(Parser, Debug)]
#[command(name = "bess", version, about = "Battery storage dispatch: optimization and closed-loop backtests")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Run config file (TOML). Relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory [default: runs/<command>]
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// System config file [default: shipped 180 kW / 180 kWh system]
    #[arg(long, global = true)]
    system: Option<PathBuf>,
    /// Price CSV with header `timestamp,price_eur_mwh` (replaces synthetic prices)
    #[arg(long, global = true)]
    prices: Option<PathBuf>,
    /// Seed of the synthetic price generator
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Synthetic price level [EUR/MWh]
    #[arg(long, global = true)]
    synth_base: Option<f64>,
    /// Synthetic daily amplitude [EUR/MWh]
    #[arg(long, global = true)]
    synth_amplitude: Option<f64>,
    /// Synthetic noise standard deviation [EUR/MWh]
    #[arg(long, global = true)]
    synth_noise: Option<f64>,
    /// Start of the run, e.g. 2021-03-01T00:00:00
    #[arg(long, global = true)]
    start: Option<NaiveDateTime>,
    /// Length of closed-loop runs [days]
    #[arg(long, global = true)]
    days: Option<f64>,
    /// Initial state of charge
    #[arg(long, global = true)]
    soc0: Option<f64>,
    /// Resistance state(s) of health, comma separated
    #[arg(long, global = true, value_delimiter = ',')]
    soh: Option<Vec<f64>>,
    #[command(flatten)]
    mpc: MpcArgs,
    /// Print the summary as JSON on stdout
    #[arg(long, global = true)]
    json: bool,
    /// Worker threads for parallel runs [default: available parallelism]
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// More log output on stderr (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Args, Debug)]
struct MpcArgs {
    #[arg(long, global = true, value_enum)]
    optimizer: Option<OptimizerArg>,
    /// Optimization horizon [h]
    #[arg(long, global = true)]
    horizon: Option<f64>,
    /// Executed part of each plan [min]
    #[arg(long, global = true)]
    action_min: Option<u32>,
    /// Optimizer step [s]
    #[arg(long, global = true)]
    opt_dt: Option<u32>,
    /// Plant simulation step [s]
    #[arg(long, global = true)]
    sim_dt: Option<u32>,
    /// Daily full-equivalent-cycle cap
    #[arg(long, global = true)]
    fec_per_day: Option<f64>,
    /// Terminal SOC floor: `off`, `start` or a fraction
    #[arg(long, global = true, value_parser = parse_terminal)]
    terminal_soc: Option<TerminalSoc>,
    /// Fixed LP efficiency [default: fitted]
    #[arg(long, global = true)]
    eta: Option<f64>,
    /// Fixed NL converter efficiency [default: fitted]
    #[arg(long, global = true)]
    eta_conv: Option<f64>,
    /// Factor on the resistance assumed by the NL optimizer
    #[arg(long, global = true)]
    r_factor: Option<f64>,
    /// NL iteration cap
    #[arg(long, global = true)]
    nl_max_iter: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OptimizerArg {
    Lp,
    Nl,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SweepKindArg {
    LpEta,
    NlRFactor,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Efficiency maps over SOC and power, and constant-efficiency fits
    Characterize,
    /// One open-loop optimization over the horizon
    Optimize,
    /// Run a schedule CSV (`timestamp,p_ac_w`) through the plant
    Simulate {
        #[arg(long)]
        schedule: PathBuf,
    },
    /// One closed-loop receding-horizon run
    MpcRun,
    /// LP and NL closed-loop runs for every scenario
    Benchmark,
    /// Sensitivity of a closed-loop run to a model parameter
    Sweep {
        #[arg(long, value_enum)]
        kind: Option<SweepKindArg>,
        /// Comma-separated parameter values
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Characterize => "characterize",
            Command::Optimize => "optimize",
            Command::Simulate { .. } => "simulate",
            Command::MpcRun => "mpc-run",
            Command::Benchmark => "benchmark",
            Command::Sweep { .. } => "sweep",
        }
    }
}

fn parse_terminal(s: &str) -> Result<TerminalSoc, String> {
    match s {
        "off" => Ok(TerminalSoc::Off),
        "start" => Ok(TerminalSoc::RunStart),
        _ => s
            .parse::<f64>()
            .ok()
            .filter(|v| (0.0..=1.0).contains(v))
            .map(TerminalSoc::Min)
            .ok_or_else(|| format!("expected `off`, `start` or a fraction in [0, 1], got `{s}`")),
    }
}

/// Applies command-line flags on top of the file config.
fn layer(mut cfg: CliConfig, g: &GlobalArgs, command: &Command) -> Result<CliConfig> {
    macro_rules! set {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src.clone() {
                $dst = v;
            }
        };
    }
    if g.system.is_some() {
        cfg.system = g.system.clone();
    }
    set!(cfg.seed, g.seed);
    set!(cfg.start, g.start);
    set!(cfg.days, g.days);
    set!(cfg.soc0, g.soc0);
    if g.soh.is_some() {
        cfg.soh = g.soh.clone();
    }
    let synth_flags = g.synth_base.is_some() || g.synth_amplitude.is_some() || g.synth_noise.is_some();
    if g.prices.is_some() && synth_flags {
        bail!("invalid config `prices`: --prices cannot be combined with --synth-* flags");
    }
    if let Some(p) = &g.prices {
        cfg.prices.csv = Some(p.clone());
        cfg.prices.synth = None;
    }
    if synth_flags {
        let mut s = cfg.prices.synth.unwrap_or_default();
        set!(s.base_eur_mwh, g.synth_base);
        set!(s.daily_amplitude_eur_mwh, g.synth_amplitude);
        set!(s.noise_sd_eur_mwh, g.synth_noise);
        cfg.prices.synth = Some(s);
        cfg.prices.csv = None;
    }
    let m = &g.mpc;
    if let Some(o) = m.optimizer {
        cfg.mpc.optimizer = match o {
            OptimizerArg::Lp => Optimizer::Lp,
            OptimizerArg::Nl => Optimizer::Nl,
        };
    }
    set!(cfg.mpc.horizon_h, m.horizon);
    set!(cfg.mpc.action_min, m.action_min);
    set!(cfg.mpc.opt_dt_s, m.opt_dt);
    set!(cfg.mpc.sim_dt_s, m.sim_dt);
    set!(cfg.mpc.fec_per_day, m.fec_per_day);
    set!(cfg.mpc.terminal_soc, m.terminal_soc);
    set!(cfg.mpc.r_factor, m.r_factor);
    set!(cfg.mpc.nl_max_iter, m.nl_max_iter);
    if m.eta.is_some() {
        cfg.mpc.eta = m.eta;
    }
    if m.eta_conv.is_some() {
        cfg.mpc.eta_conv = m.eta_conv;
    }
    if let Command::Sweep { kind, values } = command {
        if let Some(k) = kind {
            cfg.sweep.kind = match k {
                SweepKindArg::LpEta => SweepKind::LpEta,
                SweepKindArg::NlRFactor => SweepKind::NlRFactor,
            };
        }
        set!(cfg.sweep.values, values);
    }
    if g.out.is_some() {
        cfg.out_dir = g.out.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    let file = match &g.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    let cfg = layer(file, g, &cli.command)?.resolve()?;
    let out = cfg
        .cli
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(cli.command.name()));
    std::fs::create_dir_all(&out)?;
    cfg.write_snapshot(&out)?;
    info!(command = cli.command.name(), out = %out.display(), "starting");

    let summary = match &cli.command {
        Command::Characterize => commands::characterize_cmd(&cfg, &out)?,
        Command::Optimize => commands::optimize_cmd(&cfg, &out)?,
        Command::Simulate { schedule } => commands::simulate_cmd(&cfg, &out, schedule)?,
        Command::MpcRun => commands::mpc_run_cmd(&cfg, &out)?,
        Command::Benchmark => commands::benchmark_cmd(&cfg, &out)?,
        Command::Sweep { .. } => commands::sweep_cmd(&cfg, &out)?,
    };
    if g.json {
        println!("{}", serde_json::to_string_pretty(&summary)?);
    } else {
        println!("{}: outputs written to {}", cli.command.name(), out.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Help and version requests print and exit 0; usage errors exit 2.
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.global.verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();

    let result = match cli.global.workers {
        Some(0) => {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(2);
        }
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| run(&cli)),
            Err(e) => Err(e.into()),
        },
        None => run(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
