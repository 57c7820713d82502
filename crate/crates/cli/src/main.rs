use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rotor_bohm::config::ExperimentConfig;
use rotor_bohm::runner::{self, Report};

#[derive(Parser, Debug)]
#[command(name = "rotor-bohm", version, about = "Bohm trajectories of randomly coupled confined rotors")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat key = value config file (TOML), or JSON with a .json extension.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config field, e.g. `--set dt=0.005` or `--set node_guard.max_stage_angle=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    n: Option<usize>,
    #[arg(long, global = true)]
    e_tr: Option<f64>,
    #[arg(long, global = true)]
    e_max: Option<f64>,
    #[arg(long, global = true)]
    dt: Option<f64>,
    #[arg(long, global = true)]
    t_end: Option<f64>,
    #[arg(long, global = true)]
    bins: Option<usize>,
    #[arg(long, global = true)]
    state_stream: Option<String>,
    /// Print the report as JSON instead of one line per check.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Single-rotor levels, many-body spectrum, census and truncation audit.
    Spectrum,
    /// Draw the state and integrate one trajectory.
    Run,
    /// Histogram, correlation, conditional and fluctuation analysis of a stored run.
    Analyze {
        #[arg(long)]
        trajectory: Option<PathBuf>,
        #[arg(long)]
        state: Option<PathBuf>,
    },
    /// Regenerate the data behind one figure or table.
    Reproduce {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(runner::ARTIFACTS))]
        artifact: String,
    },
    /// Run and analyze one trajectory per state stream in parallel.
    Sweep {
        /// Number of streams `rpse/0 .. rpse/{count-1}`, ignored when `--streams` is given.
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, value_delimiter = ',')]
        streams: Vec<String>,
    },
}

fn build_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    let flags = [
        ("master_seed", c.seed.map(|v| v.to_string())),
        ("n", c.n.map(|v| v.to_string())),
        ("e_tr", c.e_tr.map(|v| v.to_string())),
        ("e_max", c.e_max.map(|v| v.to_string())),
        ("dt", c.dt.map(|v| v.to_string())),
        ("t_end", c.t_end.map(|v| v.to_string())),
        ("bins", c.bins.map(|v| v.to_string())),
        ("state_stream", c.state_stream.clone()),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    for kv in &c.overrides {
        let Some((k, v)) = kv.split_once('=') else { bail!("override `{kv}` is not KEY=VALUE") };
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(out) = &c.out {
        cfg.output_dir = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print(report: &Report, json: bool) -> Result<()> {
    if json {
        println!("{}", serde_json::to_string_pretty(report)?);
        return Ok(());
    }
    println!("{} (config {})", report.command, report.config_hash);
    for c in &report.checks {
        println!("  [{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    for f in &report.files {
        println!("  wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = build_config(&cli.common).and_then(|cfg| {
        let report = match &cli.command {
            Command::Spectrum => runner::cmd_spectrum(&cfg)?,
            Command::Run => runner::cmd_run(&cfg)?,
            Command::Analyze { trajectory, state } => runner::cmd_analyze(&cfg, trajectory.as_deref(), state.as_deref())?,
            Command::Reproduce { artifact } => runner::cmd_reproduce(artifact, &cfg)?,
            Command::Sweep { count, streams } => {
                let streams = if streams.is_empty() { (0..*count).map(|k| format!("rpse/{k}")).collect() } else { streams.clone() };
                runner::cmd_sweep(&cfg, &streams)?
            }
        };
        print(&report, cli.common.json)?;
        Ok(report.passed())
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
