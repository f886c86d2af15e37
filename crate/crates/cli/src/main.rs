use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flexmpc_cli::compare::{compare, load_trace, write_comparison};
use flexmpc_cli::config::{load_config, ExperimentConfig, Scenario};
use flexmpc_cli::{run_experiment, CliError, Result};

#[derive(Parser)]
#[command(name = "flexmpc", version, about = "Flexible-step MPC experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a closed-loop experiment (problem3, problem4, custom).
    Run(ExperimentArgs),
    /// Sampled g-dclf verification.
    Verify(ExperimentArgs),
    /// Brockett residual probe.
    Probe(ExperimentArgs),
    /// Compare total costs of finished runs.
    Compare {
        /// Run directories (or their actual.csv files).
        #[arg(required = true, num_args = 2..)]
        traces: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Toggle::On)]
        svg: Toggle,
    },
    /// List the built-in presets, or print one as JSON.
    Presets {
        #[arg(long, value_name = "NAME")]
        show: Option<String>,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long, value_name = "PATH", conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    /// Output directory (overrides the config).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Random seed (overrides the config).
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    svg: Toggle,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

/// Resolves the config for a subcommand whose scenarios are restricted to `allowed`.
fn resolve(args: &ExperimentArgs, default: Scenario, allowed: &[Scenario]) -> Result<ExperimentConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => load_config(path)?,
        (None, Some(name)) => ExperimentConfig::preset_by_name(name)?,
        (None, None) => ExperimentConfig::preset(default),
    };
    if !allowed.contains(&cfg.scenario) {
        let names: Vec<&str> = allowed.iter().map(|s| s.name()).collect();
        return Err(CliError::Config(format!(
            "scenario {} is not accepted here (expected {})",
            cfg.scenario.name(),
            names.join(" or ")
        )));
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.run.seed = seed;
        cfg.verify.seeds = vec![seed];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn experiment(args: &ExperimentArgs, default: Scenario, allowed: &[Scenario]) -> Result<bool> {
    let cfg = resolve(args, default, allowed)?;
    let outcome = run_experiment(&cfg, args.svg == Toggle::On)?;
    for line in &outcome.lines {
        println!("{line}");
    }
    println!("artifacts in {}", cfg.output_dir.display());
    Ok(!outcome.aborted)
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run(args) => experiment(
            &args,
            Scenario::Problem3,
            &[Scenario::Problem3, Scenario::Problem4, Scenario::Custom],
        ),
        Command::Verify(args) => experiment(&args, Scenario::GdclfVerify, &[Scenario::GdclfVerify]),
        Command::Probe(args) => experiment(&args, Scenario::BrockettProbe, &[Scenario::BrockettProbe]),
        Command::Compare { traces, out, svg } => {
            let loaded = traces.iter().map(|p| load_trace(p)).collect::<Result<Vec<_>>>()?;
            let cmp = compare(&loaded)?;
            write_comparison(&cmp, &out, svg == Toggle::On)?;
            println!("label,final_k,total_cost_end,end_state_inf_norm,tail_increment_50");
            for r in &cmp.rows {
                println!(
                    "{},{},{},{},{}",
                    r.label, r.final_k, r.total_cost_end, r.end_state_inf_norm, r.tail_increment
                );
            }
            Ok(true)
        }
        Command::Presets { show: Some(name) } => {
            println!("{}", ExperimentConfig::preset_by_name(&name)?.emit());
            Ok(true)
        }
        Command::Presets { show: None } => {
            for s in Scenario::ALL {
                println!("{:<15} {}", s.name(), s.describe());
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: a closed-loop run aborted; partial artifacts were written");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
