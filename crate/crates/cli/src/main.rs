//! `farma`: runs the F-ARMA experiment scenarios from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use farma_core::experiments::pipeline::{
    bench, run_source_mpc, simulate_comparison, timing_text, train_controllers, write_plot_data,
};
use farma_core::experiments::{run_scenario, ScenarioConfig};

#[derive(Parser)]
#[command(name = "farma", version, about = "Distill MPC controllers into fuzzy ARMA blends")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Double-integrator setpoint tracking, all stages.
    Example1(RunArgs),
    /// Cart-pendulum swing-up, all stages.
    Example2(RunArgs),
    /// Run the source MPC and write `mpc_<run>.csv`.
    SimMpc(StageArgs),
    /// Train the ARMA controllers from the source CSVs.
    Train(StageArgs),
    /// Simulate MPC, each ARMA controller and F-ARMA from the evaluation state.
    SimFarma(StageArgs),
    /// Compare per-step controller time from the evaluation CSVs.
    Bench(StageArgs),
    /// Print a scenario configuration as TOML.
    ShowConfig(StageArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file; the built-in defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Use the `[Ts²; Ts]` input matrix for the linear MPC model.
    #[arg(long)]
    paper_compat: bool,
}

#[derive(Args)]
struct StageArgs {
    /// Built-in scenario (1 or 2), ignored when `--config` is given.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    example: u8,
    #[command(flatten)]
    run: RunArgs,
}

fn load(config: Option<&Path>, builtin: u8, paper_compat: bool) -> farma_core::Result<ScenarioConfig> {
    let mut cfg = match config {
        Some(path) => ScenarioConfig::load(path)?,
        None if builtin == 2 => ScenarioConfig::example2(),
        None => ScenarioConfig::example1(),
    };
    if paper_compat {
        cfg.set_paper_compat(true);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn scenario(args: &RunArgs, builtin: u8) -> farma_core::Result<bool> {
    let cfg = load(args.config.as_deref(), builtin, args.paper_compat)?;
    let report = run_scenario(&cfg, &args.out)?;
    print!("{}", report.to_text());
    Ok(report.all_passed())
}

fn stage(cmd: &Command, args: &StageArgs) -> farma_core::Result<bool> {
    let cfg = load(args.run.config.as_deref(), args.example, args.run.paper_compat)?;
    let out = &args.run.out;
    match cmd {
        Command::SimMpc(_) => {
            for (name, traj) in run_source_mpc(&cfg, out)? {
                let last = traj.last().map(|r| r.y.as_slice().to_vec()).unwrap_or_default();
                println!("{name}: {} samples, final y {last:?}, max |u| {}", traj.len(), traj.max_abs_input());
            }
        }
        Command::Train(_) => {
            for t in train_controllers(&cfg, out)? {
                println!("{}: {} samples, {} rows, {} coefficients", t.name, t.samples, t.rows, t.bundle.theta.len());
            }
        }
        Command::SimFarma(_) => {
            let cmp = simulate_comparison(&cfg, out)?;
            let sources = cfg
                .source_runs
                .iter()
                .map(|r| {
                    let path = farma_core::experiments::pipeline::source_csv_path(out, &r.name);
                    farma_core::experiments::ingest_csv(&path).map(|t| (r.name.clone(), t))
                })
                .collect::<farma_core::Result<Vec<_>>>()?;
            write_plot_data(&cfg, out, &sources, &cmp)?;
            let runs = std::iter::once(("mpc", &cmp.mpc))
                .chain(cmp.arma.iter().map(|(n, t)| (n.as_str(), t)))
                .chain(std::iter::once(("farma", &cmp.farma)));
            for (name, traj) in runs {
                let last = traj.last().map(|r| r.y.as_slice().to_vec()).unwrap_or_default();
                println!("{name}: final y {last:?}, max |u| {}", traj.max_abs_input());
            }
        }
        Command::Bench(_) => print!("{}", timing_text(&bench(out)?)),
        Command::ShowConfig(_) => print!("{}", cfg.to_toml()),
        Command::Example1(_) | Command::Example2(_) => unreachable!("handled by `scenario`"),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Example1(args) => scenario(args, 1),
        Command::Example2(args) => scenario(args, 2),
        Command::SimMpc(a) | Command::Train(a) | Command::SimFarma(a) | Command::Bench(a) | Command::ShowConfig(a) => {
            stage(&cli.command, a)
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(2)
        }
    }
}
