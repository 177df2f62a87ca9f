use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use passnet::cli::{
    error_json, exit_code, parse_config, parse_scenario, run_command, Command, Overrides, Scenario, CASE_STUDY,
};
use passnet::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "passnet", version, about = "Simulate diffusively coupled networks and synthesize formation gains")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    #[command(flatten)]
    common: Common,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Scenario JSON file. Defaults to the bundled 30-vehicle case study.
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    m_mode: Option<MModeArg>,
    #[arg(long, global = true, value_enum)]
    steady_state: Option<SourceArg>,
    #[arg(long, global = true)]
    dt: Option<f64>,
    #[arg(long, global = true)]
    t_max: Option<f64>,
    /// Step size of the gain iteration.
    #[arg(long, global = true)]
    h: Option<f64>,
    #[arg(long, global = true)]
    max_iter: Option<usize>,
    /// Uniform gain for `simulate` and `verify`.
    #[arg(long, global = true)]
    alpha: Option<f64>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Cmd {
    /// Integrate the closed loop and write trajectory.csv.
    Simulate,
    /// Run the per-agent closed-loop experiments.
    Experiment,
    /// Estimate the per-agent bounds from experiments.
    EstimateM,
    /// Uniform gain synthesis plus a closed-loop check.
    Synthesize,
    /// Gradient-based gain iteration.
    Iterate,
    /// Increase a uniform gain along a schedule until the goal is met.
    Ramp,
    /// Full case-study pipeline.
    CaseStudy,
    /// Cross-check steady states, gradients and experiments.
    Verify,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum MModeArg {
    Euclidean,
    PerEdge,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum SourceArg {
    Oracle,
    Simulate,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Simulate => Command::Simulate,
            Cmd::Experiment => Command::Experiment,
            Cmd::EstimateM => Command::EstimateM,
            Cmd::Synthesize => Command::Synthesize,
            Cmd::Iterate => Command::Iterate,
            Cmd::Ramp => Command::Ramp,
            Cmd::CaseStudy => Command::CaseStudy,
            Cmd::Verify => Command::Verify,
        }
    }
}

fn overrides(c: &Common) -> Overrides {
    Overrides {
        seed: c.seed,
        m_mode: c.m_mode.map(|m| match m {
            MModeArg::Euclidean => "euclidean".into(),
            MModeArg::PerEdge => "per-edge".into(),
        }),
        steady_state: c.steady_state.map(|s| match s {
            SourceArg::Oracle => "oracle".into(),
            SourceArg::Simulate => "simulate".into(),
        }),
        dt: c.dt,
        t_max: c.t_max,
        h: c.h,
        max_iter: c.max_iter,
        alpha: c.alpha,
    }
}

fn run(cli: &Cli) -> Result<bool> {
    let ov = overrides(&cli.common);
    let scenario = match &cli.common.scenario {
        Some(p) => parse_scenario(p, &ov)?,
        None => Scenario::from_config(parse_config(CASE_STUDY)?, &ov)?,
    };
    let outcome = run_command(cli.command.into(), &scenario, &cli.common.out)?;
    println!("{}", serde_json::to_string_pretty(&outcome.summary).expect("json serializes"));
    Ok(outcome.passed)
}

fn report(err: &Error, out: &PathBuf) {
    let doc = serde_json::to_string_pretty(&error_json(err)).expect("json serializes");
    eprintln!("{doc}");
    if fs::create_dir_all(out).is_ok() {
        let _ = fs::write(out.join("error.json"), format!("{doc}\n"));
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            report(&e, &cli.common.out);
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
