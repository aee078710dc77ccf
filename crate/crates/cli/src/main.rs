use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use crowdkit_cli::{
    cmd_flows, cmd_groups, cmd_segment, cmd_simulate, cmd_validate, CliError, Overrides,
    PipelineConfig, RunReport,
};

#[derive(Parser)]
#[command(name = "crowdkit", version, about = "Crowd video analytics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Frame directory, trajectory CSV or scenario file, depending on the command.
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Dominant flow segmentation and people counting.
    Segment,
    /// Tracks, dominant flows, sources and sinks.
    Flows,
    /// Pedestrian groups from trajectories.
    Groups,
    /// Run a crowd scenario and render it.
    Simulate,
    /// Simulate the spiral scenario and check the recovered flow.
    Validate,
}

fn run(cli: &Cli) -> Result<RunReport, CliError> {
    let overrides = Overrides {
        input: cli.input.clone(),
        output: cli.output.clone(),
        seed: cli.seed,
    };
    let cfg = PipelineConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Segment => cmd_segment(&cfg),
        Command::Flows => cmd_flows(&cfg),
        Command::Groups => cmd_groups(&cfg),
        Command::Simulate => cmd_simulate(&cfg),
        Command::Validate => cmd_validate(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(report) => {
            println!("{}", serde_json::to_string_pretty(&report).expect("reports serialize"));
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                for f in &report.failures {
                    eprintln!("FAIL: {f}");
                }
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
