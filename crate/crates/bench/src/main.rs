use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vqp_bench::metrics::write_csv;
use vqp_bench::{check, scenarios, Baseline, Mode, Scenario, ScenarioConfig};
use vqp_core::config::PRESETS;

#[derive(Parser)]
#[command(name = "bench", about = "Virtualized-QP fabric simulator scenarios")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and write its metrics as CSV.
    Run(RunArgs),
    /// Cost-model presets.
    Presets {
        #[command(subcommand)]
        cmd: PresetCmd,
    },
    /// Run the acceptance suite; exits nonzero if any criterion fails.
    Check,
}

#[derive(Subcommand)]
enum PresetCmd {
    List,
}

#[derive(Parser)]
struct RunArgs {
    #[arg(long)]
    scenario: Scenario,
    #[arg(long, default_value = "default")]
    preset: String,
    #[arg(long)]
    clients: Option<u64>,
    #[arg(long)]
    servers: Option<u64>,
    #[arg(long)]
    payload: Option<u64>,
    /// k (krcore), v (verbs) or l (lite)
    #[arg(long, default_value = "k")]
    baseline: Baseline,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "sync")]
    mode: Mode,
    /// key=value overrides applied on top of the preset
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(a: RunArgs) -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = ScenarioConfig::new(a.scenario, a.baseline, &a.preset)?;
    if let Some(p) = &a.config {
        cfg.cost.apply_text(&fs::read_to_string(p)?)?;
    }
    cfg.clients = a.clients.unwrap_or(cfg.clients);
    cfg.servers = a.servers.unwrap_or(cfg.servers);
    cfg.payload = a.payload.unwrap_or(cfg.payload);
    cfg.seed = a.seed;
    cfg.mode = a.mode;
    let rows = scenarios::run(&cfg)?;
    match &a.out {
        Some(p) => write_csv(fs::File::create(p)?, &rows)?,
        None => write_csv(std::io::stdout().lock(), &rows)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match Cli::parse().cmd {
        Cmd::Run(a) => match run(a) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
        Cmd::Presets { cmd: PresetCmd::List } => {
            for (name, desc) in PRESETS {
                println!("{name:<10} {desc}");
            }
            ExitCode::SUCCESS
        }
        Cmd::Check => {
            let results = check::run_all();
            for c in &results {
                println!("{c}");
            }
            if results.iter().all(|c| c.pass) {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
