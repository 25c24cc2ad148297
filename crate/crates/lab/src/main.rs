use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fbsde_lab::acceptance::run_acceptance;
use fbsde_lab::output::check_line;
use fbsde_lab::{replay, run, LabError, RunConfig, Verdict};

#[derive(Parser)]
#[command(name = "fbsde-lab", version, about = "Seeded FBSDE experiments with replayable manifests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run { config: PathBuf },
    /// Re-run a stored run and compare its files byte for byte.
    Replay { manifest: PathBuf },
    /// Run the full acceptance suite and print the criteria table.
    Accept,
}

/// 0: success; 1: a check failed or a replay differs; 2: error.
fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn execute(cmd: Command) -> Result<bool, LabError> {
    match cmd {
        Command::Run { config } => {
            let text = std::fs::read_to_string(&config).map_err(|e| LabError::io(&config, e))?;
            let cfg = RunConfig::from_toml(&text)?;
            let rec = run(&cfg)?;
            for c in &rec.outcome.checks {
                println!("{}", check_line(c));
            }
            println!("run directory: {}", rec.dir.display());
            Ok(rec.manifest.passed())
        }
        Command::Replay { manifest } => {
            let rep = replay(&manifest)?;
            if rep.config_changed {
                println!("note: config.toml no longer matches the manifest's config digest");
            }
            match &rep.verdict {
                Verdict::Identical => println!("identical"),
                Verdict::Differs { files } if files.is_empty() => println!("differs: artifact version changed"),
                Verdict::Differs { files } => println!("differs: {}", files.join(", ")),
            }
            Ok(rep.identical())
        }
        Command::Accept => {
            let results = run_acceptance(|r| println!("{}", r.details()));
            let passed = results.iter().filter(|r| r.passed()).count();
            println!("\n{passed}/{} criteria passed", results.len());
            Ok(passed == results.len())
        }
    }
}
