use clap::{Parser, Subcommand};
use rltricks::config::{parse_override, Preset};
use rltricks::env::DifficultyTier;
use rltricks_cli::run::TrainRequest;
use rltricks_cli::{ablate, report, run, CmdResult};
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "rltricks", version, about = "Critic-free RL tricks on a toy arithmetic task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded arithmetic dataset as JSONL.
    GenData {
        #[arg(long)]
        tier: DifficultyTier,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train one run into a run directory.
    Train {
        #[arg(long)]
        preset: Option<Preset>,
        /// Key/value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override, `key=value`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Per-token clip counts of a run, as CSV.
    InspectClip {
        run: PathBuf,
        #[arg(long, default_value_t = 20)]
        top_k: usize,
    },
    /// Compare runs, as CSV.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Run every cell of a grid and summarize.
    Ablate {
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        force: bool,
    },
}

fn dispatch(command: Command) -> CmdResult {
    let stdout = std::io::stdout().lock();
    match command {
        Command::GenData {
            tier,
            n,
            seed,
            out,
            force,
        } => rltricks_cli::gen_data(tier, n, seed, &out, force),
        Command::Train {
            preset,
            config,
            overrides,
            data,
            seed,
            out,
            force,
        } => {
            let cfg = TrainRequest {
                preset,
                config_file: config,
                data,
                seed,
                overrides,
            }
            .resolve()?;
            run::train(&cfg, &out, force)
        }
        Command::InspectClip { run, top_k } => report::inspect_clip(&run, top_k, stdout),
        Command::Report { runs } => report::report(&runs, stdout),
        Command::Ablate {
            grid,
            out,
            overrides,
            force,
        } => {
            let overrides = overrides
                .iter()
                .map(|o| parse_override(o))
                .collect::<rltricks::Result<Vec<_>>>()?;
            ablate::ablate(&grid, &out, &overrides, force)?;
            let mut stdout = stdout;
            stdout.write_all(&std::fs::read(out.join(ablate::SUMMARY_FILE))?)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
