use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gridfree_cli::{run, RunOptions};

#[derive(Parser)]
#[command(name = "gridfree", version, about = "Run a walk-on-spheres experiment")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (1 gives the serial path).
        #[arg(long)]
        threads: Option<usize>,
        /// Output directory, overriding the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let Cmd::Run {
        config,
        seed,
        threads,
        out,
    } = cli.command;
    match run(&config, &RunOptions { seed, threads, out }) {
        Ok(s) => {
            println!("wrote {} files to {}", s.files.len(), s.output.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("gridfree: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
