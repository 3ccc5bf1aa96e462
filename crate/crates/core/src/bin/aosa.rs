use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aosa::cli;

#[derive(Parser)]
#[command(name = "aosa", version, about = "Active open-set annotation experiments")]
struct Args {
    /// Root under which runs without an explicit output directory are written.
    #[arg(long, global = true, env = "AOSA_OUTPUT_ROOT")]
    output_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic feature store from a TOML spec.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the query protocol for every seed in a run config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run only this seed instead of the configured list.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Check the detection-error bound by simulation over a grid.
    Bound {
        /// Grid file; the built-in grid is used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate final-round metrics of every run under a directory.
    Report {
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn print_error(err: &dyn std::error::Error) {
    eprintln!("error: {err}");
    let mut source = err.source();
    while let Some(s) = source {
        eprintln!("  caused by: {s}");
        source = s.source();
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    let root = args.output_root.as_deref();
    let result = match &args.command {
        Command::Synth { config, out } => cli::cmd_synth(config, out).map(|()| ExitCode::SUCCESS),
        Command::Run {
            config,
            out,
            seed_override,
        } => cli::cmd_run(config, out.as_deref(), *seed_override, root).map(|run| {
            for s in run.seeds.iter().filter(|s| s.truncated) {
                eprintln!("note: seed {} stopped early: the pool emptied", s.seed);
            }
            ExitCode::SUCCESS
        }),
        Command::Bound { config, out } => {
            let out = out
                .clone()
                .unwrap_or_else(|| root.unwrap_or(std::path::Path::new(".")).join("bound.csv"));
            cli::cmd_bound(config.as_deref(), &out).map(|rows| {
                let failed = rows.iter().filter(|r| !r.pass).count();
                if failed > 0 {
                    eprintln!("bound violated in {failed} of {} rows", rows.len());
                    ExitCode::from(2)
                } else {
                    ExitCode::SUCCESS
                }
            })
        }
        Command::Report { dir, out } => cli::cmd_report(dir, out.as_deref()).map(|table| {
            if out.is_none() {
                print!("{table}");
            }
            ExitCode::SUCCESS
        }),
    };
    result.unwrap_or_else(|e| {
        print_error(&e);
        ExitCode::FAILURE
    })
}
