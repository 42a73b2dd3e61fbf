use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nesy_har::cli::{self, Failure};

/// Context-aware activity recognition with symbolic knowledge.
#[derive(Parser)]
#[command(name = "nesy-har", version)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the activities consistent with a context state.
    Reason {
        #[arg(long)]
        rules: PathBuf,
        /// Comma-separated `dimension=value` predicates; empty for no context.
        #[arg(long, default_value = "")]
        state: String,
    },
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long)]
        rules: PathBuf,
        /// TOML with `[generator]` and `[discretization]` tables.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment grid from a TOML config.
    Run { config: PathBuf },
    /// Finite-difference check of the network and loss gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Classify every window of a dataset with a saved model.
    Classify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        rules: Option<PathBuf>,
    },
    /// Report how many labeled windows the rules call consistent.
    Audit {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        rules: PathBuf,
    },
}

fn dispatch(command: Command) -> Result<(), Failure> {
    let mut out = std::io::stdout().lock();
    match command {
        Command::Reason { rules, state } => cli::cmd_reason(&rules, &state, &mut out),
        Command::Synth { rules, config, out: dir } => cli::cmd_synth(&rules, config.as_deref(), &dir, &mut out),
        Command::Run { config } => cli::cmd_run(&config, &mut out).map(drop),
        Command::Gradcheck { seed, trials } => cli::cmd_gradcheck(seed, trials, &mut out).map(drop),
        Command::Classify { model, samples, rules } => {
            cli::cmd_classify(&model, &samples, rules.as_deref(), &mut out).map(drop)
        }
        Command::Audit { dataset, rules } => cli::cmd_audit(&dataset, &rules, &mut out).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
