use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use segqa::Variant;
use segqa_cli::{
    cmd_eval, cmd_generate, cmd_sweep, cmd_train, format_table, CliError, EvalOptions, RunOptions, Runner,
    SweepOptions,
};

/// Segment-localized video QA: synthetic data, training, evaluation and λ sweeps.
#[derive(Parser, Debug)]
#[command(name = "segqa", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write the synthetic task's train/val feature files and manifests.
    Generate(Common),
    /// Train one model; writes config, history, checkpoint and summary.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides the config's variant (full, no_ql, no_lql, soft_ql).
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Evaluate a checkpoint on a feature manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Config the checkpoint must match.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for the report and per-sample predictions.
        #[arg(long, env = "SEGQA_OUT")]
        out: Option<PathBuf>,
    },
    /// Bundled runs over a λ grid plus one alternating run.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated λ values; defaults to the built-in grid.
        #[arg(long, value_delimiter = ',')]
        lambda_grid: Vec<f64>,
        /// Run the grid as parallel child processes.
        #[arg(long)]
        parallel: bool,
        /// Concurrent child processes with --parallel.
        #[arg(long, default_value_t = 4)]
        jobs: usize,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run config; all sections optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the synthetic task seed (generate) or the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root.
    #[arg(long, env = "SEGQA_OUT")]
    out: Option<PathBuf>,
    /// No per-epoch progress on stderr.
    #[arg(long, short)]
    quiet: bool,
}

impl Common {
    fn options(self, variant: Option<Variant>) -> RunOptions {
        RunOptions {
            config: self.config,
            seed: self.seed,
            out: self.out,
            variant,
            quiet: self.quiet,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Cmd::Generate(common) => {
            for p in cmd_generate(&common.options(None))? {
                println!("{}", p.display());
            }
        }
        Cmd::Train { common, variant } => {
            let r = cmd_train(&common.options(variant))?;
            println!("{}", serde_json::to_string_pretty(&r.summary)?);
            eprintln!("wrote {}", r.out.display());
        }
        Cmd::Eval {
            checkpoint,
            manifest,
            config,
            out,
        } => {
            let r = cmd_eval(&EvalOptions {
                checkpoint,
                manifest,
                config,
                out,
            })?;
            println!("{}", serde_json::to_string_pretty(&r.report)?);
        }
        Cmd::Sweep {
            common,
            lambda_grid,
            parallel,
            jobs,
        } => {
            let runner = if parallel {
                let exe = std::env::current_exe()
                    .map_err(|e| CliError::Runtime(format!("cannot locate own executable: {e}")))?;
                Runner::Processes { exe, jobs }
            } else {
                Runner::Sequential
            };
            let rows = cmd_sweep(&SweepOptions {
                run: common.options(None),
                lambda_grid,
                runner,
            })?;
            print!("{}", format_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
