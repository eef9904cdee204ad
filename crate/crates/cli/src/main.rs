use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use moa_core::experiment::{cmd_ablate, cmd_eval, cmd_inspect, cmd_merge, cmd_train};
use moa_core::{plot, Error, InferenceMode, Result};

/// Mixture-of-adaptations fine-tuning lab.
///
/// Log verbosity is read from MOA_LOG (error, warn, info, debug, trace).
#[derive(Parser, Debug)]
#[command(name = "moa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train adaptation modules; writes checkpoint.ckpt, metrics.csv and loss.svg.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides output.dir in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average every site's modules into one (an M=1 checkpoint).
    Merge {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Test-split accuracy under an inference mode; prints a JSON report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// merge, random_route, fixed_route, ensemble or ensemble(T).
        #[arg(long)]
        mode: String,
        /// Passes for ensemble mode.
        #[arg(long = "T")]
        passes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run an ablation grid; writes a CSV of mean ± std per cell and a chart.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
    },
    /// Summarize a checkpoint's sites and parameter counts.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Render a metrics or ablation CSV as SVG.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out } => {
            let a = cmd_train(&config, out.as_deref())?;
            if let Some(last) = a.run.history.last() {
                println!(
                    "trained {} epochs: loss {:.4}, train accuracy {:.4}, eval accuracy (merged) {:.4}",
                    last.epoch, last.total_loss, last.train_accuracy, last.eval_accuracy
                );
            }
            println!("checkpoint: {}", a.checkpoint.display());
            println!("metrics:    {}", a.metrics.display());
        }
        Command::Merge { input, out } => {
            let ck = cmd_merge(&input, &out)?;
            println!(
                "merged {} sites from {} modules into {}",
                ck.model.sites.len(),
                ck.state.merged_from.unwrap_or(1),
                out.display()
            );
        }
        Command::Eval { ckpt, mode, passes, seed, report } => {
            let mode = InferenceMode::parse(&mode, passes)?;
            let r = cmd_eval(&ckpt, mode, seed)?;
            let json = r.to_json();
            println!("{json}");
            if let Some(path) = report {
                write(&path, &(json + "\n"))?;
            }
        }
        Command::Ablate { grid } => {
            let a = cmd_ablate(&grid)?;
            let ok = a.rows.iter().filter(|r| r.status == "ok").count();
            println!("{} rows ({ok} ok) written to {}", a.rows.len(), a.csv.display());
        }
        Command::Inspect { ckpt } => print!("{}", cmd_inspect(&ckpt)?),
        Command::Plot { csv, out } => {
            let text = std::fs::read_to_string(&csv).map_err(|e| Error::io(&csv, e))?;
            let svg = if text.starts_with("epoch,") {
                plot::history_svg(&text)?
            } else {
                plot::ablation_svg(&text)?
            };
            write(&out, &svg)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MOA_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Training { dump, .. } = &e {
                eprintln!("{dump}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
