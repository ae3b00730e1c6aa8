use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use quantfl::commands::{self, SweepAxis, OUT_DIR_ENV};
use quantfl::config::{self, Config, PRESETS};
use quantfl::exec::Parallel;
use quantfl::AppError;

/// Federated-learning simulator with layer-wise bucketed update quantisation
/// and exact communication accounting.
#[derive(Debug, Parser)]
#[command(name = "quantfl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Source {
    /// Configuration file (TOML).
    config: Option<PathBuf>,
    /// Use a shipped preset instead of a file.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Override the root seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv, summary.json, manifest.json.
    Run {
        #[command(flatten)]
        source: Source,
        /// Output directory [default: config out_dir, then $QUANTFL_OUT_DIR/<name>, then runs/<name>].
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Print the per-client, per-round communication cost table.
    Cost {
        #[command(flatten)]
        source: Source,
        /// Emit CSV instead of a text table.
        #[arg(long)]
        csv: bool,
    },
    /// Run a cross product of configurations and aggregate over seeds.
    Sweep {
        #[command(flatten)]
        source: Source,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// List presets, or print one.
    Presets { name: Option<String> },
}

fn load(source: &Source) -> Result<(Config, String), AppError> {
    let (cfg, label) = match (&source.config, &source.preset) {
        (Some(path), None) => (config::load_config(path)?, path.display().to_string()),
        (None, Some(name)) => (config::load_preset(name)?, format!("preset:{name}")),
        _ => return Err(AppError::Usage("give a config file or --preset <name>".into())),
    };
    Ok(match source.seed {
        Some(seed) => (cfg.with_seed(seed), label),
        None => (cfg, label),
    })
}

fn out_dir(flag: &Option<PathBuf>, cfg: &Config) -> PathBuf {
    let env = std::env::var_os(OUT_DIR_ENV).map(PathBuf::from);
    commands::resolve_out_dir(flag.as_deref(), cfg, env.as_deref())
}

fn execute(cli: Cli) -> Result<(), AppError> {
    let argv: Vec<String> = std::env::args().collect();
    match cli.command {
        Command::Run { source, out_dir: flag } => {
            let (cfg, label) = load(&source)?;
            let dir = out_dir(&flag, &cfg);
            let s = commands::cmd_run(&cfg, &dir, &label, argv, &Parallel)?;
            println!(
                "{}: {} rounds, final test accuracy {:.4}, {} bits ({}% below uncompressed)",
                s.name, s.rounds, s.final_test_accuracy, s.total_bits, s.reduction_percent
            );
            println!("wrote {}", dir.display());
        }
        Command::Cost { source, csv } => {
            let (cfg, _) = load(&source)?;
            let rows = commands::cost_table(&cfg)?;
            if csv {
                print!("{}", String::from_utf8_lossy(&commands::cost_csv(&rows)?));
            } else {
                print!("{}", commands::render_cost_table(&cfg, &rows));
            }
        }
        Command::Sweep { source, axis, out_dir: flag } => {
            let (cfg, label) = load(&source)?;
            let dir = out_dir(&flag, &cfg);
            let outcome = commands::cmd_sweep(&cfg, axis, &dir, &label, argv)?;
            for r in &outcome.rows {
                println!(
                    "{}={:<10} runs {:>2}  test accuracy {:.4} ± {:.4}  bits {:.0}",
                    r.axis, r.value, r.runs, r.final_test_accuracy_mean, r.final_test_accuracy_std, r.total_bits_mean
                );
            }
            println!("wrote {}", dir.display());
        }
        Command::Presets { name: None } => {
            for (name, _) in PRESETS {
                println!("{name}");
            }
        }
        Command::Presets { name: Some(name) } => match config::preset(&name) {
            Some(text) => print!("{text}"),
            None => return Err(AppError::Usage(format!("unknown preset {name}"))),
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
