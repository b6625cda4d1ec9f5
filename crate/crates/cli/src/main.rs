use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use noisybp_cli::commands::{self, Overrides};
use noisybp_cli::config::{load_spec, ConfigFile};
use noisybp_cli::{CliError, Experiment};

/// Monte Carlo experiments for belief propagation under likelihood and
/// message errors.
#[derive(Debug, Parser)]
#[command(name = "noisybp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment file; the reference experiment when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the configured recipe and write its metric table.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trials: Option<usize>,
        /// Output directory; the CSV is printed when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write SVG charts.
        #[arg(long)]
        plot: bool,
    },
    /// Run blind offline adaptation and write the fusion weights as JSON.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// Window length in slots.
        #[arg(long)]
        window: Option<usize>,
        /// Weights file; printed when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the analytical prediction tables only.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        plot: bool,
    },
    /// Check an experiment file and summarize it.
    Validate {
        #[arg(long)]
        spec: Option<PathBuf>,
    },
}

fn load(spec: &Option<PathBuf>) -> Result<Experiment, CliError> {
    match spec {
        Some(path) => load_spec(path),
        None => ConfigFile::default().resolve(),
    }
}

fn report(written: &commands::Written) {
    for f in &written.files {
        eprintln!("wrote {}", f.display());
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Run {
            common,
            trials,
            out,
            plot,
        } => {
            let mut exp = load(&common.spec)?;
            Overrides {
                trials,
                seed: common.seed,
                out,
                plot,
            }
            .apply(&mut exp)?;
            report(&commands::run(&exp, &mut stdout)?);
        }
        Command::Adapt { common, window, out } => {
            let mut exp = load(&common.spec)?;
            Overrides {
                seed: common.seed,
                ..Overrides::default()
            }
            .apply(&mut exp)?;
            if let Some(w) = window {
                exp.spec.adaptation_window = w;
            }
            let weights = commands::adapt(&exp)?;
            match out {
                Some(path) => {
                    let mut file = std::fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
                    commands::write_weights(&weights, &mut file)?;
                    eprintln!("wrote {}", path.display());
                }
                None => commands::write_weights(&weights, &mut stdout)?,
            }
        }
        Command::Predict { common, out, plot } => {
            let mut exp = load(&common.spec)?;
            Overrides {
                seed: common.seed,
                out,
                plot,
                ..Overrides::default()
            }
            .apply(&mut exp)?;
            report(&commands::predict(&exp, &mut stdout)?);
        }
        Command::Validate { spec } => {
            let exp = load(&spec)?;
            write!(stdout, "{}", commands::validate(&exp)?).map_err(|e| CliError::Runtime(e.to_string()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("noisybp: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
