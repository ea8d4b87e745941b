use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gfpl_sim::runner::load_dataset;
use gfpl_sim::{io, run_experiment, sweep, ExperimentConfig, SimError};

#[derive(Parser)]
#[command(name = "gfpl", version, about = "Federated prototype learning simulator")]
struct Cli {
    /// Output root, overriding `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Experiment seed, overriding `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run { config: PathBuf },
    /// Run one experiment per value of a numeric config field.
    Sweep {
        config: PathBuf,
        /// Dotted field path, e.g. `federation.train.lambda`.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        values: Vec<f64>,
    },
    /// Write the configured dataset as CSV.
    Export { config: PathBuf, csv: PathBuf },
}

fn load(cli: &Cli, path: &Path) -> Result<ExperimentConfig, SimError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn main_inner(cli: &Cli) -> Result<(), SimError> {
    match &cli.command {
        Command::Run { config } => {
            let out = run_experiment(load(cli, config)?)?;
            let last = out.result.history.last();
            println!("run directory: {}", out.dir.display());
            if let Some(m) = last {
                println!("final mean accuracy: {:.4} (std {:.4})", m.mean_accuracy, m.std_accuracy);
            }
            println!(
                "scalars exchanged: {} up, {} down over {} interaction rounds",
                out.result.ledger.upload_total(),
                out.result.ledger.download_total(),
                out.result.ledger.interaction_rounds()
            );
        }
        Command::Sweep { config, param, values } => {
            let out = sweep(&load(cli, config)?, param, values)?;
            println!("sweep directory: {}", out.dir.display());
            println!("{:>12}  {:>10}  {:>12}", param, "final_acc", "scalars");
            for row in &out.rows {
                println!("{:>12}  {:>10.4}  {:>12}", row.value, row.final_mean_acc, row.total_scalars);
            }
        }
        Command::Export { config, csv } => {
            let cfg = load(cli, config)?.resolve()?;
            let ds = load_dataset(&cfg)?;
            let file = std::fs::File::create(csv).map_err(|e| SimError::io(csv, e))?;
            io::write_dataset_csv(&ds, std::io::BufWriter::new(file))?;
            println!("wrote {} samples to {}", ds.len(), csv.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match main_inner(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                SimError::Config { .. } | SimError::Parse(_) | SimError::Sweep(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
