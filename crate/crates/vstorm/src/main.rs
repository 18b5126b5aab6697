//! Command-line entry point: dataset simulation, training, reconstruction
//! and evaluation. Exit codes: 0 success, 1 numeric failure, 2 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vstorm::config::Config;
use vstorm::pipeline::{
    cmd_make_phantom, cmd_mnist, cmd_reconstruct, cmd_rerun, cmd_train, PipelineError,
};

#[derive(Parser)]
#[command(name = "vstorm", version, about = "Variational manifold learning from undersampled measurements")]
struct Cli {
    /// Configuration file (flat `key = value` lines); flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; results are identical for any value, and
    /// --threads 1 guarantees a fully serial run.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output directory.
    #[arg(long, global = true, default_value = "vstorm_out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a multislice dynamic phantom acquisition into a dataset file.
    MakePhantom,
    /// Train the generative manifold model on a dataset.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// variational | gstorm-baseline
        #[arg(long)]
        mode: Option<String>,
        /// Override the schedule with a single unbinned stage.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Reconstruct a series from a checkpoint by feeding one slice's
    /// latent trajectory through the generator.
    Reconstruct {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset file used for ground-truth metrics.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_name = "Z")]
        source_slice: Option<usize>,
        /// Sample latents instead of using the posterior mean.
        #[arg(long)]
        sample: bool,
    },
    /// Incomplete-data digit experiment: train from masked noisy images,
    /// then emit reconstructions and the latent-manifold montage.
    Mnist {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Re-execute a run from its manifest.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn build_config(cli: &Cli) -> Result<Config, PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            Config::from_file(path).map_err(|e| PipelineError::Usage(e.to_string()))?
        }
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set("seed", seed);
    }
    match &cli.command {
        Command::Train {
            dataset,
            mode,
            epochs,
        } => {
            if let Some(d) = dataset {
                cfg.set("dataset", d.display());
            }
            if let Some(m) = mode {
                cfg.set("mode", m);
            }
            if let Some(e) = epochs {
                cfg.set("epochs", e);
            }
        }
        Command::Reconstruct {
            checkpoint,
            dataset,
            source_slice,
            sample,
        } => {
            if let Some(c) = checkpoint {
                cfg.set("checkpoint", c.display());
            }
            if let Some(d) = dataset {
                cfg.set("dataset", d.display());
            }
            if let Some(z) = source_slice {
                cfg.set("source_slice", z);
            }
            if *sample {
                cfg.set("sample", true);
            }
        }
        Command::Mnist { epochs } => {
            if let Some(e) = epochs {
                cfg.set("epochs", e);
            }
        }
        Command::MakePhantom | Command::Rerun { .. } => {}
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global()
            .map_err(|e| PipelineError::Runtime(e.to_string()))?;
    }
    let cfg = build_config(cli)?;
    match &cli.command {
        Command::MakePhantom => cmd_make_phantom(&cfg, &cli.out).map(|_| ()),
        Command::Train { .. } => cmd_train(&cfg, &cli.out).map(|_| ()),
        Command::Reconstruct { .. } => cmd_reconstruct(&cfg, &cli.out).map(|_| ()),
        Command::Mnist { .. } => cmd_mnist(&cfg, &cli.out).map(|_| ()),
        Command::Rerun { manifest } => cmd_rerun(manifest, &cli.out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(PipelineError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(PipelineError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
