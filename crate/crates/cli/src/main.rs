//! `sitevae` — command-line driver for dataset preparation, training,
//! the three experiment sweeps, latent export, and result reporting.
//!
//! Every command is driven by a TOML experiment config (`--config`);
//! `--out`, `--seed`, `--jobs`, and `--paper-scale` override it from the
//! command line. Exit codes: 0 success, 2 configuration error,
//! 3 numerical abort, 4 ingestion error, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sitevae_core::data::ConnectomeDataset;
use sitevae_core::harness::{
    export_latents, run_anneal_sweep, run_capacity_sweep, run_class_sweep, run_single,
    summarize_results, DatasetConfig, ExperimentConfig, SweepOutcome, RESULTS_FILE,
};
use sitevae_core::model::save_checkpoint;
use sitevae_core::parallel::configure_threads;
use sitevae_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "sitevae",
    version,
    about = "Hybrid continuous-discrete VAE experiments on connectome-style count data"
)]
struct Cli {
    /// Experiment configuration file (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Seed override: the dataset seed for `generate`, the run seed for
    /// `train`, and a single-seed replacement for sweep seed lists.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory override.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Worker threads for sweeps and restarts (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    /// Switch to the full-scale regime (2500 epochs, batch 512,
    /// 5000-iteration anneal, wide hidden layers).
    #[arg(long, global = true)]
    paper_scale: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic dataset and cache it.
    Generate,
    /// Ingest the configured matrix directory and cache it.
    Ingest,
    /// Train one model exactly as the config describes.
    Train,
    /// Hinge-objective sweep over continuous capacities.
    SweepCapacity,
    /// Method comparison across discrete class counts (with t-tests).
    SweepClasses,
    /// Arch-annealed sweep over annealing lengths.
    SweepAnneal,
    /// Export latent representations from a trained checkpoint.
    ExportLatents {
        /// Checkpoint written by `train` (or the trainer's schedule).
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
    },
    /// Print a median-over-seeds summary of the results file.
    Report,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config <FILE> is required for this command".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    if cli.paper_scale {
        cfg.apply_paper_scale();
    }
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn cache_dataset(cfg: &ExperimentConfig, ds: &ConnectomeDataset) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.output.dir).map_err(|e| Error::io_at(e, &cfg.output.dir))?;
    let path = cfg.output.dir.join("dataset.bin");
    ds.save_cache(&path)?;
    Ok(path)
}

fn print_sweep(name: &str, outcome: &SweepOutcome) {
    println!(
        "{name}: {} new rows, {} resumed -> {}",
        outcome.rows.len(),
        outcome.skipped,
        outcome.results_path.display()
    );
}

fn run(cli: Cli) -> Result<()> {
    configure_threads(cli.jobs)?;
    match &cli.command {
        Command::Generate => {
            let mut cfg = load_config(&cli)?;
            let DatasetConfig::Synthetic(ref mut synth) = cfg.dataset else {
                return Err(Error::Config(
                    "generate requires dataset.kind = \"synthetic\"".into(),
                ));
            };
            if let Some(seed) = cli.seed {
                synth.seed = seed;
            }
            let ds = cfg.dataset.load()?;
            let path = cache_dataset(&cfg, &ds)?;
            println!(
                "generated {} subjects x {} features, {} sites -> {}",
                ds.n,
                ds.d,
                ds.n_sites,
                path.display()
            );
        }
        Command::Ingest => {
            let cfg = load_config(&cli)?;
            if !matches!(cfg.dataset, DatasetConfig::Ingest { .. }) {
                return Err(Error::Config(
                    "ingest requires dataset.kind = \"ingest\"".into(),
                ));
            }
            let ds = cfg.dataset.load()?;
            let path = cache_dataset(&cfg, &ds)?;
            println!(
                "ingested {} subjects x {} features, {} sites -> {}",
                ds.n,
                ds.d,
                ds.n_sites,
                path.display()
            );
        }
        Command::Train => {
            let cfg = load_config(&cli)?;
            let seed = cli.seed.unwrap_or(cfg.train.seed);
            let run = run_single(&cfg, seed)?;
            std::fs::create_dir_all(&cfg.output.dir)
                .map_err(|e| Error::io_at(e, &cfg.output.dir))?;
            let ck = cfg.output.dir.join("model.bin");
            save_checkpoint(&ck, &run.model, run.report.iterations, &[])?;
            let log_path = cfg.output.dir.join("training_log.csv");
            run.report.log.write_csv(&log_path)?;
            println!("{}", serde_json::to_string_pretty(&run.summary)?);
            println!("checkpoint -> {}", ck.display());
            println!("training log -> {}", log_path.display());
        }
        Command::SweepCapacity => {
            let cfg = load_config(&cli)?;
            print_sweep("capacity_sweep", &run_capacity_sweep(&cfg)?);
        }
        Command::SweepClasses => {
            let cfg = load_config(&cli)?;
            print_sweep("class_sweep", &run_class_sweep(&cfg)?);
            let ttests = cfg.output.dir.join("ttests.json");
            if ttests.exists() {
                println!("t-tests -> {}", ttests.display());
            }
        }
        Command::SweepAnneal => {
            let cfg = load_config(&cli)?;
            print_sweep("anneal_sweep", &run_anneal_sweep(&cfg)?);
        }
        Command::ExportLatents { checkpoint } => {
            let cfg = load_config(&cli)?;
            let out_dir = cli.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
            let (latents, latents2d) = export_latents(&cfg, checkpoint, &out_dir)?;
            println!("latents -> {}", latents.display());
            println!("latents 2d -> {}", latents2d.display());
        }
        Command::Report => {
            let cfg = load_config(&cli)?;
            print!("{}", summarize_results(&cfg.output.dir.join(RESULTS_FILE))?);
        }
    }
    Ok(())
}
