use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use warm_bench::{validate_config, BenchError, ExperimentConfig, Preset};

/// Runs desk-scale weight-averaged reward model experiments.
#[derive(Debug, Parser)]
#[command(name = "warm-bench", version)]
struct Cli {
    /// Preset name, e.g. exp-lmc. See the README for the list.
    #[arg(long, required_unless_present = "check")]
    preset: Option<String>,
    /// JSON config; every field is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces the first seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Concurrent fine-tunings.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    jobs: u32,
    /// Only validate; prints the config with defaults filled in.
    #[arg(long)]
    check: bool,
}

fn run(cli: Cli) -> Result<(), BenchError> {
    let mut cfg = match &cli.config {
        Some(p) => validate_config(p).map_err(BenchError::Config)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        match cfg.seeds.first_mut() {
            Some(first) => *first = s,
            None => cfg.seeds.push(s),
        }
        let errs = cfg.violations();
        if !errs.is_empty() {
            return Err(BenchError::Config(errs));
        }
    }
    if cli.check {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let preset: Preset = cli.preset.as_deref().unwrap_or_default().parse()?;
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("warm-out").join(preset.name()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs as usize)
        .build()
        .map_err(|e| BenchError::Io(std::io::Error::other(e)))?;
    let manifest = pool.install(|| warm_bench::run_preset(preset, &cfg, &out))?;
    eprintln!("{}: wrote {} files to {}", preset, manifest.files.len() + 1, out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
