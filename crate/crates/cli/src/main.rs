use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pfsnap::pipeline::{self, FeMode, PipelineConfig, SpiVariant, WeightMode};
use pfsnap::synth::{self, SynthConfig};
use pfsnap::{Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "pfsnap", version, about = "Food-security probability and participation-effect pipeline")]
struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    weights: Option<Weights>,
    #[arg(long, global = true, value_enum)]
    spi: Option<Spi>,
    #[arg(long, global = true, value_enum)]
    fe: Option<Fe>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate, deflate and winsorize the panel; write a summary.
    Ingest,
    /// Build both policy indices.
    Spi,
    /// Construct PFS and calibrate insecurity cutoffs.
    Pfs,
    /// Fit the configured participation-effect estimators.
    Estimate,
    /// Quantile profile and first stage by PFS bin.
    Quantile,
    /// Write a synthetic input bundle.
    Simulate {
        /// Generator parameters (TOML); defaults otherwise.
        #[arg(long)]
        synth: Option<PathBuf>,
    },
    /// Check outputs and write the manifest.
    Report,
    /// Every stage in order.
    Run,
}

#[derive(Clone, Copy, ValueEnum)]
enum Weights {
    Survey,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum Spi {
    Weighted,
    Unweighted,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fe {
    Absorb,
    Mundlak,
}

fn pipeline_config(cli: &Cli) -> Result<PipelineConfig> {
    let path = cli.config.as_deref().ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(w) = cli.weights {
        cfg.weights = match w {
            Weights::Survey => WeightMode::Survey,
            Weights::None => WeightMode::None,
        };
    }
    if let Some(s) = cli.spi {
        cfg.spi = match s {
            Spi::Weighted => SpiVariant::Weighted,
            Spi::Unweighted => SpiVariant::Unweighted,
        };
    }
    if let Some(f) = cli.fe {
        cfg.fe = match f {
            Fe::Absorb => FeMode::Absorb,
            Fe::Mundlak => FeMode::Mundlak,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn simulate(cli: &Cli, synth_path: Option<&Path>) -> Result<serde_json::Value> {
    let mut cfg = match synth_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<SynthConfig>(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => SynthConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("pfsnap_synth"));
    let bundle = synth::generate_panel(&cfg)?;
    synth::write_bundle(&bundle, &out)?;
    Ok(json!({"command": "simulate", "out": out, "rows": bundle.panel.len(), "seed": cfg.seed}))
}

fn execute(cli: &Cli) -> Result<serde_json::Value> {
    let (name, stage_result) = match &cli.command {
        Command::Simulate { synth } => return simulate(cli, synth.as_deref()),
        Command::Ingest => ("ingest", pipeline_config(cli).and_then(|c| pipeline::ingest(&c).map(|_| c))),
        Command::Spi => ("spi", pipeline_config(cli).and_then(|c| pipeline::build_spi(&c).map(|_| c))),
        Command::Pfs => ("pfs", pipeline_config(cli).and_then(|c| pipeline::build_pfs(&c).map(|_| c))),
        Command::Estimate => ("estimate", pipeline_config(cli).and_then(|c| pipeline::estimate(&c).map(|_| c))),
        Command::Quantile => ("quantile", pipeline_config(cli).and_then(|c| pipeline::quantiles(&c).map(|_| c))),
        Command::Report => ("report", pipeline_config(cli).and_then(|c| pipeline::report(&c).map(|_| c))),
        Command::Run => ("run", pipeline_config(cli).and_then(|c| pipeline::run_pipeline(&c).map(|_| c))),
    };
    let cfg = match stage_result {
        Ok(c) => c,
        Err(e) if name == "run" || matches!(e, Error::Config(_)) => return Err(e),
        Err(e) => return Err(e.in_stage(name)),
    };
    Ok(json!({"command": name, "out": cfg.out}))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let detail = match &e {
                Error::Stage { source, .. } => source.to_string(),
                other => other.to_string(),
            };
            let err = json!({"error": {"kind": e.kind(), "stage": e.stage(), "message": detail}});
            eprintln!("{err}");
            ExitCode::FAILURE
        }
    }
}
