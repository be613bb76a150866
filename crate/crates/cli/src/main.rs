use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use streetgaze::commands::{cmd_run, run_stage, Stage};
use streetgaze::error::{CliError, CliResult, EXIT_OK};
use streetgaze::manifest::PipelineManifest;
use streetgaze::simulate::{simulate, SimulationConfig};
use streetgaze_core::stratify::{parse_score_table, stratify_by_score, write_manifest};
use streetgaze_service::ServerConfig;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "streetgaze", version, about = "Gaze-based street-view safety perception analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ManifestArgs {
    /// Pipeline manifest (TOML).
    #[arg(long)]
    manifest: PathBuf,
    /// Overrides the manifest's `output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl ManifestArgs {
    fn load(&self) -> CliResult<PipelineManifest> {
        let mut m = PipelineManifest::load(&self.manifest)?;
        if let Some(dir) = &self.output_dir {
            m.output_dir = dir.clone();
        }
        Ok(m)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run every analysis stage in order.
    Run(ManifestArgs),
    /// Parse gaze logs and detect fixations.
    Ingest(ManifestArgs),
    /// Build per-image attention heatmaps from fixations.
    Heatmap(ManifestArgs),
    /// Compute MoR, MoRH and adjusted MoH tables.
    Metrics(ManifestArgs),
    /// Label images safe, unsafe or ambiguous from pairwise comparisons.
    Group(ManifestArgs),
    /// Compare human heatmaps with CAM heatmaps.
    Compare(ManifestArgs),
    /// Write group means, rankings and the HTML report.
    Report(ManifestArgs),
    /// Select stimuli evenly from high, medium and low score strata.
    Stratify {
        /// CSV with header `image_id,global,sweden`.
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        per_stratum: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output image manifest; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic study and a manifest for it.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the survey HTTP server.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
}

fn stage(stage: Stage, args: &ManifestArgs) -> CliResult<()> {
    let summary = run_stage(stage, &args.load()?)?;
    println!("{}: {summary}", stage.name());
    Ok(())
}

fn stratify(scores: &Path, per_stratum: usize, seed: u64, out: Option<&Path>) -> CliResult<()> {
    let text = fs::read_to_string(scores)
        .map_err(|e| CliError::validation(format!("cannot read {}: {e}", scores.display())))?;
    let s = stratify_by_score(&parse_score_table(&text)?, per_stratum, seed)?;
    let mut buf = Vec::new();
    write_manifest(&mut buf, &s)?;
    match out {
        Some(path) => fs::write(path, buf)?,
        None => std::io::stdout().write_all(&buf)?,
    }
    eprintln!(
        "pools: high {}, medium {}, low {}",
        s.pools.high.len(),
        s.pools.medium.len(),
        s.pools.low.len()
    );
    Ok(())
}

fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Run(args) => {
            let status = cmd_run(&args.load()?)?;
            for (stage, s) in status {
                println!("{}: {}", stage.name(), s.message.unwrap_or_default());
            }
            Ok(())
        }
        Command::Ingest(args) => stage(Stage::Ingest, &args),
        Command::Heatmap(args) => stage(Stage::Heatmap, &args),
        Command::Metrics(args) => stage(Stage::Metrics, &args),
        Command::Group(args) => stage(Stage::Group, &args),
        Command::Compare(args) => stage(Stage::Compare, &args),
        Command::Report(args) => stage(Stage::Report, &args),
        Command::Stratify {
            scores,
            per_stratum,
            seed,
            out,
        } => stratify(&scores, per_stratum, seed, out.as_deref()),
        Command::Simulate { config, out } => {
            let summary = simulate(&SimulationConfig::load(&config)?, &out)?;
            println!(
                "{} images, {} sessions, {} comparisons, {} gaze samples; manifest at {}",
                summary.images,
                summary.sessions,
                summary.comparisons,
                summary.gaze_samples,
                summary.manifest.display()
            );
            Ok(())
        }
        Command::Serve { config } => {
            let cfg = ServerConfig::load(&config)?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(streetgaze_service::http::serve(cfg))?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
