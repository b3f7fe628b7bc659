use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use worldforge_cli::{report, run, PipelineManifest};

/// Deterministic batch pipelines of the worldforge data engine.
#[derive(Parser)]
#[command(name = "worldforge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a manifest and run its pipeline.
    Run { manifest: PathBuf },
    /// Check a manifest without running it.
    Validate { manifest: PathBuf },
    /// Verify and summarise an output directory.
    Report { dir: PathBuf },
}

fn output_root() -> Option<PathBuf> {
    std::env::var_os("WORLDFORGE_OUTPUT_ROOT").filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("WORLDFORGE_THREADS") {
        let n: usize = v.parse().with_context(|| format!("WORLDFORGE_THREADS={v:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    init_threads()?;
    match cli.command {
        Command::Run { manifest } => {
            let m = PipelineManifest::load(&manifest, output_root().as_deref())?;
            let out = run(&m).with_context(|| format!("running {}", manifest.display()))?;
            println!("{}", out.display());
        }
        Command::Validate { manifest } => {
            let m = PipelineManifest::load(&manifest, output_root().as_deref())?;
            m.validate()?;
            println!("ok: {} -> {}", m.pipeline.name(), m.output.display());
        }
        Command::Report { dir } => print!("{}", report(&dir)?),
    }
    Ok(())
}
