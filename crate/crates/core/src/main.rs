use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::Parser;

use cms2d::config::{ConfigError, DepthSpec, Mode, RunConfig};
use cms2d::run::{self, report_error, RunError, RunOptions};

#[derive(Debug, Parser)]
#[command(
    name = "cms2d",
    version,
    about = "Reduced-order frequency response for 2D elasticity with adaptive modal error control"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,

    /// Override the configured mode: solve | estimate | adapt-goal |
    /// adapt-energy | sweep.
    #[arg(long, value_parser = Mode::from_str)]
    mode: Option<Mode>,

    /// Directory for report.csv and friends.
    #[arg(long, default_value = ".")]
    out: PathBuf,

    /// Write the mesh as mesh.txt.
    #[arg(long)]
    export_mesh: bool,

    /// Write K, M, b in Matrix Market format.
    #[arg(long)]
    export_system: bool,

    /// Write the reduced model (km_diag, mm, bm, vm) in Matrix Market format.
    #[arg(long)]
    export_reduced: bool,

    /// Directory for cached modal bases (reused across runs).
    #[arg(long)]
    basis_cache: Option<PathBuf>,

    /// Override the reference solve: none | full.
    #[arg(long)]
    reference: Option<String>,

    /// Compute S(omega) from the full-order spectrum.
    #[arg(long)]
    full_spectrum_s: bool,

    /// Override the dual enrichment depth: an integer offset or "full".
    #[arg(long)]
    dual_depth: Option<String>,

    /// Override the eigensolver seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_depth(text: &str) -> Result<DepthSpec, ConfigError> {
    let spec = match text.parse::<usize>() {
        Ok(k) => DepthSpec::Offset(k),
        Err(_) => DepthSpec::Word(text.to_string()),
    };
    spec.resolve("adapt.dual_depth")?;
    Ok(spec)
}

fn execute(cli: Cli) -> Result<i32, RunError> {
    let mut cfg = RunConfig::from_path(&cli.config)?;
    if let Some(mode) = cli.mode {
        cfg.mode = mode;
    }
    if let Some(reference) = cli.reference {
        cfg.solver.reference = reference;
    }
    if cli.full_spectrum_s {
        cfg.solver.full_spectrum_s = true;
    }
    if let Some(seed) = cli.seed {
        cfg.solver.seed = seed;
    }
    if let Some(depth) = &cli.dual_depth {
        cfg.adapt.dual_depth = Some(parse_depth(depth)?);
    }
    cfg.validate()?;

    let opts = RunOptions {
        out_dir: cli.out,
        export_mesh: cli.export_mesh,
        export_system: cli.export_system,
        export_reduced: cli.export_reduced,
        basis_cache: cli.basis_cache,
    };
    let outcome = run::run(&cfg, &opts)?;
    for path in &outcome.artifacts {
        println!("wrote {}", path.display());
    }
    Ok(outcome.exit_code)
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            report_error(&e);
            ExitCode::from(1)
        }
    }
}
