//! `hybres` — deterministic reduced-order study tool for a grid / GFM / GFL
//! three-machine system with multi-mode control switching.
//!
//! One scenario file drives every subcommand; artifacts land in `--out`
//! along with a manifest of content hashes. Exit codes: 0 success, 1 usage
//! or scenario errors, 2 model breakdown (with `diagnostic.json`).

mod artifacts;
mod commands;
mod scenario;
mod svg;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "hybres",
    version,
    about = "Reduced-order transient-stability toolkit for a grid/GFM/GFL three-machine system"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Map the self-consistent control combination over the angle plane
    /// for all three network stages; also exports the reduced matrices.
    Regions(CommonArgs),
    /// Extract and partition the equilibrium contour sets on the postfault
    /// network, locating the stable and abnormal equilibria.
    Equilibria(CommonArgs),
    /// Integrate the switched dynamics through the fault schedule from the
    /// pre-fault equilibrium.
    Simulate(CommonArgs),
    /// Sweep the two PLL damping coefficients over the angle plane on the
    /// postfault network, with zero contours and braking masks.
    #[command(name = "damping-map")]
    DampingMap(CommonArgs),
    /// Simulate, then test the post-disturbance window against the
    /// equilibrium-set geometry for the dominant-instability verdict.
    Classify(CommonArgs),
    /// Simulate, then decompose per-device kinetic/potential/dissipation
    /// energy series with the balance defect.
    Energy(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Scenario file (sectioned key/value TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory for artifacts and the manifest.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Skip SVG presentation artifacts (CSV/JSON are always written).
    #[arg(long)]
    no_svg: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    let (name, args): (&str, &CommonArgs) = match &cli.cmd {
        Cmd::Regions(a) => ("regions", a),
        Cmd::Equilibria(a) => ("equilibria", a),
        Cmd::Simulate(a) => ("simulate", a),
        Cmd::DampingMap(a) => ("damping-map", a),
        Cmd::Classify(a) => ("classify", a),
        Cmd::Energy(a) => ("energy", a),
    };
    let resolved = match scenario::load(&args.scenario) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    for d in &resolved.defaults_applied {
        eprintln!("note: {d}");
    }
    eprintln!(
        "note: pre-fault equilibrium (delta12, delta13) = ({}, {})",
        resolved.sep1.0, resolved.sep1.1
    );
    let with_svg = !args.no_svg;
    let out = args.out.as_path();
    let result = match name {
        "regions" => commands::regions(&resolved, out, with_svg),
        "equilibria" => commands::equilibria(&resolved, out, with_svg),
        "simulate" => commands::simulate(&resolved, out, with_svg),
        "damping-map" => commands::damping_map(&resolved, out, with_svg),
        "classify" => commands::classify(&resolved, out, with_svg),
        "energy" => commands::energy(&resolved, out, with_svg),
        _ => unreachable!(),
    };
    match result {
        Ok(manifest) => {
            println!(
                "{name}: {} artifacts in {} (manifest.json)",
                manifest.artifacts.len(),
                out.display()
            );
            for d in &manifest.diagnostics {
                println!("  {d}");
            }
            ExitCode::SUCCESS
        }
        Err(err) => match err.downcast_ref::<commands::Breakdown>() {
            Some(b) => {
                let diag = artifacts::Diagnostic {
                    tool: "hybres".into(),
                    version: env!("CARGO_PKG_VERSION").into(),
                    subcommand: name.into(),
                    error: b.error.clone(),
                    detail: b.detail.clone(),
                };
                if let Err(e) = artifacts::write_diagnostic(out, &diag) {
                    eprintln!("error: writing diagnostic: {e:#}");
                }
                eprintln!("error: {b}");
                ExitCode::from(2)
            }
            None => {
                eprintln!("error: {err:#}");
                ExitCode::from(1)
            }
        },
    }
}

/// Cap grid-sweep parallelism from HYBRES_THREADS (>= 1).
fn configure_threads() -> Result<(), String> {
    match std::env::var("HYBRES_THREADS") {
        Err(_) => Ok(()),
        Ok(v) => {
            let n: usize = v
                .parse()
                .map_err(|_| format!("HYBRES_THREADS must be a positive integer, got {v:?}"))?;
            if n == 0 {
                return Err("HYBRES_THREADS must be >= 1".into());
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| format!("thread pool: {e}"))
        }
    }
}
