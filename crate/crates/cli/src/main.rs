use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use cubelet_cli::config::{parse_resolution, validate_config, ModelKind, Overrides};
use cubelet_cli::pipeline::{Command, Pipeline};

/// Boids occupancy pipeline: simulate, discretize, graph, predict, evaluate.
#[derive(Parser)]
#[command(name = "cubelet", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Cubelet size `cx,cy,cz`; repeat to sweep several sizes.
    #[arg(long = "resolution", value_parser = parse_resolution)]
    resolutions: Vec<[f64; 3]>,
    #[arg(long, value_enum)]
    model: Option<ModelKind>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    folds: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let overrides = Overrides {
        seed: cli.seed,
        resolutions: cli.resolutions,
        model: cli.model,
        out: cli.out,
        folds: cli.folds,
    };
    let result = validate_config(&cli.config, &overrides).and_then(|cfg| Pipeline::new(cfg).run(cli.command));
    match result {
        Ok(Some(table)) => {
            print!("{table}");
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
