use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tgnet::net::RoadClass;
use tgnet_cli::config::RunConfig;
use tgnet_cli::experiment::{cmd_experiment, SeriesSpec};
use tgnet_cli::stages::{
    cmd_extract, cmd_synth, cmd_validate, load_inputs, stage_assign, stage_compare, stage_demand,
    stage_rasterize, ExtractSpec, Role, SynthSpec,
};
use tgnet_cli::PipelineError;

/// Compare road-network datasets through assigned-traffic mass fields and
/// an unbalanced transport distance.
#[derive(Parser)]
#[command(name = "tgnet", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a run config and summarize both networks.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Synthesize OD demand on the reference network.
    Demand {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve user-equilibrium assignment for one network role.
    Assign {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        role: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rasterize assigned flows into the TG mass field.
    Rasterize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        role: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full comparison and emit report, plan, and figures.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Derive an extracted network from the reference.
    Extract {
        #[arg(long)]
        config: PathBuf,
        /// Lowest road class to retain (class-based extraction).
        #[arg(long)]
        class: Option<String>,
        /// Fraction of links to remove at random.
        #[arg(long)]
        k: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic lattice city.
    Synth {
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        cols: usize,
        #[arg(long, default_value_t = 0.5)]
        spacing_km: f64,
        #[arg(long, default_value_t = 5)]
        arterial_every: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the extraction series and tabulate reduction vs. distance.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        /// Which series to run: class, random, or both.
        #[arg(long, default_value = "both")]
        series: String,
        /// Number of seeds for the random series.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(
    path: &std::path::Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<RunConfig, PipelineError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(dir) = out {
        cfg.output_dir = dir;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run() -> Result<(), PipelineError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config } => {
            let cfg = RunConfig::load(&config)?;
            print!("{}", cmd_validate(&cfg)?);
        }
        Command::Demand { config, out } => {
            let cfg = load_config(&config, out, None)?;
            let inputs = load_inputs(&cfg)?;
            stage_demand(&cfg, &inputs)?;
        }
        Command::Assign { config, role, out } => {
            let cfg = load_config(&config, out, None)?;
            let role = Role::parse(&role)?;
            let inputs = load_inputs(&cfg)?;
            stage_assign(&cfg, &inputs, role)?;
        }
        Command::Rasterize { config, role, out } => {
            let cfg = load_config(&config, out, None)?;
            let role = Role::parse(&role)?;
            let inputs = load_inputs(&cfg)?;
            stage_rasterize(&cfg, &inputs, role)?;
        }
        Command::Compare { config, out } => {
            let cfg = load_config(&config, out, None)?;
            let inputs = load_inputs(&cfg)?;
            stage_compare(&cfg, &inputs)?;
        }
        Command::Extract {
            config,
            class,
            k,
            seed,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let spec = match (class, k) {
                (Some(name), None) => {
                    let class = RoadClass::parse(&name).ok_or_else(|| {
                        PipelineError::Config(format!("unknown road class {name:?}"))
                    })?;
                    ExtractSpec::ByClass(class)
                }
                (None, Some(k)) => ExtractSpec::Random {
                    k,
                    seed: seed.unwrap_or(cfg.seed),
                },
                _ => {
                    return Err(PipelineError::Config(
                        "extract needs exactly one of --class or --k".into(),
                    ))
                }
            };
            cmd_extract(&cfg, spec, &out)?;
        }
        Command::Synth {
            rows,
            cols,
            spacing_km,
            arterial_every,
            out,
        } => {
            cmd_synth(
                &SynthSpec {
                    rows,
                    cols,
                    spacing_km,
                    arterial_every,
                },
                &out,
            )?;
        }
        Command::Experiment {
            config,
            series,
            seeds,
            out,
            seed,
        } => {
            let cfg = load_config(&config, out, seed)?;
            let seed_list: Vec<u64> = (0..seeds).collect();
            let spec = match series.as_str() {
                "class" => SeriesSpec::class_series(),
                "random" => SeriesSpec::random_series(seed_list),
                "both" => SeriesSpec::both(seed_list),
                other => {
                    return Err(PipelineError::Config(format!(
                        "series must be class, random, or both, got {other:?}"
                    )))
                }
            };
            let rows = cmd_experiment(&cfg, &spec)?;
            for row in &rows {
                println!(
                    "{}: length reduction {:.3}, tgw {:.1}",
                    row.case_id, row.length_reduction, row.tgw_veh_km2
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("TGNET_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tgnet: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
