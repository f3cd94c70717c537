//! `stablab` command-line driver.
//!
//! Each experiment subcommand starts from the library defaults, applies an
//! optional TOML config file whose keys mirror the config struct, then
//! applies command-line flags. Results go to `--out` together with a
//! `config.json` echo of the effective configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use stablab::quadratic::{
    sam_divergence_threshold, sam_lower_bound_stable, sgd_divergence_threshold, BoundInputs,
};
use stablab::sweep::{
    emit_csv, emit_json, emit_race_csv, emit_tracking_csv, run_boundary_sweep,
    run_coherence_tracking, run_cr_race, run_sam_rho_sweep, write_json, BoundaryReport, FamilyKind,
    RaceConfig, SweepGrid, TrackingConfig,
};
use stablab::{Error, Result};

#[derive(Parser)]
#[command(
    name = "stablab",
    version,
    about = "Linear stability experiments for SGD and SAM"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stability labels on a (B, σ) grid of constructed quadratic families.
    SweepQuadratic {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        grid: GridFlags,
    },
    /// Linearized SAM boundary grids for several values of ρ/α.
    SamRhoSweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        grid: GridFlags,
        /// Comma-separated ascending ρ/α values.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.1, 0.5, 1.0])]
        kappas: Vec<f64>,
    },
    /// Train SGD and SAM from noisy (C, r) solutions and record loss curves.
    CrRace {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        /// Comma-separated complexities C.
        #[arg(long, value_delimiter = ',')]
        c_values: Option<Vec<usize>>,
        /// Scale r; defaults to (d+1)^(1/4).
        #[arg(long)]
        r: Option<f64>,
    },
    /// Track coherence and curvature metrics while training from a random start.
    TrackCoherence {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        /// Compute metrics every k epochs.
        #[arg(long)]
        track_every: Option<usize>,
    },
    /// Print closed-form divergence thresholds and the lower-bound stability test.
    Bounds(BoundsArgs),
}

#[derive(Args)]
struct Common {
    /// Base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// TOML file whose keys mirror the experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Spike,
    LowerBound,
}

#[derive(Args)]
struct GridFlags {
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, value_enum)]
    family: Option<FamilyArg>,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Number of consecutive seeds starting at `--seed`.
    #[arg(long)]
    runs: Option<usize>,
}

#[derive(Args, Serialize)]
struct BoundsArgs {
    #[arg(long)]
    n: usize,
    #[arg(long = "batch-size")]
    batch_size: usize,
    #[arg(long)]
    eta: f64,
    #[arg(long)]
    lambda_max: f64,
    /// Smallest eigenvalue of the aggregate Hessian.
    #[arg(long, default_value_t = 0.0)]
    lambda_min: f64,
    /// Coherence measure.
    #[arg(long)]
    sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    rho_over_alpha: f64,
    #[serde(skip)]
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::SweepQuadratic { common, grid } => {
            let config = grid_config(&common, &grid)?;
            with_threads(common.threads, || {
                let report = run_boundary_sweep(&config)?;
                prepare_out(&common.out)?;
                emit_json(&config, config.seed, &common.out.join("config.json"))?;
                write_boundary(&report, &common, "boundary")?;
                for alg in report.algorithms() {
                    println!("{alg}: {} stable cells", report.stable_count(&alg));
                }
                for o in &report.overlaps {
                    println!("agreement {} vs {}: {:.3}", o.first, o.second, o.agreement);
                }
                Ok(())
            })
        }
        Command::SamRhoSweep {
            common,
            grid,
            kappas,
        } => {
            let config = grid_config(&common, &grid)?;
            with_threads(common.threads, || {
                let reports = run_sam_rho_sweep(&config, &kappas)?;
                prepare_out(&common.out)?;
                #[derive(Serialize)]
                struct Echo<'a> {
                    grid: &'a SweepGrid,
                    kappas: &'a [f64],
                }
                emit_json(
                    &Echo {
                        grid: &config,
                        kappas: &kappas,
                    },
                    config.seed,
                    &common.out.join("config.json"),
                )?;
                let merged = BoundaryReport {
                    cells: reports
                        .iter()
                        .flat_map(|r| r.cells.iter().cloned())
                        .collect(),
                    overlaps: Vec::new(),
                };
                write_boundary(&merged, &common, "sam_rho_sweep")?;
                for (kappa, report) in kappas.iter().zip(&reports) {
                    println!(
                        "rho/alpha {kappa}: {} stable cells",
                        report.stable_count("sam_linearized")
                    );
                }
                Ok(())
            })
        }
        Command::CrRace {
            common,
            train,
            c_values,
            r,
        } => {
            let mut config: RaceConfig = load_config(common.config.as_deref(), &["r"])?;
            apply_train_flags(
                &common,
                &train,
                &mut config.eta,
                &mut config.epochs,
                &mut config.batch_size,
                &mut config.seeds,
            );
            if let Some(c) = c_values {
                config.c_values = c;
            }
            if r.is_some() {
                config.r = r;
            }
            with_threads(common.threads, || {
                let report = run_cr_race(&config)?;
                prepare_out(&common.out)?;
                emit_json(
                    &config,
                    first_seed(&config.seeds),
                    &common.out.join("config.json"),
                )?;
                match common.format {
                    Format::Csv => emit_race_csv(&report, &common.out.join("race.csv"))?,
                    Format::Json => write_json(&report, &common.out.join("race.json"))?,
                }
                for curve in &report.curves {
                    println!(
                        "C={} {}: final loss {:.6} ± {:.6} ({} diverged)",
                        curve.c,
                        curve.optimizer.name(),
                        curve.final_mean(),
                        curve.final_std(),
                        curve.diverged_runs
                    );
                }
                Ok(())
            })
        }
        Command::TrackCoherence {
            common,
            train,
            track_every,
        } => {
            let mut config: TrackingConfig = load_config(common.config.as_deref(), &[])?;
            apply_train_flags(
                &common,
                &train,
                &mut config.eta,
                &mut config.epochs,
                &mut config.batch_size,
                &mut config.seeds,
            );
            if let Some(k) = track_every {
                config.track_every = k;
            }
            with_threads(common.threads, || {
                let report = run_coherence_tracking(&config)?;
                prepare_out(&common.out)?;
                emit_json(
                    &config,
                    first_seed(&config.seeds),
                    &common.out.join("config.json"),
                )?;
                match common.format {
                    Format::Csv => emit_tracking_csv(
                        &report,
                        &common.out.join("tracking_table.csv"),
                        &common.out.join("tracking_series.csv"),
                    )?,
                    Format::Json => write_json(&report, &common.out.join("tracking.json"))?,
                }
                for row in &report.rows {
                    println!(
                        "{}: sigma {:.3} lambda_max(S) {:.3} ER {} max lambda(H_i) {:.3} lambda_max(H) {:.3} Tr(H) {:.3}",
                        row.optimizer.name(),
                        row.coherence_measure,
                        row.lambda_max_s,
                        row.effective_rank,
                        row.max_lambda_h_i,
                        row.lambda_max_h,
                        row.trace_h
                    );
                }
                Ok(())
            })
        }
        Command::Bounds(args) => print_bounds(&args),
    }
}

fn grid_config(common: &Common, flags: &GridFlags) -> Result<SweepGrid> {
    let mut grid: SweepGrid = load_config(common.config.as_deref(), &[])?;
    if let Some(seed) = common.seed {
        grid.seed = seed;
    }
    if let Some(eta) = flags.eta {
        grid.eta = eta;
    }
    if let Some(steps) = flags.steps {
        grid.steps = steps;
    }
    if let Some(trials) = flags.trials {
        grid.trials = trials;
    }
    if let Some(family) = flags.family {
        grid.family = match family {
            FamilyArg::Spike => FamilyKind::Spike,
            FamilyArg::LowerBound => FamilyKind::LowerBound,
        };
    }
    grid.validate()?;
    Ok(grid)
}

fn apply_train_flags(
    common: &Common,
    flags: &TrainFlags,
    eta: &mut f64,
    epochs: &mut usize,
    batch_size: &mut usize,
    seeds: &mut Vec<u64>,
) {
    if let Some(v) = flags.eta {
        *eta = v;
    }
    if let Some(v) = flags.epochs {
        *epochs = v;
    }
    if let Some(v) = flags.batch_size {
        *batch_size = v;
    }
    if common.seed.is_some() || flags.runs.is_some() {
        let start = common.seed.unwrap_or_else(|| first_seed(seeds));
        let runs = flags.runs.unwrap_or(seeds.len()) as u64;
        *seeds = (start..start + runs).collect();
    }
}

fn first_seed(seeds: &[u64]) -> u64 {
    seeds.first().copied().unwrap_or(0)
}

/// Reads a TOML config over the defaults of `T`, rejecting keys that `T`
/// does not have. `optional` lists keys whose default is `None` and so are absent from the
/// serialized defaults.
fn load_config<T: Serialize + DeserializeOwned + Default>(
    path: Option<&Path>,
    optional: &[&str],
) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    let table: toml::Table = toml::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
    let known = toml::Value::try_from(T::default()).map_err(|e| parse_err(e.to_string()))?;
    let known = known
        .as_table()
        .ok_or_else(|| parse_err("config must be a table".into()))?;
    if let Some(key) = table
        .keys()
        .find(|k| !known.contains_key(*k) && !optional.contains(&k.as_str()))
    {
        return Err(parse_err(format!("unknown key `{key}`")));
    }
    table
        .try_into()
        .map_err(|e: toml::de::Error| parse_err(e.to_string()))
}

fn with_threads<F: FnOnce() -> Result<()> + Send>(threads: Option<usize>, f: F) -> Result<()> {
    match threads {
        None => f(),
        Some(0) => Err(Error::input("--threads must be at least 1")),
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| Error::input(format!("cannot start thread pool: {e}")))?
            .install(f),
    }
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_boundary(report: &BoundaryReport, common: &Common, stem: &str) -> Result<()> {
    match common.format {
        Format::Csv => emit_csv(report, &common.out.join(format!("{stem}.csv"))),
        Format::Json => write_json(report, &common.out.join(format!("{stem}.json"))),
    }
}

fn print_bounds(args: &BoundsArgs) -> Result<()> {
    let inputs = BoundInputs {
        n: args.n,
        batch_size: args.batch_size,
        eta: args.eta,
        rho_over_alpha: args.rho_over_alpha,
        lambda_max: args.lambda_max,
        lambda_min: args.lambda_min,
        sigma: args.sigma,
        ..Default::default()
    };
    let sgd = sgd_divergence_threshold(&inputs)?;
    let sam = sam_divergence_threshold(&inputs)?;
    let stable = sam_lower_bound_stable(&inputs);
    match args.format {
        Format::Csv => {
            println!("sgd_divergence_threshold,sam_divergence_threshold,sam_lower_bound_stable");
            println!("{sgd},{sam},{stable}");
        }
        Format::Json => {
            #[derive(Serialize)]
            struct Out<'a> {
                inputs: &'a BoundsArgs,
                sgd_divergence_threshold: Option<f64>,
                sam_divergence_threshold: Option<f64>,
                sam_lower_bound_stable: bool,
            }
            let out = Out {
                inputs: args,
                sgd_divergence_threshold: sgd.is_finite().then_some(sgd),
                sam_divergence_threshold: sam.is_finite().then_some(sam),
                sam_lower_bound_stable: stable,
            };
            let text =
                serde_json::to_string_pretty(&out).map_err(|e| Error::input(e.to_string()))?;
            println!("{text}");
        }
    }
    Ok(())
}
