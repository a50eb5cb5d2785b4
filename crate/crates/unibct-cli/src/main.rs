//! Experiment runner around the `unibct` crate.
//!
//! Four verbs:
//!
//! - `run` trains one old/new model pair from a preset or a config file and
//!   writes a run directory (`report.json`, `config.json`, train logs,
//!   optional checkpoints and feature dumps).
//! - `grid` sweeps the five data-split scenarios against four compatibility
//!   losses (20 runs) and summarizes them into one table.
//! - `summarize` collects every `report.json` under a directory into
//!   `summary.csv` and `summary.json`.
//! - `refine-demo` runs the prototype engine on a dumped feature file and
//!   reports how far graph refinement moves each class prototype.
//!
//! Every run is deterministic given its config; the echoed `config.json`
//! re-runs the experiment byte-identically. The `UNIBCT_OUT` environment
//! variable overrides the default output root (`runs/`); explicit `--out`
//! flags always win.

mod demo;
mod dumps;
mod presets;
mod summarize;

use std::env;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use unibct::{
    run_experiment, write_run_outputs, CompatLossKind, ExperimentConfig, RunReport, Scenario,
    TrainConfig,
};

#[derive(Parser)]
#[command(name = "unibct", version, about = "Backward-compatible embedding experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its run directory.
    Run(RunArgs),
    /// Run the scenario x loss comparison grid and summarize it.
    Grid(GridArgs),
    /// Collect run reports under a directory into a comparison table.
    Summarize(SummarizeArgs),
    /// Refine prototypes from a dumped feature file.
    RefineDemo(demo::DemoArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Preset name, `<scenario>-<loss>`, e.g. `extended-data-unibct`.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// TOML or JSON config file; missing keys fall back to defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory (default: `<root>/<scenario>-<loss>-seed<seed>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Train with the large schedule instead of the desk-scale one.
    #[arg(long)]
    full_schedule: bool,
    /// Save both model checkpoints next to the report.
    #[arg(long)]
    save_models: bool,
    /// Dump evaluation/training features and cross-test scores as CSV.
    #[arg(long)]
    dump_features: bool,
}

#[derive(Args)]
struct GridArgs {
    /// Base config applied to every cell; scenario and loss kind are swept.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override for every cell.
    #[arg(long)]
    seed: Option<u64>,
    /// Grid root directory (default: `<root>/grid`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Train every cell with the large schedule.
    #[arg(long)]
    full_schedule: bool,
    /// Save model checkpoints for every cell.
    #[arg(long)]
    save_models: bool,
    /// Dump features and scores for every cell.
    #[arg(long)]
    dump_features: bool,
}

#[derive(Args)]
struct SummarizeArgs {
    /// Directory scanned recursively for `report.json` files.
    reports_dir: PathBuf,
    /// Where to write `summary.csv` and `summary.json` (default: the
    /// reports directory itself).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Losses the comparison grid sweeps against every scenario.
const GRID_LOSSES: [CompatLossKind; 4] = [
    CompatLossKind::UniBct,
    CompatLossKind::UniBctVanilla,
    CompatLossKind::Regress,
    CompatLossKind::Contrastive,
];

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    match Cli::parse().command {
        Command::Run(args) => cmd_run(args),
        Command::Grid(args) => cmd_grid(args),
        Command::Summarize(args) => {
            summarize::cmd_summarize(&args.reports_dir, args.out.as_deref())
        }
        Command::RefineDemo(args) => demo::cmd_refine_demo(args),
    }
}

/// Output root: `UNIBCT_OUT` if set, `runs/` otherwise.
fn output_root() -> PathBuf {
    env::var_os("UNIBCT_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

pub(crate) fn loss_name(kind: CompatLossKind) -> &'static str {
    match kind {
        CompatLossKind::UniBct => "unibct",
        CompatLossKind::UniBctVanilla => "unibct-vanilla",
        CompatLossKind::Bct => "bct",
        CompatLossKind::Regress => "regress",
        CompatLossKind::Contrastive => "contrastive",
    }
}

fn run_name(config: &ExperimentConfig) -> String {
    format!(
        "{}-{}-seed{}",
        config.scenario,
        loss_name(config.loss.kind),
        config.seed
    )
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut config = match (&args.preset, &args.config) {
        (Some(name), _) => presets::preset_config(name)?,
        (None, Some(path)) => read_config_file(path)?,
        (None, None) => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if args.full_schedule {
        config.train = TrainConfig::full_scale();
    }
    config.validate().context("validating the config")?;
    Ok(config)
}

pub(crate) fn read_config_file(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    let config = if is_json {
        serde_json::from_str(&text)
            .with_context(|| format!("parsing JSON config {}", path.display()))?
    } else {
        toml::from_str(&text)
            .with_context(|| format!("parsing TOML config {}", path.display()))?
    };
    Ok(config)
}

fn print_verdicts(report: &RunReport) {
    let metrics = &report.metrics;
    let far = metrics.reference_far;
    println!(
        "verification compatible: {} (cross TAR {:.4} vs old self {:.4} at FAR {far})",
        metrics.verification_compatible,
        metrics.cross.tar_at(far).unwrap_or(f64::NAN),
        metrics.self_old.tar_at(far).unwrap_or(f64::NAN),
    );
    println!(
        "identification compatible: {} (cross top-1 {:.4} vs old self {:.4})",
        metrics.identification_compatible,
        metrics.cross.topk_at(1).unwrap_or(f64::NAN),
        metrics.self_old.topk_at(1).unwrap_or(f64::NAN),
    );
}

fn run_into_dir(
    config: &ExperimentConfig,
    dir: &Path,
    save_models: bool,
    dump_features: bool,
) -> Result<RunReport> {
    let artifacts = run_experiment(config).context("running the experiment")?;
    write_run_outputs(&artifacts, dir, save_models)
        .with_context(|| format!("writing run outputs to {}", dir.display()))?;
    if dump_features {
        dumps::write_feature_dumps(&artifacts, dir).context("dumping features and scores")?;
    }
    Ok(artifacts.report)
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let config = load_config(&args).context("loading the experiment config")?;
    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| output_root().join(run_name(&config)));
    let report = run_into_dir(&config, &dir, args.save_models, args.dump_features)?;
    println!("wrote {}", dir.join("report.json").display());
    print_verdicts(&report);
    Ok(())
}

fn cmd_grid(args: GridArgs) -> Result<()> {
    let mut base = match &args.config {
        Some(path) => read_config_file(path).context("loading the base config")?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        base.seed = seed;
    }
    if args.full_schedule {
        base.train = TrainConfig::full_scale();
    }
    let root = args.out.clone().unwrap_or_else(|| output_root().join("grid"));

    for scenario in Scenario::ALL {
        for kind in GRID_LOSSES {
            let mut config = base.clone();
            config.scenario = scenario;
            config.loss.kind = kind;
            config
                .validate()
                .with_context(|| format!("validating the {scenario}-{} cell", loss_name(kind)))?;
            let dir = root.join(format!("{scenario}-{}", loss_name(kind)));
            let report = run_into_dir(&config, &dir, args.save_models, args.dump_features)
                .with_context(|| format!("grid cell {scenario}-{}", loss_name(kind)))?;
            println!(
                "{scenario}-{}: verification {} identification {}",
                loss_name(kind),
                report.metrics.verification_compatible,
                report.metrics.identification_compatible,
            );
        }
    }

    summarize::cmd_summarize(&root, Some(&root)).context("summarizing the grid")
}
