//! Command-line front end for the dispatch toolkit.
//!
//! Subcommands map onto the library stages: `transform` converts a fleet
//! into unified storage parameters, `optimize` solves one dispatch variant,
//! `assess` Monte-Carlo stress-tests a solved schedule, `synth` writes the
//! synthetic benchmark dataset, `run` executes the configured variants end
//! to end, and `report` rebuilds the cross-variant comparison from a run
//! directory.
//!
//! A run-configuration JSON (`--config`) supplies defaults for every
//! subcommand; individual flags override single fields. Exit codes: 0 on
//! success (for solves: every requested variant optimal), 2 when a solve
//! finished non-optimal, 1 on any error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use gesrisk::{
    assess_risk, attach_outdoor, generate_synthetic_with, ges_equivalents, load_fleet,
    load_run_config, run_pipeline, series_outdoor, summarize_comparison, write_comparison,
    write_risk_report, write_synthetic_dataset, FleetUnit, PhysicalParams, RiskReport, RunConfig,
    RunSummary, ScenarioCount, SolutionArtifact, Variant, VariantOutcome,
};

#[derive(Parser)]
#[command(
    name = "gesrisk",
    version,
    about = "Chance-constrained dispatch of generic energy storage with reliability assessment"
)]
struct Cli {
    /// Run-configuration JSON; flags override individual fields.
    #[arg(short, long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a fleet CSV into unified storage parameter sets.
    Transform(TransformArgs),
    /// Solve one dispatch variant and write its artifacts.
    Optimize(OptimizeArgs),
    /// Monte Carlo assess a solved schedule against realized units.
    Assess(AssessArgs),
    /// Generate the synthetic benchmark dataset.
    Synth(SynthArgs),
    /// Run every configured variant end to end, with assessment.
    Run(RunArgs),
    /// Rebuild the cross-variant comparison from a run directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct TransformArgs {
    /// Fleet CSV to convert.
    #[arg(long, value_name = "FILE")]
    fleet: PathBuf,
    /// Time-series CSV supplying the horizon and, for air conditioners,
    /// the outdoor temperatures. Without it the horizon defaults to 24
    /// hourly periods and thermal units are rejected.
    #[arg(long, value_name = "FILE")]
    series: Option<PathBuf>,
    /// Output JSON file.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct OptimizeArgs {
    /// Feeder case JSON; the packaged 33-bus case when absent.
    #[arg(long, value_name = "FILE")]
    case: Option<PathBuf>,
    /// Time-series CSV.
    #[arg(long, value_name = "FILE")]
    series: PathBuf,
    /// Fleet CSV.
    #[arg(long, value_name = "FILE")]
    fleet: PathBuf,
    /// Dispatch variant: m1, m2, or m3.
    #[arg(long, value_name = "VARIANT")]
    model: String,
    /// Security level of the joint chance constraint.
    #[arg(long, value_name = "ALPHA")]
    alpha: Option<f64>,
    /// Master seed for scenario sampling.
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
    /// Fixed scenario count, bypassing the certificate-based size.
    #[arg(long, value_name = "N")]
    scenarios: Option<usize>,
    /// Output directory; artifacts land in a per-variant subdirectory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct AssessArgs {
    /// solution.json written by `optimize` or `run`.
    #[arg(long, value_name = "FILE")]
    solution: PathBuf,
    /// Fleet CSV, in the same unit order the solution was built from.
    #[arg(long, value_name = "FILE")]
    fleet: PathBuf,
    /// Time-series CSV supplying air conditioners' outdoor temperatures.
    #[arg(long, value_name = "FILE")]
    series: Option<PathBuf>,
    /// Monte Carlo sample count.
    #[arg(long, value_name = "M")]
    samples: Option<usize>,
    /// Master seed for the assessment draws.
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    /// Generator seed.
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
    /// Profile name: summer-weekday or summer-weekend.
    #[arg(long, value_name = "NAME")]
    profile: Option<String>,
    /// Output directory for series.csv, fleet.csv, and case.json.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Override the configured output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory holding m1/m2/m3 subdirectories.
    #[arg(long, value_name = "DIR")]
    runs: PathBuf,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    let cfg = match &cli.config {
        Some(path) => load_run_config(path)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Transform(args) => cmd_transform(args),
        Command::Optimize(args) => cmd_optimize(cfg, args),
        Command::Assess(args) => cmd_assess(cfg, args),
        Command::Synth(args) => cmd_synth(cfg, args),
        Command::Run(args) => cmd_run(cfg, args),
        Command::Report(args) => cmd_report(args),
    }
}

fn has_thermal_units(fleet: &[FleetUnit]) -> bool {
    fleet
        .iter()
        .any(|u| matches!(u.params, PhysicalParams::Iva(_) | PhysicalParams::Ffa(_)))
}

fn write_pretty_json<T: serde::Serialize>(value: &T, path: &Path) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_transform(args: TransformArgs) -> anyhow::Result<ExitCode> {
    let mut fleet = load_fleet(&args.fleet)?;
    let horizon = match &args.series {
        Some(series) => {
            let (horizon, outdoor) = series_outdoor(series)?;
            attach_outdoor(&mut fleet, &outdoor);
            horizon
        }
        None => {
            if has_thermal_units(&fleet) {
                bail!(
                    "fleet {} contains air conditioners; pass --series so their outdoor \
                     temperatures and the horizon are known",
                    args.fleet.display()
                );
            }
            gesrisk::Horizon::hourly_day()
        }
    };
    let units = ges_equivalents(&fleet, &horizon)?;
    write_pretty_json(&units, &args.out)?;
    println!(
        "transformed {} units over {} periods -> {}",
        units.len(),
        horizon.periods,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_optimize(mut cfg: RunConfig, args: OptimizeArgs) -> anyhow::Result<ExitCode> {
    let variant: Variant = args.model.parse().map_err(anyhow::Error::msg)?;
    if args.case.is_some() {
        cfg.case_path = args.case;
    }
    cfg.series_path = Some(args.series);
    cfg.fleet_path = Some(args.fleet);
    cfg.variants = vec![variant];
    cfg.assess = false;
    cfg.out_dir = args.out;
    if let Some(alpha) = args.alpha {
        cfg.cco.alpha = alpha;
    }
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
    }
    if let Some(n) = args.scenarios {
        cfg.cco.scenario_count = ScenarioCount::Fixed(n);
    }
    let summary = run_pipeline(&cfg)?;
    print_summary(&summary);
    Ok(exit_for(&summary))
}

fn cmd_assess(cfg: RunConfig, args: AssessArgs) -> anyhow::Result<ExitCode> {
    let text = fs::read_to_string(&args.solution)
        .with_context(|| format!("reading {}", args.solution.display()))?;
    let artifact: SolutionArtifact = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", args.solution.display()))?;
    let mut fleet = load_fleet(&args.fleet)?;
    match &args.series {
        Some(series) => {
            let (_, outdoor) = series_outdoor(series)?;
            attach_outdoor(&mut fleet, &outdoor);
        }
        None => {
            if has_thermal_units(&fleet) {
                bail!(
                    "fleet {} contains air conditioners; pass --series so their outdoor \
                     temperatures are known",
                    args.fleet.display()
                );
            }
        }
    }
    for unit in &mut fleet {
        unit.uncertainty = cfg.uncertainty.clone();
    }
    let samples = args.samples.unwrap_or(cfg.risk_samples);
    let seed = args.seed.unwrap_or(cfg.master_seed);
    let report = assess_risk(
        &artifact.solution,
        &fleet,
        &artifact.prices,
        &artifact.horizon,
        samples,
        seed,
    )?;
    let dir = args
        .solution
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let files = write_risk_report(&report, dir)?;
    println!(
        "{} samples | LORP {:.4} ({:.4} half-width) | ERNS {:.6} kWh ({:.6} half-width) \
         | empirical security {:.4}",
        report.samples,
        report.lorp,
        report.lorp_half_width,
        report.erns_kwh,
        report.erns_half_width_kwh,
        report.empirical_security_level,
    );
    for file in files {
        println!("wrote {}", file.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth(cfg: RunConfig, args: SynthArgs) -> anyhow::Result<ExitCode> {
    let seed = args.seed.unwrap_or(cfg.synth_seed);
    let profile = args.profile.unwrap_or_else(|| cfg.synth_profile.clone());
    let dataset = generate_synthetic_with(seed, &profile, &cfg.scaling())?;
    let files = write_synthetic_dataset(&dataset, &args.out)?;
    println!(
        "generated profile {} (seed {seed}): {} series rows, {} units, case {}",
        dataset.profile,
        dataset.rows.len(),
        dataset.fleet.len(),
        dataset.case.name
    );
    for file in files {
        println!("wrote {}", file.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_run(mut cfg: RunConfig, args: RunArgs) -> anyhow::Result<ExitCode> {
    if let Some(out) = args.out {
        cfg.out_dir = out;
    }
    let summary = run_pipeline(&cfg)?;
    print_summary(&summary);
    Ok(exit_for(&summary))
}

fn cmd_report(args: ReportArgs) -> anyhow::Result<ExitCode> {
    let mut loaded: Vec<(SolutionArtifact, Option<RiskReport>)> = Vec::new();
    for sub in ["m1", "m2", "m3"] {
        let dir = args.runs.join(sub);
        let solution_path = dir.join("solution.json");
        if !solution_path.is_file() {
            continue;
        }
        let text = fs::read_to_string(&solution_path)
            .with_context(|| format!("reading {}", solution_path.display()))?;
        let artifact: SolutionArtifact = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", solution_path.display()))?;
        let risk_path = dir.join("risk.json");
        let risk = if risk_path.is_file() {
            let text = fs::read_to_string(&risk_path)
                .with_context(|| format!("reading {}", risk_path.display()))?;
            Some(
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing {}", risk_path.display()))?,
            )
        } else {
            None
        };
        loaded.push((artifact, risk));
    }
    if loaded.is_empty() {
        bail!(
            "no solution.json found under {}/m1|m2|m3",
            args.runs.display()
        );
    }
    let horizon = loaded[0].0.horizon;
    let kw_base = loaded[0].0.kw_base;
    let outcomes: Vec<VariantOutcome<'_>> = loaded
        .iter()
        .map(|(artifact, risk)| VariantOutcome {
            variant: artifact.solution.variant,
            solution: Some(&artifact.solution),
            risk: risk.as_ref(),
        })
        .collect();
    let table = summarize_comparison(&outcomes, &horizon, kw_base);
    let path = args.runs.join("comparison.csv");
    write_comparison(&table, &path)?;
    print!("{}", table.to_csv());
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn print_summary(summary: &RunSummary) {
    println!(
        "case {} | {} periods | artifacts in {}",
        summary.case_name,
        summary.periods,
        summary.out_dir.display()
    );
    for run in &summary.runs {
        let mut line = format!(
            "  {}: {} | objective {:.6} RMB | {} scenarios | verification {}",
            run.variant,
            run.status,
            run.objective_rmb,
            run.scenario_count,
            if run.verification_ok { "ok" } else { "FLAGGED" },
        );
        if let (Some(lorp), Some(erns)) = (run.lorp, run.erns_kwh) {
            let _ = write!(line, " | LORP {lorp:.4} | ERNS {erns:.6} kWh");
        }
        println!("{line}");
    }
    if let Some(path) = &summary.comparison_path {
        println!("  comparison: {}", path.display());
    }
}

fn exit_for(summary: &RunSummary) -> ExitCode {
    if summary.all_optimal {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}
