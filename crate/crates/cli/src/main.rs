use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use enkf_lab::config::{load_config, ExperimentConfig, ExperimentKind};
use enkf_lab::diagnostics::output::{write_csv, write_json, write_series_csv, Cell};
use enkf_lab::diagnostics::{
    run_accuracy_experiment, run_concentration_experiment, run_filter_experiment, run_stability_experiment,
    FilterDiagnostics,
};
use enkf_lab::effective_dim::minimal_p_search;
use enkf_lab::Error;

const THREADS_VAR: &str = "ENKF_LAB_THREADS";

#[derive(Parser)]
#[command(
    name = "enkf-lab",
    version,
    about = "Projected EnKF experiments on a turbulence model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the filter and write per-step diagnostics.
    Simulate(RunArgs),
    /// Check the effective dimension of the model.
    VerifyDim(RunArgs),
    /// Sampling concentration study of the forecast covariance.
    RmtExperiment(RunArgs),
    /// Paired runs from shifted initial means.
    Stability(RunArgs),
    /// Error scaling under small noise.
    Accuracy(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (strict JSON, see docs/config.md)
    #[arg(long)]
    config: PathBuf,
    /// First seed; replaces the config's seed base.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default ./out/<timestamp>/).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Command {
    fn kind(&self) -> ExperimentKind {
        match self {
            Command::Simulate(_) => ExperimentKind::Simulate,
            Command::VerifyDim(_) => ExperimentKind::VerifyDim,
            Command::RmtExperiment(_) => ExperimentKind::Rmt,
            Command::Stability(_) => ExperimentKind::Stability,
            Command::Accuracy(_) => ExperimentKind::Accuracy,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::RmtExperiment(_) => "rmt-experiment",
            other => other.kind().name(),
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::Simulate(a)
            | Command::VerifyDim(a)
            | Command::RmtExperiment(a)
            | Command::Stability(a)
            | Command::Accuracy(a) => a,
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seeds: &'a [u64],
    config: &'a ExperimentConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(err) => {
            let config_error = matches!(err.downcast_ref::<Error>(), Some(Error::Config { .. }));
            eprintln!("error: {err:#}");
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}

fn init_threads() -> enkf_lab::Result<()> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = match raw.trim().parse() {
        Ok(n) if n >= 1 => n,
        _ => {
            return Err(Error::config(
                THREADS_VAR,
                format!("expected a positive integer, got {raw:?}"),
            ))
        }
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config(THREADS_VAR, e.to_string()))
}

fn output_dir(args: &RunArgs, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(out) = args.out.clone().or_else(|| cfg.output_dir.clone()) {
        return out;
    }
    let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S").to_string();
    let base = Path::new("out");
    let mut dir = base.join(&stamp);
    let mut i = 1;
    while dir.exists() {
        dir = base.join(format!("{stamp}-{i}"));
        i += 1;
    }
    dir
}

fn run(command: &Command) -> anyhow::Result<PathBuf> {
    init_threads()?;
    let args = command.args();
    let cfg = load_config(&args.config)?;
    cfg.check_kind(command.kind())?;
    let resolved = cfg.resolved(args.seed)?;
    let seeds = resolved.seeds.seeds();

    let dir = output_dir(args, &cfg);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            tool: "enkf-lab",
            version: env!("CARGO_PKG_VERSION"),
            command: command.name(),
            seeds: &seeds,
            config: &resolved,
        },
    )?;
    let comments = vec![
        format!("enkf-lab {} {}", env!("CARGO_PKG_VERSION"), command.name()),
        format!("config: {}", serde_json::to_string(&resolved)?),
        format!("seeds: {}", serde_json::to_string(&seeds)?),
    ];

    match command {
        Command::Simulate(_) => simulate(&dir, &resolved, &seeds, &comments)?,
        Command::VerifyDim(_) => verify_dim(&dir, &resolved, &comments)?,
        Command::RmtExperiment(_) => rmt(&dir, &resolved, seeds[0], &comments)?,
        Command::Stability(_) => stability(&dir, &resolved, &seeds, &comments)?,
        Command::Accuracy(_) => accuracy(&dir, &resolved, &seeds, &comments)?,
    }
    Ok(dir)
}

fn simulate(dir: &Path, cfg: &ExperimentConfig, seeds: &[u64], comments: &[String]) -> anyhow::Result<()> {
    let enkf = cfg.enkf_config()?;
    let (stream, setup) = cfg.filter_setup()?;
    let exp = run_filter_experiment(&stream, &enkf, &setup, seeds)?;
    for run in &exp.runs {
        let mut c = comments.to_vec();
        c.push(format!("seed: {}", run.seed));
        write_series_csv(&dir.join(format!("series_seed{}.csv", run.seed)), &c, &run.series)?;
    }

    let mut header = vec!["step".to_string()];
    for m in &FilterDiagnostics::COLUMNS[1..] {
        for s in ["mean", "q05", "q50", "q95"] {
            header.push(format!("{m}_{s}"));
        }
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<Cell>> = exp
        .summary
        .iter()
        .map(|s| {
            let mut row = vec![Cell::from(s.step)];
            for m in &s.metrics {
                row.extend([m.mean, m.q05, m.q50, m.q95].map(Cell::from));
            }
            row
        })
        .collect();
    write_csv(&dir.join("summary.csv"), comments, &header, &rows)?;

    let rows: Vec<Vec<Cell>> = exp
        .runs
        .iter()
        .map(|r| vec![r.seed.into(), r.rank_deficit_steps.into(), r.max_unrepresented.into()])
        .collect();
    write_csv(
        &dir.join("runs.csv"),
        comments,
        &["seed", "rank_deficit_steps", "max_unrepresented"],
        &rows,
    )?;
    Ok(())
}

fn verify_dim(dir: &Path, cfg: &ExperimentConfig, comments: &[String]) -> anyhow::Result<()> {
    let report = cfg.dim_report()?;
    write_json(&dir.join("dim_report.json"), &report)?;
    let rows: Vec<Vec<Cell>> = report
        .modes
        .iter()
        .map(|m| {
            vec![
                m.k.into(),
                m.gamma_k.into(),
                m.sigma_kk.into(),
                m.branch1.into(),
                m.branch2.into(),
                m.r_k.into(),
                m.pass.into(),
            ]
        })
        .collect();
    write_csv(
        &dir.join("modes.csv"),
        comments,
        &["k", "gamma_k", "sigma_kk", "branch1", "branch2", "r_k", "pass"],
        &rows,
    )?;
    if !cfg.verify_dim.rho_grid.is_empty() {
        let table = minimal_p_search(&cfg.model.params(), &cfg.verify_dim.rho_grid)?;
        let rows: Vec<Vec<Cell>> = table
            .iter()
            .map(|r| {
                vec![
                    r.rho.into(),
                    r.p.into(),
                    r.p_pm.into(),
                    r.p_instability.into(),
                    r.p_covariance.into(),
                ]
            })
            .collect();
        write_csv(
            &dir.join("rho_search.csv"),
            comments,
            &["rho", "p", "p_pm", "p_instability", "p_covariance"],
            &rows,
        )?;
    }
    Ok(())
}

fn rmt(dir: &Path, cfg: &ExperimentConfig, seed: u64, comments: &[String]) -> anyhow::Result<()> {
    let (report, trials) = run_concentration_experiment(&cfg.concentration(), seed)?;
    write_json(&dir.join("report.json"), &report)?;
    let rows: Vec<Vec<Cell>> = report
        .rare
        .iter()
        .map(|r| {
            vec![
                r.k.into(),
                r.condition.into(),
                r.trials.into(),
                r.rare_events.into(),
                r.probability.into(),
            ]
        })
        .collect();
    write_csv(
        &dir.join("rare_events.csv"),
        comments,
        &["k", "condition", "trials", "rare_events", "probability"],
        &rows,
    )?;
    let rows: Vec<Vec<Cell>> = report
        .tail
        .iter()
        .map(|r| {
            vec![
                r.condition.into(),
                r.k.into(),
                r.t.into(),
                r.exceedances.into(),
                r.probability.into(),
            ]
        })
        .collect();
    write_csv(
        &dir.join("tail.csv"),
        comments,
        &["condition", "k", "t", "exceedances", "probability"],
        &rows,
    )?;
    let rows: Vec<Vec<Cell>> = trials
        .iter()
        .map(|t| {
            vec![
                t.d.into(),
                t.p.into(),
                t.k.into(),
                t.rho.into(),
                t.delta.into(),
                t.condition.into(),
                t.lambda.into(),
                t.mu.into(),
                t.in_rare_event.into(),
            ]
        })
        .collect();
    write_csv(
        &dir.join("trials.csv"),
        comments,
        &[
            "d",
            "p",
            "k",
            "rho",
            "delta",
            "condition",
            "lambda",
            "mu",
            "in_rare_event",
        ],
        &rows,
    )?;
    Ok(())
}

fn stability(dir: &Path, cfg: &ExperimentConfig, seeds: &[u64], comments: &[String]) -> anyhow::Result<()> {
    let enkf = cfg.enkf_config()?;
    let (stream, setup) = cfg.filter_setup()?;
    let runs = run_stability_experiment(&stream, &enkf, &setup, &cfg.stability.shifts, seeds)?;
    let rows: Vec<Vec<Cell>> = runs
        .iter()
        .map(|r| {
            vec![
                r.seed.into(),
                r.shift.into(),
                r.slope.unwrap_or(f64::NAN).into(),
                r.gaps[r.gaps.len() - 1].into(),
                r.spreads_identical.into(),
            ]
        })
        .collect();
    write_csv(
        &dir.join("stability.csv"),
        comments,
        &["seed", "shift", "slope", "final_gap", "spreads_identical"],
        &rows,
    )?;
    let rows: Vec<Vec<Cell>> = runs
        .iter()
        .flat_map(|r| {
            r.gaps
                .iter()
                .enumerate()
                .map(move |(n, &g)| vec![r.seed.into(), r.shift.into(), n.into(), g.into()])
        })
        .collect();
    write_csv(
        &dir.join("gaps.csv"),
        comments,
        &["seed", "shift", "step", "gap"],
        &rows,
    )?;
    Ok(())
}

fn accuracy(dir: &Path, cfg: &ExperimentConfig, seeds: &[u64], comments: &[String]) -> anyhow::Result<()> {
    let enkf = cfg.enkf_config()?;
    let (stream, setup) = cfg.filter_setup()?;
    let table = run_accuracy_experiment(&stream, &enkf, &setup, &cfg.accuracy.eps, seeds)?;
    let rows: Vec<Vec<Cell>> = table
        .iter()
        .map(|r| vec![r.eps.into(), r.mean_error.into(), r.error_over_eps.into()])
        .collect();
    write_csv(
        &dir.join("accuracy.csv"),
        comments,
        &["eps", "mean_error", "error_over_eps"],
        &rows,
    )?;
    let rows: Vec<Vec<Cell>> = table
        .iter()
        .flat_map(|r| {
            seeds
                .iter()
                .zip(&r.per_seed)
                .map(move |(&s, &e)| vec![r.eps.into(), s.into(), e.into()])
        })
        .collect();
    write_csv(
        &dir.join("accuracy_seeds.csv"),
        comments,
        &["eps", "seed", "error"],
        &rows,
    )?;
    Ok(())
}
