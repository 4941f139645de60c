use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use expgen::env::{generate_level, LevelKind};
use expgen::experiment::{
    directional_checks, export_report, load_scores, render_summary, run_experiment, ExperimentConfig,
    ExperimentKind, ReportOptions,
};
use expgen::Error;

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_ACCEPTANCE: u8 = 4;

#[derive(Parser)]
#[command(name = "expgen", version, about = "Explore-to-generalize experiments on procedural gridworlds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set ppo.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Parent directory for the timestamped output directory. Defaults to
    /// `output_dir` from the config, then `runs`.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write ASCII renderings of a seed range of levels.
    GenerateLevels {
        #[arg(long, default_value = "maze")]
        kind: LevelKind,
        #[arg(long, default_value_t = 9)]
        width: usize,
        #[arg(long, default_value_t = 9)]
        height: usize,
        #[arg(long, default_value_t = 0)]
        seed_base: u64,
        #[arg(long, default_value_t = 8)]
        count: u64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train exploration policies on the intrinsic reward.
    TrainMaxent(RunArgs),
    /// Train reward-seeking ensembles.
    TrainEnsemble(RunArgs),
    /// Evaluate the ExpGen controller, training its parts unless a bundle is given.
    EvalExpgen {
        #[command(flatten)]
        run: RunArgs,
        /// Bundle manifest written by `train-ensemble` or an earlier run.
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
    /// Run an ablation or study config of any kind.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Evaluate the directional checks for this kind; exit 4 on failure.
        #[arg(long)]
        check: bool,
    },
    /// Rebuild the report of an experiment directory.
    Report {
        dir: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n_bootstrap: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print one level.
    RenderLevel {
        #[arg(long, default_value = "maze")]
        kind: LevelKind,
        #[arg(long, default_value_t = 9)]
        width: usize,
        #[arg(long, default_value_t = 9)]
        height: usize,
        #[arg(long)]
        seed: u64,
    },
}

enum Failure {
    Lib(Error),
    Acceptance(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn load(run: &RunArgs, kind: Option<ExperimentKind>, extra: &[String]) -> Result<ExperimentConfig, Error> {
    let mut overrides = run.overrides.clone();
    if let Some(k) = kind {
        overrides.push(format!("kind=\"{}\"", k.name()));
    }
    overrides.extend_from_slice(extra);
    ExperimentConfig::load(&run.config, &overrides)
}

fn output_dir(run: &RunArgs, cfg: &ExperimentConfig) -> PathBuf {
    let parent = run
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    parent.join(format!("{}-{stamp}", cfg.kind.name()))
}

fn execute(cfg: &ExperimentConfig, run: &RunArgs, check: bool) -> Result<(), Failure> {
    let dir = output_dir(run, cfg);
    println!("writing {}", dir.display());
    let report = run_experiment(cfg, &dir)?;
    print!("{}", render_summary(&report));
    if check {
        let table = load_scores(&dir)?;
        let checks = directional_checks(cfg.kind, &table, &report);
        if checks.is_empty() {
            println!("no directional checks defined for {}", cfg.kind.name());
        }
        let mut failed = Vec::new();
        for c in &checks {
            println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            if !c.passed {
                failed.push(c.name.clone());
            }
        }
        if !failed.is_empty() {
            return Err(Failure::Acceptance(failed.join("; ")));
        }
    }
    Ok(())
}

fn write_levels(kind: LevelKind, width: usize, height: usize, seeds: std::ops::Range<u64>, out: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.into(),
        source: e,
    })?;
    for seed in seeds {
        let level = generate_level(seed, kind, width, height)?;
        let path = out.join(format!("{}-{seed}.txt", kind.name()));
        std::fs::write(&path, level.render_ascii()).map_err(|e| Error::Io { path, source: e })?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenerateLevels {
            kind,
            width,
            height,
            seed_base,
            count,
            out,
        } => {
            write_levels(kind, width, height, seed_base..seed_base + count, &out)?;
            println!("wrote {count} levels to {}", out.display());
        }
        Command::TrainMaxent(run) => execute(&load(&run, Some(ExperimentKind::TrainMaxent), &[])?, &run, false)?,
        Command::TrainEnsemble(run) => execute(&load(&run, Some(ExperimentKind::TrainEnsemble), &[])?, &run, false)?,
        Command::EvalExpgen { run, bundle } => {
            let extra: Vec<String> = bundle
                .map(|b| {
                    let b = std::path::absolute(&b).unwrap_or(b);
                    format!("checkpoints.bundle=\"{}\"", b.display().to_string().replace('\\', "\\\\"))
                })
                .into_iter()
                .collect();
            execute(&load(&run, Some(ExperimentKind::EvalExpgen), &extra)?, &run, false)?
        }
        Command::Ablate { run, check } => execute(&load(&run, None, &[])?, &run, check)?,
        Command::Report { dir, n_bootstrap, seed } => {
            let report = export_report(&dir, &ReportOptions { n_bootstrap, seed })?;
            print!("{}", render_summary(&report));
        }
        Command::RenderLevel {
            kind,
            width,
            height,
            seed,
        } => print!("{}", generate_level(seed, kind, width, height)?.render_ascii()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Acceptance(msg)) => {
            eprintln!("acceptance check failed: {msg}");
            ExitCode::from(EXIT_ACCEPTANCE)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() {
                EXIT_CONFIG
            } else if e.is_numeric() {
                EXIT_NUMERIC
            } else {
                EXIT_OTHER
            })
        }
    }
}
