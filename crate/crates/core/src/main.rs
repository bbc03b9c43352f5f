use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tune_mbrl::analysis::{
    cross_fidelity_correlation, evaluate_schedule, extract_schedule, final_return_histogram,
    rung_budgets, write_corr_csv, write_curve_csv, write_hist_csv, write_schedule_csv,
    CurveReading, ExtractMode, DEFAULT_HIST_BINS,
};
use tune_mbrl::confspace::SpaceFile;
use tune_mbrl::orchestrator::{
    infer_group, run, seed_tree, HyperbandOptions, MemberFactory, RunConfig, SYNTHETIC_ENV,
};
use tune_mbrl::runlog::{RunLog, Schedule, RUNLOG_FILE};
use tune_mbrl::RunError;

#[derive(Parser)]
#[command(name = "tune-mbrl", version, about = "Hyperparameter schedule search for model-based RL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a hyperparameter search and write its run log.
    Search(SearchArgs),
    /// Replay a schedule on fresh learners and write the learning curve.
    Evaluate(EvaluateArgs),
    /// Analyses over existing run logs.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCommand,
    },
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long, default_value = "pbt")]
    scheduler: String,
    /// Built-in space name or path to a space file.
    #[arg(long, default_value = "desk")]
    space: String,
    #[arg(long, default_value = "cem_optimizer")]
    group: String,
    /// pendulum, pusher2d or synthetic.
    #[arg(long, default_value = "pendulum")]
    env: String,
    #[arg(long = "pop", default_value_t = 40)]
    population: usize,
    #[arg(long)]
    interval: Option<u64>,
    /// Trials per member.
    #[arg(long, default_value_t = 30)]
    budget: u64,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    copy_history: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Episode length override.
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    b_min: Option<u64>,
    #[arg(long)]
    b_max: Option<u64>,
    #[arg(long)]
    eta: Option<u64>,
    #[arg(long)]
    hb_iterations: Option<usize>,
    #[arg(long)]
    backtrack_every: Option<u64>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    ensemble: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Reading {
    RunningMaxOfMean,
    MeanOfRunningMax,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    schedule: PathBuf,
    /// Defaults to the environment of the run that produced the schedule.
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    space: Option<String>,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 30)]
    trials: u64,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value = "running-max-of-mean")]
    reading: Reading,
    /// Curve CSV; defaults to `curve.csv` next to the schedule.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Spearman correlation of scores across rung budgets.
    Corr {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Histogram of best final scores, grouped by scheduler.
    Hist {
        #[arg(long, num_args = 1.., required = true)]
        log: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_HIST_BINS)]
        bins: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-interval mean configuration of the top members.
    Trends {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn log_dir(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.to_path_buf()
    } else {
        p.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

fn search(a: SearchArgs) -> Result<(), RunError> {
    let mut cfg = RunConfig {
        scheduler: a.scheduler.parse()?,
        space: a.space,
        group: a.group.parse()?,
        env: a.env,
        env_horizon: a.horizon,
        population: a.population,
        interval: a.interval,
        budget: a.budget,
        copy_history: a.copy_history,
        master_seed: a.seed,
        workers: a.workers,
        ..RunConfig::default()
    };
    let hb = HyperbandOptions::default();
    cfg.hyperband = HyperbandOptions {
        b_min: a.b_min.unwrap_or(hb.b_min),
        b_max: a.b_max.unwrap_or(hb.b_max),
        eta: a.eta.unwrap_or(hb.eta),
        n_iterations: a.hb_iterations.unwrap_or(hb.n_iterations),
    };
    if let Some(b) = a.backtrack_every {
        cfg.backtrack_every = b;
    }
    if let Some(h) = a.hidden {
        cfg.pets.hidden = h;
    }
    if let Some(e) = a.ensemble {
        cfg.pets.ensemble_size = e;
    }
    let log = run(&cfg, &a.out)?;
    let summary = log.summary().expect("completed runs end with a summary");
    println!(
        "best member {} score {} ({} trial records) -> {}",
        summary.best_member,
        summary.best_score.map_or("n/a".into(), |s| format!("{s:.4}")),
        log.trials().count(),
        a.out.join(RUNLOG_FILE).display()
    );
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<(), RunError> {
    let schedule = Schedule::read_csv(&a.schedule)?;
    let dir = log_dir(&a.schedule);
    // Start from the producing run's settings when its log sits alongside.
    let mut cfg = match RunLog::read(dir.join(RUNLOG_FILE)) {
        Ok(log) => serde_json::from_value::<RunConfig>(log.header.config)
            .map_err(|e| RunError::Log(format!("run header config: {e}")))?,
        Err(_) => RunConfig::default(),
    };
    if let Some(env) = a.env {
        cfg.env = env;
    }
    if let Some(space) = a.space {
        cfg.space = space;
    }
    if a.horizon.is_some() {
        cfg.env_horizon = a.horizon;
    }
    if let Some(h) = a.hidden {
        cfg.pets.hidden = h;
    }
    if cfg.env != SYNTHETIC_ENV {
        let file = SpaceFile::load_named_or_path(&cfg.space)?;
        let names: Vec<&str> = schedule.entries[0].config.iter().map(|(n, _)| n).collect();
        cfg.group = infer_group(&file, names.iter().copied())
            .ok_or_else(|| RunError::Config("schedule columns match no parameter group".into()))?;
    }
    let factory = MemberFactory::new(&cfg)?;
    let reading = match a.reading {
        Reading::RunningMaxOfMean => CurveReading::RunningMaxOfMean,
        Reading::MeanOfRunningMax => CurveReading::MeanOfRunningMax,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(RunConfig { workers: a.workers, ..RunConfig::default() }.resolved_workers())
        .build()
        .map_err(|e| RunError::Config(e.to_string()))?;
    let curve = pool.install(|| {
        evaluate_schedule(&schedule, a.trials, a.seeds, reading, |seed| {
            factory.build(seed_tree(seed, 0, u64::MAX))
        })
    })?;
    let out = a.out.unwrap_or_else(|| dir.join("curve.csv"));
    write_curve_csv(&out, &curve)?;
    println!(
        "final curve value {:.4} over {} seeds -> {}",
        curve.curve.last().copied().unwrap_or(f64::NAN),
        a.seeds,
        out.display()
    );
    Ok(())
}

fn analyze(what: AnalyzeCommand) -> Result<(), RunError> {
    match what {
        AnalyzeCommand::Corr { log, out } => {
            let dir = log_dir(&log);
            let runlog = RunLog::read(&log)?;
            let budgets = rung_budgets(&runlog);
            let mut rows = Vec::new();
            for (i, &low) in budgets.iter().enumerate() {
                for &high in &budgets[i + 1..] {
                    match cross_fidelity_correlation(&runlog, low, high) {
                        Ok(r) => {
                            println!("{low} -> {high}: cor {:.4} p {:.4} n {}", r.cor, r.p, r.n);
                            rows.push((low, high, r));
                        }
                        Err(e) => println!("{low} -> {high}: {e}"),
                    }
                }
            }
            if budgets.len() < 2 {
                println!("log has fewer than two rung budgets");
            }
            write_corr_csv(&out.unwrap_or_else(|| dir.join("corr.csv")), &rows)
        }
        AnalyzeCommand::Hist { log, bins, out } => {
            let logs = log.iter().map(RunLog::read).collect::<Result<Vec<_>, _>>()?;
            let hist = final_return_histogram(&logs, bins);
            for (name, counts) in &hist.counts {
                println!("{name}: {} runs", counts.iter().sum::<u64>());
            }
            write_hist_csv(&out.unwrap_or_else(|| log_dir(&log[0]).join("hist.csv")), &hist)
        }
        AnalyzeCommand::Trends { log, k, out } => {
            let dir = log_dir(&log);
            let runlog = RunLog::read(&log)?;
            let cfg: Option<RunConfig> = serde_json::from_value(runlog.header.config.clone()).ok();
            let space = match &cfg {
                Some(c) => Some(c.tuned_space()?),
                None => None,
            };
            let schedule = extract_schedule(&runlog, ExtractMode::TopKMean(k), space.as_ref())?;
            for e in &schedule.entries {
                let values: Vec<String> = e.config.iter().map(|(n, v)| format!("{n}={v:.4e}")).collect();
                println!("trial {:>4}: {}", e.trial, values.join(" "));
            }
            write_schedule_csv(&out.unwrap_or_else(|| dir.join("trends.csv")), &schedule)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Search(a) => search(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Analyze { what } => analyze(what),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
