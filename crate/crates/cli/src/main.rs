use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use oar_core::checks;
use oar_core::config::{CellSpec, ExperimentConfig, ModelKind, NuisanceSource};
use oar_core::dataset::{generate_synthetic, save_csv, save_sidecar, SyntheticConfig};
use oar_core::eval::{
    fingerprint, prepare_seed, read_results, resolve_cell, run_experiment, summarize,
    ResolvedModel, ResultSink,
};
use oar_core::exec::{self, Execution};
use oar_core::krr::fit_krr_oar;
use oar_core::regfun::RegMode;
use oar_core::second_stage::fit_target;
use oar_core::OarError;

/// Overlap-adaptive regularization for CATE meta-learners.
#[derive(Debug, Parser)]
#[command(name = "oar", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// TOML experiment config
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set data.n_train=500` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Seed (overrides run.seed)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for `experiment` (default: all cores)
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Log verbosity: -v info, -vv debug
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a synthetic dataset and write CSV plus a JSON sidecar
    Generate {
        #[arg(long, default_value_t = 250)]
        n: usize,
        #[arg(long, default_value_t = 2.0)]
        b: f64,
    },
    /// Fit one cell on one seed and print rPEHE
    Fit {
        /// Cell label to fit (default: the first cell, or DR OAR dropout m=0.5)
        #[arg(long)]
        cell: Option<String>,
    },
    /// Run the seed × cell sweep and write results and a summary
    Experiment {
        /// Discard existing results instead of resuming
        #[arg(long)]
        fresh: bool,
    },
    /// Run the numerical verification suites
    Check,
    /// Re-aggregate a results file
    Summarize {
        /// JSON-lines results (default: OUT/results.jsonl)
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        baseline: Option<String>,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] OarError),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(OarError::Config(_)) => 1,
            _ => 2,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    fs::create_dir_all(&g.out).map_err(OarError::from)?;
    match &cli.command {
        Command::Generate { n, b } => generate(g, *n, *b),
        Command::Fit { cell } => fit(g, cell.as_deref()),
        Command::Experiment { fresh } => experiment(g, *fresh),
        Command::Check => check(g),
        Command::Summarize { results, baseline } => {
            summarize_cmd(g, results.as_deref(), baseline.as_deref())
        }
    }
}

fn load_config(g: &Global) -> Result<ExperimentConfig, CliError> {
    let mut overrides = g.overrides.clone();
    if let Some(s) = g.seed {
        overrides.push(format!("run.seed={s}"));
    }
    let cfg = ExperimentConfig::load(g.config.as_deref(), &overrides)?;
    fs::write(g.out.join("resolved.toml"), cfg.to_toml()?).map_err(OarError::from)?;
    Ok(cfg)
}

fn generate(g: &Global, n: usize, b: f64) -> Result<(), CliError> {
    if g.config.is_some() || !g.overrides.is_empty() {
        return Err(CliError::Usage(
            "generate takes --n, --b and --seed, not a config".into(),
        ));
    }
    let cfg = SyntheticConfig {
        n,
        b,
        seed: g.seed.unwrap_or(0),
    };
    let ds = generate_synthetic(&cfg)?;
    let csv = g.out.join("data.csv");
    save_csv(&ds, &csv)?;
    save_sidecar(&cfg, &g.out.join("data.json"))?;
    println!("wrote {} rows to {}", ds.n(), csv.display());
    Ok(())
}

fn default_cell() -> CellSpec {
    CellSpec {
        name: None,
        model: ModelKind::Mlp,
        nuisance: NuisanceSource::Estimated,
        learner: oar_core::learners::LearnerKind::DR,
        injector: oar_core::second_stage::Injector::Dropout,
        mode: RegMode::Adaptive,
        kind: oar_core::regfun::RegKind::Multiplicative,
        base: 0.5,
        gamma: None,
    }
}

fn fit(g: &Global, label: Option<&str>) -> Result<(), CliError> {
    let cfg = load_config(g)?;
    let cells = cfg.all_cells();
    let spec = match label {
        Some(l) => cells
            .iter()
            .find(|c| c.label() == l)
            .cloned()
            .ok_or_else(|| CliError::Usage(format!("no cell named '{l}'")))?,
        None => cells.first().cloned().unwrap_or_else(default_cell),
    };
    let cell = resolve_cell(&cfg, &spec)?;
    let seed = cfg.run.seed;
    let ctx = prepare_seed(
        &cfg,
        seed,
        cell.nuisance == NuisanceSource::Estimated,
        cell.nuisance == NuisanceSource::Oracle,
    )?;
    let nuis = match cell.nuisance {
        NuisanceSource::Estimated => ctx.estimated.as_ref(),
        NuisanceSource::Oracle => ctx.oracle.as_ref(),
    }
    .expect("prepared above");
    nuis.save_csv(&g.out.join("nuisance.csv"))?;
    let (pred_in, pred_out) = match &cell.model {
        ResolvedModel::Mlp(s) => {
            let t = fit_target(s, &ctx.train, nuis, seed)?;
            t.save_trace(&g.out.join("trace.csv"))?;
            (t.predict(&ctx.train.x)?, t.predict(&ctx.test.x)?)
        }
        ResolvedModel::Krr(k) => {
            let m = fit_krr_oar(k, &ctx.train, nuis)?;
            m.save(&g.out.join("krr.csv"), &g.out.join("krr.json"))?;
            (m.predict(&ctx.train.x)?, m.predict(&ctx.test.x)?)
        }
    };
    let rin = oar_core::eval::rpehe(&pred_in, ctx.train.oracle_cate.as_deref())?;
    let rout = oar_core::eval::rpehe(&pred_out, ctx.test.oracle_cate.as_deref())?;
    println!("cell: {}", cell.label);
    println!("fingerprint: {}", fingerprint(&cfg, &cell)?);
    println!("seed: {seed}");
    println!("rpehe_out: {rout}");
    println!("rpehe_in: {rin}");
    Ok(())
}

fn experiment(g: &Global, fresh: bool) -> Result<(), CliError> {
    let cfg = load_config(g)?;
    let path = g.out.join("results.jsonl");
    if fresh && path.exists() {
        fs::remove_file(&path).map_err(OarError::from)?;
    }
    let previous = if path.exists() {
        read_results(&path)?
    } else {
        Vec::new()
    };
    if !previous.is_empty() {
        log::info!("resuming with {} finished runs", previous.len());
    }
    let sink = ResultSink::open(&path)?;
    let results = exec::with_jobs(g.jobs, || {
        run_experiment(&cfg, Execution::Parallel, Some(&sink), &previous)
    })?;
    // keep only runs of the current config
    let current: Vec<String> = cfg
        .all_cells()
        .iter()
        .map(|c| resolve_cell(&cfg, c).and_then(|r| fingerprint(&cfg, &r)))
        .collect::<Result<_, _>>()?;
    let results: Vec<_> = results
        .into_iter()
        .filter(|r| current.contains(&r.fingerprint))
        .collect();
    let failures = results.iter().filter(|r| r.error.is_some()).count();
    write_summary(g, &results, cfg.run.baseline.as_deref())?;
    if failures > 0 {
        return Err(CliError::Failed(format!(
            "{failures} runs failed; see {}",
            path.display()
        )));
    }
    Ok(())
}

fn write_summary(
    g: &Global,
    results: &[oar_core::eval::RunResult],
    baseline: Option<&str>,
) -> Result<(), CliError> {
    let s = summarize(results, baseline)?;
    s.save_text(&g.out.join("summary.txt"))?;
    s.save_csv(&g.out.join("summary.csv"))?;
    print!("{}", s.to_text());
    Ok(())
}

fn check(g: &Global) -> Result<(), CliError> {
    let outcomes = checks::run_all(g.seed.unwrap_or(0), Execution::Sequential);
    let mut report = String::new();
    for o in &outcomes {
        println!("{o}");
        report.push_str(&format!("{o}\n"));
    }
    fs::write(g.out.join("check.txt"), report).map_err(OarError::from)?;
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} suites failed")));
    }
    Ok(())
}

fn summarize_cmd(
    g: &Global,
    results: Option<&Path>,
    baseline: Option<&str>,
) -> Result<(), CliError> {
    let default = g.out.join("results.jsonl");
    let path = results.unwrap_or(&default);
    let rs = read_results(path)?;
    write_summary(g, &rs, baseline)
}
