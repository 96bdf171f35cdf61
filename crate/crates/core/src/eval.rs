//! Metrics, multi-seed sweeps and result aggregation.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{CellSpec, ExperimentConfig, ModelKind, NuisanceSource};
use crate::dataset::{generate_with, Dataset, SyntheticConfig};
use crate::error::{OarError, Result};
use crate::exec::{self, Execution};
use crate::krr::{fit_krr_oar, KernelConfig, KrrConfig};
use crate::nuisance::{fit_nuisance, NuisanceEstimates};
use crate::regfun::RegSchedule;
use crate::rng::{self, Stream};
use crate::second_stage::{fit_target, SecondStageConfig};

/// Root mean squared difference between estimates and the true effect.
pub fn rpehe(estimates: &[f64], oracle: Option<&[f64]>) -> Result<f64> {
    let tau = oracle.ok_or_else(|| OarError::Config("rPEHE needs the true effect".into()))?;
    if tau.len() != estimates.len() || tau.is_empty() {
        return Err(OarError::Shape(format!(
            "{} estimates for {} true effects",
            estimates.len(),
            tau.len()
        )));
    }
    let mse = estimates
        .iter()
        .zip(tau)
        .map(|(g, t)| (g - t) * (g - t))
        .sum::<f64>()
        / tau.len() as f64;
    Ok(mse.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub fingerprint: String,
    pub cell: String,
    pub seed: u64,
    pub rpehe_out: f64,
    pub rpehe_in: f64,
    pub wall_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// A cell with every knob resolved.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ResolvedModel {
    Mlp(SecondStageConfig),
    Krr(KrrConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedCell {
    pub label: String,
    pub nuisance: NuisanceSource,
    pub model: ResolvedModel,
}

pub fn resolve_cell(cfg: &ExperimentConfig, cell: &CellSpec) -> Result<ResolvedCell> {
    let model = match cell.model {
        ModelKind::Mlp => {
            let mut s = cfg.stage2;
            s.learner = cell.learner;
            s.injector = cell.injector;
            s.mode = cell.mode;
            s.kind = cell.kind;
            s.base = cell.base;
            s.trim_lo = cfg.run.trim_lo;
            if let Some(g) = cell.gamma {
                s.gamma = g;
            }
            s.validate()?;
            ResolvedModel::Mlp(s)
        }
        ModelKind::Krr => {
            let mut reg = RegSchedule::new(
                cell.kind,
                cell.base,
                cell.gamma.unwrap_or(cfg.krr.gamma),
                cell.mode,
            );
            reg.trim_lo = cfg.run.trim_lo;
            reg.validate(false)?;
            ResolvedModel::Krr(KrrConfig {
                learner: cell.learner,
                reg,
                kernel: KernelConfig::rbf(cfg.krr.bandwidth)?,
            })
        }
    };
    Ok(ResolvedCell {
        label: cell.label(),
        nuisance: cell.nuisance,
        model,
    })
}

fn fnv64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Stable identifier of everything that determines a cell's results.
pub fn fingerprint(cfg: &ExperimentConfig, cell: &ResolvedCell) -> Result<String> {
    let stage1 = match cell.nuisance {
        NuisanceSource::Estimated => Some(&cfg.stage1),
        NuisanceSource::Oracle => None,
    };
    let key = serde_json::json!({
        "data": cfg.data,
        "trim_lo": cfg.run.trim_lo,
        "stage1": stage1,
        "nuisance": cell.nuisance,
        "model": cell.model,
    });
    Ok(format!("{:016x}", fnv64(&serde_json::to_string(&key)?)))
}

/// Train and test samples for one seed.
pub fn seed_data(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let train_cfg = SyntheticConfig {
        n: cfg.data.n_train,
        b: cfg.data.b,
        seed,
    };
    let mut train = generate_with(&train_cfg, &mut rng::stream(seed, Stream::Data))?;
    let test_cfg = SyntheticConfig {
        n: cfg.data.n_test,
        ..train_cfg
    };
    let mut test = generate_with(&test_cfg, &mut rng::stream(seed, Stream::TestData))?;
    if cfg.data.standardize {
        let (m, s) = train.column_stats();
        train = train.standardized(&m, &s);
        test = test.standardized(&m, &s);
    }
    Ok((train, test))
}

/// Stage-1 products shared by every cell of a seed.
pub struct SeedContext {
    pub seed: u64,
    pub train: Dataset,
    pub test: Dataset,
    pub estimated: Option<NuisanceEstimates>,
    pub oracle: Option<NuisanceEstimates>,
}

pub fn prepare_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    need_estimated: bool,
    need_oracle: bool,
) -> Result<SeedContext> {
    let (train, test) = seed_data(cfg, seed)?;
    let estimated = if need_estimated {
        Some(fit_nuisance(&train, &cfg.stage1, cfg.run.trim_lo, seed)?)
    } else {
        None
    };
    let oracle = if need_oracle {
        Some(NuisanceEstimates::from_oracle(&train, cfg.run.trim_lo)?)
    } else {
        None
    };
    Ok(SeedContext {
        seed,
        train,
        test,
        estimated,
        oracle,
    })
}

/// Fit one cell on one seed and score it in and out of sample.
pub fn run_cell(ctx: &SeedContext, cell: &ResolvedCell) -> Result<(f64, f64)> {
    let nuis = match cell.nuisance {
        NuisanceSource::Estimated => ctx.estimated.as_ref(),
        NuisanceSource::Oracle => ctx.oracle.as_ref(),
    }
    .ok_or_else(|| OarError::Config("nuisances for this cell were not prepared".into()))?;
    let (pred_in, pred_out) = match &cell.model {
        ResolvedModel::Mlp(s) => {
            let t = fit_target(s, &ctx.train, nuis, ctx.seed)?;
            (t.predict(&ctx.train.x)?, t.predict(&ctx.test.x)?)
        }
        ResolvedModel::Krr(k) => {
            let m = fit_krr_oar(k, &ctx.train, nuis)?;
            (m.predict(&ctx.train.x)?, m.predict(&ctx.test.x)?)
        }
    };
    Ok((
        rpehe(&pred_in, ctx.train.oracle_cate.as_deref())?,
        rpehe(&pred_out, ctx.test.oracle_cate.as_deref())?,
    ))
}

/// Append-only JSON-lines sink shared between workers.
pub struct ResultSink {
    file: Mutex<File>,
}

impl ResultSink {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(ResultSink {
            file: Mutex::new(file),
        })
    }

    pub fn push(&self, r: &RunResult) -> Result<()> {
        let line = serde_json::to_string(r)?;
        let mut f = self.file.lock().expect("result sink poisoned");
        writeln!(f, "{line}")?;
        f.flush()?;
        Ok(())
    }
}

pub fn read_results(path: &Path) -> Result<Vec<RunResult>> {
    let f = File::open(path)?;
    let mut out = Vec::new();
    for (row, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| OarError::Parse {
            row,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Sweep every seed × cell. Finished `(fingerprint, seed)` pairs found in
/// `resume` are skipped; new results go to `sink` as they complete.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    execution: Execution,
    sink: Option<&ResultSink>,
    resume: &[RunResult],
) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    if cfg.all_cells().is_empty() {
        return Err(OarError::Config(
            "no cells: add [[cell]] entries or a [grid] section".into(),
        ));
    }
    let cells: Vec<ResolvedCell> = cfg
        .all_cells()
        .iter()
        .map(|c| resolve_cell(cfg, c))
        .collect::<Result<_>>()?;
    let prints: Vec<String> = cells
        .iter()
        .map(|c| fingerprint(cfg, c))
        .collect::<Result<_>>()?;
    let done: HashSet<(String, u64)> = resume
        .iter()
        .map(|r| (r.fingerprint.clone(), r.seed))
        .collect();
    let seeds: Vec<u64> = (0..cfg.run.seeds as u64)
        .map(|i| cfg.run.seed + i)
        .collect();

    let per_seed = exec::map(execution, &seeds, |&seed| -> Vec<RunResult> {
        let todo: Vec<usize> = (0..cells.len())
            .filter(|&c| !done.contains(&(prints[c].clone(), seed)))
            .collect();
        if todo.is_empty() {
            return Vec::new();
        }
        let need_est = todo
            .iter()
            .any(|&c| cells[c].nuisance == NuisanceSource::Estimated);
        let need_orc = todo
            .iter()
            .any(|&c| cells[c].nuisance == NuisanceSource::Oracle);
        let started = Instant::now();
        let ctx = prepare_seed(cfg, seed, need_est, need_orc);
        let ctx = match ctx {
            Ok(c) => c,
            Err(e) => {
                let msg = format!("stage 1: {e}");
                log::error!("seed {seed}: {msg}");
                return todo
                    .iter()
                    .map(|&c| failed(&cells[c], &prints[c], seed, &msg, started))
                    .collect();
            }
        };
        exec::map(execution, &todo, |&c| {
            let t0 = Instant::now();
            let r = match run_cell(&ctx, &cells[c]) {
                Ok((rin, rout)) => RunResult {
                    fingerprint: prints[c].clone(),
                    cell: cells[c].label.clone(),
                    seed,
                    rpehe_out: rout,
                    rpehe_in: rin,
                    wall_ms: t0.elapsed().as_secs_f64() * 1e3,
                    error: None,
                },
                Err(e) => {
                    log::error!("seed {seed}, cell '{}': {e}", cells[c].label);
                    failed(&cells[c], &prints[c], seed, &e.to_string(), t0)
                }
            };
            if let Some(s) = sink {
                if let Err(e) = s.push(&r) {
                    log::error!("could not record result: {e}");
                }
            }
            r
        })
    });
    let mut out: Vec<RunResult> = resume.to_vec();
    out.extend(per_seed.into_iter().flatten());
    // order by cell definition, then seed
    let rank: BTreeMap<&str, usize> = prints
        .iter()
        .enumerate()
        .map(|(i, p)| (p.as_str(), i))
        .collect();
    out.sort_by_key(|r| {
        (
            rank.get(r.fingerprint.as_str())
                .copied()
                .unwrap_or(usize::MAX),
            r.seed,
        )
    });
    Ok(out)
}

fn failed(cell: &ResolvedCell, print: &str, seed: u64, msg: &str, t0: Instant) -> RunResult {
    RunResult {
        fingerprint: print.to_string(),
        cell: cell.label.clone(),
        seed,
        rpehe_out: f64::NAN,
        rpehe_in: f64::NAN,
        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        error: Some(msg.to_string()),
    }
}

/// Aggregate of one cell over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub cell: String,
    pub n: usize,
    pub failures: usize,
    pub mean: f64,
    pub sd: f64,
    pub se: f64,
    pub mean_in: f64,
    /// Mean difference to the baseline (negative is better).
    pub delta: f64,
    /// Mean and standard error of the per-seed paired difference over shared seeds.
    pub paired_delta: f64,
    pub paired_se: f64,
    pub paired_n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub baseline: String,
    pub rows: Vec<SummaryRow>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() >= 2 {
        (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        f64::NAN
    };
    (mean, sd)
}

/// Per-cell mean, sd, se and Δ versus `baseline`, in first-appearance order.
pub fn summarize(results: &[RunResult], baseline: Option<&str>) -> Result<Summary> {
    let mut order: Vec<String> = Vec::new();
    let mut by_cell: BTreeMap<String, Vec<&RunResult>> = BTreeMap::new();
    for r in results {
        if !by_cell.contains_key(&r.cell) {
            order.push(r.cell.clone());
        }
        by_cell.entry(r.cell.clone()).or_default().push(r);
    }
    let baseline = match baseline {
        Some(b) => b.to_string(),
        None => order
            .first()
            .cloned()
            .ok_or_else(|| OarError::Config("no results to summarize".into()))?,
    };
    let base_rows = by_cell
        .get(&baseline)
        .ok_or_else(|| OarError::Config(format!("unknown baseline '{baseline}'")))?;
    let base_ok: BTreeMap<u64, f64> = base_rows
        .iter()
        .filter(|r| r.error.is_none())
        .map(|r| (r.seed, r.rpehe_out))
        .collect();
    let base_mean = mean_sd(&base_ok.values().copied().collect::<Vec<_>>()).0;
    let rows = order
        .iter()
        .map(|cell| {
            let rs = &by_cell[cell];
            let ok: Vec<&&RunResult> = rs.iter().filter(|r| r.error.is_none()).collect();
            let out: Vec<f64> = ok.iter().map(|r| r.rpehe_out).collect();
            let inn: Vec<f64> = ok.iter().map(|r| r.rpehe_in).collect();
            let (mean, sd) = mean_sd(&out);
            let diffs: Vec<f64> = ok
                .iter()
                .filter_map(|r| base_ok.get(&r.seed).map(|b| r.rpehe_out - b))
                .collect();
            let (pd, psd) = mean_sd(&diffs);
            SummaryRow {
                cell: cell.clone(),
                n: ok.len(),
                failures: rs.len() - ok.len(),
                mean,
                sd,
                se: sd / (out.len() as f64).sqrt(),
                mean_in: mean_sd(&inn).0,
                delta: mean - base_mean,
                paired_delta: pd,
                paired_se: psd / (diffs.len() as f64).sqrt(),
                paired_n: diffs.len(),
            }
        })
        .collect();
    Ok(Summary { baseline, rows })
}

impl Summary {
    pub fn row(&self, cell: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.cell == cell)
    }

    pub fn to_text(&self) -> String {
        let w = self
            .rows
            .iter()
            .map(|r| r.cell.len())
            .max()
            .unwrap_or(4)
            .max(4);
        let mut s = format!(
            "{:<w$}  {:>4}  {:>8}  {:>8}  {:>8}  {:>8}  {:>9}\n",
            "cell", "n", "mean", "sd", "se", "in", "delta"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<w$}  {:>4}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}  {:>+9.4}{}\n",
                r.cell,
                r.n,
                r.mean,
                r.sd,
                r.se,
                r.mean_in,
                r.delta,
                if r.failures > 0 {
                    format!("  ({} failed)", r.failures)
                } else {
                    String::new()
                }
            ));
        }
        s.push_str(&format!("baseline: {}\n", self.baseline));
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_text(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}
