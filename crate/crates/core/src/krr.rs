//! Weighted kernel ridge regression with row-specific ridge levels.
//!
//! The fitted function is `ĝ(x) = K_{xX} α + ĉ` where `α` solves
//! `(R K + n Λ) α = R Φ̃`, `R = diag(ρ)`, `Λ = diag(λ̃)` and `Φ̃` are the
//! trimmed pseudo-outcomes centred at the weighted intercept `ĉ`.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{shape, OarError, Result};
use crate::exec::{self, Execution};
use crate::learners::{intercept_c_star, pseudo_outcome, weight_rho, LearnerKind};
use crate::nuisance::NuisanceEstimates;
use crate::regfun::{lambda_fn, rescale_lambda, RegKind, RegSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Rbf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub kind: KernelKind,
    pub bandwidth: f64,
}

impl KernelConfig {
    pub fn rbf(bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(OarError::Config(format!(
                "bandwidth must be > 0, got {bandwidth}"
            )));
        }
        Ok(KernelConfig {
            kind: KernelKind::Rbf,
            bandwidth,
        })
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match self.kind {
            KernelKind::Rbf => rbf_kernel(x, y, self.bandwidth),
        }
    }
}

/// `exp(−‖x − x'‖² / (2h²))`
pub fn rbf_kernel(x: &[f64], y: &[f64], h: f64) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (-d2 / (2.0 * h * h)).exp()
}

fn row(x: &DMatrix<f64>, i: usize) -> Vec<f64> {
    x.row(i).iter().copied().collect()
}

/// Cross-kernel matrix `K(a_i, b_j)`.
pub fn kernel_matrix(kernel: &KernelConfig, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let ra: Vec<Vec<f64>> = (0..a.nrows()).map(|i| row(a, i)).collect();
    let rb: Vec<Vec<f64>> = (0..b.nrows()).map(|j| row(b, j)).collect();
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| kernel.eval(&ra[i], &rb[j]))
}

fn gram(kernel: &KernelConfig, x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| row(x, i)).collect();
    let mut k = DMatrix::identity(n, n);
    for i in 0..n {
        for j in 0..i {
            let v = kernel.eval(&rows[i], &rows[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Solve `A α = rhs` for symmetric positive definite `A`, adding `1e-10` to
/// the diagonal once if the Cholesky factorization fails.
pub fn solve_spd(a: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(rhs));
    }
    let mut jittered = a.clone();
    for i in 0..a.nrows() {
        jittered[(i, i)] += 1e-10;
    }
    match jittered.cholesky() {
        Some(ch) => Ok(ch.solve(rhs)),
        None => Err(OarError::Numerical(
            "kernel system is not positive definite".into(),
        )),
    }
}

/// Everything that defines one weighted KRR problem.
#[derive(Debug, Clone, PartialEq)]
pub struct KrrProblem {
    pub k: DMatrix<f64>,
    pub rho: Vec<f64>,
    /// Row ridge levels `λ̃`.
    pub lambda: Vec<f64>,
    /// Centred pseudo-outcomes `Φ̃`.
    pub target: Vec<f64>,
    pub intercept: f64,
}

impl KrrProblem {
    pub fn n(&self) -> usize {
        self.rho.len()
    }

    /// Dual coefficients of `(R K + n Λ) α = R Φ̃`. Rows with `ρ = 0` get
    /// `α = 0`; the remaining block is solved in the symmetric form
    /// `(K + n R⁻¹ Λ) α = Φ̃`.
    pub fn solve(&self) -> Result<DVector<f64>> {
        let n = self.n();
        let active: Vec<usize> = (0..n).filter(|&i| self.rho[i] > 0.0).collect();
        if active.is_empty() {
            return Err(OarError::Numerical(
                "every row has zero weight; the KRR system is singular".into(),
            ));
        }
        for &i in &active {
            if !(self.lambda[i] >= 0.0) {
                return Err(OarError::Domain(format!(
                    "row {i}: negative ridge level {}",
                    self.lambda[i]
                )));
            }
        }
        let nf = n as f64;
        let m = active.len();
        let a = DMatrix::from_fn(m, m, |r, c| {
            let (i, j) = (active[r], active[c]);
            let mut v = self.k[(i, j)];
            if r == c {
                v += nf * self.lambda[i] / self.rho[i];
            }
            v
        });
        let rhs = DVector::from_fn(m, |r, _| self.target[active[r]]);
        let sol = solve_spd(&a, &rhs)?;
        let mut alpha = DVector::zeros(n);
        for (r, &i) in active.iter().enumerate() {
            alpha[i] = sol[r];
        }
        Ok(alpha)
    }

    /// Objective whose unique stationary point is the dual solution:
    /// `(1/n)(Φ̃ − Kα)ᵀ R Λ⁻¹ (Φ̃ − Kα) + αᵀ K α`. Needs `λ̃ > 0`.
    pub fn objective(&self, alpha: &DVector<f64>) -> f64 {
        let n = self.n() as f64;
        let fit = &self.k * alpha;
        let data: f64 = (0..self.n())
            .map(|i| {
                let e = self.target[i] - fit[i];
                self.rho[i] / self.lambda[i] * e * e
            })
            .sum::<f64>()
            / n;
        data + alpha.dot(&fit)
    }

    /// Gradient of [`KrrProblem::objective`].
    pub fn objective_grad(&self, alpha: &DVector<f64>) -> DVector<f64> {
        let n = self.n() as f64;
        let fit = &self.k * alpha;
        let weighted = DVector::from_fn(self.n(), |i, _| {
            -2.0 / n * self.rho[i] / self.lambda[i] * (self.target[i] - fit[i])
        });
        &self.k * weighted + fit * 2.0
    }
}

/// Stage-2 KRR settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KrrConfig {
    pub learner: LearnerKind,
    pub reg: RegSchedule,
    pub kernel: KernelConfig,
}

/// Build the weighted problem for a training set and its nuisances.
pub fn build_problem(
    cfg: &KrrConfig,
    train: &Dataset,
    nuis: &NuisanceEstimates,
) -> Result<KrrProblem> {
    if nuis.n() != train.n() {
        return shape(format!(
            "{} nuisance rows for {} training rows",
            nuis.n(),
            train.n()
        ));
    }
    cfg.reg.validate(false)?;
    if cfg.reg.kind == RegKind::SquaredMultiplicative {
        log::warn!("squared multiplicative levels are intended for implicit regularizers, not RKHS penalties");
    }
    let n = train.n();
    let mut rho = Vec::with_capacity(n);
    let mut phi = Vec::with_capacity(n);
    for i in 0..n {
        let r = nuis.row(i);
        rho.push(weight_rho(cfg.learner, train.a[i], r.pi)?);
        let p = pseudo_outcome(cfg.learner, train.a[i], train.y[i], &r)?;
        phi.push(if nuis.trim[i] { p } else { 0.0 });
    }
    let raw: Vec<f64> = nuis
        .nu_hat
        .iter()
        .map(|&nu| lambda_fn(cfg.reg.kind, nu))
        .collect::<Result<_>>()?;
    let lambda = rescale_lambda(&raw, &nuis.trim, cfg.reg.base, cfg.reg.effective_gamma())?.values;
    let intercept = intercept_c_star(&rho, &phi)?;
    let target = phi.iter().map(|p| p - intercept).collect();
    Ok(KrrProblem {
        k: gram(&cfg.kernel, &train.x),
        rho,
        lambda,
        target,
        intercept,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KrrModel {
    pub x: DMatrix<f64>,
    pub dual: DVector<f64>,
    pub intercept: f64,
    pub kernel: KernelConfig,
}

pub fn fit_krr_oar(cfg: &KrrConfig, train: &Dataset, nuis: &NuisanceEstimates) -> Result<KrrModel> {
    let problem = build_problem(cfg, train, nuis)?;
    Ok(KrrModel {
        x: train.x.clone(),
        dual: problem.solve()?,
        intercept: problem.intercept,
        kernel: cfg.kernel,
    })
}

impl KrrModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.predict_with(x, Execution::Sequential)
    }

    pub fn predict_with(&self, x: &DMatrix<f64>, exec: Execution) -> Result<Vec<f64>> {
        if x.ncols() != self.x.ncols() {
            return shape(format!(
                "query has {} columns, model has {}",
                x.ncols(),
                self.x.ncols()
            ));
        }
        let train: Vec<Vec<f64>> = (0..self.x.nrows()).map(|i| row(&self.x, i)).collect();
        Ok(exec::map_range(exec, x.nrows(), |q| {
            let xq = row(x, q);
            self.intercept
                + train
                    .iter()
                    .zip(self.dual.iter())
                    .map(|(xt, a)| a * self.kernel.eval(&xq, xt))
                    .sum::<f64>()
        }))
    }

    /// Writes `<stem>.csv` (training inputs and dual) and `<stem>.json`.
    pub fn save(&self, csv_path: &Path, manifest: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(csv_path)?;
        let d = self.x.ncols();
        let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
        header.push("dual".into());
        w.write_record(&header)?;
        for i in 0..self.x.nrows() {
            let mut rec: Vec<String> = (0..d).map(|j| format!("{:.16e}", self.x[(i, j)])).collect();
            rec.push(format!("{:.16e}", self.dual[i]));
            w.write_record(&rec)?;
        }
        w.flush()?;
        let man = serde_json::json!({
            "intercept": self.intercept,
            "kernel": self.kernel,
            "n": self.x.nrows(),
            "d": d,
        });
        fs::write(manifest, serde_json::to_string_pretty(&man)?)?;
        Ok(())
    }

    pub fn load(csv_path: &Path, manifest: &Path) -> Result<Self> {
        let man: serde_json::Value = serde_json::from_str(&fs::read_to_string(manifest)?)?;
        let kernel: KernelConfig = serde_json::from_value(man["kernel"].clone())?;
        let intercept = man["intercept"]
            .as_f64()
            .ok_or_else(|| OarError::Config("manifest lacks an intercept".into()))?;
        let mut rdr = csv::Reader::from_path(csv_path)?;
        let d = rdr.headers()?.len() - 1;
        let mut xs = Vec::new();
        let mut dual = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| OarError::Parse {
                    row: r,
                    message: e.to_string(),
                })?;
            xs.extend_from_slice(&vals[..d]);
            dual.push(vals[d]);
        }
        let n = dual.len();
        Ok(KrrModel {
            x: DMatrix::from_row_slice(n, d, &xs),
            dual: DVector::from_vec(dual),
            intercept,
            kernel,
        })
    }
}

/// Max deviation between `K_{qX}(W K + nI)⁻¹ W T` and `K_{qX}(K + nW⁻¹)⁻¹ T`.
pub fn pushthrough_deviation(
    kernel: &KernelConfig,
    x: &DMatrix<f64>,
    weights: &[f64],
    t: &[f64],
    query: &DMatrix<f64>,
) -> Result<f64> {
    let n = x.nrows();
    if weights.len() != n || t.len() != n {
        return shape("push-through inputs differ in length");
    }
    if weights.iter().any(|&w| !(w > 0.0)) {
        return Err(OarError::Domain(
            "push-through weights must be positive".into(),
        ));
    }
    let k = gram(kernel, x);
    let kq = kernel_matrix(kernel, query, x);
    let nf = n as f64;
    let tv = DVector::from_column_slice(t);
    let w = DMatrix::from_diagonal(&DVector::from_column_slice(weights));
    let mut left = &w * &k;
    for i in 0..n {
        left[(i, i)] += nf;
    }
    let wt = &w * &tv;
    let a1 = left
        .lu()
        .solve(&wt)
        .ok_or_else(|| OarError::Numerical("push-through left system is singular".into()))?;
    let mut right = k.clone();
    for i in 0..n {
        right[(i, i)] += nf / weights[i];
    }
    let a2 = solve_spd(&right, &tv)?;
    let d = &kq * (a1 - a2);
    Ok(d.amax())
}

/// Deviation between the `W K` form with general weights `ρ` and the
/// overlap-ridge form `Λ = 1/ν` applied to the same targets.
pub fn pushthrough_plugin_deviation(
    kernel: &KernelConfig,
    x: &DMatrix<f64>,
    rho: &[f64],
    nu: &[f64],
    t: &[f64],
    query: &DMatrix<f64>,
) -> Result<f64> {
    let n = x.nrows();
    let k = gram(kernel, x);
    let kq = kernel_matrix(kernel, query, x);
    let nf = n as f64;
    let tv = DVector::from_column_slice(t);
    let mut left = DMatrix::from_fn(n, n, |i, j| rho[i] * k[(i, j)]);
    for i in 0..n {
        left[(i, i)] += nf;
    }
    let rt = DVector::from_fn(n, |i, _| rho[i] * t[i]);
    let a1 = left
        .lu()
        .solve(&rt)
        .ok_or_else(|| OarError::Numerical("plug-in system is singular".into()))?;
    let mut right = k;
    for i in 0..n {
        right[(i, i)] += nf / nu[i];
    }
    let a2 = solve_spd(&right, &tv)?;
    Ok((&kq * (a1 - a2)).amax())
}

/// Evenly spaced one-dimensional query grid spanning the data range.
pub fn query_grid(x: &DMatrix<f64>, points: usize) -> DMatrix<f64> {
    let col = x.column(0);
    let (lo, hi) = (col.min(), col.max());
    let step = if points > 1 {
        (hi - lo) / (points - 1) as f64
    } else {
        0.0
    };
    DMatrix::from_fn(points, x.ncols(), |i, j| {
        if j == 0 {
            lo + step * i as f64
        } else {
            x[(0, j)]
        }
    })
}
