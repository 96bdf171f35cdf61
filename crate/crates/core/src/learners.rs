//! Weighting functions and pseudo-outcomes of the orthogonal meta-learners.
//!
//! Each learner is a triple `(w, ρ, φ)`: the weighting function of the
//! original risk, its debiased version `ρ(a, π) = (a − π) w'(π) + w(π)`, and
//! a pseudo-outcome with `E[φ | X] = τ(X)` at the true nuisances.

use serde::{Deserialize, Serialize};

use crate::error::{domain, OarError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LearnerKind {
    DR,
    R,
    IVW,
}

impl LearnerKind {
    pub const ALL: [LearnerKind; 3] = [LearnerKind::DR, LearnerKind::R, LearnerKind::IVW];

    pub fn short_name(self) -> &'static str {
        match self {
            LearnerKind::DR => "DR",
            LearnerKind::R => "R",
            LearnerKind::IVW => "IVW",
        }
    }
}

/// Nuisance values at a single row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NuisanceRow {
    pub mu0: f64,
    pub mu1: f64,
    pub pi: f64,
}

impl NuisanceRow {
    pub fn new(mu0: f64, mu1: f64, pi: f64) -> Self {
        NuisanceRow { mu0, mu1, pi }
    }

    /// `μ = (1 − π) μ₀ + π μ₁`
    pub fn mu(&self) -> f64 {
        (1.0 - self.pi) * self.mu0 + self.pi * self.mu1
    }

    pub fn nu(&self) -> f64 {
        self.pi * (1.0 - self.pi)
    }

    pub fn mu_a(&self, a: u8) -> f64 {
        if a == 1 {
            self.mu1
        } else {
            self.mu0
        }
    }

    pub fn effect(&self) -> f64 {
        self.mu1 - self.mu0
    }
}

fn check_pi(pi: f64) -> Result<()> {
    if pi > 0.0 && pi < 1.0 {
        Ok(())
    } else {
        domain(format!("propensity must lie in (0, 1), got {pi}"))
    }
}

fn check_a(a: u8) -> Result<f64> {
    match a {
        0 | 1 => Ok(a as f64),
        _ => domain(format!("treatment must be 0 or 1, got {a}")),
    }
}

/// Weighting function `w(π)` of the original risk.
pub fn weight_w(kind: LearnerKind, pi: f64) -> Result<f64> {
    check_pi(pi)?;
    Ok(match kind {
        LearnerKind::DR => 1.0,
        LearnerKind::R | LearnerKind::IVW => pi * (1.0 - pi),
    })
}

/// Debiased weight `ρ(a, π)`.
pub fn weight_rho(kind: LearnerKind, a: u8, pi: f64) -> Result<f64> {
    check_pi(pi)?;
    let a = check_a(a)?;
    Ok(match kind {
        LearnerKind::DR => 1.0,
        LearnerKind::R | LearnerKind::IVW => (a - pi) * (a - pi),
    })
}

/// Pseudo-outcome `φ`. DR and IVW share the doubly robust form; R uses the
/// residual-on-residual form `(y − μ) / (a − π)`.
pub fn pseudo_outcome(kind: LearnerKind, a: u8, y: f64, row: &NuisanceRow) -> Result<f64> {
    check_pi(row.pi)?;
    let af = check_a(a)?;
    match kind {
        LearnerKind::DR | LearnerKind::IVW => Ok(dr_pseudo_outcome(af, y, row, a)),
        LearnerKind::R => {
            let d = af - row.pi;
            if d.abs() < 1e-12 {
                return Err(OarError::Numerical(format!(
                    "R-learner residual a − π = {d} is degenerate"
                )));
            }
            Ok((y - row.mu()) / d)
        }
    }
}

#[inline]
fn dr_pseudo_outcome(af: f64, y: f64, row: &NuisanceRow, a: u8) -> f64 {
    (af - row.pi) * (y - row.mu_a(a)) / row.nu() + row.mu1 - row.mu0
}

/// Over-regularization limit `c* = Σ ρ φ / Σ ρ`.
pub fn intercept_c_star(rho: &[f64], phi: &[f64]) -> Result<f64> {
    if rho.len() != phi.len() {
        return Err(OarError::Shape(format!(
            "rho ({}) and phi ({}) differ in length",
            rho.len(),
            phi.len()
        )));
    }
    let denom: f64 = rho.iter().sum();
    if denom == 0.0 {
        return Err(OarError::Numerical("sum of weights is zero".into()));
    }
    let num: f64 = rho.iter().zip(phi).map(|(r, p)| r * p).sum();
    Ok(num / denom)
}
