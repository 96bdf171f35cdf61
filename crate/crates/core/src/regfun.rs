//! Overlap-dependent regularization functions.
//!
//! Every quantity here is a function of the overlap weight `ν = π(1 − π)`,
//! which lives in `(0, 1/4]`. The three regularization families vanish at
//! perfect overlap (`ν = 1/4`) and blow up as `ν → 0`:
//!
//! | kind                    | `λ(ν)`          | `p(ν) = λ/(λ+1)`      |
//! |-------------------------|-----------------|-----------------------|
//! | multiplicative          | `1/(4ν) − 1`    | `1 − 4ν`              |
//! | logarithmic             | `−log(4ν)`      | `1 − 1/(1 − log 4ν)`  |
//! | squared multiplicative  | `1/(16ν²) − 1`  | `1 − 16ν²`            |
//!
//! The module also carries the affine rescaling that pins the trimmed-in
//! average of the adaptive level to a nominal constant, and the influence
//! function kernels (raw and rescaled) used by the debiased objectives.

use serde::{Deserialize, Serialize};

use crate::error::{domain, OarError, Result};

/// Family of regularization function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegKind {
    #[serde(rename = "m")]
    Multiplicative,
    #[serde(rename = "log")]
    Logarithmic,
    #[serde(rename = "m2")]
    SquaredMultiplicative,
}

impl RegKind {
    pub const ALL: [RegKind; 3] = [
        RegKind::Multiplicative,
        RegKind::Logarithmic,
        RegKind::SquaredMultiplicative,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            RegKind::Multiplicative => "m",
            RegKind::Logarithmic => "log",
            RegKind::SquaredMultiplicative => "m2",
        }
    }
}

/// How the regularization level is assigned to rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegMode {
    /// Constant level for every row.
    #[serde(rename = "CR")]
    Constant,
    /// Overlap-adaptive level.
    #[serde(rename = "OAR")]
    Adaptive,
    /// Overlap-adaptive level plus the one-step bias correction.
    #[serde(rename = "dOAR")]
    Debiased,
}

impl RegMode {
    pub fn short_name(self) -> &'static str {
        match self {
            RegMode::Constant => "CR",
            RegMode::Adaptive => "OAR",
            RegMode::Debiased => "dOAR",
        }
    }
}

/// Full description of a regularization schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegSchedule {
    pub kind: RegKind,
    /// Nominal level: `λ` for noise / RKHS penalties, `p` for dropout.
    pub base: f64,
    /// Adaptivity coefficient; 0 gives constant regularization.
    pub gamma: f64,
    pub mode: RegMode,
    pub trim_lo: f64,
    /// Absolute clip threshold for the bias-correction term.
    pub clip_alpha: f64,
}

impl RegSchedule {
    pub fn new(kind: RegKind, base: f64, gamma: f64, mode: RegMode) -> Self {
        RegSchedule {
            kind,
            base,
            gamma,
            mode,
            trim_lo: 0.05,
            clip_alpha: 1.0,
        }
    }

    /// Checks the invariants; `probability` marks a dropout schedule.
    pub fn validate(&self, probability: bool) -> Result<()> {
        if !(self.base > 0.0) || !self.base.is_finite() {
            return Err(OarError::Config(format!(
                "base level must be > 0, got {}",
                self.base
            )));
        }
        if probability && self.base >= 1.0 {
            return Err(OarError::Config(format!(
                "dropout base probability must be < 1, got {}",
                self.base
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(OarError::Config(format!(
                "gamma must lie in [0, 1], got {}",
                self.gamma
            )));
        }
        if !(self.trim_lo > 0.0 && self.trim_lo < 0.5) {
            return Err(OarError::Config(format!(
                "trim_lo must lie in (0, 0.5), got {}",
                self.trim_lo
            )));
        }
        if !(self.clip_alpha >= 0.0) {
            return Err(OarError::Config(format!(
                "clip_alpha must be >= 0, got {}",
                self.clip_alpha
            )));
        }
        Ok(())
    }

    /// Gamma actually applied to the rows: constant mode ignores `gamma`.
    pub fn effective_gamma(&self) -> f64 {
        match self.mode {
            RegMode::Constant => 0.0,
            _ => self.gamma,
        }
    }
}

fn check_nu(nu: f64) -> Result<()> {
    if nu > 0.0 && nu <= 0.25 {
        Ok(())
    } else {
        domain(format!("overlap weight must lie in (0, 1/4], got {nu}"))
    }
}

fn check_pi(pi: f64) -> Result<()> {
    if pi > 0.0 && pi < 1.0 {
        Ok(())
    } else {
        domain(format!("propensity must lie in (0, 1), got {pi}"))
    }
}

fn treatment(a: u8) -> Result<f64> {
    match a {
        0 => Ok(0.0),
        1 => Ok(1.0),
        _ => domain(format!("treatment must be 0 or 1, got {a}")),
    }
}

/// Overlap weight `π(1 − π)`.
#[inline]
pub fn overlap(pi: f64) -> f64 {
    pi * (1.0 - pi)
}

/// Regularization level `λ(ν)`.
pub fn lambda_fn(kind: RegKind, nu: f64) -> Result<f64> {
    check_nu(nu)?;
    let v = match kind {
        RegKind::Multiplicative => 1.0 / (4.0 * nu) - 1.0,
        RegKind::Logarithmic => -(4.0 * nu).ln(),
        RegKind::SquaredMultiplicative => 1.0 / (16.0 * nu * nu) - 1.0,
    };
    // rounding at ν = 1/4 can leave a -0.0 / tiny negative
    Ok(v.max(0.0))
}

/// Dropout probability `p(ν) = λ(ν) / (λ(ν) + 1)`, evaluated in closed form.
pub fn dropout_p(kind: RegKind, nu: f64) -> Result<f64> {
    check_nu(nu)?;
    let v = match kind {
        RegKind::Multiplicative => 1.0 - 4.0 * nu,
        RegKind::Logarithmic => 1.0 - 1.0 / (1.0 - (4.0 * nu).ln()),
        RegKind::SquaredMultiplicative => 1.0 - 16.0 * nu * nu,
    };
    Ok(v.max(0.0))
}

/// Outcome of an affine rescaling.
#[derive(Debug, Clone, PartialEq)]
pub struct Rescaled {
    pub values: Vec<f64>,
    /// Trimmed-in mean of the raw levels.
    pub raw_mean: f64,
    /// Set when the raw mean sat on the boundary and the output fell back to the constant level.
    pub degenerate: bool,
}

fn trimmed_mean(raw: &[f64], trim: &[bool]) -> Result<f64> {
    if raw.len() != trim.len() {
        return Err(OarError::Shape(format!(
            "raw levels ({}) and trimming indicator ({}) differ in length",
            raw.len(),
            trim.len()
        )));
    }
    let (sum, count) = raw
        .iter()
        .zip(trim)
        .filter(|(_, &t)| t)
        .fold((0.0, 0usize), |(s, c), (&r, _)| (s + r, c + 1));
    if count == 0 {
        return domain("every row is trimmed out; nothing to rescale");
    }
    Ok(sum / count as f64)
}

/// Rescale raw regularization levels so their trimmed-in mean equals `base`.
///
/// `out_i = base + γ · I_i · (base / m̂) · (raw_i − m̂)` with `m̂` the trimmed-in
/// mean of `raw`. Trimmed-out rows receive `base`.
pub fn rescale_lambda(raw: &[f64], trim: &[bool], base: f64, gamma: f64) -> Result<Rescaled> {
    let m = trimmed_mean(raw, trim)?;
    if m <= 0.0 {
        return Ok(Rescaled {
            values: vec![base; raw.len()],
            raw_mean: m,
            degenerate: true,
        });
    }
    let slope = gamma * base / m;
    let values = raw
        .iter()
        .zip(trim)
        .map(|(&r, &t)| if t { base + slope * (r - m) } else { base })
        .collect();
    Ok(Rescaled {
        values,
        raw_mean: m,
        degenerate: false,
    })
}

/// Which side of the `min` in the dropout slope is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlopeBranch {
    /// `p / m̂`
    Lower,
    /// `(1 − p) / (1 − m̂)`
    Upper,
}

/// Active slope branch for a dropout rescaling with nominal `base` and raw mean `m`.
pub fn slope_branch(base: f64, m: f64) -> SlopeBranch {
    if base / m < (1.0 - base) / (1.0 - m) {
        SlopeBranch::Lower
    } else {
        SlopeBranch::Upper
    }
}

/// Rescale raw dropout probabilities so their trimmed-in mean equals `base`,
/// with slope `min(p/m̂, (1−p)/(1−m̂))` keeping every output inside `[0, 1)`.
pub fn rescale_p(raw: &[f64], trim: &[bool], base: f64, gamma: f64) -> Result<Rescaled> {
    let m = trimmed_mean(raw, trim)?;
    if m <= 0.0 || m >= 1.0 {
        log::warn!("dropout rescaling: raw mean {m} on the boundary, using constant p = {base}");
        return Ok(Rescaled {
            values: vec![base; raw.len()],
            raw_mean: m,
            degenerate: true,
        });
    }
    let s = (base / m).min((1.0 - base) / (1.0 - m));
    let slope = gamma * s;
    let values = raw
        .iter()
        .zip(trim)
        .map(|(&r, &t)| if t { base + slope * (r - m) } else { base })
        .collect();
    Ok(Rescaled {
        values,
        raw_mean: m,
        degenerate: false,
    })
}

/// Influence-function kernel of `λ(ν(x))` evaluated at the sample's own covariate.
///
/// All kinds share the factor `(a − π)(2π − 1)`, which is the pathwise
/// derivative of `ν` along `π_t = π + t(a − π)` up to sign.
pub fn score_kernel_lambda(kind: RegKind, a: u8, pi: f64) -> Result<f64> {
    check_pi(pi)?;
    let a = treatment(a)?;
    let nu = overlap(pi);
    let core = (a - pi) * (2.0 * pi - 1.0);
    Ok(match kind {
        RegKind::Multiplicative => core / (4.0 * nu * nu),
        RegKind::Logarithmic => core / nu,
        RegKind::SquaredMultiplicative => core / (8.0 * nu * nu * nu),
    })
}

/// Influence-function kernel of the dropout probability `p(ν(x))`.
pub fn score_kernel_p(kind: RegKind, a: u8, pi: f64) -> Result<f64> {
    check_pi(pi)?;
    let a = treatment(a)?;
    let nu = overlap(pi);
    let core = (a - pi) * (2.0 * pi - 1.0);
    Ok(match kind {
        RegKind::Multiplicative => 4.0 * core,
        RegKind::Logarithmic => {
            let l = 1.0 - (4.0 * nu).ln();
            core / (nu * l * l)
        }
        RegKind::SquaredMultiplicative => 32.0 * nu * core,
    })
}

/// Influence function of the rescaled level `λ̃`, chain rule through the
/// trimmed-in mean `m_hat`.
pub fn rescaled_score_lambda(
    kind: RegKind,
    a: u8,
    pi: f64,
    m_hat: f64,
    base: f64,
    gamma: f64,
) -> Result<f64> {
    if !(m_hat > 0.0) {
        return domain(format!(
            "mean regularization level must be > 0, got {m_hat}"
        ));
    }
    let k = score_kernel_lambda(kind, a, pi)?;
    let lv = lambda_fn(kind, overlap(pi))?;
    let if_mean = k + lv - m_hat;
    Ok(gamma * base * (k / m_hat - lv * if_mean / (m_hat * m_hat)))
}

/// Influence function of the rescaled dropout probability `p̃`; the branch
/// follows the active side of the slope used by [`rescale_p`].
pub fn rescaled_score_p(
    kind: RegKind,
    a: u8,
    pi: f64,
    m_hat: f64,
    base: f64,
    gamma: f64,
) -> Result<f64> {
    if !(m_hat > 0.0 && m_hat < 1.0) {
        return domain(format!(
            "mean dropout probability must lie in (0, 1), got {m_hat}"
        ));
    }
    let k = score_kernel_p(kind, a, pi)?;
    let pv = dropout_p(kind, overlap(pi))?;
    let if_mean = k + pv - m_hat;
    Ok(match slope_branch(base, m_hat) {
        SlopeBranch::Lower => gamma * base * (k / m_hat - pv * if_mean / (m_hat * m_hat)),
        SlopeBranch::Upper => {
            let q = 1.0 - m_hat;
            gamma * (1.0 - base) * (k / q - (1.0 - pv) * if_mean / (q * q))
        }
    })
}
