//! Stage 2 with a parametric target network: constant, overlap-adaptive and
//! debiased regularization through noise or dropout injected between the
//! representation `FC_φ` and the head `FC_τ`.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{shape, OarError, Result};
use crate::learners::{pseudo_outcome, weight_rho, weight_w, LearnerKind};
use crate::neuralnet::{
    adamw_step, backward_dual, forward_dual, predict as mlp_predict, Activation, AdamWConfig,
    Direction, EmaState, MlpParams, MlpSpec, OptimizerState, Perturbation,
};
use crate::nuisance::NuisanceEstimates;
use crate::regfun::{
    dropout_p, lambda_fn, rescale_lambda, rescale_p, rescaled_score_lambda, rescaled_score_p,
    RegKind, RegMode, RegSchedule,
};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Injector {
    Noise,
    Dropout,
}

impl Injector {
    pub fn short_name(self) -> &'static str {
        match self {
            Injector::Noise => "noise",
            Injector::Dropout => "dropout",
        }
    }
}

/// How the noise level maps to the injected perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseScale {
    /// `ξ = √λ̃ · ε`
    #[default]
    Std,
    /// `ξ = λ̃ · ε`
    Linear,
}

/// Shape of the target model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// `FC_τ(FC_φ(x))`, one hidden ELU layer each.
    #[default]
    Mlp,
    /// Affine `βᵀx + c`; perturbations enter at the input.
    Linear,
}

/// How trimmed-out rows enter the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrimMode {
    /// Keep the row with its pseudo-outcome multiplied by the indicator.
    #[default]
    Zero,
    /// Remove the row from stage-2 training.
    Drop,
    /// Keep the row and its pseudo-outcome (built from the clamped `π̂`);
    /// the indicator only switches off adaptive regularization and correction.
    Clamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SecondStageConfig {
    pub learner: LearnerKind,
    pub injector: Injector,
    pub architecture: Architecture,
    pub kind: RegKind,
    pub mode: RegMode,
    pub base: f64,
    pub gamma: f64,
    pub trim_lo: f64,
    pub clip_alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub ema_kappa: f64,
    /// Hidden width of `FC_φ` and `FC_τ`; `None` means `2d`.
    pub width: Option<usize>,
    /// Inject at the raw input instead of between the sub-networks.
    pub inject_at_input: bool,
    pub noise_scale: NoiseScale,
    pub trim_mode: TrimMode,
    /// Record parameters after every optimizer step.
    pub record_params: bool,
}

impl Default for SecondStageConfig {
    fn default() -> Self {
        SecondStageConfig {
            learner: LearnerKind::DR,
            injector: Injector::Noise,
            architecture: Architecture::Mlp,
            kind: RegKind::Multiplicative,
            mode: RegMode::Adaptive,
            base: 1.0,
            gamma: 1.0,
            trim_lo: 0.05,
            clip_alpha: 1.0,
            epochs: 200,
            batch_size: 64,
            lr: 0.005,
            weight_decay: 0.01,
            ema_kappa: 0.995,
            width: None,
            inject_at_input: false,
            noise_scale: NoiseScale::Std,
            trim_mode: TrimMode::Zero,
            record_params: false,
        }
    }
}

impl SecondStageConfig {
    pub fn schedule(&self) -> RegSchedule {
        RegSchedule {
            kind: self.kind,
            base: self.base,
            gamma: self.gamma,
            mode: self.mode,
            trim_lo: self.trim_lo,
            clip_alpha: self.clip_alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()
            .validate(self.injector == Injector::Dropout)?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(OarError::Config(
                "stage-2 epochs and batch size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(OarError::Config(
                "stage-2 lr must be > 0 and weight decay >= 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.ema_kappa) {
            return Err(OarError::Config(format!(
                "ema kappa must lie in [0, 1], got {}",
                self.ema_kappa
            )));
        }
        Ok(())
    }

    pub fn target_spec(&self, d: usize) -> Result<MlpSpec> {
        if self.architecture == Architecture::Linear {
            return MlpSpec::new(vec![d, 1], Activation::Identity, Some(0));
        }
        let h = self.width.unwrap_or(2 * d).max(1);
        let injection = if self.inject_at_input { 0 } else { 1 };
        MlpSpec::new(vec![d, h, h, 1], Activation::Identity, Some(injection))
    }
}

/// Per-row quantities entering the stage-2 objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowTerms {
    pub phi: f64,
    pub rho: f64,
    pub w: f64,
    pub trim: bool,
    /// Plug-in effect `μ̂₁ − μ̂₀`.
    pub tau_hat: f64,
    /// Rescaled level: `λ̃` for noise, `p̃` for dropout.
    pub level: f64,
    /// Rescaled score kernel; zero outside dOAR.
    pub kernel: f64,
}

impl RowTerms {
    fn indicator(&self) -> f64 {
        if self.trim {
            1.0
        } else {
            0.0
        }
    }
}

/// Row terms for the whole training set plus the rescaling statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub rows: Vec<RowTerms>,
    pub raw_mean: f64,
    pub degenerate: bool,
}

/// Pseudo-outcomes, weights, rescaled levels and kernels. The rescaling mean
/// is computed once over the trimmed-in rows.
pub fn prepare_rows(
    cfg: &SecondStageConfig,
    train: &Dataset,
    nuis: &NuisanceEstimates,
) -> Result<Prepared> {
    if nuis.n() != train.n() {
        return shape(format!(
            "{} nuisance rows for {} training rows",
            nuis.n(),
            train.n()
        ));
    }
    let n = train.n();
    let probability = cfg.injector == Injector::Dropout;
    let raw: Vec<f64> = nuis
        .nu_hat
        .iter()
        .map(|&nu| {
            if probability {
                dropout_p(cfg.kind, nu)
            } else {
                lambda_fn(cfg.kind, nu)
            }
        })
        .collect::<Result<_>>()?;
    let gamma = cfg.schedule().effective_gamma();
    let resc = if probability {
        rescale_p(&raw, &nuis.trim, cfg.base, gamma)?
    } else {
        rescale_lambda(&raw, &nuis.trim, cfg.base, gamma)?
    };
    let debiased = cfg.mode == RegMode::Debiased && !resc.degenerate && gamma != 0.0;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let nr = nuis.row(i);
        let a = train.a[i];
        let pi = nr.pi;
        let kernel = if debiased && nuis.trim[i] {
            if probability {
                rescaled_score_p(cfg.kind, a, pi, resc.raw_mean, cfg.base, gamma)?
            } else {
                rescaled_score_lambda(cfg.kind, a, pi, resc.raw_mean, cfg.base, gamma)?
            }
        } else {
            0.0
        };
        let level = resc.values[i];
        if probability && !(level < 1.0) {
            return Err(OarError::Domain(format!(
                "row {i}: dropout probability {level} reaches 1"
            )));
        }
        rows.push(RowTerms {
            phi: pseudo_outcome(cfg.learner, a, train.y[i], &nr)?,
            rho: weight_rho(cfg.learner, a, pi)?,
            w: weight_w(cfg.learner, pi)?,
            trim: nuis.trim[i] || cfg.trim_mode == TrimMode::Clamp,
            tau_hat: nr.effect(),
            level,
            kernel,
        });
    }
    Ok(Prepared {
        rows,
        raw_mean: resc.raw_mean,
        degenerate: resc.degenerate,
    })
}

/// Batch mean of `ρ (I φ − g)²` with `g` evaluated on perturbed inputs.
pub fn oar_empirical_loss(rows: &[RowTerms], g: &[f64]) -> Result<f64> {
    if rows.len() != g.len() || rows.is_empty() {
        return shape(format!("{} rows for {} predictions", rows.len(), g.len()));
    }
    Ok(rows
        .iter()
        .zip(g)
        .map(|(r, &g)| {
            let e = r.indicator() * r.phi - g;
            r.rho * e * e
        })
        .sum::<f64>()
        / rows.len() as f64)
}

/// Perturbation scale `σ` for a noise level.
pub fn noise_sigma(level: f64, scale: NoiseScale) -> f64 {
    match scale {
        NoiseScale::Std => level.max(0.0).sqrt(),
        NoiseScale::Linear => level,
    }
}

/// `∂σ/∂λ̃`; zero when the level vanishes.
pub fn noise_sigma_slope(level: f64, scale: NoiseScale) -> f64 {
    match scale {
        NoiseScale::Std if level > 0.0 => 0.5 / level.sqrt(),
        NoiseScale::Std => 0.0,
        NoiseScale::Linear => 1.0,
    }
}

/// `−2 w (τ̂ − g) D k̃`, with `D = ⟨∇_u g, ε⟩ ∂σ/∂λ̃` supplied by the caller.
pub fn bias_correction_noise(row: &RowTerms, g: f64, d: f64) -> f64 {
    -2.0 * row.w * (row.tau_hat - g) * d * row.kernel
}

/// Log-derivative in `p` of the scaled-Bernoulli mask law, summed over coordinates.
pub fn dropout_score(mask: &[f64], p: f64) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    mask.iter().map(|&xi| (1.0 - xi) / p).sum()
}

/// `w (τ̂ − g)² S k̃ − 2 w (τ̂ − g) D k̃`; zero when the row has no dropout.
pub fn bias_correction_dropout(row: &RowTerms, g: f64, score: f64, d: f64) -> f64 {
    if row.level <= 0.0 {
        return 0.0;
    }
    let r = row.tau_hat - g;
    row.w * r * r * score * row.kernel - 2.0 * row.w * r * d * row.kernel
}

/// One epoch of the training trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    /// Mean realized batch objective.
    pub loss: f64,
    /// Mean `|C|` over batches where a correction was computed.
    pub correction: f64,
    /// Fraction of corrected batches where the gate removed `C`.
    pub clip_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedTarget {
    pub spec: MlpSpec,
    /// EMA weights used for prediction.
    pub params: MlpParams,
    pub trace: Vec<TraceRow>,
    /// Raw parameters after every step, when recording was requested.
    pub param_trace: Option<Vec<MlpParams>>,
    pub initial: MlpParams,
    pub ema_kappa: f64,
    /// Realized objective of every batch, in step order.
    pub batch_losses: Vec<BatchRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchRecord {
    pub oar_loss: f64,
    pub correction: Option<f64>,
    pub realized: f64,
    /// The gate removed the correction from this batch.
    pub clipped: bool,
}

/// Draws for one batch at the injection interface.
#[derive(Debug, Clone)]
pub struct Draws {
    pub perturbation: Perturbation,
    /// Standard normal draws (noise) or kept indicators (dropout).
    pub eps: DMatrix<f64>,
}

pub fn fit_target(
    cfg: &SecondStageConfig,
    train: &Dataset,
    nuis: &NuisanceEstimates,
    seed: u64,
) -> Result<TrainedTarget> {
    cfg.validate()?;
    let prepared = prepare_rows(cfg, train, nuis)?;
    let spec = cfg.target_spec(train.d())?;
    let k = spec.injection.expect("target spec injects");
    let width = spec.interface_width(k);

    let mut keep: Vec<usize> = (0..train.n()).collect();
    if cfg.trim_mode == TrimMode::Drop {
        keep.retain(|&i| prepared.rows[i].trim);
        if keep.is_empty() {
            return Err(OarError::Domain(
                "strict trimming removed every training row".into(),
            ));
        }
    }

    let mut rng = rng::stream(seed, Stream::Target);
    let mut params = MlpParams::init(&spec, &mut rng);
    let initial = params.clone();
    let mut opt = OptimizerState::new(
        &params,
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let mut ema = EmaState::new(&params, cfg.ema_kappa);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut param_trace = cfg.record_params.then(Vec::new);
    let mut batch_losses = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut order = keep.clone();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut corr_sum, mut corrected, mut clipped, mut nb) =
            (0.0, 0.0, 0usize, 0usize, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let b = idx.len();
            let rows: Vec<RowTerms> = idx.iter().map(|&i| prepared.rows[i]).collect();
            let xb = DMatrix::from_fn(b, train.d(), |r, c| train.x[(idx[r], c)]);
            let draws = draw(cfg, &rows, width, &mut rng);
            let (record, grads) = batch_objective(cfg, &params, &spec, &rows, &xb, &draws)?;
            if let Some(c) = record.correction {
                corrected += 1;
                corr_sum += c.abs();
                if record.clipped {
                    clipped += 1;
                }
            }
            adamw_step(&mut params, &grads, &mut opt);
            ema.update(&params);
            if let Some(t) = param_trace.as_mut() {
                t.push(params.clone());
            }
            batch_losses.push(record);
            loss_sum += record.realized;
            nb += 1;
        }
        trace.push(TraceRow {
            epoch,
            loss: loss_sum / nb as f64,
            correction: if corrected > 0 {
                corr_sum / corrected as f64
            } else {
                0.0
            },
            clip_rate: if corrected > 0 {
                clipped as f64 / corrected as f64
            } else {
                0.0
            },
        });
    }
    Ok(TrainedTarget {
        spec,
        params: ema.shadow,
        trace,
        param_trace,
        initial,
        ema_kappa: cfg.ema_kappa,
        batch_losses,
    })
}

pub fn draw(
    cfg: &SecondStageConfig,
    rows: &[RowTerms],
    width: usize,
    rng: &mut crate::rng::Rng,
) -> Draws {
    let b = rows.len();
    match cfg.injector {
        Injector::Noise => {
            let eps = DMatrix::from_fn(b, width, |_, _| StandardNormal.sample(rng));
            let xi = DMatrix::from_fn(b, width, |r, c| {
                eps[(r, c)] * noise_sigma(rows[r].level, cfg.noise_scale)
            });
            Draws {
                perturbation: Perturbation::Additive(xi),
                eps,
            }
        }
        Injector::Dropout => {
            let u = DMatrix::from_fn(b, width, |_, _| rng.gen::<f64>());
            let eps = DMatrix::from_fn(
                b,
                width,
                |r, c| if u[(r, c)] < rows[r].level { 0.0 } else { 1.0 },
            );
            let xi = DMatrix::from_fn(b, width, |r, c| eps[(r, c)] / (1.0 - rows[r].level));
            Draws {
                perturbation: Perturbation::Multiplicative(xi),
                eps,
            }
        }
    }
}

/// Realized batch objective (OAR loss, plus the gated correction in dOAR
/// mode) and its exact parameter gradient for fixed draws.
pub fn batch_objective(
    cfg: &SecondStageConfig,
    params: &MlpParams,
    spec: &MlpSpec,
    rows: &[RowTerms],
    xb: &DMatrix<f64>,
    draws: &Draws,
) -> Result<(BatchRecord, MlpParams)> {
    let b = rows.len();
    let width = spec.interface_width(spec.injection.expect("target spec injects"));
    let want_c = rows.iter().any(|r| r.kernel != 0.0 && r.trim);

    let direction = if want_c {
        Some(match cfg.injector {
            Injector::Noise => Direction::Fixed(DMatrix::from_fn(b, width, |r, c| {
                draws.eps[(r, c)] * noise_sigma_slope(rows[r].level, cfg.noise_scale)
            })),
            Injector::Dropout => Direction::Scaled(DMatrix::from_fn(b, width, |r, c| {
                let q = 1.0 - rows[r].level;
                draws.eps[(r, c)] / (q * q)
            })),
        })
    } else {
        None
    };
    let cache = forward_dual(
        params,
        spec,
        xb,
        Some(&draws.perturbation),
        direction.as_ref(),
    )?;
    let g: Vec<f64> = cache.output.iter().copied().collect();
    let oar = oar_empirical_loss(rows, &g)?;
    let bf = b as f64;
    let mut gout = DMatrix::from_fn(b, 1, |r, _| {
        -2.0 * rows[r].rho * (rows[r].indicator() * rows[r].phi - g[r]) / bf
    });
    let mut realized = oar;
    let mut gdot = None;
    let mut correction = None;
    let mut clipped = false;
    if want_c {
        let gd = cache.output_dot.as_ref().expect("dual forward");
        let mut c_sum = 0.0;
        let mut dc_dg = vec![0.0; b];
        let mut dc_dgd = vec![0.0; b];
        for (r, row) in rows.iter().enumerate() {
            if !row.trim || row.kernel == 0.0 {
                continue;
            }
            let res = row.tau_hat - g[r];
            let gd_r = gd[(r, 0)];
            match cfg.injector {
                Injector::Noise => {
                    c_sum += bias_correction_noise(row, g[r], gd_r);
                    dc_dg[r] = 2.0 * row.w * gd_r * row.kernel;
                    dc_dgd[r] = -2.0 * row.w * res * row.kernel;
                }
                Injector::Dropout => {
                    if row.level <= 0.0 {
                        continue;
                    }
                    let mask: Vec<f64> = (0..width)
                        .map(|c| match &draws.perturbation {
                            Perturbation::Multiplicative(m) => m[(r, c)],
                            Perturbation::Additive(_) => unreachable!("dropout is multiplicative"),
                        })
                        .collect();
                    let s = dropout_score(&mask, row.level);
                    c_sum += bias_correction_dropout(row, g[r], s, gd_r);
                    dc_dg[r] = row.w * row.kernel * (-2.0 * res * s + 2.0 * gd_r);
                    dc_dgd[r] = -2.0 * row.w * res * row.kernel;
                }
            }
        }
        let c = c_sum / bf;
        let gate = c.abs() <= cfg.clip_alpha && c.abs() <= oar;
        correction = Some(c);
        if gate {
            realized = oar + c;
            for r in 0..b {
                gout[(r, 0)] += dc_dg[r] / bf;
            }
            gdot = Some(DMatrix::from_fn(b, 1, |r, _| dc_dgd[r] / bf));
        } else {
            clipped = true;
        }
    }
    let grads = backward_dual(params, spec, &cache, &gout, gdot.as_ref())?;
    Ok((
        BatchRecord {
            oar_loss: oar,
            correction,
            realized,
            clipped,
        },
        grads.params,
    ))
}

impl TrainedTarget {
    /// Perturbation-free CATE estimates from the EMA weights.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        Ok(mlp_predict(&self.params, &self.spec, x)?
            .iter()
            .copied()
            .collect())
    }

    /// EMA recurrence replayed over the recorded parameter trace.
    pub fn replay_ema(&self) -> Option<MlpParams> {
        let steps = self.param_trace.as_ref()?;
        let mut ema = EmaState::new(&self.initial, self.ema_kappa);
        for p in steps {
            ema.update(p);
        }
        Some(ema.shadow)
    }

    pub fn save_trace(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.trace {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticConfig};
    use crate::learners::intercept_c_star;

    fn data(n: usize, seed: u64) -> (Dataset, NuisanceEstimates) {
        let ds = generate_synthetic(&SyntheticConfig { n, b: 2.0, seed }).unwrap();
        let nuis = NuisanceEstimates::from_oracle(&ds, 0.05).unwrap();
        (ds, nuis)
    }

    fn row(phi: f64, level: f64, kernel: f64) -> RowTerms {
        RowTerms {
            phi,
            rho: 1.0,
            w: 1.0,
            trim: true,
            tau_hat: 0.0,
            level,
            kernel,
        }
    }

    #[test]
    fn empirical_loss_examples() {
        let rows = vec![row(0.0, 1.0, 0.0); 3];
        assert_eq!(oar_empirical_loss(&rows, &[0.0; 3]).unwrap(), 0.0);
        let rows = vec![row(1.0, 0.0, 0.0), row(-2.0, 0.0, 0.0)];
        let mse = ((1.0f64 - 0.5).powi(2) + (-2.0f64 - 1.0).powi(2)) / 2.0;
        assert_eq!(oar_empirical_loss(&rows, &[0.5, 1.0]).unwrap(), mse);
        let mut out = row(3.0, 0.0, 0.0);
        out.trim = false;
        assert_eq!(oar_empirical_loss(&[out], &[1.0]).unwrap(), 1.0);
        assert!(oar_empirical_loss(&rows, &[1.0]).is_err());
    }

    #[test]
    fn correction_vanishes_in_trivial_cases() {
        let mut r = row(0.0, 0.5, 0.0);
        assert_eq!(bias_correction_noise(&r, 0.3, 1.7), 0.0);
        r.kernel = 2.0;
        r.tau_hat = 0.3;
        assert_eq!(bias_correction_noise(&r, 0.3, 1.7), 0.0);
        assert_eq!(bias_correction_dropout(&r, 0.3, 4.0, 1.7), 0.0);
        r.level = 0.0;
        assert_eq!(bias_correction_dropout(&r, 1.0, 0.0, 0.0), 0.0);
        assert_eq!(dropout_score(&[1.0, 1.0], 0.0), 0.0);
        assert_eq!(noise_sigma_slope(0.0, NoiseScale::Std), 0.0);
    }

    #[test]
    fn balanced_propensity_gives_zero_kernels() {
        let (ds, _) = data(50, 1);
        let nuis = NuisanceEstimates::from_parts(vec![0.0; 50], vec![1.0; 50], vec![0.5; 50], 0.05)
            .unwrap();
        for injector in [Injector::Noise, Injector::Dropout] {
            let cfg = SecondStageConfig {
                mode: RegMode::Debiased,
                injector,
                base: 0.3,
                ..Default::default()
            };
            let p = prepare_rows(&cfg, &ds, &nuis).unwrap();
            assert!(p.rows.iter().all(|r| r.kernel == 0.0));
        }
    }

    #[test]
    fn dropout_score_has_mean_zero() {
        let p: f64 = 0.3;
        let kept = 1.0 / (1.0 - p);
        let mean = p * dropout_score(&[0.0], p) + (1.0 - p) * dropout_score(&[kept], p);
        assert!(mean.abs() < 1e-14);
    }

    fn quick(mode: RegMode, injector: Injector, gamma: f64) -> SecondStageConfig {
        SecondStageConfig {
            mode,
            injector,
            gamma,
            base: if injector == Injector::Dropout {
                0.3
            } else {
                0.5
            },
            epochs: 6,
            batch_size: 16,
            ..Default::default()
        }
    }

    #[test]
    fn zero_gamma_matches_constant_bitwise() {
        let (ds, nuis) = data(80, 2);
        for injector in [Injector::Noise, Injector::Dropout] {
            let cr = fit_target(&quick(RegMode::Constant, injector, 1.0), &ds, &nuis, 5).unwrap();
            for mode in [RegMode::Adaptive, RegMode::Debiased] {
                let t = fit_target(&quick(mode, injector, 0.0), &ds, &nuis, 5).unwrap();
                assert_eq!(t.params, cr.params, "{mode:?} {injector:?}");
                assert_eq!(t.trace, cr.trace);
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (ds, nuis) = data(60, 3);
        for injector in [Injector::Noise, Injector::Dropout] {
            let cfg = quick(RegMode::Debiased, injector, 1.0);
            let a = fit_target(&cfg, &ds, &nuis, 9).unwrap();
            let b = fit_target(&cfg, &ds, &nuis, 9).unwrap();
            assert_eq!(a.params, b.params);
            let x = ds.x.clone();
            assert_eq!(a.predict(&x).unwrap(), a.predict(&x).unwrap());
            assert!(a.predict(&x).unwrap().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn gate_keeps_plain_loss_when_clipped() {
        let (ds, nuis) = data(120, 4);
        for injector in [Injector::Noise, Injector::Dropout] {
            let mut cfg = quick(RegMode::Debiased, injector, 1.0);
            cfg.clip_alpha = 0.01;
            let t = fit_target(&cfg, &ds, &nuis, 1).unwrap();
            let mut saw_clip = false;
            for b in &t.batch_losses {
                if let Some(c) = b.correction {
                    if c.abs() > cfg.clip_alpha || c.abs() > b.oar_loss {
                        assert_eq!(b.realized, b.oar_loss);
                        saw_clip = true;
                    } else {
                        assert_eq!(b.realized, b.oar_loss + c);
                    }
                } else {
                    assert_eq!(b.realized, b.oar_loss);
                }
            }
            assert!(saw_clip, "{injector:?}: no batch was clipped");
        }
    }

    #[test]
    fn ema_replay_matches() {
        let (ds, nuis) = data(50, 5);
        let mut cfg = quick(RegMode::Adaptive, Injector::Noise, 1.0);
        cfg.record_params = true;
        let t = fit_target(&cfg, &ds, &nuis, 2).unwrap();
        let replay = t.replay_ema().unwrap();
        for (a, b) in replay.to_flat().iter().zip(t.params.to_flat()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn tiny_regularization_approaches_least_squares() {
        // linear pseudo-outcome target; the network can represent it closely
        let n = 200;
        let mut ds = generate_synthetic(&SyntheticConfig { n, b: 0.0, seed: 6 }).unwrap();
        for i in 0..n {
            ds.x[(i, 0)] = -1.0 + 2.0 * i as f64 / (n - 1) as f64;
            ds.y[i] = 0.0;
            ds.a[i] = (i % 2) as u8;
        }
        // DR with μ̂ ≡ (0, x) and π ≡ 0.5: φ = x + 2(2a − 1)(y − μ_a(x))
        let mu1: Vec<f64> = (0..n).map(|i| ds.x[(i, 0)]).collect();
        let nuis =
            NuisanceEstimates::from_parts(vec![0.0; n], mu1.clone(), vec![0.5; n], 0.05).unwrap();
        let cfg = SecondStageConfig {
            mode: RegMode::Constant,
            base: 1e-8,
            epochs: 400,
            batch_size: 32,
            weight_decay: 0.0,
            width: Some(8),
            ema_kappa: 0.9,
            ..Default::default()
        };
        let t = fit_target(&cfg, &ds, &nuis, 1).unwrap();
        let prep = prepare_rows(&cfg, &ds, &nuis).unwrap();
        let phi: Vec<f64> = prep.rows.iter().map(|r| r.phi).collect();
        // least squares on [1, x]
        let (sx, sy, sxx, sxy) = (0..n).fold((0.0, 0.0, 0.0, 0.0), |acc, i| {
            let x = ds.x[(i, 0)];
            (acc.0 + x, acc.1 + phi[i], acc.2 + x * x, acc.3 + x * phi[i])
        });
        let nf = n as f64;
        let beta = (nf * sxy - sx * sy) / (nf * sxx - sx * sx);
        let c = (sy - beta * sx) / nf;
        let ls: f64 = (0..n)
            .map(|i| (phi[i] - c - beta * ds.x[(i, 0)]).powi(2))
            .sum::<f64>()
            / nf;
        let pred = t.predict(&ds.x).unwrap();
        let fit: f64 = (0..n).map(|i| (phi[i] - pred[i]).powi(2)).sum::<f64>() / nf;
        assert!(fit <= ls * 1.01, "network loss {fit} vs least squares {ls}");
    }

    #[test]
    fn huge_regularization_collapses_to_intercept() {
        let (ds, nuis) = data(250, 7);
        let cfg = SecondStageConfig {
            mode: RegMode::Constant,
            base: 1e4,
            epochs: 1000,
            architecture: Architecture::Linear,
            ..Default::default()
        };
        let t = fit_target(&cfg, &ds, &nuis, 3).unwrap();
        let prep = prepare_rows(&cfg, &ds, &nuis).unwrap();
        let rho: Vec<f64> = prep.rows.iter().map(|r| r.rho).collect();
        let phi: Vec<f64> = prep
            .rows
            .iter()
            .map(|r| if r.trim { r.phi } else { 0.0 })
            .collect();
        let c = intercept_c_star(&rho, &phi).unwrap();
        let pred = t.predict(&ds.x).unwrap();
        let spread = phi.iter().map(|v| (v - c).abs()).sum::<f64>() / phi.len() as f64;
        for p in pred {
            assert!(
                (p - c).abs() <= 0.05 * spread.max(c.abs()),
                "pred {p} vs c* {c}, spread {spread}"
            );
        }
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let mut rng = rng::stream(11, Stream::Check);
        for injector in [Injector::Noise, Injector::Dropout] {
            for case in 0..6 {
                let cfg = SecondStageConfig {
                    injector,
                    mode: RegMode::Debiased,
                    clip_alpha: f64::INFINITY,
                    width: Some(3),
                    inject_at_input: case % 3 == 2,
                    ..Default::default()
                };
                let spec = cfg.target_spec(2).unwrap();
                let params = MlpParams::init(&spec, &mut rng);
                let b = 5;
                let rows: Vec<RowTerms> = (0..b)
                    .map(|_| RowTerms {
                        phi: rng.gen_range(-2.0..2.0),
                        rho: rng.gen_range(0.1..1.0),
                        w: rng.gen_range(0.1..1.0),
                        trim: rng.gen::<f64>() < 0.8,
                        tau_hat: rng.gen_range(-1.0..1.0),
                        level: rng.gen_range(0.05..0.6),
                        kernel: rng.gen_range(-0.5..0.5),
                    })
                    .collect();
                let xb = DMatrix::from_fn(b, 2, |_, _| rng.gen_range(-1.0..1.0));
                let width = spec.interface_width(spec.injection.unwrap());
                let draws = draw(&cfg, &rows, width, &mut rng);
                let (rec, grads) =
                    batch_objective(&cfg, &params, &spec, &rows, &xb, &draws).unwrap();
                assert!(!rec.clipped && rec.correction.is_some());
                let flat = params.to_flat();
                for (i, g) in grads.to_flat().iter().enumerate() {
                    let at = |d: f64| {
                        let mut f = flat.clone();
                        f[i] += d;
                        let p = MlpParams::from_flat(&spec, &f).unwrap();
                        batch_objective(&cfg, &p, &spec, &rows, &xb, &draws)
                            .unwrap()
                            .0
                            .realized
                    };
                    let num = (at(1e-6) - at(-1e-6)) / 2e-6;
                    let err = (g - num).abs() / g.abs().max(num.abs()).max(1e-4);
                    assert!(
                        err < 1e-5,
                        "{injector:?} case {case} param {i}: {g} vs {num}"
                    );
                }
            }
        }
    }

    #[test]
    fn trace_csv_and_strict_drop() {
        let (ds, nuis) = data(60, 8);
        let mut cfg = quick(RegMode::Debiased, Injector::Dropout, 1.0);
        cfg.trim_mode = TrimMode::Drop;
        let t = fit_target(&cfg, &ds, &nuis, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trace.csv");
        t.save_trace(&p).unwrap();
        let body = std::fs::read_to_string(p).unwrap();
        assert!(body.starts_with("epoch,loss,correction,clip_rate"));
        assert_eq!(body.lines().count(), cfg.epochs + 1);
    }

    #[test]
    fn clamp_keeps_trimmed_pseudo_outcomes() {
        let (ds, nuis) = data(80, 9);
        assert!(nuis.trim.iter().any(|t| !t));
        let mut cfg = quick(RegMode::Debiased, Injector::Noise, 1.0);
        let zero = prepare_rows(&cfg, &ds, &nuis).unwrap();
        cfg.trim_mode = TrimMode::Clamp;
        let clamp = prepare_rows(&cfg, &ds, &nuis).unwrap();
        assert_eq!(zero.raw_mean, clamp.raw_mean);
        for (i, (z, c)) in zero.rows.iter().zip(&clamp.rows).enumerate() {
            assert_eq!(z.phi, c.phi);
            assert_eq!(z.level, c.level);
            assert!(c.trim);
            if !nuis.trim[i] {
                assert_eq!(c.kernel, 0.0);
                assert_eq!(c.level, cfg.base);
            }
        }
    }
}
