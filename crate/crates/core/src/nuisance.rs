//! Stage 1: propensity and outcome models, plus trimmed nuisance estimates.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{shape, OarError, Result};
use crate::learners::NuisanceRow;
use crate::neuralnet::{
    adamw_step, backward, forward, predict, sigmoid, Activation, AdamWConfig, MlpParams, MlpSpec,
    OptimizerState,
};
use crate::rng::{self, Rng, Stream};

/// Training settings shared by the stage-1 networks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageOneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub hidden_layers: usize,
    /// Hidden width; `None` means `2d`.
    pub width: Option<usize>,
    /// Hidden layers in each outcome head below the output unit.
    pub head_layers: usize,
    /// Hidden width of the outcome heads; `None` means twice the representation width.
    pub head_width: Option<usize>,
    /// Out-of-fold estimation with this many folds; `None` fits on the full sample.
    pub cross_fit: Option<usize>,
}

impl Default for StageOneConfig {
    fn default() -> Self {
        StageOneConfig {
            epochs: 200,
            batch_size: 64,
            lr: 0.005,
            weight_decay: 0.01,
            hidden_layers: 1,
            width: None,
            head_layers: 1,
            head_width: None,
            cross_fit: None,
        }
    }
}

impl StageOneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(OarError::Config(
                "stage-1 epochs and batch size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(OarError::Config(
                "stage-1 lr must be > 0 and weight decay >= 0".into(),
            ));
        }
        if self.hidden_layers == 0 {
            return Err(OarError::Config(
                "stage-1 networks need a hidden layer".into(),
            ));
        }
        if matches!(self.cross_fit, Some(k) if k < 2) {
            return Err(OarError::Config(
                "cross-fitting needs at least 2 folds".into(),
            ));
        }
        Ok(())
    }

    fn width(&self, d: usize) -> usize {
        self.width.unwrap_or(2 * d).max(1)
    }

    fn head_width(&self, d: usize) -> usize {
        self.head_width.unwrap_or(2 * self.width(d)).max(1)
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Propensity network producing a logit; `sigmoid` is applied at prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityModel {
    pub spec: MlpSpec,
    pub params: MlpParams,
}

/// Two-headed outcome network with a shared representation.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeModel {
    pub rep_spec: MlpSpec,
    pub head_spec: MlpSpec,
    pub rep: MlpParams,
    pub heads: [MlpParams; 2],
    /// Training rows seen per arm.
    pub arm_counts: [usize; 2],
}

fn ensure_binary(ds: &Dataset) -> Result<()> {
    match ds.a.iter().position(|&a| a > 1) {
        Some(row) => Err(OarError::Parse {
            row,
            message: format!("treatment {} is not binary", ds.a[row]),
        }),
        None => Ok(()),
    }
}

fn batches(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch).map(|c| c.to_vec()).collect()
}

fn rows(x: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), x.ncols(), |r, c| x[(idx[r], c)])
}

pub fn fit_propensity(train: &Dataset, cfg: &StageOneConfig, seed: u64) -> Result<PropensityModel> {
    cfg.validate()?;
    ensure_binary(train)?;
    let d = train.d();
    let h = cfg.width(d);
    let mut widths = vec![d];
    widths.extend(std::iter::repeat_n(h, cfg.hidden_layers));
    widths.push(1);
    let spec = MlpSpec::new(widths, Activation::Identity, None)?;
    let mut rng = rng::stream(seed, Stream::Propensity);
    let mut params = MlpParams::init(&spec, &mut rng);
    let treated = train.a.iter().filter(|&&a| a == 1).count();
    if treated == 0 || treated == train.n() {
        log::warn!(
            "degenerate overlap: every training row has a = {}",
            train.a[0]
        );
    }
    let mut opt = OptimizerState::new(&params, cfg.adamw());
    for _ in 0..cfg.epochs {
        for idx in batches(train.n(), cfg.batch_size, &mut rng) {
            let xb = rows(&train.x, &idx);
            let cache = forward(&params, &spec, &xb, None)?;
            let b = idx.len() as f64;
            let g = DMatrix::from_fn(idx.len(), 1, |r, _| {
                (sigmoid(cache.output[(r, 0)]) - train.a[idx[r]] as f64) / b
            });
            let grads = backward(&params, &spec, &cache, &g)?;
            adamw_step(&mut params, &grads.params, &mut opt);
        }
    }
    Ok(PropensityModel { spec, params })
}

impl PropensityModel {
    /// Unclamped propensity estimates.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        let logits = predict(&self.params, &self.spec, x)?;
        Ok(logits.iter().map(|&z| sigmoid(z)).collect())
    }

    /// Mean binary cross-entropy on a dataset.
    pub fn bce(&self, ds: &Dataset) -> Result<f64> {
        let logits = predict(&self.params, &self.spec, &ds.x)?;
        let softplus = |z: f64| z.max(0.0) + (-z.abs()).exp().ln_1p();
        Ok(logits
            .iter()
            .zip(&ds.a)
            .map(|(&z, &a)| softplus(z) - a as f64 * z)
            .sum::<f64>()
            / ds.n() as f64)
    }
}

pub fn fit_outcomes(train: &Dataset, cfg: &StageOneConfig, seed: u64) -> Result<OutcomeModel> {
    cfg.validate()?;
    ensure_binary(train)?;
    let d = train.d();
    let h = cfg.width(d);
    let mut rep_widths = vec![d];
    rep_widths.extend(std::iter::repeat_n(h, cfg.hidden_layers));
    let rep_spec = MlpSpec::new(rep_widths, Activation::Elu, None)?;
    let mut head_widths = vec![h];
    head_widths.extend(std::iter::repeat_n(cfg.head_width(d), cfg.head_layers));
    head_widths.push(1);
    let head_spec = MlpSpec::new(head_widths, Activation::Identity, None)?;

    let mut rng = rng::stream(seed, Stream::Outcome);
    let mut rep = MlpParams::init(&rep_spec, &mut rng);
    let mut heads = [
        MlpParams::init(&head_spec, &mut rng),
        MlpParams::init(&head_spec, &mut rng),
    ];
    let treated = train.a.iter().filter(|&&a| a == 1).count();
    let arm_counts = [train.n() - treated, treated];
    for (arm, &c) in arm_counts.iter().enumerate() {
        if c == 0 {
            log::warn!(
                "outcome head for arm {arm} has no training rows; it keeps its initialization"
            );
        }
    }
    let mut opt_rep = OptimizerState::new(&rep, cfg.adamw());
    let mut opt_heads = [
        OptimizerState::new(&heads[0], cfg.adamw()),
        OptimizerState::new(&heads[1], cfg.adamw()),
    ];
    for _ in 0..cfg.epochs {
        for idx in batches(train.n(), cfg.batch_size, &mut rng) {
            let b = idx.len() as f64;
            let xb = rows(&train.x, &idx);
            let rc = forward(&rep, &rep_spec, &xb, None)?;
            let mut g_rep = DMatrix::zeros(idx.len(), h);
            for arm in 0..2u8 {
                let sub: Vec<usize> = (0..idx.len()).filter(|&r| train.a[idx[r]] == arm).collect();
                if sub.is_empty() {
                    continue;
                }
                let hb = rows(&rc.output, &sub);
                let head = &mut heads[arm as usize];
                let hc = forward(head, &head_spec, &hb, None)?;
                let g = DMatrix::from_fn(sub.len(), 1, |r, _| {
                    2.0 * (hc.output[(r, 0)] - train.y[idx[sub[r]]]) / b
                });
                let gh = backward(head, &head_spec, &hc, &g)?;
                for (r, &i) in sub.iter().enumerate() {
                    for c in 0..h {
                        g_rep[(i, c)] += gh.input[(r, c)];
                    }
                }
                adamw_step(head, &gh.params, &mut opt_heads[arm as usize]);
            }
            let gr = backward(&rep, &rep_spec, &rc, &g_rep)?;
            adamw_step(&mut rep, &gr.params, &mut opt_rep);
        }
    }
    Ok(OutcomeModel {
        rep_spec,
        head_spec,
        rep,
        heads,
        arm_counts,
    })
}

impl OutcomeModel {
    /// `(μ̂₀, μ̂₁)` for every row.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        let r = predict(&self.rep, &self.rep_spec, x)?;
        let m0 = predict(&self.heads[0], &self.head_spec, &r)?;
        let m1 = predict(&self.heads[1], &self.head_spec, &r)?;
        Ok((m0.iter().copied().collect(), m1.iter().copied().collect()))
    }

    /// Factual mean squared error.
    pub fn factual_mse(&self, ds: &Dataset) -> Result<f64> {
        let (m0, m1) = self.predict(&ds.x)?;
        Ok((0..ds.n())
            .map(|i| {
                let m = if ds.a[i] == 1 { m1[i] } else { m0[i] };
                (m - ds.y[i]).powi(2)
            })
            .sum::<f64>()
            / ds.n() as f64)
    }
}

/// Per-row stage-1 outputs after trimming and clamping.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceEstimates {
    pub mu0: Vec<f64>,
    pub mu1: Vec<f64>,
    pub pi_hat: Vec<f64>,
    pub pi_raw: Vec<f64>,
    pub nu_hat: Vec<f64>,
    pub mu_hat: Vec<f64>,
    pub trim: Vec<bool>,
}

impl NuisanceEstimates {
    /// Assemble from raw predictions: trimming uses `pi_raw`, then `π̂` is clamped.
    pub fn from_parts(
        mu0: Vec<f64>,
        mu1: Vec<f64>,
        pi_raw: Vec<f64>,
        trim_lo: f64,
    ) -> Result<Self> {
        if !(trim_lo > 0.0 && trim_lo < 0.5) {
            return Err(OarError::Config(format!(
                "trim_lo must lie in (0, 0.5), got {trim_lo}"
            )));
        }
        let n = pi_raw.len();
        if mu0.len() != n || mu1.len() != n {
            return shape("nuisance vectors differ in length");
        }
        let hi = 1.0 - trim_lo;
        let trim: Vec<bool> = pi_raw.iter().map(|&p| p >= trim_lo && p <= hi).collect();
        let pi_hat: Vec<f64> = pi_raw.iter().map(|&p| p.clamp(trim_lo, hi)).collect();
        let nu_hat = pi_hat.iter().map(|&p| p * (1.0 - p)).collect();
        let mu_hat = (0..n)
            .map(|i| (1.0 - pi_hat[i]) * mu0[i] + pi_hat[i] * mu1[i])
            .collect();
        Ok(NuisanceEstimates {
            mu0,
            mu1,
            pi_hat,
            pi_raw,
            nu_hat,
            mu_hat,
            trim,
        })
    }

    /// Oracle nuisances from the dataset's generating law.
    pub fn from_oracle(ds: &Dataset, trim_lo: f64) -> Result<Self> {
        let pi = ds.oracle_pi.clone().ok_or_else(|| {
            OarError::Config("oracle mode needs an oracle propensity column".into())
        })?;
        let (m0, m1) = ds
            .oracle_mu
            .clone()
            .ok_or_else(|| OarError::Config("oracle mode needs oracle outcome means".into()))?;
        Self::from_parts(m0, m1, pi, trim_lo)
    }

    pub fn n(&self) -> usize {
        self.pi_hat.len()
    }

    pub fn row(&self, i: usize) -> NuisanceRow {
        NuisanceRow::new(self.mu0[i], self.mu1[i], self.pi_hat[i])
    }

    pub fn trimmed_in(&self) -> usize {
        self.trim.iter().filter(|&&t| t).count()
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "mu0_hat", "mu1_hat", "pi_raw", "pi_hat", "nu_hat", "mu_hat", "trim",
        ])?;
        for i in 0..self.n() {
            let f = |v: f64| format!("{v:.16e}");
            w.write_record([
                f(self.mu0[i]),
                f(self.mu1[i]),
                f(self.pi_raw[i]),
                f(self.pi_hat[i]),
                f(self.nu_hat[i]),
                f(self.mu_hat[i]),
                u8::from(self.trim[i]).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn predict_nuisance(
    prop: &PropensityModel,
    outcome: &OutcomeModel,
    ds: &Dataset,
    trim_lo: f64,
) -> Result<NuisanceEstimates> {
    if prop.spec.widths[0] != ds.d() || outcome.rep_spec.widths[0] != ds.d() {
        return shape(format!(
            "models expect {} / {} covariates, dataset has {}",
            prop.spec.widths[0],
            outcome.rep_spec.widths[0],
            ds.d()
        ));
    }
    let pi_raw = prop.predict(&ds.x)?;
    let (mu0, mu1) = outcome.predict(&ds.x)?;
    NuisanceEstimates::from_parts(mu0, mu1, pi_raw, trim_lo)
}

/// Fit both models and predict on the training sample, or out of fold when
/// cross-fitting is enabled.
pub fn fit_nuisance(
    train: &Dataset,
    cfg: &StageOneConfig,
    trim_lo: f64,
    seed: u64,
) -> Result<NuisanceEstimates> {
    match cfg.cross_fit {
        None => {
            let prop = fit_propensity(train, cfg, seed)?;
            let out = fit_outcomes(train, cfg, seed)?;
            predict_nuisance(&prop, &out, train, trim_lo)
        }
        Some(k) => {
            let n = train.n();
            if k > n {
                return Err(OarError::Config(format!("{k} folds for {n} rows")));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng::stream(seed, Stream::Split));
            let (mut mu0, mut mu1, mut pi) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
            for f in 0..k {
                let hold: Vec<usize> = idx.iter().copied().skip(f).step_by(k).collect();
                let fit: Vec<usize> = idx
                    .iter()
                    .copied()
                    .enumerate()
                    .filter(|(j, _)| j % k != f)
                    .map(|(_, i)| i)
                    .collect();
                let part = train.select(&fit);
                let fold_seed = seed.wrapping_add(1 + f as u64);
                let prop = fit_propensity(&part, cfg, fold_seed)?;
                let out = fit_outcomes(&part, cfg, fold_seed)?;
                let held = train.select(&hold);
                let p = prop.predict(&held.x)?;
                let (m0, m1) = out.predict(&held.x)?;
                for (r, &i) in hold.iter().enumerate() {
                    pi[i] = p[r];
                    mu0[i] = m0[r];
                    mu1[i] = m1[r];
                }
            }
            NuisanceEstimates::from_parts(mu0, mu1, pi, trim_lo)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticConfig};
    use crate::learners::{pseudo_outcome, LearnerKind};

    fn small(epochs: usize) -> StageOneConfig {
        StageOneConfig {
            epochs,
            ..Default::default()
        }
    }

    #[test]
    fn trimming_and_clamping_examples() {
        let e =
            NuisanceEstimates::from_parts(vec![1.0, 2.0], vec![3.0, 5.0], vec![0.01, 0.5], 0.05)
                .unwrap();
        assert_eq!(e.trim, vec![false, true]);
        assert_eq!(e.pi_hat, vec![0.05, 0.5]);
        assert_eq!(e.nu_hat[1], 0.25);
        for i in 0..2 {
            let want = (1.0 - e.pi_hat[i]) * e.mu0[i] + e.pi_hat[i] * e.mu1[i];
            assert!((e.mu_hat[i] - want).abs() <= 1e-15);
        }
    }

    #[test]
    fn indicator_ignores_clamping() {
        let raw = vec![0.0499, 0.05, 0.95, 0.9501, 0.3];
        let e =
            NuisanceEstimates::from_parts(vec![0.0; 5], vec![0.0; 5], raw.clone(), 0.05).unwrap();
        assert_eq!(e.trim, vec![false, true, true, false, true]);
        assert!(e.pi_hat.iter().all(|&p| (0.05..=0.95).contains(&p)));
        assert!(e.nu_hat.iter().all(|&v| v > 0.0 && v <= 0.25));
    }

    #[test]
    fn propensity_on_balanced_data() {
        let ds = generate_synthetic(&SyntheticConfig {
            n: 10_000,
            b: 0.0,
            seed: 1,
        })
        .unwrap();
        let m = fit_propensity(&ds, &small(2), 3).unwrap();
        let p = m.predict(&ds.x).unwrap();
        let dev = p.iter().map(|v| (v - 0.5).abs()).sum::<f64>() / p.len() as f64;
        assert!(dev < 0.05, "mean |pi - 0.5| = {dev}");
    }

    #[test]
    fn constant_treatment_pushes_propensity_up() {
        let mut ds = generate_synthetic(&SyntheticConfig {
            n: 200,
            b: 2.0,
            seed: 1,
        })
        .unwrap();
        ds.a = vec![1; 200];
        let m = fit_propensity(&ds, &small(300), 3).unwrap();
        let p = m.predict(&ds.x).unwrap();
        assert!(
            p.iter().all(|&v| v > 0.9),
            "min {}",
            p.iter().cloned().fold(1.0, f64::min)
        );
    }

    #[test]
    fn fits_are_reproducible() {
        let ds = generate_synthetic(&SyntheticConfig {
            n: 100,
            b: 2.0,
            seed: 4,
        })
        .unwrap();
        let cfg = small(5);
        assert_eq!(
            fit_propensity(&ds, &cfg, 7).unwrap(),
            fit_propensity(&ds, &cfg, 7).unwrap()
        );
        assert_eq!(
            fit_outcomes(&ds, &cfg, 7).unwrap(),
            fit_outcomes(&ds, &cfg, 7).unwrap()
        );
    }

    #[test]
    fn constant_outcome_is_learned() {
        let mut ds = generate_synthetic(&SyntheticConfig {
            n: 40,
            b: 1.0,
            seed: 2,
        })
        .unwrap();
        ds.y = vec![1.5; 40];
        let cfg = StageOneConfig {
            epochs: 400,
            batch_size: 8,
            lr: 0.02,
            weight_decay: 0.0,
            ..Default::default()
        };
        let m = fit_outcomes(&ds, &cfg, 1).unwrap();
        assert!(m.factual_mse(&ds).unwrap() < 1e-2);
        let (m0, m1) = m.predict(&ds.x).unwrap();
        assert!(m0.iter().chain(&m1).all(|v| (v - 1.5).abs() < 0.15));
    }

    #[test]
    fn empty_arm_head_keeps_init() {
        let mut ds = generate_synthetic(&SyntheticConfig {
            n: 50,
            b: 2.0,
            seed: 2,
        })
        .unwrap();
        ds.a = vec![0; 50];
        let cfg = small(3);
        let m = fit_outcomes(&ds, &cfg, 5).unwrap();
        // replay the initialization draw order
        let mut rng = rng::stream(5, Stream::Outcome);
        let _rep = MlpParams::init(&m.rep_spec, &mut rng);
        let _h0 = MlpParams::init(&m.head_spec, &mut rng);
        let h1 = MlpParams::init(&m.head_spec, &mut rng);
        assert_eq!(m.heads[1], h1);
        assert_eq!(m.arm_counts, [50, 0]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let ds = generate_synthetic(&SyntheticConfig {
            n: 30,
            b: 2.0,
            seed: 2,
        })
        .unwrap();
        let cfg = small(1);
        let p = fit_propensity(&ds, &cfg, 1).unwrap();
        let o = fit_outcomes(&ds, &cfg, 1).unwrap();
        let mut wide = ds.clone();
        wide.x = DMatrix::from_element(30, 2, 0.0);
        assert!(matches!(
            predict_nuisance(&p, &o, &wide, 0.05),
            Err(OarError::Shape(_))
        ));
    }

    #[test]
    fn oracle_mode_satisfies_tower_property_in_expectation() {
        let ds = generate_synthetic(&SyntheticConfig {
            n: 200_000,
            b: 1.0,
            seed: 8,
        })
        .unwrap();
        let e = NuisanceEstimates::from_oracle(&ds, 0.01).unwrap();
        for kind in LearnerKind::ALL {
            // E[φ] = E[τ] = 0 under the true law (rows are kept away from the clamp)
            let (mut s, mut s2, mut c) = (0.0, 0.0, 0.0);
            for i in 0..ds.n() {
                if !e.trim[i] || (e.pi_hat[i] - e.pi_raw[i]).abs() > 0.0 {
                    continue;
                }
                let phi = pseudo_outcome(kind, ds.a[i], ds.y[i], &e.row(i)).unwrap();
                s += phi;
                s2 += phi * phi;
                c += 1.0;
            }
            let mean = s / c;
            let se = ((s2 / c - mean * mean) / c).sqrt();
            assert!(mean.abs() < 4.0 * se, "{kind:?}: mean {mean}, se {se}");
        }
    }

    #[test]
    fn cross_fitting_produces_out_of_fold_estimates() {
        let ds = generate_synthetic(&SyntheticConfig {
            n: 60,
            b: 2.0,
            seed: 2,
        })
        .unwrap();
        let cfg = StageOneConfig {
            epochs: 2,
            cross_fit: Some(3),
            ..Default::default()
        };
        let e = fit_nuisance(&ds, &cfg, 0.05, 1).unwrap();
        assert_eq!(e.n(), 60);
        assert!(e.pi_raw.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn export_csv() {
        let e = NuisanceEstimates::from_parts(vec![0.1], vec![0.2], vec![0.3], 0.05).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.csv");
        e.save_csv(&p).unwrap();
        let body = std::fs::read_to_string(&p).unwrap();
        assert!(body.starts_with("mu0_hat,mu1_hat,pi_raw"));
        assert_eq!(body.lines().count(), 2);
    }
}
