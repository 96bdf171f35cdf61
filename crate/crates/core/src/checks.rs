//! Numerical verification suites: explicit-form equivalences, the kernel
//! push-through identity, influence-function kernels, backprop gradients and
//! the log-overlap divergence identity.
//!
//! Each suite returns a small report; [`run_all`] turns them into pass/fail
//! outcomes at fixed tolerances.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{generate_synthetic, SyntheticConfig};
use crate::error::{OarError, Result};
use crate::exec::{self, Execution};
use crate::krr::{pushthrough_deviation, pushthrough_plugin_deviation, query_grid, KernelConfig};
use crate::learners::{pseudo_outcome, weight_rho, LearnerKind, NuisanceRow};
use crate::neuralnet::{
    backward, forward, predict, Activation, Layer, MlpParams, MlpSpec, Perturbation,
};
use crate::regfun::{
    dropout_p, lambda_fn, overlap, rescaled_score_lambda, rescaled_score_p, score_kernel_lambda,
    score_kernel_p, RegKind,
};
use crate::rng::{self, Rng, Stream};
use crate::second_stage::{draw, oar_empirical_loss, Injector, RowTerms, SecondStageConfig};

/// Monte Carlo estimate of an implicit loss next to its closed form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McComparison {
    pub explicit: f64,
    pub mc_mean: f64,
    pub mc_se: f64,
}

impl McComparison {
    /// Discrepancy in units of the Monte Carlo standard error.
    pub fn z(&self) -> f64 {
        (self.mc_mean - self.explicit).abs() / self.mc_se
    }
}

struct LinearInstance {
    x: DMatrix<f64>,
    rows: Vec<RowTerms>,
    params: MlpParams,
    spec: MlpSpec,
}

fn linear_instance(injector: Injector, rng: &mut Rng) -> LinearInstance {
    let n = rng.gen_range(8..=24);
    let d = rng.gen_range(1..=4);
    let x = DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(rng));
    let beta: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let c = rng.gen_range(-1.0..1.0);
    let rows = (0..n)
        .map(|_| {
            let rho = rng.gen_range(0.2..2.0);
            RowTerms {
                phi: rng.gen_range(-2.0..2.0),
                rho,
                w: rho,
                trim: true,
                tau_hat: 0.0,
                level: match injector {
                    Injector::Noise => rng.gen_range(0.05..2.0),
                    Injector::Dropout => rng.gen_range(0.05..0.7),
                },
                kernel: 0.0,
            }
        })
        .collect();
    let spec = MlpSpec::new(vec![d, 1], Activation::Identity, Some(0)).expect("valid linear spec");
    let params = MlpParams {
        layers: vec![Layer {
            w: DMatrix::from_row_slice(1, d, &beta),
            b: DVector::from_element(1, c),
        }],
    };
    LinearInstance {
        x,
        rows,
        params,
        spec,
    }
}

/// Closed form of the injected loss of a linear target.
fn explicit_loss(inst: &LinearInstance, injector: Injector) -> f64 {
    let beta = inst.params.layers[0].w.row(0);
    let c = inst.params.layers[0].b[0];
    let n = inst.rows.len() as f64;
    let mut total = 0.0;
    for (i, r) in inst.rows.iter().enumerate() {
        let xi = inst.x.row(i);
        let e = r.phi - beta.dot(&xi) - c;
        let penalty = match injector {
            Injector::Noise => beta.norm_squared() * r.level,
            Injector::Dropout => {
                let odds = r.level / (1.0 - r.level);
                beta.iter()
                    .zip(xi.iter())
                    .map(|(b, x)| b * b * x * x)
                    .sum::<f64>()
                    * odds
            }
        };
        total += r.rho * (e * e + penalty);
    }
    total / n
}

/// Implicit (perturbed) loss of random linear targets averaged over `draws`
/// perturbations, against its explicit quadratic form.
pub fn linear_equivalence(
    injector: Injector,
    instances: usize,
    draws: usize,
    seed: u64,
    execution: Execution,
) -> Result<Vec<McComparison>> {
    const CHUNK: usize = 1000;
    let mut rng = rng::stream(seed, Stream::Check);
    let cfg = SecondStageConfig {
        injector,
        ..SecondStageConfig::default()
    };
    (0..instances)
        .map(|k| {
            let inst = linear_instance(injector, &mut rng);
            let d = inst.x.ncols();
            let chunks = draws.div_ceil(CHUNK);
            let partial = exec::map_range(execution, chunks, |ch| -> Result<(f64, f64, usize)> {
                let tag = ((k as u64) << 32) | ch as u64;
                let mut r = rng::stream(seed, Stream::Custom(tag));
                let m = CHUNK.min(draws - ch * CHUNK);
                let (mut s, mut s2) = (0.0, 0.0);
                for _ in 0..m {
                    let dr = draw(&cfg, &inst.rows, d, &mut r);
                    let out =
                        forward(&inst.params, &inst.spec, &inst.x, Some(&dr.perturbation))?.output;
                    let l = oar_empirical_loss(&inst.rows, out.as_slice())?;
                    s += l;
                    s2 += l * l;
                }
                Ok((s, s2, m))
            });
            let (mut s, mut s2, mut m) = (0.0, 0.0, 0usize);
            for p in partial {
                let (a, b, c) = p?;
                s += a;
                s2 += b;
                m += c;
            }
            let mf = m as f64;
            let mean = s / mf;
            let var = (s2 - mf * mean * mean) / (mf - 1.0);
            Ok(McComparison {
                explicit: explicit_loss(&inst, injector),
                mc_mean: mean,
                mc_se: (var.max(0.0) / mf).sqrt(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PushThroughReport {
    /// Oracle weights `ν` and oracle targets.
    pub deviation: f64,
    /// Weights `ρ` and pseudo-outcomes in place of the oracle quantities.
    pub plugin_deviation: f64,
}

/// Push-through identity on `n` synthetic rows and `queries` grid points.
pub fn pushthrough_suite(n: usize, queries: usize, seed: u64) -> Result<PushThroughReport> {
    let ds = generate_synthetic(&SyntheticConfig { n, b: 2.0, seed })?;
    let kern = KernelConfig::rbf(0.1)?;
    let pi = ds
        .oracle_pi
        .as_ref()
        .ok_or_else(|| OarError::Config("oracle propensity missing".into()))?;
    let (mu0, mu1) = ds
        .oracle_mu
        .as_ref()
        .ok_or_else(|| OarError::Config("oracle outcomes missing".into()))?;
    let nu: Vec<f64> = pi.iter().map(|&p| overlap(p)).collect();
    let q = query_grid(&ds.x, queries);
    // the targets are identically zero effects here, so use a non-trivial oracle curve
    let deviation = pushthrough_deviation(&kern, &ds.x, &nu, mu0, &q)?;
    let mut rho = Vec::with_capacity(n);
    let mut phi = Vec::with_capacity(n);
    for i in 0..n {
        let row = NuisanceRow::new(mu0[i], mu1[i], pi[i]);
        rho.push(weight_rho(LearnerKind::R, ds.a[i], pi[i])?);
        phi.push(pseudo_outcome(LearnerKind::DR, ds.a[i], ds.y[i], &row)?);
    }
    let plugin_deviation = pushthrough_plugin_deviation(&kern, &ds.x, &rho, &nu, &phi, &q)?;
    Ok(PushThroughReport {
        deviation,
        plugin_deviation,
    })
}

/// Five-point central difference.
fn derivative(f: impl Fn(f64) -> Result<f64>, h: f64) -> Result<f64> {
    Ok((f(-2.0 * h)? - 8.0 * f(-h)? + 8.0 * f(h)? - f(2.0 * h)?) / (12.0 * h))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Level function for the noise (`λ`) or dropout (`p`) family.
fn level(kind: RegKind, probability: bool, pi: f64) -> Result<f64> {
    let nu = overlap(pi);
    if probability {
        dropout_p(kind, nu)
    } else {
        lambda_fn(kind, nu)
    }
}

/// Finite-difference pathwise derivative of the raw kernel: `d/dt λ(ν(π + t(a − π)))` at 0.
pub fn kernel_fd(kind: RegKind, probability: bool, a: u8, pi: f64) -> Result<f64> {
    let a = a as f64;
    derivative(|t| level(kind, probability, pi + t * (a - pi)), 1e-4)
}

/// Two-atom law for the rescaled-score oracle: the sample's own covariate
/// carries mass `q` and propensity `pi`; the remaining mass sits on an atom
/// whose level is `other`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoAtom {
    pub q: f64,
    pub pi: f64,
    pub other: f64,
}

impl TwoAtom {
    pub fn mean(&self, kind: RegKind, probability: bool) -> Result<f64> {
        Ok(self.q * level(kind, probability, self.pi)? + (1.0 - self.q) * self.other)
    }
}

/// Finite-difference oracle for the rescaled score at `(a, law.pi)`.
///
/// The rescaled level of the sample is differentiated along the mixture
/// `(1 − t)P + tδ_(x₀, a)`: the own-point level moves along the smoothed
/// submodel `π + t(a − π)` while the mean moves under the exact mixture,
/// where the atom's propensity becomes `((1−t)qπ + ta)/((1−t)q + t)`.
pub fn rescaled_fd(
    kind: RegKind,
    probability: bool,
    a: u8,
    law: TwoAtom,
    base: f64,
    gamma: f64,
) -> Result<f64> {
    let af = a as f64;
    let TwoAtom { q, pi, other } = law;
    let m0 = law.mean(kind, probability)?;
    let upper = probability && (base / m0) >= (1.0 - base) / (1.0 - m0);
    let value = |t: f64| -> Result<f64> {
        let own = level(kind, probability, pi + t * (af - pi))?;
        let mass = (1.0 - t) * q + t;
        let pi_t = ((1.0 - t) * q * pi + t * af) / mass;
        let m = mass * level(kind, probability, pi_t)? + (1.0 - t) * (1.0 - q) * other;
        let slope = if upper {
            (1.0 - base) / (1.0 - m)
        } else {
            base / m
        };
        Ok(base + gamma * slope * (own - m))
    };
    derivative(value, 1e-4)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfluenceReport {
    /// Largest `|E_A k(A, π)|` over kernels and sampled propensities.
    pub max_mean: f64,
    /// Largest relative gap between raw kernels and their pathwise derivatives.
    pub max_kernel_rel: f64,
    /// Same for the rescaled scores.
    pub max_rescaled_rel: f64,
    /// Largest `|score|` at `γ = 0`.
    pub max_gamma_zero: f64,
}

/// All six kernels and both rescaled scores on `samples` random propensities
/// inside the trimmed range.
pub fn influence_suite(samples: usize, seed: u64) -> Result<InfluenceReport> {
    let mut rng = rng::stream(seed, Stream::Check);
    let mut rep = InfluenceReport {
        max_mean: 0.0,
        max_kernel_rel: 0.0,
        max_rescaled_rel: 0.0,
        max_gamma_zero: 0.0,
    };
    for _ in 0..samples {
        let pi: f64 = rng.gen_range(0.05..0.95);
        let a: u8 = rng.gen_range(0..=1);
        let q: f64 = rng.gen_range(0.1..0.9);
        let pi_other: f64 = rng.gen_range(0.05..0.95);
        let base_l: f64 = rng.gen_range(0.1..3.0);
        let base_p: f64 = rng.gen_range(0.05..0.9);
        let gamma: f64 = rng.gen_range(0.1..=1.0);
        for kind in RegKind::ALL {
            for probability in [false, true] {
                let k = |a| {
                    if probability {
                        score_kernel_p(kind, a, pi)
                    } else {
                        score_kernel_lambda(kind, a, pi)
                    }
                };
                let mean = (1.0 - pi) * k(0)? + pi * k(1)?;
                rep.max_mean = rep.max_mean.max(mean.abs());
                rep.max_kernel_rel = rep
                    .max_kernel_rel
                    .max(rel(k(a)?, kernel_fd(kind, probability, a, pi)?));

                let law = TwoAtom {
                    q,
                    pi,
                    other: level(kind, probability, pi_other)?,
                };
                let m = law.mean(kind, probability)?;
                let base = if probability { base_p } else { base_l };
                let (score, zero) = if probability {
                    if m <= 0.0 || m >= 1.0 {
                        continue;
                    }
                    (
                        rescaled_score_p(kind, a, pi, m, base, gamma)?,
                        rescaled_score_p(kind, a, pi, m, base, 0.0)?,
                    )
                } else {
                    if m <= 0.0 {
                        continue;
                    }
                    (
                        rescaled_score_lambda(kind, a, pi, m, base, gamma)?,
                        rescaled_score_lambda(kind, a, pi, m, base, 0.0)?,
                    )
                };
                let fd = rescaled_fd(kind, probability, a, law, base, gamma)?;
                rep.max_rescaled_rel = rep.max_rescaled_rel.max(rel(score, fd));
                rep.max_gamma_zero = rep.max_gamma_zero.max(zero.abs());
            }
        }
    }
    Ok(rep)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientReport {
    pub architectures: usize,
    pub max_param_rel: f64,
    pub max_input_rel: f64,
    pub max_injected_rel: f64,
}

fn grad_rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn random_arch(rng: &mut Rng) -> MlpSpec {
    let depth = rng.gen_range(1..=4);
    let mut widths = vec![rng.gen_range(1..=4)];
    for _ in 0..depth {
        widths.push(rng.gen_range(1..=5));
    }
    let output = [Activation::Identity, Activation::Sigmoid, Activation::Elu][rng.gen_range(0..3)];
    let injection = rng.gen_range(0..depth);
    MlpSpec::new(widths, output, Some(injection)).expect("valid random spec")
}

/// Backprop against central differences for parameters, inputs and the
/// injected perturbation (additive and multiplicative) on random networks.
pub fn gradient_suite(architectures: usize, seed: u64) -> Result<GradientReport> {
    let mut rng = rng::stream(seed, Stream::Check);
    let h = 1e-5;
    let mut rep = GradientReport {
        architectures,
        max_param_rel: 0.0,
        max_input_rel: 0.0,
        max_injected_rel: 0.0,
    };
    for _ in 0..architectures {
        let spec = random_arch(&mut rng);
        let params = MlpParams::init(&spec, &mut rng);
        let n = rng.gen_range(1..=5);
        let k = spec.injection.expect("injecting spec");
        let x = DMatrix::from_fn(n, spec.widths[0], |_, _| rng.gen_range(-1.5..1.5));
        let out_w = *spec.widths.last().expect("nonempty widths");
        let c = DMatrix::from_fn(n, out_w, |_, _| rng.gen_range(-1.5..1.5));
        let xi = DMatrix::from_fn(n, spec.interface_width(k), |_, _| rng.gen_range(0.5..1.5));
        // loss Σ c∘g²/2
        let loss = |out: &DMatrix<f64>| out.zip_map(&c, |g, c| 0.5 * c * g * g).sum();

        let cache = forward(&params, &spec, &x, None)?;
        let grads = backward(&params, &spec, &cache, &cache.output.component_mul(&c))?;
        let flat = params.to_flat();
        for (i, &g) in grads.params.to_flat().iter().enumerate() {
            let f = |d: f64| -> Result<f64> {
                let mut p = flat.clone();
                p[i] += d;
                Ok(loss(&predict(
                    &MlpParams::from_flat(&spec, &p)?,
                    &spec,
                    &x,
                )?))
            };
            let num = (f(h)? - f(-h)?) / (2.0 * h);
            rep.max_param_rel = rep.max_param_rel.max(grad_rel(g, num));
        }
        for i in 0..n {
            for j in 0..x.ncols() {
                let f = |d: f64| -> Result<f64> {
                    let mut xx = x.clone();
                    xx[(i, j)] += d;
                    Ok(loss(&predict(&params, &spec, &xx)?))
                };
                let num = (f(h)? - f(-h)?) / (2.0 * h);
                rep.max_input_rel = rep.max_input_rel.max(grad_rel(grads.input[(i, j)], num));
            }
        }
        for multiplicative in [false, true] {
            let make = |m: DMatrix<f64>| {
                if multiplicative {
                    Perturbation::Multiplicative(m)
                } else {
                    Perturbation::Additive(m)
                }
            };
            let cache = forward(&params, &spec, &x, Some(&make(xi.clone())))?;
            let grads = backward(&params, &spec, &cache, &cache.output.component_mul(&c))?;
            let gi = grads
                .injected
                .ok_or_else(|| OarError::Numerical("missing injected gradient".into()))?;
            for i in 0..n {
                for j in 0..xi.ncols() {
                    let f = |d: f64| -> Result<f64> {
                        let mut m = xi.clone();
                        m[(i, j)] += d;
                        Ok(loss(&forward(&params, &spec, &x, Some(&make(m)))?.output))
                    };
                    let num = (f(h)? - f(-h)?) / (2.0 * h);
                    rep.max_injected_rel = rep.max_injected_rel.max(grad_rel(gi[(i, j)], num));
                }
            }
        }
    }
    Ok(rep)
}

/// Both sides of the log-overlap identity for a finite joint law given by
/// covariate masses `px` and propensities `pi`:
/// `E[λ_log(ν(X))]` and `−log(4π₀π₁) + KL(P_X‖P_X|A=0) + KL(P_X‖P_X|A=1)`.
pub fn log_equality(px: &[f64], pi: &[f64]) -> Result<(f64, f64)> {
    if px.len() != pi.len() || px.is_empty() {
        return Err(OarError::Shape(
            "masses and propensities differ in length".into(),
        ));
    }
    // exhaustive joint table P(x, a)
    let joint: Vec<[f64; 2]> = px
        .iter()
        .zip(pi)
        .map(|(&p, &e)| [p * (1.0 - e), p * e])
        .collect();
    let total: f64 = joint.iter().map(|j| j[0] + j[1]).sum();
    let marg_a = [
        joint.iter().map(|j| j[0]).sum::<f64>() / total,
        joint.iter().map(|j| j[1]).sum::<f64>() / total,
    ];
    let mut lhs = 0.0;
    let mut kl = [0.0; 2];
    for j in &joint {
        let p = (j[0] + j[1]) / total;
        if p == 0.0 {
            continue;
        }
        let e = j[1] / (j[0] + j[1]);
        lhs += p * lambda_fn(RegKind::Logarithmic, overlap(e))?;
        for a in 0..2 {
            let cond = j[a] / total / marg_a[a];
            kl[a] += p * (p / cond).ln();
        }
    }
    let rhs = -(4.0 * marg_a[0] * marg_a[1]).ln() + kl[0] + kl[1];
    Ok((lhs, rhs))
}

/// Largest gap of [`log_equality`] over random finite laws.
pub fn log_equality_suite(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = rng::stream(seed, Stream::Check);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let k = rng.gen_range(1..=30);
        let px: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
        let pi: Vec<f64> = (0..k).map(|_| rng.gen_range(0.02..0.98)).collect();
        let (l, r) = log_equality(&px, &pi)?;
        worst = worst.max((l - r).abs());
    }
    Ok(worst)
}

/// Result of one suite at its tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}] {:<22} {} ({:.1}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckOutcome {
    let t0 = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome {
        name,
        passed,
        detail,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

pub fn check_linear(injector: Injector, seed: u64, execution: Execution) -> CheckOutcome {
    let name = match injector {
        Injector::Noise => "noise explicit form",
        Injector::Dropout => "dropout explicit form",
    };
    timed(name, || {
        let cmp = linear_equivalence(injector, 10, 100_000, seed, execution)?;
        let worst = cmp.iter().map(McComparison::z).fold(0.0, f64::max);
        Ok((
            worst <= 3.0,
            format!(
                "max |mc - explicit| = {worst:.2} se over {} instances",
                cmp.len()
            ),
        ))
    })
}

pub fn check_pushthrough(seed: u64) -> CheckOutcome {
    timed("push-through", || {
        let r = pushthrough_suite(50, 100, seed)?;
        Ok((
            r.deviation < 1e-8 && r.plugin_deviation > 1e-3,
            format!(
                "oracle {:.2e} (< 1e-8), plug-in {:.2e} (> 1e-3)",
                r.deviation, r.plugin_deviation
            ),
        ))
    })
}

pub fn check_influence(seed: u64) -> CheckOutcome {
    timed("influence functions", || {
        let r = influence_suite(1000, seed)?;
        Ok((
            r.max_mean <= 1e-12
                && r.max_kernel_rel <= 1e-6
                && r.max_rescaled_rel <= 1e-6
                && r.max_gamma_zero == 0.0,
            format!(
                "mean {:.1e}, kernel fd {:.1e}, rescaled fd {:.1e}, gamma=0 {:.1e}",
                r.max_mean, r.max_kernel_rel, r.max_rescaled_rel, r.max_gamma_zero
            ),
        ))
    })
}

pub fn check_gradients(seed: u64) -> CheckOutcome {
    timed("gradients", || {
        let r = gradient_suite(20, seed)?;
        let worst = r.max_param_rel.max(r.max_input_rel).max(r.max_injected_rel);
        Ok((
            worst < 1e-5,
            format!(
                "{} nets: params {:.1e}, input {:.1e}, injected {:.1e}",
                r.architectures, r.max_param_rel, r.max_input_rel, r.max_injected_rel
            ),
        ))
    })
}

pub fn check_log_equality(seed: u64) -> CheckOutcome {
    timed("log-overlap identity", || {
        let worst = log_equality_suite(100, seed)?;
        Ok((worst <= 1e-10, format!("max gap {worst:.1e} over 100 laws")))
    })
}

/// Every suite, in a fixed order.
pub fn run_all(seed: u64, execution: Execution) -> Vec<CheckOutcome> {
    vec![
        check_linear(Injector::Noise, seed, execution),
        check_linear(Injector::Dropout, seed, execution),
        check_pushthrough(seed),
        check_influence(seed),
        check_gradients(seed),
        check_log_equality(seed),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rescaled_oracle_example() {
        // m = 0.5·0.5625 + 0.5·1.4375 = 1
        let law = TwoAtom {
            q: 0.5,
            pi: 0.8,
            other: 1.4375,
        };
        assert_relative_eq!(
            law.mean(RegKind::Multiplicative, false).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        let fd = rescaled_fd(RegKind::Multiplicative, false, 1, law, 1.0, 1.0).unwrap();
        assert_relative_eq!(fd, 0.7587890625, max_relative = 1e-8);
    }

    #[test]
    fn small_suites_pass() {
        let r = influence_suite(50, 1).unwrap();
        assert!(
            r.max_mean <= 1e-12 && r.max_kernel_rel <= 1e-6 && r.max_rescaled_rel <= 1e-6,
            "{r:?}"
        );
        assert_eq!(r.max_gamma_zero, 0.0);
        assert!(log_equality_suite(20, 2).unwrap() <= 1e-10);
        let (l, r) = log_equality(&[1.0], &[0.3]).unwrap();
        assert_relative_eq!(l, r, epsilon = 1e-14);
        let g = gradient_suite(3, 3).unwrap();
        assert!(g.max_param_rel < 1e-5 && g.max_injected_rel < 1e-5);
    }

    #[test]
    fn linear_equivalence_small() {
        for inj in [Injector::Noise, Injector::Dropout] {
            let cmp = linear_equivalence(inj, 2, 4000, 5, Execution::Sequential).unwrap();
            for c in cmp {
                assert!(c.z() < 4.0, "{c:?}");
            }
        }
    }
}
