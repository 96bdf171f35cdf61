//! Dense feed-forward networks with exact first- and second-order backprop.
//!
//! A network is a chain of affine layers `z = h Wᵀ + b` followed by an
//! element-wise activation (ELU on hidden layers). Batches are row-major in
//! the sense that row `i` of every matrix belongs to sample `i`.
//!
//! Besides plain backprop the module supports a perturbation injected at one
//! interface (additive or multiplicative), and a forward-mode tangent `ġ`
//! started at that interface. Backward through the tangent gives gradients of
//! losses that depend on directional derivatives `⟨∇_u g, v⟩`.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{shape, OarError, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Elu,
    Identity,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn f(self, z: f64) -> f64 {
        match self {
            Activation::Elu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
            Activation::Identity => z,
            Activation::Sigmoid => sigmoid(z),
        }
    }

    #[inline]
    pub fn d1(self, z: f64) -> f64 {
        match self {
            Activation::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    z.exp()
                }
            }
            Activation::Identity => 1.0,
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
        }
    }

    #[inline]
    pub fn d2(self, z: f64) -> f64 {
        match self {
            Activation::Elu => {
                if z > 0.0 {
                    0.0
                } else {
                    z.exp()
                }
            }
            Activation::Identity => 0.0,
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Architecture: `widths[0]` inputs, `widths.last()` outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub output: Activation,
    /// Interface where perturbations enter: `k` is the input of layer `k`,
    /// so `0` is the raw input and `1..layers` are hidden interfaces.
    pub injection: Option<usize>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, output: Activation, injection: Option<usize>) -> Result<Self> {
        let spec = MlpSpec {
            widths,
            output,
            injection,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(OarError::Config("an MLP needs at least one layer".into()));
        }
        if self.widths.contains(&0) {
            return Err(OarError::Config(format!(
                "zero layer width in {:?}",
                self.widths
            )));
        }
        if let Some(k) = self.injection {
            if k >= self.layers() {
                return Err(OarError::Config(format!(
                    "injection index {k} is not an interface of a {}-layer network",
                    self.layers()
                )));
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers() {
            self.output
        } else {
            Activation::Elu
        }
    }

    /// Width of interface `k` (the input of layer `k`).
    pub fn interface_width(&self, k: usize) -> usize {
        self.widths[k]
    }

    pub fn n_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }
}

/// One affine layer; `w` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    /// Uniform initialization in `±1/√fan_in` for weights and biases.
    pub fn init(spec: &MlpSpec, rng: &mut Rng) -> Self {
        let layers = spec
            .widths
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                Layer {
                    w: DMatrix::from_fn(w[1], w[0], |_, _| rng.gen_range(-bound..bound)),
                    b: DVector::from_fn(w[1], |_, _| rng.gen_range(-bound..bound)),
                }
            })
            .collect();
        MlpParams { layers }
    }

    pub fn zeros_like(&self) -> Self {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    w: DMatrix::zeros(l.w.nrows(), l.w.ncols()),
                    b: DVector::zeros(l.b.len()),
                })
                .collect(),
        }
    }

    pub fn check(&self, spec: &MlpSpec) -> Result<()> {
        if self.layers.len() != spec.layers() {
            return shape(format!(
                "{} parameter layers for a {}-layer spec",
                self.layers.len(),
                spec.layers()
            ));
        }
        for (l, (layer, w)) in self.layers.iter().zip(spec.widths.windows(2)).enumerate() {
            if layer.w.shape() != (w[1], w[0]) || layer.b.len() != w[1] {
                return shape(format!("layer {l} parameters do not match widths {w:?}"));
            }
        }
        Ok(())
    }

    /// Flattened view in layer order, each weight matrix column-major then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.w.as_slice());
            out.extend_from_slice(l.b.as_slice());
        }
        out
    }

    pub fn from_flat(spec: &MlpSpec, flat: &[f64]) -> Result<Self> {
        if flat.len() != spec.n_params() {
            return shape(format!(
                "{} values for {} parameters",
                flat.len(),
                spec.n_params()
            ));
        }
        let mut at = 0;
        let mut layers = Vec::with_capacity(spec.layers());
        for w in spec.widths.windows(2) {
            let nw = w[0] * w[1];
            let wm = DMatrix::from_column_slice(w[1], w[0], &flat[at..at + nw]);
            at += nw;
            let b = DVector::from_column_slice(&flat[at..at + w[1]]);
            at += w[1];
            layers.push(Layer { w: wm, b });
        }
        Ok(MlpParams { layers })
    }

    /// Apply `f(param, other)` over every scalar pair of two equally shaped sets.
    pub fn zip_apply(&mut self, other: &MlpParams, mut f: impl FnMut(&mut f64, f64)) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, &y) in a.w.as_mut_slice().iter_mut().zip(b.w.as_slice()) {
                f(x, y);
            }
            for (x, &y) in a.b.as_mut_slice().iter_mut().zip(b.b.as_slice()) {
                f(x, y);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.w *= s;
            l.b *= s;
        }
    }

    pub fn add_scaled(&mut self, other: &MlpParams, s: f64) {
        self.zip_apply(other, |x, y| *x += s * y);
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().chain(l.b.iter()))
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    fn fingerprint(&self) -> u64 {
        // FNV-1a over the raw bits
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for l in &self.layers {
            for v in l.w.iter().chain(l.b.iter()) {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Perturbation applied at the injection interface.
#[derive(Debug, Clone, PartialEq)]
pub enum Perturbation {
    /// `u = Φ + ξ`
    Additive(DMatrix<f64>),
    /// `u = Φ ∘ ξ`
    Multiplicative(DMatrix<f64>),
}

impl Perturbation {
    fn matrix(&self) -> &DMatrix<f64> {
        match self {
            Perturbation::Additive(m) | Perturbation::Multiplicative(m) => m,
        }
    }
}

/// Tangent direction at the injection interface.
#[derive(Debug, Clone, PartialEq)]
pub enum Direction {
    /// `v` is a constant matrix.
    Fixed(DMatrix<f64>),
    /// `v = C ∘ Φ` with `Φ` the pre-injection interface value.
    Scaled(DMatrix<f64>),
}

#[derive(Debug, Clone)]
struct TangentCache {
    /// Tangent entering each layer from the injection layer on.
    hdot: Vec<DMatrix<f64>>,
    zdot: Vec<DMatrix<f64>>,
    direction: Direction,
}

/// Everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct Cache {
    fingerprint: u64,
    /// Input of every layer (post-injection at the injection interface).
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    /// Pre-injection interface value, when a perturbation or tangent is active.
    phi: Option<DMatrix<f64>>,
    perturbation: Option<Perturbation>,
    injection: Option<usize>,
    tangent: Option<TangentCache>,
    pub output: DMatrix<f64>,
    /// Forward-mode derivative of the output along the tangent direction.
    pub output_dot: Option<DMatrix<f64>>,
}

impl Cache {
    /// Pre-injection value at the injection interface.
    pub fn interface(&self) -> Option<&DMatrix<f64>> {
        self.phi.as_ref()
    }
}

/// Gradients returned by [`backward`].
#[derive(Debug, Clone)]
pub struct Grads {
    pub params: MlpParams,
    pub input: DMatrix<f64>,
    /// Gradient with respect to the perturbation `ξ`.
    pub injected: Option<DMatrix<f64>>,
    /// Gradient with respect to the post-injection interface `u`.
    pub interface: Option<DMatrix<f64>>,
}

fn affine(h: &DMatrix<f64>, layer: &Layer) -> DMatrix<f64> {
    let mut z = h * layer.w.transpose();
    for (j, mut col) in z.column_iter_mut().enumerate() {
        col.add_scalar_mut(layer.b[j]);
    }
    z
}

/// Plain forward pass without perturbation.
pub fn predict(params: &MlpParams, spec: &MlpSpec, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(forward(params, spec, x, None)?.output)
}

pub fn forward(
    params: &MlpParams,
    spec: &MlpSpec,
    x: &DMatrix<f64>,
    perturbation: Option<&Perturbation>,
) -> Result<Cache> {
    forward_dual(params, spec, x, perturbation, None)
}

/// Forward pass with an optional forward-mode tangent started at the injection
/// interface. The tangent output is `ġ = ⟨∇_u g, v⟩` row by row.
pub fn forward_dual(
    params: &MlpParams,
    spec: &MlpSpec,
    x: &DMatrix<f64>,
    perturbation: Option<&Perturbation>,
    direction: Option<&Direction>,
) -> Result<Cache> {
    params.check(spec)?;
    let n = x.nrows();
    if x.ncols() != spec.widths[0] {
        return shape(format!(
            "batch has {} columns, network expects {}",
            x.ncols(),
            spec.widths[0]
        ));
    }
    let k = match (
        perturbation.is_some() || direction.is_some(),
        spec.injection,
    ) {
        (true, None) => return shape("perturbation given but the spec has no injection point"),
        (true, Some(k)) => Some(k),
        (false, _) => None,
    };
    if let Some(k) = k {
        let want = (n, spec.interface_width(k));
        for m in perturbation
            .map(|p| p.matrix())
            .into_iter()
            .chain(direction.map(|d| match d {
                Direction::Fixed(m) | Direction::Scaled(m) => m,
            }))
        {
            if m.shape() != want {
                return shape(format!(
                    "perturbation shape {:?} does not match interface {:?}",
                    m.shape(),
                    want
                ));
            }
        }
    }

    let layers = spec.layers();
    let mut inputs = Vec::with_capacity(layers);
    let mut pre = Vec::with_capacity(layers);
    let mut phi = None;
    let mut tangent: Option<TangentCache> = None;
    let mut h = x.clone();
    let mut hdot: Option<DMatrix<f64>> = None;
    for l in 0..layers {
        if Some(l) == k {
            let u = match perturbation {
                Some(Perturbation::Additive(xi)) => &h + xi,
                Some(Perturbation::Multiplicative(xi)) => h.component_mul(xi),
                None => h.clone(),
            };
            if let Some(d) = direction {
                hdot = Some(match d {
                    Direction::Fixed(v) => v.clone(),
                    Direction::Scaled(c) => c.component_mul(&h),
                });
                tangent = Some(TangentCache {
                    hdot: Vec::new(),
                    zdot: Vec::new(),
                    direction: d.clone(),
                });
            }
            phi = Some(std::mem::replace(&mut h, u));
        }
        let layer = &params.layers[l];
        let act = spec.activation(l);
        let z = affine(&h, layer);
        let next = z.map(|v| act.f(v));
        if let (Some(hd), Some(tc)) = (hdot.take(), tangent.as_mut()) {
            let zd = &hd * layer.w.transpose();
            let nd = zd.zip_map(&z, |a, zz| a * act.d1(zz));
            tc.hdot.push(hd);
            tc.zdot.push(zd);
            hdot = Some(nd);
        }
        inputs.push(h);
        pre.push(z);
        h = next;
    }
    Ok(Cache {
        fingerprint: params.fingerprint(),
        inputs,
        pre,
        phi,
        perturbation: perturbation.cloned(),
        injection: k,
        tangent,
        output: h,
        output_dot: hdot,
    })
}

/// Backward pass for a scalar loss `L(g)`; `gout = ∂L/∂g`.
pub fn backward(
    params: &MlpParams,
    spec: &MlpSpec,
    cache: &Cache,
    gout: &DMatrix<f64>,
) -> Result<Grads> {
    backward_dual(params, spec, cache, gout, None)
}

/// Backward pass for a scalar loss `L(g, ġ)`; `gdot = ∂L/∂ġ`.
///
/// Gradients through the tangent include the dependence of `ġ` on every
/// parameter after the injection point and, for [`Direction::Scaled`], on the
/// interface value itself.
pub fn backward_dual(
    params: &MlpParams,
    spec: &MlpSpec,
    cache: &Cache,
    gout: &DMatrix<f64>,
    gdot: Option<&DMatrix<f64>>,
) -> Result<Grads> {
    if params.fingerprint() != cache.fingerprint || cache.inputs.len() != spec.layers() {
        return Err(OarError::StaleCache);
    }
    if gout.shape() != cache.output.shape() {
        return shape(format!(
            "upstream gradient {:?} does not match output {:?}",
            gout.shape(),
            cache.output.shape()
        ));
    }
    if gdot.is_some() && cache.tangent.is_none() {
        return shape("tangent gradient given but the forward pass carried no tangent");
    }
    let mut grads = params.zeros_like();
    let mut gh = gout.clone();
    let mut ghd: Option<DMatrix<f64>> = match (&cache.tangent, gdot) {
        (Some(_), Some(g)) => Some(g.clone()),
        (Some(_), None) => Some(DMatrix::zeros(gout.nrows(), gout.ncols())),
        _ => None,
    };
    let mut injected = None;
    let mut interface = None;
    let k = cache.injection;
    for l in (0..spec.layers()).rev() {
        let layer = &params.layers[l];
        let act = spec.activation(l);
        let z = &cache.pre[l];
        let mut gz = gh.zip_map(z, |g, zz| g * act.d1(zz));
        let g_layer = &mut grads.layers[l];
        if let (Some(gd), Some(tc)) = (ghd.as_ref(), cache.tangent.as_ref()) {
            let t = l - k.expect("tangent implies injection");
            let zd = &tc.zdot[t];
            for r in 0..gz.nrows() {
                for c in 0..gz.ncols() {
                    gz[(r, c)] += gd[(r, c)] * act.d2(z[(r, c)]) * zd[(r, c)];
                }
            }
            let gzd = gd.zip_map(z, |g, zz| g * act.d1(zz));
            g_layer.w += gzd.tr_mul(&tc.hdot[t]);
            ghd = Some(&gzd * &layer.w);
        }
        g_layer.w += gz.tr_mul(&cache.inputs[l]);
        g_layer.b += gz.row_sum().transpose();
        gh = &gz * &layer.w;

        if Some(l) == k {
            let phi = cache.phi.as_ref().expect("interface cached");
            let gu = gh;
            let mut gphi = match &cache.perturbation {
                Some(Perturbation::Additive(_)) => {
                    injected = Some(gu.clone());
                    gu.clone()
                }
                Some(Perturbation::Multiplicative(xi)) => {
                    injected = Some(gu.component_mul(phi));
                    gu.component_mul(xi)
                }
                None => gu.clone(),
            };
            if let (Some(gv), Some(tc)) = (ghd.take(), cache.tangent.as_ref()) {
                if let Direction::Scaled(c) = &tc.direction {
                    gphi += gv.component_mul(c);
                }
            }
            interface = Some(gu);
            gh = gphi;
        }
    }
    Ok(Grads {
        params: grads,
        input: gh,
        injected,
        interface,
    })
}

/// Settings of the AdamW recurrence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 0.005,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub m: MlpParams,
    pub v: MlpParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &MlpParams, config: AdamWConfig) -> Self {
        OptimizerState {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// Decoupled weight decay followed by a bias-corrected Adam step.
pub fn adamw_step(params: &mut MlpParams, grads: &MlpParams, state: &mut OptimizerState) {
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let decay = 1.0 - c.lr * c.weight_decay;
    state
        .m
        .zip_apply(grads, |m, g| *m = c.beta1 * *m + (1.0 - c.beta1) * g);
    state
        .v
        .zip_apply(grads, |v, g| *v = c.beta2 * *v + (1.0 - c.beta2) * g * g);
    for ((p, m), v) in params
        .layers
        .iter_mut()
        .zip(&state.m.layers)
        .zip(&state.v.layers)
    {
        let upd = |p: &mut f64, m: f64, v: f64| {
            *p *= decay;
            *p -= c.lr * (m / bc1) / ((v / bc2).sqrt() + c.eps);
        };
        for ((x, &m), &v) in
            p.w.as_mut_slice()
                .iter_mut()
                .zip(m.w.as_slice())
                .zip(v.w.as_slice())
        {
            upd(x, m, v);
        }
        for ((x, &m), &v) in
            p.b.as_mut_slice()
                .iter_mut()
                .zip(m.b.as_slice())
                .zip(v.b.as_slice())
        {
            upd(x, m, v);
        }
    }
}

/// Exponential moving average of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub shadow: MlpParams,
    pub kappa: f64,
}

impl EmaState {
    pub fn new(params: &MlpParams, kappa: f64) -> Self {
        EmaState {
            shadow: params.clone(),
            kappa,
        }
    }

    pub fn update(&mut self, params: &MlpParams) {
        let k = self.kappa;
        self.shadow
            .zip_apply(params, |s, p| *s = k * *s + (1.0 - k) * p);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    spec: MlpSpec,
    shapes: Vec<[usize; 2]>,
    n_values: usize,
    layout: String,
}

/// Write parameters as little-endian `f64` values plus a JSON shape manifest.
pub fn save_checkpoint(
    spec: &MlpSpec,
    params: &MlpParams,
    bin: &Path,
    manifest: &Path,
) -> Result<()> {
    params.check(spec)?;
    let flat = params.to_flat();
    let bytes: Vec<u8> = flat.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(bin, bytes)?;
    let man = Manifest {
        spec: spec.clone(),
        shapes: params
            .layers
            .iter()
            .map(|l| [l.w.nrows(), l.w.ncols()])
            .collect(),
        n_values: flat.len(),
        layout: "per layer: weight (out x in, column-major) then bias; f64 little-endian".into(),
    };
    fs::write(manifest, serde_json::to_string_pretty(&man)?)?;
    Ok(())
}

pub fn load_checkpoint(bin: &Path, manifest: &Path) -> Result<(MlpSpec, MlpParams)> {
    let man: Manifest = serde_json::from_str(&fs::read_to_string(manifest)?)?;
    man.spec.validate()?;
    let bytes = fs::read(bin)?;
    if bytes.len() != 8 * man.n_values {
        return shape(format!(
            "checkpoint has {} bytes, manifest declares {} values",
            bytes.len(),
            man.n_values
        ));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let params = MlpParams::from_flat(&man.spec, &flat)?;
    Ok((man.spec, params))
}
