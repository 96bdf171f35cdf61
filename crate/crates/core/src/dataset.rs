//! Observational datasets: synthetic low-overlap generator, CSV I/O and splits.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{OarError, Result};
use crate::rng::{self, Rng, Stream};

/// Covariates, binary treatment and outcome, plus optional oracle columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n × d` covariate matrix.
    pub x: DMatrix<f64>,
    pub a: Vec<u8>,
    pub y: Vec<f64>,
    pub oracle_cate: Option<Vec<f64>>,
    pub oracle_pi: Option<Vec<f64>>,
    /// Conditional outcome means `(μ₀, μ₁)` when the generating law is known.
    pub oracle_mu: Option<(Vec<f64>, Vec<f64>)>,
    pub seed: u64,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, a: Vec<u8>, y: Vec<f64>) -> Result<Self> {
        let ds = Dataset {
            x,
            a,
            y,
            oracle_cate: None,
            oracle_pi: None,
            oracle_mu: None,
            seed: 0,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x.nrows();
        if self.x.ncols() == 0 {
            return Err(OarError::Shape(
                "dataset needs at least one covariate".into(),
            ));
        }
        if self.a.len() != n || self.y.len() != n {
            return Err(OarError::Shape(format!(
                "row counts differ: x {n}, a {}, y {}",
                self.a.len(),
                self.y.len()
            )));
        }
        if let Some(row) = self.a.iter().position(|&a| a > 1) {
            return Err(OarError::Parse {
                row,
                message: format!("treatment {} is not binary", self.a[row]),
            });
        }
        let check = |name: &str, v: &Option<Vec<f64>>| -> Result<()> {
            match v {
                Some(v) if v.len() != n => Err(OarError::Shape(format!(
                    "{name} has {} rows, expected {n}",
                    v.len()
                ))),
                _ => Ok(()),
            }
        };
        check("oracle_cate", &self.oracle_cate)?;
        check("oracle_pi", &self.oracle_pi)?;
        if let Some((m0, m1)) = &self.oracle_mu {
            if m0.len() != n || m1.len() != n {
                return Err(OarError::Shape("oracle_mu length mismatch".into()));
            }
        }
        Ok(())
    }

    /// Subset of rows, in the given order; oracle columns follow.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let x = DMatrix::from_fn(idx.len(), self.d(), |r, c| self.x[(idx[r], c)]);
        let pick = |v: &Vec<f64>| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Dataset {
            x,
            a: idx.iter().map(|&i| self.a[i]).collect(),
            y: pick(&self.y),
            oracle_cate: self.oracle_cate.as_ref().map(pick),
            oracle_pi: self.oracle_pi.as_ref().map(pick),
            oracle_mu: self.oracle_mu.as_ref().map(|(m0, m1)| (pick(m0), pick(m1))),
            seed: self.seed,
        }
    }

    /// Per-column mean and (population) standard deviation.
    pub fn column_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n() as f64;
        (0..self.d())
            .map(|c| {
                let col = self.x.column(c);
                let mean = col.sum() / n;
                let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                (mean, var.sqrt().max(1e-12))
            })
            .unzip()
    }

    /// Copy with covariates shifted and scaled column-wise.
    pub fn standardized(&self, mean: &[f64], sd: &[f64]) -> Dataset {
        let mut out = self.clone();
        for c in 0..self.d() {
            for r in 0..self.n() {
                out.x[(r, c)] = (self.x[(r, c)] - mean[c]) / sd[c];
            }
        }
        out
    }

    pub fn treated_fraction(&self) -> f64 {
        self.a.iter().map(|&a| a as f64).sum::<f64>() / self.n() as f64
    }
}

/// Settings of the one-dimensional low-overlap generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n: usize,
    /// Location of the second mixture component; larger values mean less overlap.
    pub b: f64,
    pub seed: u64,
}

/// Conditional outcome mean, identical for both arms.
pub fn synthetic_outcome_mean(x: f64) -> f64 {
    let q = 3.0 * x * x - 2.0 * x + 0.5;
    3.0 * q.cos() - 2.5 * q.sin()
}

/// `N(x; 0, 1) / (N(x; 0, 1) + N(x; b, 1))`, written as a logistic in `x`.
pub fn synthetic_propensity(x: f64, b: f64) -> f64 {
    let logit = 0.5 * b * b - b * x;
    1.0 / (1.0 + (-logit).exp())
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    generate_with(cfg, &mut rng::stream(cfg.seed, Stream::Data))
}

/// Generator body with an explicit random stream (used for held-out test sets).
pub fn generate_with(cfg: &SyntheticConfig, rng: &mut Rng) -> Result<Dataset> {
    if cfg.n < 2 {
        return Err(OarError::Config(format!(
            "synthetic n must be >= 2, got {}",
            cfg.n
        )));
    }
    let n = cfg.n;
    let mut x = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut pi = Vec::with_capacity(n);
    let mut mu = Vec::with_capacity(n);
    for _ in 0..n {
        let shift = if rng.gen::<f64>() < 0.5 { 0.0 } else { cfg.b };
        let z: f64 = StandardNormal.sample(rng);
        let xi = shift + z;
        let p = synthetic_propensity(xi, cfg.b);
        // A = 1{−U < logit π} with U ~ Logistic(0, 1) is exactly A ~ Bern(π)
        let ai = u8::from(rng.gen::<f64>() < p);
        let m = synthetic_outcome_mean(xi);
        let e: f64 = StandardNormal.sample(rng);
        x.push(xi);
        a.push(ai);
        y.push(m + e);
        pi.push(p);
        mu.push(m);
    }
    Ok(Dataset {
        x: DMatrix::from_vec(n, 1, x),
        a,
        y,
        oracle_cate: Some(vec![0.0; n]),
        oracle_pi: Some(pi),
        oracle_mu: Some((mu.clone(), mu)),
        seed: cfg.seed,
    })
}

/// Split into `(train, test)`; test gets `round(n · test_fraction)` rows.
pub fn split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = ds.n();
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(OarError::Config(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(OarError::Config(format!(
            "test fraction {test_fraction} on {n} rows leaves an empty split"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, Stream::Split));
    let (test, train) = idx.split_at(n_test);
    Ok((ds.select(train), ds.select(test)))
}

/// Column layout of a CSV dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub x: Vec<String>,
    pub a: String,
    pub y: String,
    pub oracle_cate: Option<String>,
    pub oracle_pi: Option<String>,
}

impl CsvSchema {
    /// Layout written by [`save_csv`]: `x0..x{d-1}, a, y` plus oracle columns.
    pub fn standard(d: usize, cate: bool, pi: bool) -> Self {
        CsvSchema {
            x: (0..d).map(|j| format!("x{j}")).collect(),
            a: "a".into(),
            y: "y".into(),
            oracle_cate: cate.then(|| "cate".into()),
            oracle_pi: pi.then(|| "pi".into()),
        }
    }
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write a dataset with a header row; floats carry 17 significant digits.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let schema = CsvSchema::standard(ds.d(), ds.oracle_cate.is_some(), ds.oracle_pi.is_some());
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = schema.x.clone();
    header.push(schema.a.clone());
    header.push(schema.y.clone());
    header.extend(schema.oracle_cate.iter().cloned());
    header.extend(schema.oracle_pi.iter().cloned());
    w.write_record(&header)?;
    for i in 0..ds.n() {
        let mut rec: Vec<String> = (0..ds.d()).map(|j| fmt17(ds.x[(i, j)])).collect();
        rec.push(ds.a[i].to_string());
        rec.push(fmt17(ds.y[i]));
        if let Some(c) = &ds.oracle_cate {
            rec.push(fmt17(c[i]));
        }
        if let Some(p) = &ds.oracle_pi {
            rec.push(fmt17(p[i]));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Sidecar written next to a generated CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub generator: String,
    pub config: SyntheticConfig,
    pub n: usize,
    pub d: usize,
}

pub fn save_sidecar(cfg: &SyntheticConfig, path: &Path) -> Result<()> {
    let side = Sidecar {
        generator: "synthetic-low-overlap".into(),
        config: *cfg,
        n: cfg.n,
        d: 1,
    };
    fs::write(path, serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| OarError::Parse {
                row: 0,
                message: format!("missing column '{name}'"),
            })
    };
    let x_idx: Vec<usize> = schema.x.iter().map(|c| col(c)).collect::<Result<_>>()?;
    if x_idx.is_empty() {
        return Err(OarError::Config("schema lists no covariate columns".into()));
    }
    let a_idx = col(&schema.a)?;
    let y_idx = col(&schema.y)?;
    let cate_idx = schema.oracle_cate.as_deref().map(col).transpose()?;
    let pi_idx = schema.oracle_pi.as_deref().map(col).transpose()?;

    let mut xs = Vec::new();
    let mut a = Vec::new();
    let mut y = Vec::new();
    let mut cate = Vec::new();
    let mut pi = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |j: usize, name: &str| -> Result<f64> {
            let raw = rec.get(j).unwrap_or("").trim();
            let v: f64 = raw.parse().map_err(|_| OarError::Parse {
                row,
                message: format!("column '{name}': cannot parse '{raw}' as a number"),
            })?;
            if v.is_nan() {
                return Err(OarError::Parse {
                    row,
                    message: format!("column '{name}' is NaN"),
                });
            }
            Ok(v)
        };
        for (k, &j) in x_idx.iter().enumerate() {
            xs.push(num(j, &schema.x[k])?);
        }
        let raw_a = rec.get(a_idx).unwrap_or("").trim();
        a.push(match raw_a {
            "0" => 0u8,
            "1" => 1u8,
            other => {
                return Err(OarError::Parse {
                    row,
                    message: format!("treatment '{other}' is not 0 or 1"),
                })
            }
        });
        y.push(num(y_idx, &schema.y)?);
        if let Some(j) = cate_idx {
            cate.push(num(j, "oracle_cate")?);
        }
        if let Some(j) = pi_idx {
            let p = num(j, "oracle_pi")?;
            if !(p > 0.0 && p < 1.0) {
                return Err(OarError::Parse {
                    row,
                    message: format!("oracle propensity {p} outside (0, 1)"),
                });
            }
            pi.push(p);
        }
    }
    let n = a.len();
    let d = x_idx.len();
    let x = DMatrix::from_row_slice(n, d, &xs);
    let ds = Dataset {
        x,
        a,
        y,
        oracle_cate: cate_idx.map(|_| cate),
        oracle_pi: pi_idx.map(|_| pi),
        oracle_mu: None,
        seed: 0,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn cfg(n: usize, b: f64, seed: u64) -> SyntheticConfig {
        SyntheticConfig { n, b, seed }
    }

    #[test]
    fn b_zero_gives_balanced_propensity() {
        let ds = generate_synthetic(&cfg(200, 0.0, 3)).unwrap();
        assert!(ds.oracle_pi.as_ref().unwrap().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn cate_is_identically_zero() {
        let ds = generate_synthetic(&cfg(100, 2.0, 1)).unwrap();
        assert!(ds.oracle_cate.as_ref().unwrap().iter().all(|&c| c == 0.0));
        let (m0, m1) = ds.oracle_mu.as_ref().unwrap();
        assert_eq!(m0, m1);
    }

    #[test]
    fn generation_is_reproducible() {
        let a = generate_synthetic(&cfg(300, 2.0, 11)).unwrap();
        let b = generate_synthetic(&cfg(300, 2.0, 11)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&cfg(300, 2.0, 12)).unwrap();
        assert_ne!(a.y, c.y);
    }

    #[test]
    fn propensity_matches_density_ratio() {
        let npdf = |x: f64, m: f64| (-(x - m) * (x - m) / 2.0).exp();
        for x in [-2.0, -0.3, 0.0, 1.0, 1.7, 3.5] {
            let b = 2.0;
            let direct = npdf(x, 0.0) / (npdf(x, 0.0) + npdf(x, b));
            assert!((synthetic_propensity(x, b) - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn treated_share_is_half_by_symmetry() {
        let ds = generate_synthetic(&cfg(100_000, 2.0, 5)).unwrap();
        assert!((ds.treated_fraction() - 0.5).abs() < 0.01);
    }

    #[test]
    fn treatment_tracks_propensity_in_bins() {
        let ds = generate_synthetic(&cfg(100_000, 2.0, 9)).unwrap();
        let pi = ds.oracle_pi.as_ref().unwrap();
        let mut bins = vec![(0.0, 0.0, 0usize); 10];
        for i in 0..ds.n() {
            let k = ((pi[i] * 10.0) as usize).min(9);
            bins[k].0 += ds.a[i] as f64;
            bins[k].1 += pi[i];
            bins[k].2 += 1;
        }
        for (sa, sp, c) in bins {
            if c < 50 {
                continue;
            }
            let c = c as f64;
            let (rate, mean_pi) = (sa / c, sp / c);
            let se = (mean_pi * (1.0 - mean_pi) / c).sqrt().max(1e-9);
            assert!(
                (rate - mean_pi).abs() < 3.0 * se,
                "bin rate {rate} vs {mean_pi}"
            );
        }
    }

    #[test]
    fn csv_round_trip() {
        let ds = generate_synthetic(&cfg(50, 2.0, 4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        save_csv(&ds, &path).unwrap();
        let back = load_csv(&path, &CsvSchema::standard(1, true, true)).unwrap();
        assert_eq!(back.n(), 50);
        for i in 0..50 {
            assert!((back.x[(i, 0)] - ds.x[(i, 0)]).abs() <= 1e-12 * ds.x[(i, 0)].abs().max(1.0));
            assert!((back.y[i] - ds.y[i]).abs() <= 1e-12 * ds.y[i].abs().max(1.0));
            assert_eq!(back.a[i], ds.a[i]);
        }
    }

    fn write(dir: &Path, body: &str) -> std::path::PathBuf {
        let p = dir.join("in.csv");
        let mut f = fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn csv_small_file_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let schema = CsvSchema::standard(1, false, false);
        let p = write(dir.path(), "x0,a,y\n0.5,1,2.0\n-1,0,0.1\n3,1,4\n");
        assert_eq!(load_csv(&p, &schema).unwrap().n(), 3);

        let p = write(dir.path(), "x0,a,y\n0.5,1,2.0\n-1,2,0.1\n");
        match load_csv(&p, &schema) {
            Err(OarError::Parse { row, .. }) => assert_eq!(row, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
        let p = write(dir.path(), "x0,y\n0.5,2.0\n");
        assert!(matches!(load_csv(&p, &schema), Err(OarError::Parse { .. })));
        let p = write(dir.path(), "x0,a,y\n0.5,1,NaN\n");
        assert!(matches!(
            load_csv(&p, &schema),
            Err(OarError::Parse { row: 0, .. })
        ));
    }

    #[test]
    fn split_properties() {
        let ds = generate_synthetic(&cfg(10, 2.0, 2)).unwrap();
        let (tr, te) = split(&ds, 0.5, 7).unwrap();
        assert_eq!((tr.n(), te.n()), (5, 5));
        let (tr2, te2) = split(&ds, 0.5, 7).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(te, te2);
        let mut all: Vec<f64> = tr.y.iter().chain(te.y.iter()).copied().collect();
        let mut orig = ds.y.clone();
        all.sort_by(f64::total_cmp);
        orig.sort_by(f64::total_cmp);
        assert_eq!(all, orig);
        assert!(te.oracle_pi.is_some() && tr.oracle_cate.is_some());
        assert!(split(&ds, 0.01, 1).is_err());
        assert!(split(&ds, 1.0, 1).is_err());
    }
}
