//! Experiment configuration: TOML file, dotted overrides, resolved snapshot.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{OarError, Result};
use crate::learners::LearnerKind;
use crate::nuisance::StageOneConfig;
use crate::regfun::{RegKind, RegMode};
use crate::second_stage::{Injector, SecondStageConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_train: usize,
    /// Size of the held-out sample drawn from the same law.
    pub n_test: usize,
    pub b: f64,
    /// Standardize covariates with training mean and sd before stage 1.
    pub standardize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 250,
            n_test: 1000,
            b: 2.0,
            standardize: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KrrSection {
    pub bandwidth: f64,
    pub gamma: f64,
}

impl Default for KrrSection {
    fn default() -> Self {
        KrrSection {
            bandwidth: 0.1,
            gamma: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seeds: usize,
    /// First seed; run `i` uses `seed + i`.
    pub seed: u64,
    pub trim_lo: f64,
    /// Cell name used as the reference for Δ in summaries.
    pub baseline: Option<String>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seeds: 40,
            seed: 0,
            trim_lo: 0.05,
            baseline: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Mlp,
    Krr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NuisanceSource {
    #[default]
    Estimated,
    Oracle,
}

/// One second-stage configuration of the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub model: ModelKind,
    #[serde(default)]
    pub nuisance: NuisanceSource,
    #[serde(default = "default_learner")]
    pub learner: LearnerKind,
    #[serde(default = "default_injector")]
    pub injector: Injector,
    pub mode: RegMode,
    #[serde(default = "default_kind")]
    pub kind: RegKind,
    pub base: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

fn default_learner() -> LearnerKind {
    LearnerKind::DR
}
fn default_injector() -> Injector {
    Injector::Dropout
}
fn default_kind() -> RegKind {
    RegKind::Multiplicative
}

impl CellSpec {
    pub fn label(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        let reg = match self.model {
            ModelKind::Mlp => self.injector.short_name(),
            ModelKind::Krr => "krr",
        };
        let mut s = format!(
            "{} {} {} {}={} {}",
            self.learner.short_name(),
            self.mode.short_name(),
            reg,
            self.kind.short_name(),
            self.base,
            match self.gamma {
                Some(g) => format!("g={g}"),
                None => String::new(),
            }
        )
        .trim_end()
        .to_string();
        if self.nuisance == NuisanceSource::Oracle {
            s.push_str(" oracle");
        }
        s
    }
}

/// Cartesian product expanded into cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub model: ModelKind,
    pub learners: Vec<LearnerKind>,
    pub injectors: Vec<Injector>,
    pub modes: Vec<RegMode>,
    pub kinds: Vec<RegKind>,
    pub bases: Vec<f64>,
    pub nuisance: NuisanceSource,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            model: ModelKind::Mlp,
            learners: vec![LearnerKind::DR],
            injectors: vec![Injector::Dropout],
            modes: vec![RegMode::Constant, RegMode::Adaptive],
            kinds: vec![RegKind::Multiplicative],
            bases: vec![0.5],
            nuisance: NuisanceSource::Estimated,
        }
    }
}

impl GridSection {
    pub fn expand(&self) -> Vec<CellSpec> {
        let mut out = Vec::new();
        let injectors: Vec<Injector> = match self.model {
            ModelKind::Mlp => self.injectors.clone(),
            ModelKind::Krr => vec![Injector::Noise],
        };
        for &learner in &self.learners {
            for &injector in &injectors {
                for &kind in &self.kinds {
                    for &base in &self.bases {
                        for &mode in &self.modes {
                            out.push(CellSpec {
                                name: None,
                                model: self.model,
                                nuisance: self.nuisance,
                                learner,
                                injector,
                                mode,
                                kind,
                                base,
                                gamma: None,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub data: DataConfig,
    pub stage1: StageOneConfig,
    /// Second-stage defaults; cells override learner, injector, mode, kind, base, gamma.
    pub stage2: SecondStageConfig,
    pub krr: KrrSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSection>,
    #[serde(rename = "cell", skip_serializing_if = "Vec::is_empty")]
    pub cells: Vec<CellSpec>,
}

impl ExperimentConfig {
    /// Explicit cells followed by the expanded grid.
    pub fn all_cells(&self) -> Vec<CellSpec> {
        let mut cells = self.cells.clone();
        if let Some(g) = &self.grid {
            cells.extend(g.expand());
        }
        cells
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.n_train < 2 || self.data.n_test < 1 {
            return Err(OarError::Config("need n_train >= 2 and n_test >= 1".into()));
        }
        if self.run.seeds == 0 {
            return Err(OarError::Config("seeds must be positive".into()));
        }
        self.stage1.validate()?;
        let cells = self.all_cells();
        let mut labels: Vec<String> = cells.iter().map(|c| c.label()).collect();
        labels.sort();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return Err(OarError::Config(format!("duplicate cell '{}'", w[0])));
        }
        if let Some(b) = &self.run.baseline {
            if !labels.contains(b) {
                return Err(OarError::Config(format!("baseline '{b}' is not a cell")));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value =
            toml::from_str(text).map_err(|e| OarError::Config(format!("config parse: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: ExperimentConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| OarError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| OarError::Config(format!("config serialize: {e}")))
    }
}

/// Apply `a.b.c=value`; the value is parsed as a TOML literal, else taken as a string.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| OarError::Config(format!("override '{spec}' is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(OarError::Config(format!("bad override key '{path}'")));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut cur = root;
    for k in &keys[..keys.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| OarError::Config(format!("override '{path}': '{k}' is not a table")))?;
        cur = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| OarError::Config(format!("override '{path}' does not address a table")))?;
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
[run]
seeds = 3

[data]
n_train = 100

[[cell]]
mode = "CR"
base = 0.5

[[cell]]
mode = "OAR"
base = 0.5
"#;

    #[test]
    fn parses_and_applies_overrides() {
        let cfg = ExperimentConfig::from_toml_str(
            SAMPLE,
            &[
                "data.b=3.5".into(),
                "stage2.epochs=7".into(),
                "run.baseline=DR CR dropout m=0.5".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.run.seeds, 3);
        assert_eq!(cfg.data.b, 3.5);
        assert_eq!(cfg.stage2.epochs, 7);
        assert_eq!(cfg.cells.len(), 2);
        assert_eq!(cfg.run.baseline.as_deref(), Some("DR CR dropout m=0.5"));
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(ExperimentConfig::from_toml_str(SAMPLE, &["data.nope=1".into()]).is_err());
        let bad = format!("{SAMPLE}\n[stage1]\nwidht = 3\n");
        assert!(ExperimentConfig::from_toml_str(&bad, &[]).is_err());
        assert!(ExperimentConfig::from_toml_str(SAMPLE, &["oops".into()]).is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = ExperimentConfig::from_toml_str(SAMPLE, &[]).unwrap();
        cfg.grid = Some(GridSection::default());
        cfg.cells.clear();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text, &[]).unwrap(), cfg);
    }

    #[test]
    fn grid_expansion_and_duplicates() {
        let g = GridSection {
            modes: vec![RegMode::Constant, RegMode::Adaptive, RegMode::Debiased],
            bases: vec![0.3, 0.5],
            ..Default::default()
        };
        assert_eq!(g.expand().len(), 6);
        let dup = format!("{SAMPLE}\n[[cell]]\nmode = \"CR\"\nbase = 0.5\n");
        assert!(ExperimentConfig::from_toml_str(&dup, &[]).is_err());
    }
}
