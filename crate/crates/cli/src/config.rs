//! Flat key-value run configuration.
//!
//! A config file is a TOML table with the keys of [`RunConfig`]; unknown keys
//! are rejected. Command-line flags are applied on top of the file.

use std::path::{Path, PathBuf};

use dccal::optimizer::MultistartConfig;
use dccal::portopt::Objective;
use dccal::scoring::RiskLevel;
use dccal::simulate::{GarchSpec, Innovation, StudyCell, StudyDist};
use dccal::timeseries::{CsvSchema, PortfolioWeights, WindowSpec};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// A bad config file or flag value.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

/// Number or list of numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(f64),
    Many(Vec<f64>),
}

impl OneOrMany {
    fn expand(&self, n: usize, key: &str) -> Result<Vec<f64>> {
        match self {
            OneOrMany::One(v) => Ok(vec![*v; n]),
            OneOrMany::Many(v) if v.len() == n => Ok(v.clone()),
            OneOrMany::Many(v) => Err(bad(format!("{key} has {} entries, expected 1 or {n}", v.len()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // Data and common settings.
    pub data: Option<PathBuf>,
    /// `returns` or `prices`.
    pub schema: String,
    pub alpha: f64,
    /// Portfolio weights; equal weights when absent.
    pub weights: Option<Vec<f64>>,
    pub seed: u64,
    pub output_dir: PathBuf,

    // Estimation.
    pub n_starts: usize,
    pub max_iters: usize,
    pub tol_f: f64,
    pub tol_x: f64,
    /// Write in-sample VaR/ES paths next to the fit JSON.
    pub paths: bool,

    // Rolling windows (backtest and optimize).
    pub in_size: usize,
    pub out_size: usize,
    pub step: usize,
    /// Backtest models: `dcc-al`, `historical`.
    pub models: Vec<String>,

    // Simulation design (study and simulate).
    pub n: usize,
    pub t_len: usize,
    pub t_values: Vec<usize>,
    /// `normal`, `mvt` or `nst`.
    pub dist: String,
    pub dists: Vec<String>,
    pub nu: f64,
    /// Per-asset degrees of freedom for `nst`; drawn from U[5, 15] when absent.
    pub nst_nu: Option<Vec<f64>>,
    pub a: f64,
    pub b: f64,
    pub rho: f64,
    pub garch_omega: OneOrMany,
    pub garch_alpha: OneOrMany,
    pub garch_beta: OneOrMany,
    pub n_reps: usize,
    pub factor_sample: usize,

    // Portfolio optimisation.
    pub objectives: Vec<String>,
    pub n_sim: usize,
    pub mu_target: Option<f64>,
    pub allow_short: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let fit = MultistartConfig::default();
        RunConfig {
            data: None,
            schema: "returns".into(),
            alpha: 0.025,
            weights: None,
            seed: 0,
            output_dir: PathBuf::from("out"),
            n_starts: fit.n_starts,
            max_iters: fit.max_iters,
            tol_f: fit.tol_f,
            tol_x: fit.tol_x,
            paths: true,
            in_size: 1000,
            out_size: 250,
            step: 1,
            models: vec!["dcc-al".into(), "historical".into()],
            n: 5,
            t_len: 2000,
            t_values: vec![2000],
            dist: "normal".into(),
            dists: vec!["normal".into()],
            nu: 10.0,
            nst_nu: None,
            a: 0.12,
            b: 0.78,
            rho: 0.5,
            garch_omega: OneOrMany::One(0.1),
            garch_alpha: OneOrMany::One(0.1),
            garch_beta: OneOrMany::One(0.8),
            n_reps: 50,
            factor_sample: dccal::simulate::DEFAULT_FACTOR_SAMPLE,
            objectives: vec!["variance".into(), "var".into(), "es".into()],
            n_sim: dccal::portopt::DEFAULT_N_SIM,
            mu_target: None,
            allow_short: false,
        }
    }
}

/// Parse a flag value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

impl RunConfig {
    /// Read `path` (if any), apply `overrides` in order, and deserialise.
    pub fn load(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| bad(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<Table>()
                    .map_err(|e| bad(format!("config {}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for (k, v) in overrides {
            table.insert(k.clone(), v.clone());
        }
        Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| bad(format!("config: {}", e.message())))
    }

    /// Split `KEY=VALUE`.
    pub fn parse_override(s: &str) -> Result<(String, Value)> {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| bad(format!("override {s:?} is not KEY=VALUE")))?;
        Ok((k.trim().to_string(), parse_value(v.trim())))
    }

    pub fn alpha(&self) -> Result<RiskLevel> {
        RiskLevel::new(self.alpha).map_err(|e| bad(e.to_string()))
    }

    pub fn schema(&self) -> Result<CsvSchema> {
        match self.schema.as_str() {
            "returns" => Ok(CsvSchema::Returns),
            "prices" => Ok(CsvSchema::Prices),
            s => Err(bad(format!("schema must be `returns` or `prices`, got {s:?}"))),
        }
    }

    pub fn data(&self) -> Result<&Path> {
        self.data.as_deref().ok_or_else(|| bad("`data` is required"))
    }

    pub fn fit(&self) -> Result<MultistartConfig> {
        let cfg = MultistartConfig {
            n_starts: self.n_starts,
            max_iters: self.max_iters,
            tol_f: self.tol_f,
            tol_x: self.tol_x,
            seed: self.seed,
        };
        cfg.validate().map_err(|e| bad(e.to_string()))?;
        Ok(cfg)
    }

    pub fn weights(&self, n: usize) -> Result<PortfolioWeights> {
        match &self.weights {
            None => Ok(PortfolioWeights::equal(n)),
            Some(w) if w.len() != n => Err(bad(format!("{} weights for {n} assets", w.len()))),
            Some(w) if self.allow_short => PortfolioWeights::new_allow_short(w.clone()).map_err(|e| bad(e.to_string())),
            Some(w) => PortfolioWeights::new(w.clone()).map_err(|e| bad(e.to_string())),
        }
    }

    pub fn window(&self) -> Result<WindowSpec> {
        WindowSpec::new(self.in_size, self.out_size, self.step).map_err(|e| bad(e.to_string()))
    }

    pub fn garch(&self) -> Result<Vec<GarchSpec>> {
        let o = self.garch_omega.expand(self.n, "garch_omega")?;
        let a = self.garch_alpha.expand(self.n, "garch_alpha")?;
        let b = self.garch_beta.expand(self.n, "garch_beta")?;
        (0..self.n)
            .map(|i| GarchSpec::new(o[i], a[i], b[i]).map_err(|e| bad(e.to_string())))
            .collect()
    }

    pub fn innovation(&self) -> Result<Innovation> {
        match self.dist.as_str() {
            "normal" => Ok(Innovation::Normal),
            "mvt" => Ok(Innovation::Mvt { nu: self.nu }),
            "nst" => Ok(Innovation::Nst {
                nu: match &self.nst_nu {
                    Some(v) => v.clone(),
                    None => dccal::simulate::draw_nst_dofs(self.n, self.seed),
                },
            }),
            d => Err(bad(format!("dist must be normal, mvt or nst, got {d:?}"))),
        }
    }

    pub fn study_cells(&self) -> Result<Vec<StudyCell>> {
        if self.dists.is_empty() || self.t_values.is_empty() {
            return Err(bad("`dists` and `t_values` must be non-empty"));
        }
        let mut cells = Vec::new();
        for d in &self.dists {
            let dist = match d.as_str() {
                "normal" => StudyDist::Normal,
                "mvt" => StudyDist::Mvt { nu: self.nu },
                "nst" => StudyDist::Nst,
                d => return Err(bad(format!("unknown study distribution {d:?}"))),
            };
            for &t_len in &self.t_values {
                cells.push(StudyCell { dist, t_len });
            }
        }
        Ok(cells)
    }

    pub fn objectives(&self) -> Result<Vec<Objective>> {
        if self.objectives.is_empty() {
            return Err(bad("`objectives` must be non-empty"));
        }
        self.objectives
            .iter()
            .map(|o| o.parse().map_err(|e: dccal::Error| bad(e.to_string())))
            .collect()
    }

    pub fn models(&self) -> Result<Vec<String>> {
        if self.models.is_empty() {
            return Err(bad("`models` must be non-empty"));
        }
        for m in &self.models {
            if m != "dcc-al" && m != "historical" {
                return Err(bad(format!("unknown model {m:?}")));
            }
        }
        Ok(self.models.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "alpha = 0.01\nseed = 4\ndists = [\"normal\", \"mvt\"]\n").unwrap();
        let o = [RunConfig::parse_override("seed=9").unwrap()];
        let c = RunConfig::load(Some(&p), &o).unwrap();
        assert_eq!(c.alpha, 0.01);
        assert_eq!(c.seed, 9);
        assert_eq!(c.study_cells().unwrap().len(), 2);
    }

    #[test]
    fn unknown_keys_rejected() {
        let o = [RunConfig::parse_override("alhpa=0.1").unwrap()];
        assert!(RunConfig::load(None, &o).is_err());
    }

    #[test]
    fn values_parse_as_toml_or_string() {
        assert_eq!(parse_value("3"), Value::Integer(3));
        assert_eq!(parse_value("[1.0, 2.0]").as_array().unwrap().len(), 2);
        assert_eq!(parse_value("data/x.csv"), Value::String("data/x.csv".into()));
        let o = [RunConfig::parse_override("garch_omega=[0.1, 0.2]").unwrap()];
        let mut c = RunConfig::load(None, &o).unwrap();
        c.n = 2;
        assert_eq!(c.garch().unwrap()[1].omega, 0.2);
        c.n = 3;
        assert!(c.garch().is_err());
    }
}
