//! Return panels, portfolio weights and rolling windows.
//!
//! Returns are log-returns in percent. Panels are validated on construction
//! and immutable afterwards.

use std::collections::HashSet;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// `T x n` matrix of asset returns with a strictly increasing date index.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnPanel {
    dates: Vec<NaiveDate>,
    assets: Vec<String>,
    values: Matrix,
}

/// How to interpret the numeric columns of an input CSV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CsvSchema {
    /// Cells are returns in percent.
    #[default]
    Returns,
    /// Cells are prices; converted to `100 * diff(log(price))`, dropping the
    /// first date.
    Prices,
}

impl ReturnPanel {
    pub fn new(dates: Vec<NaiveDate>, assets: Vec<String>, values: Matrix) -> Result<Self> {
        let t = dates.len();
        let n = assets.len();
        if values.rows() != t {
            return Err(Error::dim(t, values.rows()));
        }
        if values.cols() != n {
            return Err(Error::dim(n, values.cols()));
        }
        if t < 2 {
            return Err(Error::InvalidInput(format!(
                "panel needs at least 2 dates, got {t}"
            )));
        }
        if n == 0 {
            return Err(Error::InvalidInput("panel has no assets".into()));
        }
        if let Some(i) = dates.windows(2).position(|d| d[1] <= d[0]) {
            return Err(Error::InvalidInput(format!(
                "dates not strictly increasing at row {}",
                i + 1
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = assets.iter().find(|a| !seen.insert(a.as_str())) {
            return Err(Error::InvalidInput(format!("duplicate asset id {dup}")));
        }
        if let Some(pos) = values.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite value at row {}, column {}",
                pos / n,
                pos % n
            )));
        }
        Ok(ReturnPanel {
            dates,
            assets,
            values,
        })
    }

    /// Panel with consecutive calendar dates starting 2000-01-03 and
    /// assets named `A1..An`; used for simulated data.
    pub fn with_synthetic_index(values: Matrix) -> Result<Self> {
        let start = NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date");
        let dates = start.iter_days().take(values.rows()).collect();
        let assets = (1..=values.cols()).map(|i| format!("A{i}")).collect();
        Self::new(dates, assets, values)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    #[inline]
    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn assets(&self) -> &[String] {
        &self.assets
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    #[inline]
    pub fn row(&self, t: usize) -> &[f64] {
        self.values.row(t)
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.values.column(i)
    }

    /// Sub-panel of rows `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Result<ReturnPanel> {
        if start >= end || end > self.len() {
            return Err(Error::InvalidInput(format!(
                "invalid slice {start}..{end} of panel with {} rows",
                self.len()
            )));
        }
        ReturnPanel::new(
            self.dates[start..end].to_vec(),
            self.assets.clone(),
            self.values.row_range(start, end),
        )
    }

    /// Column sample means.
    pub fn means(&self) -> Vec<f64> {
        let t = self.len() as f64;
        let mut m = vec![0.0; self.n_assets()];
        for r in 0..self.len() {
            for (acc, v) in m.iter_mut().zip(self.row(r)) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= t);
        m
    }
}

/// Read a panel from CSV with header `date,ASSET1,...,ASSETn`.
pub fn load_panel(path: impl AsRef<Path>, schema: CsvSchema) -> Result<ReturnPanel> {
    let path = path.as_ref();
    let ingest = |message: String| Error::Ingest {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| ingest(e.to_string()))?;
    let header = reader.headers().map_err(|e| ingest(e.to_string()))?.clone();
    if header.len() < 2 {
        return Err(ingest("header must be `date` followed by asset ids".into()));
    }
    let assets: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    let n = assets.len();

    let mut dates = Vec::new();
    let mut data = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let line = r + 2;
        let record = record.map_err(|e| ingest(e.to_string()))?;
        if record.len() != n + 1 {
            return Err(ingest(format!(
                "line {line}: expected {} cells, found {}",
                n + 1,
                record.len()
            )));
        }
        let date = NaiveDate::parse_from_str(&record[0], "%Y-%m-%d")
            .map_err(|e| ingest(format!("line {line}, column date: {e}")))?;
        if let Some(prev) = dates.last() {
            if date <= *prev {
                return Err(ingest(format!(
                    "line {line}: date {date} does not follow {prev}"
                )));
            }
        }
        dates.push(date);
        for (c, cell) in record.iter().skip(1).enumerate() {
            let col = &assets[c];
            if cell.is_empty() {
                return Err(ingest(format!("line {line}, column {col}: missing value")));
            }
            let v: f64 = cell.parse().map_err(|_| {
                ingest(format!("line {line}, column {col}: non-numeric value {cell:?}"))
            })?;
            if !v.is_finite() {
                return Err(ingest(format!("line {line}, column {col}: non-finite value")));
            }
            data.push(v);
        }
    }

    let (dates, data) = match schema {
        CsvSchema::Returns => (dates, data),
        CsvSchema::Prices => {
            if data.iter().any(|&p| p <= 0.0) {
                return Err(ingest("prices must be strictly positive".into()));
            }
            let mut rets = Vec::with_capacity(data.len().saturating_sub(n));
            for t in 1..dates.len() {
                for i in 0..n {
                    rets.push(100.0 * (data[t * n + i].ln() - data[(t - 1) * n + i].ln()));
                }
            }
            (dates[1..].to_vec(), rets)
        }
    };
    let t = dates.len();
    let values = Matrix::from_vec(t, n, data)?;
    ReturnPanel::new(dates, assets, values).map_err(|e| ingest(e.to_string()))
}

/// Write a panel in the same CSV layout [`load_panel`] reads.
pub fn write_panel(panel: &ReturnPanel, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["date".to_string()];
    header.extend(panel.assets().iter().cloned());
    w.write_record(&header)?;
    for t in 0..panel.len() {
        let mut rec = vec![panel.dates()[t].format("%Y-%m-%d").to_string()];
        rec.extend(panel.row(t).iter().map(|v| format!("{v:.16e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Subtract column means. Returns the demeaned panel and the means.
pub fn demean(panel: &ReturnPanel) -> (ReturnPanel, Vec<f64>) {
    let mu = panel.means();
    let n = panel.n_assets();
    let mut values = panel.values().clone();
    for t in 0..panel.len() {
        for (v, m) in values.row_mut(t).iter_mut().zip(&mu) {
            *v -= m;
        }
    }
    // Second pass removes the rounding residue of the first subtraction.
    let residue: Vec<f64> = (0..n)
        .map(|i| (0..panel.len()).map(|t| values.get(t, i)).sum::<f64>() / panel.len() as f64)
        .collect();
    for t in 0..panel.len() {
        for (v, m) in values.row_mut(t).iter_mut().zip(&residue) {
            *v -= m;
        }
    }
    let out = ReturnPanel {
        dates: panel.dates.clone(),
        assets: panel.assets.clone(),
        values,
    };
    (out, mu)
}

/// Fully-invested long-only weights: every entry in `[0, 1]`, summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PortfolioWeights(Vec<f64>);

impl PortfolioWeights {
    pub const SUM_TOL: f64 = 1e-10;

    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::InvalidInput("empty weight vector".into()));
        }
        if let Some(i) = w.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput(format!(
                "weight {i} = {} outside [0, 1]",
                w[i]
            )));
        }
        let s: f64 = w.iter().sum();
        if (s - 1.0).abs() > Self::SUM_TOL {
            return Err(Error::InvalidInput(format!("weights sum to {s}, not 1")));
        }
        Ok(PortfolioWeights(w))
    }

    /// Weights on the simplex that may be negative (short positions),
    /// bounded by `[-1, 1]` per coordinate.
    pub fn new_allow_short(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::InvalidInput("empty weight vector".into()));
        }
        if w.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("weights outside [-1, 1]".into()));
        }
        let s: f64 = w.iter().sum();
        if (s - 1.0).abs() > Self::SUM_TOL {
            return Err(Error::InvalidInput(format!("weights sum to {s}, not 1")));
        }
        Ok(PortfolioWeights(w))
    }

    pub fn equal(n: usize) -> Self {
        PortfolioWeights(vec![1.0 / n as f64; n])
    }

    /// All weight on asset `i`.
    pub fn unit(n: usize, i: usize) -> Self {
        let mut w = vec![0.0; n];
        w[i] = 1.0;
        PortfolioWeights(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dot(&self, x: &[f64]) -> f64 {
        self.0.iter().zip(x).map(|(a, b)| a * b).sum()
    }
}

impl TryFrom<Vec<f64>> for PortfolioWeights {
    type Error = Error;

    fn try_from(w: Vec<f64>) -> Result<Self> {
        PortfolioWeights::new_allow_short(w)
    }
}

impl From<PortfolioWeights> for Vec<f64> {
    fn from(w: PortfolioWeights) -> Self {
        w.0
    }
}

/// `r_t(w) = w' r_t` for every row of the panel.
pub fn portfolio_returns(panel: &ReturnPanel, w: &PortfolioWeights) -> Result<Vec<f64>> {
    if w.len() != panel.n_assets() {
        return Err(Error::dim(panel.n_assets(), w.len()));
    }
    Ok((0..panel.len()).map(|t| w.dot(panel.row(t))).collect())
}

/// Rolling window layout: `in_size` estimation rows followed by `out_size`
/// one-step forecasts, re-estimating every `step` forecasts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub in_size: usize,
    pub out_size: usize,
    pub step: usize,
}

impl WindowSpec {
    pub fn new(in_size: usize, out_size: usize, step: usize) -> Result<Self> {
        if in_size == 0 || out_size == 0 || step == 0 {
            return Err(Error::InvalidInput(
                "window sizes and step must be positive".into(),
            ));
        }
        Ok(WindowSpec {
            in_size,
            out_size,
            step,
        })
    }

    pub fn validate_for(&self, t: usize) -> Result<()> {
        if self.in_size + self.out_size > t {
            return Err(Error::InvalidInput(format!(
                "window {}+{} exceeds panel length {t}",
                self.in_size, self.out_size
            )));
        }
        Ok(())
    }

    /// Rows `(start, end)` of the estimation window feeding out-of-sample
    /// step `k`; the forecast target is row `end`.
    pub fn window(&self, k: usize) -> (usize, usize) {
        (k, k + self.in_size)
    }

    /// Whether step `k` re-estimates parameters.
    pub fn reestimates(&self, k: usize) -> bool {
        k.is_multiple_of(self.step)
    }
}
