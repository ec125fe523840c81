//! Minimum-variance and minimum-VaR/ES portfolios.
//!
//! Risk factors for arbitrary weights come from an OLS regression of
//! simulated empirical factors on random simplex weights:
//!
//! ```text
//! z_t(w)  = w'(r_t - mu) / sqrt(w' H_t w)
//! q(w), c(w): empirical alpha-quantile and tail mean of z_t(w)
//! Q(w)  = w'mu + (w' beta_q) sqrt(w' H w)
//! ES(w) = w'mu + (w' beta_c) sqrt(w' H w)
//! ```

use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dcc::{self, DccFit};
use crate::error::{Error, Result};
use crate::linalg::{ols_solve, packed_quad_form, quad_form, Matrix, SymMatrix};
use crate::optimizer::{minimize, BoundedProblem, MultistartConfig};
use crate::par;
use crate::scoring::{JointForecast, RiskLevel};
use crate::stats;
use crate::timeseries::{PortfolioWeights, ReturnPanel, WindowSpec};

/// Default number of simulated weight vectors.
pub const DEFAULT_N_SIM: usize = 1000;
/// Box for the softmax coordinates.
const SOFTMAX_BOUND: f64 = 15.0;

/// Empirical factors for random simplex weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSample {
    /// `N_sim x n`, rows on the unit simplex.
    pub w_sim: Matrix,
    pub q_sim: Vec<f64>,
    pub c_sim: Vec<f64>,
}

/// Draw `n_sim` weight vectors `u / sum(u)` with `u ~ U(0, 1)` and compute
/// the empirical factors of the standardised portfolio returns over the
/// fitted sample. `panel` is the raw (not demeaned) data `fit` was
/// estimated on.
pub fn simulate_factors(
    panel: &ReturnPanel,
    fit: &DccFit,
    n_sim: usize,
    alpha: RiskLevel,
    seed: u64,
) -> Result<FactorSample> {
    let n = panel.n_assets();
    if fit.n_assets() != n {
        return Err(Error::dim(n, fit.n_assets()));
    }
    if fit.corr.p_path.len() != panel.len() {
        return Err(Error::dim(panel.len(), fit.corr.p_path.len()));
    }
    if n_sim == 0 {
        return Err(Error::InvalidInput("n_sim must be positive".into()));
    }
    let t_len = panel.len();
    let mut centred = Matrix::zeros(t_len, n);
    for t in 0..t_len {
        for (j, (r, m)) in panel.row(t).iter().zip(&fit.mu).enumerate() {
            centred.set(t, j, r - m);
        }
    }
    let covs: Vec<SymMatrix> = (0..t_len).map(|t| fit.covariance_at(t)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w_sim = Matrix::zeros(n_sim, n);
    for k in 0..n_sim {
        let row = w_sim.row_mut(k);
        for v in row.iter_mut() {
            // Open interval keeps every weight strictly positive.
            *v = loop {
                let u: f64 = rng.random();
                if u > 0.0 {
                    break u;
                }
            };
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }

    let factors = par::map_indexed(n_sim, |k| {
        let w = w_sim.row(k);
        let z: Vec<f64> = (0..t_len)
            .map(|t| {
                let r: f64 = w.iter().zip(centred.row(t)).map(|(a, b)| a * b).sum();
                r / packed_quad_form(covs[t].packed(), w).sqrt()
            })
            .collect();
        stats::quantile_and_tail_mean(&z, alpha.value())
    });
    let (q_sim, c_sim) = factors.into_iter().unzip();
    Ok(FactorSample { w_sim, q_sim, c_sim })
}

/// OLS fit of the factors on the weights, without intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorRegression {
    pub beta_q: Vec<f64>,
    pub beta_c: Vec<f64>,
    /// Uncentred `R^2`, `1 - SSR / sum(y^2)`.
    pub r2_q: f64,
    pub r2_c: f64,
}

impl FactorRegression {
    pub fn q_factor(&self, w: &[f64]) -> f64 {
        w.iter().zip(&self.beta_q).map(|(a, b)| a * b).sum()
    }

    pub fn c_factor(&self, w: &[f64]) -> f64 {
        w.iter().zip(&self.beta_c).map(|(a, b)| a * b).sum()
    }

    /// Regression with identical coefficients `k` for every asset: the
    /// prediction is `k` on the simplex.
    pub fn constant(n: usize, q: f64, c: f64) -> Self {
        FactorRegression {
            beta_q: vec![q; n],
            beta_c: vec![c; n],
            r2_q: 1.0,
            r2_c: 1.0,
        }
    }
}

fn uncentred_r2(x: &Matrix, y: &[f64], beta: &[f64]) -> f64 {
    let fitted = x.mul_vec(beta);
    let ssr: f64 = fitted.iter().zip(y).map(|(f, v)| (v - f) * (v - f)).sum();
    let sst: f64 = y.iter().map(|v| v * v).sum();
    1.0 - ssr / sst
}

pub fn fit_factor_regression(sample: &FactorSample) -> Result<FactorRegression> {
    let x = &sample.w_sim;
    if x.rows() <= x.cols() {
        return Err(Error::Rank(format!(
            "{} simulated weights for {} assets",
            x.rows(),
            x.cols()
        )));
    }
    let beta_q = ols_solve(x, &sample.q_sim)?;
    let beta_c = ols_solve(x, &sample.c_sim)?;
    Ok(FactorRegression {
        r2_q: uncentred_r2(x, &sample.q_sim, &beta_q),
        r2_c: uncentred_r2(x, &sample.c_sim, &beta_c),
        beta_q,
        beta_c,
    })
}

/// Predicted `(Q(w), ES(w))` under covariance `h` and means `mu`.
pub fn predict_risk(w: &[f64], h: &SymMatrix, reg: &FactorRegression, mu: &[f64]) -> Result<JointForecast> {
    let sd = quad_form(h, w)?.sqrt();
    if mu.len() != w.len() {
        return Err(Error::dim(w.len(), mu.len()));
    }
    let m: f64 = w.iter().zip(mu).map(|(a, b)| a * b).sum();
    Ok(JointForecast::new(m + reg.q_factor(w) * sd, m + reg.c_factor(w) * sd))
}

/// Quantity minimised by [`optimize_portfolio`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Variance,
    Var,
    Es,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Variance => "variance",
            Objective::Var => "var",
            Objective::Es => "es",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "variance" => Ok(Objective::Variance),
            "var" => Ok(Objective::Var),
            "es" => Ok(Objective::Es),
            _ => Err(Error::InvalidInput(format!("unknown objective {s:?}"))),
        }
    }
}

/// Constraints and search settings for [`optimize_portfolio`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OptimizeConfig {
    /// Lower bound on `w'mu`.
    pub mu_target: Option<f64>,
    /// Allow weights in `[-1, 1]` instead of `[0, 1]`.
    pub allow_short: bool,
    pub search: MultistartConfig,
}

/// An optimised portfolio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioSolution {
    pub weights: PortfolioWeights,
    pub objective: Objective,
    /// `w'beta_q` (variance and VaR) or `w'beta_c` (ES) at the optimum.
    pub predicted_factor: f64,
    pub objective_value: f64,
    pub mu_target: Option<f64>,
}

fn softmax_weights(y: &[f64]) -> Vec<f64> {
    let m = y.iter().copied().fold(0.0f64, f64::max);
    let mut w: Vec<f64> = y.iter().map(|v| (v - m).exp()).collect();
    w.push((-m).exp());
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

fn short_weights(x: &[f64]) -> Vec<f64> {
    let mut w = x.to_vec();
    w.push(1.0 - x.iter().sum::<f64>());
    w
}

fn objective_value(obj: Objective, w: &[f64], h: &SymMatrix, reg: &FactorRegression, mu: &[f64]) -> f64 {
    let var = packed_quad_form(h.packed(), w);
    if !(var > 0.0) {
        return f64::INFINITY;
    }
    let m: f64 = w.iter().zip(mu).map(|(a, b)| a * b).sum();
    match obj {
        Objective::Variance => var,
        Objective::Var => (m + reg.q_factor(w) * var.sqrt()).abs(),
        Objective::Es => (m + reg.c_factor(w) * var.sqrt()).abs(),
    }
}

/// Minimise `obj` over the simplex (optionally allowing shorts) subject to
/// `w'mu >= mu_target`. Long-only weights are the softmax of `n - 1` free
/// coordinates with the last pinned at zero; the equal-weight portfolio is
/// always among the starts when feasible.
pub fn optimize_portfolio(
    h: &SymMatrix,
    mu: &[f64],
    reg: &FactorRegression,
    obj: Objective,
    cfg: &OptimizeConfig,
) -> Result<PortfolioSolution> {
    let n = h.dim();
    if mu.len() != n {
        return Err(Error::dim(n, mu.len()));
    }
    if reg.beta_q.len() != n || reg.beta_c.len() != n {
        return Err(Error::dim(n, reg.beta_q.len()));
    }
    let mu_max = mu.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let i_max = mu.iter().position(|&m| m == mu_max).unwrap_or(0);
    if let Some(m0) = cfg.mu_target {
        // With shorts allowed, infeasibility shows up as no finite start.
        if !cfg.allow_short && m0 > mu_max {
            return Err(Error::Infeasible(format!(
                "target return {m0} exceeds the largest asset mean {mu_max}"
            )));
        }
    }
    let to_weights = |y: &[f64]| {
        if cfg.allow_short {
            short_weights(y)
        } else {
            softmax_weights(y)
        }
    };
    let finish = |w: Vec<f64>| -> Result<PortfolioSolution> {
        let weights = if cfg.allow_short {
            PortfolioWeights::new_allow_short(w)?
        } else {
            PortfolioWeights::new(w)?
        };
        let ws = weights.as_slice();
        Ok(PortfolioSolution {
            predicted_factor: match obj {
                Objective::Es => reg.c_factor(ws),
                _ => reg.q_factor(ws),
            },
            objective_value: objective_value(obj, ws, h, reg, mu),
            objective: obj,
            mu_target: cfg.mu_target,
            weights,
        })
    };
    if n == 1 {
        return finish(vec![1.0]);
    }

    let (lo, hi) = if cfg.allow_short { (-1.0, 1.0) } else { (-SOFTMAX_BOUND, SOFTMAX_BOUND) };
    let mu_target = cfg.mu_target;
    let allow_short = cfg.allow_short;
    let problem = BoundedProblem::new(
        |y: &[f64]| {
            let w = to_weights(y);
            if allow_short && !(-1.0..=1.0).contains(&w[n - 1]) {
                return f64::INFINITY;
            }
            if let Some(m0) = mu_target {
                let m: f64 = w.iter().zip(mu).map(|(a, b)| a * b).sum();
                if m < m0 {
                    return f64::INFINITY;
                }
            }
            objective_value(obj, &w, h, reg, mu)
        },
        vec![lo; n - 1],
        vec![hi; n - 1],
    )?;
    let equal = if cfg.allow_short { vec![1.0 / n as f64; n - 1] } else { vec![0.0; n - 1] };
    let mut starts = vec![equal];
    if cfg.mu_target.is_some() {
        let mut s = vec![if cfg.allow_short { 0.0 } else { -SOFTMAX_BOUND * 0.9 }; n - 1];
        if i_max < n - 1 {
            s[i_max] = if cfg.allow_short { 1.0 } else { SOFTMAX_BOUND * 0.9 };
        }
        starts.push(s);
    }
    let best = minimize(&problem, &cfg.search, &starts)?;
    finish(to_weights(&best.x))
}

/// Refit the model on the optimised portfolio and return its `(q, c)`.
pub fn reestimate_at_optimum(
    panel: &ReturnPanel,
    w_opt: &PortfolioWeights,
    alpha: RiskLevel,
    cfg: &MultistartConfig,
) -> Result<(f64, f64)> {
    let fit = dcc::fit_dcc(panel, w_opt, alpha, cfg)?;
    Ok((fit.params.q, fit.params.c()))
}

/// Settings of the rolling portfolio procedure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioStudyConfig {
    pub window: WindowSpec,
    pub alpha: RiskLevel,
    pub objectives: Vec<Objective>,
    pub n_sim: usize,
    pub optimize: OptimizeConfig,
    /// Model estimation settings; the model is fitted to the equal-weight
    /// portfolio.
    pub fit: MultistartConfig,
    pub seed: u64,
}

/// Optimised weights and realised returns at one out-of-sample date.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioStep {
    pub date: NaiveDate,
    pub solutions: Vec<PortfolioSolution>,
    /// Realised return per solution, in the order of `solutions`.
    pub realized: Vec<f64>,
    pub realized_ew: f64,
}

/// Out-of-sample statistics of one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub n_obs: usize,
    pub mean: f64,
    pub variance: f64,
    pub std_dev: f64,
    /// Interpolated empirical quantile.
    pub var: f64,
    pub es: f64,
}

impl StrategySummary {
    pub fn from_returns(strategy: &str, r: &[f64], alpha: RiskLevel) -> Self {
        StrategySummary {
            strategy: strategy.to_string(),
            n_obs: r.len(),
            mean: stats::mean(r),
            variance: stats::variance(r),
            std_dev: stats::std_dev(r),
            var: stats::interpolated_quantile(r, alpha.value()),
            es: stats::interpolated_tail_mean(r, alpha.value()),
        }
    }
}

/// Hedging summary with the equal-weight benchmark first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HedgingSummary {
    pub alpha: RiskLevel,
    pub strategies: Vec<StrategySummary>,
}

impl HedgingSummary {
    pub fn from_steps(steps: &[PortfolioStep], objectives: &[Objective], alpha: RiskLevel) -> Self {
        let mut strategies = Vec::with_capacity(objectives.len() + 1);
        let ew: Vec<f64> = steps.iter().map(|s| s.realized_ew).collect();
        strategies.push(StrategySummary::from_returns("ew", &ew, alpha));
        for (j, obj) in objectives.iter().enumerate() {
            let r: Vec<f64> = steps.iter().map(|s| s.realized[j]).collect();
            strategies.push(StrategySummary::from_returns(&format!("min-{}", obj.as_str()), &r, alpha));
        }
        HedgingSummary { alpha, strategies }
    }

    pub fn strategy(&self, name: &str) -> Option<&StrategySummary> {
        self.strategies.iter().find(|s| s.strategy == name)
    }
}

fn step_seed(seed: u64, k: usize) -> u64 {
    seed ^ (k as u64).wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Rolling optimisation: at each out-of-sample step, fit (or re-filter)
/// the model on the trailing window, optimise each objective against the
/// one-step covariance forecast and record the next day's realised
/// returns. Failed re-estimations reuse the previous parameters.
pub fn rolling_portfolios(panel: &ReturnPanel, cfg: &PortfolioStudyConfig) -> Result<Vec<PortfolioStep>> {
    let win = cfg.window;
    win.validate_for(panel.len())?;
    let n = panel.n_assets();
    let ew = PortfolioWeights::equal(n);
    let est_steps: Vec<usize> = (0..win.out_size).filter(|&k| win.reestimates(k)).collect();
    let fits = par::map_slice(&est_steps, |&k| {
        let (s, e) = win.window(k);
        dcc::fit_dcc(&panel.slice(s, e)?, &ew, cfg.alpha, &cfg.fit.with_seed(step_seed(cfg.seed, k)))
    });

    let mut current = None;
    let mut plan = Vec::with_capacity(win.out_size);
    let mut fit_iter = fits.into_iter();
    for k in 0..win.out_size {
        if win.reestimates(k) {
            match fit_iter.next().expect("one fit per re-estimation step") {
                Ok(fit) => {
                    let params = (
                        fit.stage1.iter().map(|f| f.params).collect::<Vec<_>>(),
                        fit.params,
                    );
                    current = Some(params.clone());
                    plan.push((params, Some(fit)));
                    continue;
                }
                Err(e) => {
                    log::warn!("portfolio step {k}: estimation failed: {e}");
                    let p = current.clone().ok_or_else(|| e.in_stage("rolling"))?;
                    plan.push((p, None));
                    continue;
                }
            }
        }
        plan.push((current.clone().expect("step 0 re-estimates"), None));
    }

    let steps = par::map_indexed(win.out_size, |k| {
        let (s, e) = win.window(k);
        let window = panel.slice(s, e)?;
        let (params, fit) = &plan[k];
        let fit = match fit {
            Some(f) => f.clone(),
            None => dcc::filter_dcc(&window, &ew, cfg.alpha, &params.0, &params.1)?,
        };
        let h = fit.forecast_covariance();
        let needs_factors = cfg.objectives.iter().any(|o| *o != Objective::Variance);
        let reg = if needs_factors {
            let sample = simulate_factors(&window, &fit, cfg.n_sim, cfg.alpha, step_seed(cfg.seed ^ 1, k))?;
            fit_factor_regression(&sample)?
        } else {
            FactorRegression::constant(n, fit.params.q, fit.params.c())
        };
        let optimize = OptimizeConfig {
            search: cfg.optimize.search.with_seed(step_seed(cfg.seed ^ 2, k)),
            ..cfg.optimize
        };
        let solutions = cfg
            .objectives
            .iter()
            .map(|&o| optimize_portfolio(&h, &fit.mu, &reg, o, &optimize))
            .collect::<Result<Vec<_>>>()?;
        let row = panel.row(e);
        Ok(PortfolioStep {
            date: panel.dates()[e],
            realized: solutions.iter().map(|s| s.weights.dot(row)).collect(),
            realized_ew: ew.dot(row),
            solutions,
        })
    });
    steps.into_iter().collect()
}

/// Solutions as CSV: `date,objective,w1..wn,predicted_factor,objective_value`.
pub fn write_solutions<W: Write>(steps: &[PortfolioStep], n: usize, mut out: W) -> Result<()> {
    write!(out, "date,objective")?;
    for i in 1..=n {
        write!(out, ",w{i}")?;
    }
    writeln!(out, ",predicted_factor,objective_value")?;
    for s in steps {
        for sol in &s.solutions {
            write!(out, "{},{}", s.date.format("%Y-%m-%d"), sol.objective.as_str())?;
            for w in sol.weights.as_slice() {
                write!(out, ",{w:.16e}")?;
            }
            writeln!(out, ",{:.16e},{:.16e}", sol.predicted_factor, sol.objective_value)?;
        }
    }
    Ok(())
}

pub fn save_solutions(steps: &[PortfolioStep], n: usize, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_solutions(steps, n, &mut f)?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn diag(d: &[f64]) -> SymMatrix {
        SymMatrix::from_fn(d.len(), |i, j| if i == j { d[i] } else { 0.0 })
    }

    #[test]
    fn two_asset_closed_form() {
        let h = diag(&[1.0, 4.0]);
        let reg = FactorRegression::constant(2, -1.96, -2.34);
        let cfg = OptimizeConfig::default();
        for obj in [Objective::Variance, Objective::Var, Objective::Es] {
            let s = optimize_portfolio(&h, &[0.0, 0.0], &reg, obj, &cfg).unwrap();
            assert_abs_diff_eq!(s.weights.as_slice()[0], 0.8, epsilon = 1e-3);
            assert_abs_diff_eq!(s.weights.as_slice()[1], 0.2, epsilon = 1e-3);
        }
    }

    #[test]
    fn identity_gives_equal_weights() {
        let h = SymMatrix::identity(4);
        let reg = FactorRegression::constant(4, -1.96, -2.34);
        let s = optimize_portfolio(&h, &[0.0; 4], &reg, Objective::Var, &OptimizeConfig::default()).unwrap();
        for w in s.weights.as_slice() {
            assert_abs_diff_eq!(*w, 0.25, epsilon = 1e-3);
        }
        let f = predict_risk(PortfolioWeights::equal(4).as_slice(), &h, &reg, &[0.0; 4]).unwrap();
        assert_abs_diff_eq!(f.var, 0.5 * -1.96, epsilon = 1e-12);
    }

    #[test]
    fn target_return_binds_and_infeasible_target_errors() {
        let h = diag(&[1.0, 4.0]);
        let reg = FactorRegression::constant(2, -1.96, -2.34);
        let mu = [0.0, 1.0];
        let cfg = OptimizeConfig {
            mu_target: Some(0.5),
            ..OptimizeConfig::default()
        };
        let s = optimize_portfolio(&h, &mu, &reg, Objective::Variance, &cfg).unwrap();
        assert!(s.weights.dot(&mu) >= 0.5 - 1e-8);
        assert_abs_diff_eq!(s.weights.as_slice()[1], 0.5, epsilon = 1e-3);
        let bad = OptimizeConfig {
            mu_target: Some(1.5),
            ..OptimizeConfig::default()
        };
        assert!(matches!(
            optimize_portfolio(&h, &mu, &reg, Objective::Variance, &bad),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn short_selling_hedges_correlated_assets() {
        let h = SymMatrix::from_rows(&[vec![1.0, 0.9], vec![0.9, 1.0]]).unwrap();
        let h3 = SymMatrix::from_fn(3, |i, j| if i < 2 && j < 2 { h.get(i, j) } else if i == j { 4.0 } else { 0.0 });
        let reg = FactorRegression::constant(3, -1.96, -2.34);
        let long = optimize_portfolio(&h3, &[0.0; 3], &reg, Objective::Variance, &OptimizeConfig::default()).unwrap();
        let short = optimize_portfolio(
            &h3,
            &[0.0; 3],
            &reg,
            Objective::Variance,
            &OptimizeConfig {
                allow_short: true,
                ..OptimizeConfig::default()
            },
        )
        .unwrap();
        assert!(short.objective_value <= long.objective_value + 1e-9);
        let s: f64 = short.weights.as_slice().iter().sum();
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn exact_linear_factors_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = [-1.8, -2.0, -2.1];
        let mut w_sim = Matrix::zeros(50, 3);
        for k in 0..50 {
            let row = w_sim.row_mut(k);
            row.iter_mut().for_each(|x| *x = rng.random::<f64>() + 0.01);
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        let q_sim: Vec<f64> = (0..50).map(|k| w_sim.row(k).iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
        let c_sim = vec![-2.5; 50];
        let reg = fit_factor_regression(&FactorSample { w_sim, q_sim, c_sim }).unwrap();
        for (b, t) in reg.beta_q.iter().zip(&v) {
            assert_abs_diff_eq!(b, t, epsilon = 1e-8);
        }
        let w = [0.2, 0.3, 0.5];
        assert_abs_diff_eq!(reg.c_factor(&w), -2.5, epsilon = 1e-8);
        assert!(reg.r2_q > 1.0 - 1e-12);
    }

    #[test]
    fn too_few_draws_is_rank_error() {
        let s = FactorSample {
            w_sim: Matrix::from_rows(&[vec![0.5, 0.5], vec![0.3, 0.7]]).unwrap(),
            q_sim: vec![-2.0, -2.0],
            c_sim: vec![-2.4, -2.4],
        };
        assert!(matches!(fit_factor_regression(&s), Err(Error::Rank(_))));
    }

    #[test]
    fn softmax_pins_last_coordinate() {
        let w = softmax_weights(&[0.0, 0.0]);
        assert_eq!(w.len(), 3);
        for v in &w {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let w = softmax_weights(&[15.0, -15.0]);
        assert!(w[0] > 0.999);
    }
}
