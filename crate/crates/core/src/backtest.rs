//! Rolling-window one-step forecasting, VaR backtests and loss-based model
//! comparison.

use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::dcc::{self, DccParams};
use crate::error::{Error, Result};
use crate::escaviar::AssetRiskParams;
use crate::linalg::{ols_solve, Matrix};
use crate::optimizer::MultistartConfig;
use crate::par;
use crate::scoring::{al_log_score, quantile_loss, JointForecast, RiskLevel};
use crate::stats;
use crate::timeseries::{portfolio_returns, PortfolioWeights, ReturnPanel, WindowSpec};

/// Shortest hit sequence accepted by the coverage tests.
pub const MIN_TEST_LEN: usize = 30;

/// One out-of-sample step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub date: NaiveDate,
    pub realized: f64,
    pub forecast: JointForecast,
    pub hit: bool,
    pub q_loss: f64,
    pub joint_loss: f64,
    /// Estimation failed at this step and earlier parameters were used.
    pub carried_forward: bool,
}

impl ForecastRecord {
    pub fn new(date: NaiveDate, realized: f64, forecast: JointForecast, alpha: RiskLevel) -> Result<Self> {
        Ok(ForecastRecord {
            date,
            realized,
            forecast,
            hit: realized <= forecast.var,
            q_loss: quantile_loss(realized, forecast.var, alpha),
            joint_loss: al_log_score(realized, forecast, alpha)?,
            carried_forward: false,
        })
    }
}

/// A forecasting procedure for the rolling harness.
pub trait ForecastModel: Sync {
    type Params: Clone + Send + Sync;

    fn name(&self) -> &str;

    /// Estimate on `window` and forecast the row after it.
    fn estimate(
        &self,
        window: &ReturnPanel,
        w: &PortfolioWeights,
        alpha: RiskLevel,
        seed: u64,
    ) -> Result<(Self::Params, JointForecast)>;

    /// Forecast the row after `window` at fixed parameters.
    fn forecast(
        &self,
        window: &ReturnPanel,
        w: &PortfolioWeights,
        alpha: RiskLevel,
        params: &Self::Params,
    ) -> Result<JointForecast>;
}

/// The two-stage DCC-AL model.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DccAlModel {
    pub fit: MultistartConfig,
}

/// Parameters carried between re-estimations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DccAlParams {
    pub stage1: Vec<AssetRiskParams>,
    pub stage2: DccParams,
}

impl ForecastModel for DccAlModel {
    type Params = DccAlParams;

    fn name(&self) -> &str {
        "dcc-al"
    }

    fn estimate(
        &self,
        window: &ReturnPanel,
        w: &PortfolioWeights,
        alpha: RiskLevel,
        seed: u64,
    ) -> Result<(DccAlParams, JointForecast)> {
        let fit = dcc::fit_dcc(window, w, alpha, &self.fit.with_seed(seed))?;
        let fc = dcc::forecast_one_step(&fit)?;
        let params = DccAlParams {
            stage1: fit.stage1.iter().map(|f| f.params).collect(),
            stage2: fit.params,
        };
        Ok((params, fc))
    }

    fn forecast(
        &self,
        window: &ReturnPanel,
        w: &PortfolioWeights,
        alpha: RiskLevel,
        params: &DccAlParams,
    ) -> Result<JointForecast> {
        let fit = dcc::filter_dcc(window, w, alpha, &params.stage1, &params.stage2)?;
        dcc::forecast_one_step(&fit)
    }
}

/// Historical simulation: empirical quantile and tail mean of the window's
/// portfolio returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct HistoricalModel;

impl ForecastModel for HistoricalModel {
    type Params = ();

    fn name(&self) -> &str {
        "historical"
    }

    fn estimate(
        &self,
        window: &ReturnPanel,
        w: &PortfolioWeights,
        alpha: RiskLevel,
        _seed: u64,
    ) -> Result<((), JointForecast)> {
        Ok(((), self.forecast(window, w, alpha, &())?))
    }

    fn forecast(&self, window: &ReturnPanel, w: &PortfolioWeights, alpha: RiskLevel, _: &()) -> Result<JointForecast> {
        let r = portfolio_returns(window, w)?;
        let (q, es) = stats::quantile_and_tail_mean(&r, alpha.value());
        Ok(JointForecast::new(q, es))
    }
}

/// Seed passed to [`ForecastModel::estimate`] at out-of-sample step `k`.
pub fn window_seed(seed: u64, k: usize) -> u64 {
    seed ^ (k as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One-step forecasts over `win.out_size` rolling windows.
///
/// Step `k` uses rows `k..k + in_size` and forecasts row `k + in_size`.
/// Parameters are re-estimated on steps where `win.reestimates(k)` and held
/// fixed (with the window re-filtered) in between. A failed estimation is
/// logged and replaced by the last successful parameters; an error is
/// returned only when no estimate is available yet.
pub fn rolling_forecast<M: ForecastModel>(
    model: &M,
    panel: &ReturnPanel,
    w: &PortfolioWeights,
    win: &WindowSpec,
    alpha: RiskLevel,
    seed: u64,
) -> Result<Vec<ForecastRecord>> {
    win.validate_for(panel.len())?;
    if w.len() != panel.n_assets() {
        return Err(Error::dim(panel.n_assets(), w.len()));
    }
    let windows: Vec<ReturnPanel> = (0..win.out_size)
        .map(|k| {
            let (s, e) = win.window(k);
            panel.slice(s, e)
        })
        .collect::<Result<_>>()?;

    let est_steps: Vec<usize> = (0..win.out_size).filter(|&k| win.reestimates(k)).collect();
    let estimates = par::map_slice(&est_steps, |&k| model.estimate(&windows[k], w, alpha, window_seed(seed, k)));

    // Resolve carried-forward parameters sequentially.
    let mut current: Option<M::Params> = None;
    let mut plan: Vec<(M::Params, Option<JointForecast>, bool)> = Vec::with_capacity(win.out_size);
    let mut est_iter = est_steps.iter().zip(estimates);
    for k in 0..win.out_size {
        if win.reestimates(k) {
            let (_, res) = est_iter.next().expect("one estimate per re-estimation step");
            match res {
                Ok((p, fc)) => {
                    current = Some(p.clone());
                    plan.push((p, Some(fc), false));
                    continue;
                }
                Err(e) => {
                    log::warn!("{}: estimation failed at out-of-sample step {k}: {e}", model.name());
                    let p = current.clone().ok_or_else(|| {
                        e.in_stage("rolling")
                    })?;
                    plan.push((p, None, true));
                    continue;
                }
            }
        }
        let p = current.clone().expect("step 0 always re-estimates");
        plan.push((p, None, false));
    }

    let records = par::map_indexed(win.out_size, |k| {
        let (params, fc, failed) = &plan[k];
        let fc = match fc {
            Some(fc) => *fc,
            None => model.forecast(&windows[k], w, alpha, params)?,
        };
        let (_, target) = win.window(k);
        let realized = w.dot(panel.row(target));
        let mut rec = ForecastRecord::new(panel.dates()[target], realized, fc, alpha)?;
        rec.carried_forward = *failed;
        Ok(rec)
    });
    records.into_iter().collect()
}

/// Statistic, degrees of freedom and upper-tail chi-square p-value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

impl TestOutcome {
    fn chi2(statistic: f64, dof: usize) -> Self {
        let dist = ChiSquared::new(dof as f64).expect("positive dof");
        let stat = statistic.max(0.0);
        TestOutcome {
            statistic: stat,
            dof,
            p_value: (1.0 - dist.cdf(stat)).clamp(0.0, 1.0),
        }
    }
}

/// `x ln(p)` with `0 ln 0 = 0`.
fn xlogp(x: f64, p: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * p.ln()
    }
}

fn check_len(n: usize, min: usize) -> Result<()> {
    if n < min {
        return Err(Error::InvalidInput(format!(
            "backtest needs at least {min} observations, got {n}"
        )));
    }
    Ok(())
}

fn uc_statistic(hits: &[bool], alpha: f64) -> f64 {
    let t = hits.len() as f64;
    let x = hits.iter().filter(|h| **h).count() as f64;
    let pi = x / t;
    let null = xlogp(t - x, 1.0 - alpha) + xlogp(x, alpha);
    let alt = xlogp(t - x, 1.0 - pi) + xlogp(x, pi);
    -2.0 * (null - alt)
}

/// Kupiec unconditional coverage test. With no hits (or only hits) the
/// maximum-likelihood rate sits on the boundary and its log-likelihood
/// terms vanish, so the statistic stays finite.
pub fn uc_test(hits: &[bool], alpha: RiskLevel) -> Result<TestOutcome> {
    check_len(hits.len(), MIN_TEST_LEN)?;
    Ok(TestOutcome::chi2(uc_statistic(hits, alpha.value()), 1))
}

fn ind_statistic(hits: &[bool]) -> f64 {
    let mut n = [[0.0f64; 2]; 2];
    for pair in hits.windows(2) {
        n[pair[0] as usize][pair[1] as usize] += 1.0;
    }
    let (n00, n01, n10, n11) = (n[0][0], n[0][1], n[1][0], n[1][1]);
    let ratio = |a: f64, b: f64| if a + b > 0.0 { b / (a + b) } else { 0.0 };
    let pi01 = ratio(n00, n01);
    let pi11 = ratio(n10, n11);
    let pi = ratio(n00 + n10, n01 + n11);
    let alt = xlogp(n00, 1.0 - pi01) + xlogp(n01, pi01) + xlogp(n10, 1.0 - pi11) + xlogp(n11, pi11);
    let null = xlogp(n00 + n10, 1.0 - pi) + xlogp(n01 + n11, pi);
    -2.0 * (null - alt)
}

/// Christoffersen conditional coverage test: UC plus first-order Markov
/// independence, against chi-square(2).
pub fn cc_test(hits: &[bool], alpha: RiskLevel) -> Result<TestOutcome> {
    check_len(hits.len(), MIN_TEST_LEN)?;
    let stat = uc_statistic(hits, alpha.value()) + ind_statistic(hits);
    Ok(TestOutcome::chi2(stat, 2))
}

/// Dynamic quantile test. Regresses `Hit_t = 1{r_t <= Q_t} - alpha` on a
/// constant, `lags` lagged hits and the current VaR forecast; the Wald
/// statistic `b'X'Xb / (alpha (1 - alpha))` is chi-square(lags + 2).
pub fn dq_test(hits: &[bool], var: &[f64], lags: usize, alpha: RiskLevel) -> Result<TestOutcome> {
    if var.len() != hits.len() {
        return Err(Error::dim(hits.len(), var.len()));
    }
    if lags == 0 {
        return Err(Error::InvalidInput("DQ test needs at least one lag".into()));
    }
    check_len(hits.len(), lags + MIN_TEST_LEN)?;
    let a = alpha.value();
    let h: Vec<f64> = hits.iter().map(|&b| b as u8 as f64 - a).collect();
    let k = lags + 2;
    let rows = hits.len() - lags;
    let mut x = Matrix::zeros(rows, k);
    let mut y = Vec::with_capacity(rows);
    for (row, t) in (lags..hits.len()).enumerate() {
        let xr = x.row_mut(row);
        xr[0] = 1.0;
        for l in 1..=lags {
            xr[l] = h[t - l];
        }
        xr[k - 1] = var[t];
        y.push(h[t]);
    }
    let beta = ols_solve(&x, &y).map_err(|e| Error::Test(format!("DQ regression: {e}")))?;
    let fitted = x.mul_vec(&beta);
    let ssq: f64 = fitted.iter().map(|v| v * v).sum();
    Ok(TestOutcome::chi2(ssq / (a * (1.0 - a)), k))
}

/// Summary of a forecast record series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub model: String,
    pub alpha: RiskLevel,
    pub n_obs: usize,
    pub n_hits: usize,
    pub hit_rate: f64,
    pub n_carried_forward: usize,
    /// `None` when the test is undefined for the series.
    pub uc_p: Option<f64>,
    pub cc_p: Option<f64>,
    pub dq1_p: Option<f64>,
    pub dq4_p: Option<f64>,
    pub q_loss_total: f64,
    pub joint_loss_total: f64,
}

impl BacktestReport {
    pub fn from_records(model: &str, records: &[ForecastRecord], alpha: RiskLevel) -> Self {
        let hits: Vec<bool> = records.iter().map(|r| r.hit).collect();
        let var: Vec<f64> = records.iter().map(|r| r.forecast.var).collect();
        let n_hits = hits.iter().filter(|h| **h).count();
        let p = |r: Result<TestOutcome>| match r {
            Ok(t) => Some(t.p_value),
            Err(e) => {
                log::info!("{model}: backtest not available: {e}");
                None
            }
        };
        BacktestReport {
            model: model.to_string(),
            alpha,
            n_obs: records.len(),
            n_hits,
            hit_rate: if records.is_empty() { 0.0 } else { n_hits as f64 / records.len() as f64 },
            n_carried_forward: records.iter().filter(|r| r.carried_forward).count(),
            uc_p: p(uc_test(&hits, alpha)),
            cc_p: p(cc_test(&hits, alpha)),
            dq1_p: p(dq_test(&hits, &var, 1, alpha)),
            dq4_p: p(dq_test(&hits, &var, 4, alpha)),
            q_loss_total: records.iter().map(|r| r.q_loss).sum(),
            joint_loss_total: records.iter().map(|r| r.joint_loss).sum(),
        }
    }
}

/// Loss totals of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelComparison {
    pub model: String,
    pub q_loss_total: f64,
    pub joint_loss_total: f64,
    pub lowest_q_loss: bool,
    pub lowest_joint_loss: bool,
}

/// Loss totals per model, sorted by joint loss with ties kept in input
/// order. All record series must cover the same dates.
pub fn compare_models(models: &[(&str, &[ForecastRecord])]) -> Result<Vec<ModelComparison>> {
    let Some((_, first)) = models.first() else {
        return Ok(Vec::new());
    };
    for (_, recs) in models {
        if recs.len() != first.len() {
            return Err(Error::dim(first.len(), recs.len()));
        }
        if recs.iter().zip(first.iter()).any(|(a, b)| a.date != b.date) {
            return Err(Error::InvalidInput("forecast dates differ across models".into()));
        }
    }
    let mut rows: Vec<ModelComparison> = models
        .iter()
        .map(|(name, recs)| ModelComparison {
            model: name.to_string(),
            q_loss_total: recs.iter().map(|r| r.q_loss).sum(),
            joint_loss_total: recs.iter().map(|r| r.joint_loss).sum(),
            lowest_q_loss: false,
            lowest_joint_loss: false,
        })
        .collect();
    rows.sort_by(|a, b| a.joint_loss_total.total_cmp(&b.joint_loss_total));
    let best_q = (0..rows.len())
        .min_by(|&i, &j| rows[i].q_loss_total.total_cmp(&rows[j].q_loss_total))
        .expect("non-empty");
    rows[0].lowest_joint_loss = true;
    rows[best_q].lowest_q_loss = true;
    Ok(rows)
}

/// Records as CSV with columns `date,realized,var,es,hit,q_loss,joint_loss`.
pub fn write_records<W: Write>(records: &[ForecastRecord], mut out: W) -> Result<()> {
    writeln!(out, "date,realized,var,es,hit,q_loss,joint_loss")?;
    for r in records {
        writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{},{:.16e},{:.16e}",
            r.date.format("%Y-%m-%d"),
            r.realized,
            r.forecast.var,
            r.forecast.es,
            r.hit as u8,
            r.q_loss,
            r.joint_loss
        )?;
    }
    Ok(())
}

pub fn save_records(records: &[ForecastRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_records(records, &mut f)?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn alpha() -> RiskLevel {
        RiskLevel::default()
    }

    fn hits_with(t: usize, x: usize) -> Vec<bool> {
        (0..t).map(|i| i < x).collect()
    }

    #[test]
    fn uc_examples() {
        let r = uc_test(&hits_with(1000, 25), alpha()).unwrap();
        assert_abs_diff_eq!(r.statistic, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(r.p_value, 1.0, epsilon = 1e-9);
        let r = uc_test(&hits_with(1000, 50), alpha()).unwrap();
        let hand = 2.0 * (50.0 * (0.05f64 / 0.025).ln() + 950.0 * (0.95f64 / 0.975).ln());
        assert_abs_diff_eq!(r.statistic, hand, epsilon = 1e-9);
        assert_abs_diff_eq!(r.statistic, 19.9613, epsilon = 1e-4);
        assert!(r.p_value < 0.001);
        let r = uc_test(&hits_with(100, 0), alpha()).unwrap();
        assert_abs_diff_eq!(r.statistic, -2.0 * 100.0 * 0.975f64.ln(), epsilon = 1e-12);
        assert!(uc_test(&hits_with(29, 1), alpha()).is_err());
    }

    #[test]
    fn cc_penalises_alternation() {
        use rand::{Rng, SeedableRng};
        let level = RiskLevel::new(0.49).unwrap();
        let alt: Vec<bool> = (0..400).map(|i| i % 2 == 0).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let iid: Vec<bool> = (0..400).map(|_| rng.random_bool(0.5)).collect();
        let p_alt = cc_test(&alt, level).unwrap().p_value;
        let p_iid = cc_test(&iid, level).unwrap().p_value;
        assert!(p_alt < p_iid);
        assert!(p_alt < 1e-6);
        let zero = cc_test(&hits_with(200, 0), alpha()).unwrap();
        let uc = uc_test(&hits_with(200, 0), alpha()).unwrap();
        assert_abs_diff_eq!(zero.statistic, uc.statistic, epsilon = 1e-12);
        assert_eq!(zero.dof, 2);
    }

    #[test]
    fn dq_detects_lag_dependence() {
        let hits: Vec<bool> = (0..300).map(|i| (i / 3) % 7 == 0).collect();
        let var: Vec<f64> = (0..300).map(|i| -2.0 - 0.01 * ((i * 37) % 11) as f64).collect();
        let r = dq_test(&hits, &var, 1, alpha()).unwrap();
        assert!(r.p_value < 1e-6);
        assert_eq!(dq_test(&hits, &var, 4, alpha()).unwrap().dof, 6);
        assert!(matches!(
            dq_test(&hits, &vec![-2.0; 300], 1, alpha()),
            Err(Error::Test(_))
        ));
    }

    fn record(day: u32, r: f64, f: JointForecast) -> ForecastRecord {
        ForecastRecord::new(NaiveDate::from_ymd_opt(2020, 1, day).unwrap(), r, f, alpha()).unwrap()
    }

    #[test]
    fn comparison_totals_and_flags() {
        let good = JointForecast::new(-2.0, -2.5);
        let bad = JointForecast::new(-3.0, -3.5);
        let ra = [record(1, -2.2, good), record(2, 0.5, good)];
        let rb = [record(1, -2.2, bad), record(2, 0.5, bad)];
        let table = compare_models(&[("b", &rb), ("a", &ra)]).unwrap();
        assert_eq!(table.len(), 2);
        let (q, j) = crate::scoring::sum_scores(&[-2.2, 0.5], &[good, good], alpha()).unwrap();
        let a = table.iter().find(|r| r.model == "a").unwrap();
        assert_abs_diff_eq!(a.q_loss_total, q, epsilon = 1e-12);
        assert_abs_diff_eq!(a.joint_loss_total, j, epsilon = 1e-12);
        assert!(table[0].lowest_joint_loss);
        assert!(compare_models(&[("a", &ra), ("b", &rb[..1])]).is_err());
        let single = compare_models(&[("a", &ra)]).unwrap();
        assert!(single[0].lowest_q_loss && single[0].lowest_joint_loss);
    }

    #[test]
    fn record_invariants() {
        let f = JointForecast::new(-1.5, -2.0);
        let r = record(3, -1.5, f);
        assert!(r.hit);
        assert_eq!(r.q_loss, quantile_loss(-1.5, -1.5, alpha()));
        assert_eq!(r.joint_loss, al_log_score(-1.5, f, alpha()).unwrap());
        let mut buf = Vec::new();
        write_records(&[r], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("date,realized,var,es,hit,q_loss,joint_loss\n2020-01-03,"));
    }
}
