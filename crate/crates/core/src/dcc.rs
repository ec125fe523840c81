//! Stage two: marginalised DCC with correlation targeting.
//!
//! Standardised returns `eps_t = r_t / h_t` drive
//!
//! ```text
//! R_t = (1 - a - b) S + a eps_{t-1} eps_{t-1}' + b R_{t-1},   S = T^-1 sum eps_t eps_t'
//! P_t = diag(R_t)^-1/2 R_t diag(R_t)^-1/2
//! Q_t  = w'mu + q sqrt(w' D_t P_t D_t w)
//! ES_t = w'mu + c sqrt(w' D_t P_t D_t w),    c = -sqrt(q^2 (1 + exp(gamma0)))
//! ```
//!
//! `(a, b, q, gamma0)` are estimated jointly by minimising the AL loss of
//! the portfolio returns, with the stage-one volatilities and the target
//! `S` held fixed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::escaviar::{self, AssetRiskFit, AssetRiskParams, InitPolicy};
use crate::linalg::{cholesky, packed_quad_form, to_correlation, Matrix, SymMatrix};
use crate::optimizer::{minimize, BoundedProblem, MultistartConfig};
use crate::par;
use crate::scoring::{al_score_unchecked, JointForecast, RiskLevel};
use crate::stats;
use crate::timeseries::{demean, portfolio_returns, PortfolioWeights, ReturnPanel};

/// Minimum panel length accepted by [`fit_dcc`].
pub const MIN_FIT_LEN: usize = 500;

pub const LOWER_BOUNDS: [f64; 4] = [0.0, 0.0, -10.0, -5.0];
pub const UPPER_BOUNDS: [f64; 4] = [0.5, 0.999, -0.1, 5.0];
/// Candidates with `a + b` above this are rejected.
pub const MAX_PERSISTENCE: f64 = 0.9999;

/// Stage-two coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DccParams {
    pub a: f64,
    pub b: f64,
    /// Portfolio VaR factor, negative.
    pub q: f64,
    pub gamma0: f64,
}

impl DccParams {
    pub fn from_slice(x: &[f64]) -> Self {
        DccParams {
            a: x[0],
            b: x[1],
            q: x[2],
            gamma0: x[3],
        }
    }

    pub fn to_vec(self) -> Vec<f64> {
        vec![self.a, self.b, self.q, self.gamma0]
    }

    /// ES factor `c = -sqrt(q^2 (1 + exp(gamma0)))`.
    pub fn c(&self) -> f64 {
        -(self.q * self.q * (1.0 + self.gamma0.exp())).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.a, self.b, self.q, self.gamma0].iter().all(|v| v.is_finite()) {
            return Err(Error::InfeasibleParams("non-finite coefficient".into()));
        }
        if self.a < 0.0 || self.b < 0.0 {
            return Err(Error::InfeasibleParams(format!(
                "a = {}, b = {} must be non-negative",
                self.a, self.b
            )));
        }
        if !(self.a + self.b < 1.0) {
            return Err(Error::InfeasibleParams(format!(
                "a + b = {} is not below 1",
                self.a + self.b
            )));
        }
        if !(self.q < 0.0) {
            return Err(Error::InfeasibleParams(format!("q = {} is not negative", self.q)));
        }
        Ok(())
    }
}

/// Correlation target and filtered correlation paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationState {
    pub sigma_eps_hat: SymMatrix,
    pub r_path: Vec<SymMatrix>,
    pub p_path: Vec<SymMatrix>,
    /// `R_{T+1}`, available after the last observation.
    pub r_next: SymMatrix,
}

/// A fitted two-stage model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DccFit {
    pub params: DccParams,
    pub corr: CorrelationState,
    pub port_var_path: Vec<f64>,
    pub port_es_path: Vec<f64>,
    /// Stage-two AL loss at `params`.
    pub loss: f64,
    pub stage1: Vec<AssetRiskFit>,
    pub weights: PortfolioWeights,
    pub alpha: RiskLevel,
    /// Sample means removed before estimation.
    pub mu: Vec<f64>,
    /// Standardised returns used for filtering.
    pub eps: Matrix,
}

impl DccFit {
    pub fn len(&self) -> usize {
        self.port_var_path.len()
    }

    pub fn is_empty(&self) -> bool {
        self.port_var_path.is_empty()
    }

    pub fn n_assets(&self) -> usize {
        self.stage1.len()
    }

    /// Stage-one volatilities `h_{t,i}` as a `T x n` matrix.
    pub fn vol_matrix(&self) -> Matrix {
        let t = self.eps.rows();
        let n = self.n_assets();
        let mut m = Matrix::zeros(t, n);
        for (i, fit) in self.stage1.iter().enumerate() {
            for (s, h) in fit.vol_path.iter().enumerate() {
                m.set(s, i, *h);
            }
        }
        m
    }

    /// `H_t = D_t P_t D_t` at in-sample step `t`.
    pub fn covariance_at(&self, t: usize) -> SymMatrix {
        let d: Vec<f64> = self.stage1.iter().map(|f| f.vol_path[t]).collect();
        self.corr.p_path[t]
            .scale_diag(&d)
            .expect("stage-one and correlation dimensions agree")
    }

    /// One-step-ahead conditional covariance `H_{T+1}`.
    pub fn forecast_covariance(&self) -> SymMatrix {
        let d: Vec<f64> = self.stage1.iter().map(AssetRiskFit::next_vol).collect();
        let p = to_correlation(&self.corr.r_next).expect("R_{T+1} has positive diagonal");
        p.scale_diag(&d).expect("dimensions agree")
    }

    /// Portfolio mean `w' mu`.
    pub fn portfolio_mean(&self) -> f64 {
        self.weights.dot(&self.mu)
    }
}

/// `eps_{t,i} = r_{t,i} / h_{t,i}`.
pub fn standardize(panel: &ReturnPanel, stage1: &[AssetRiskFit]) -> Result<Matrix> {
    if stage1.len() != panel.n_assets() {
        return Err(Error::dim(panel.n_assets(), stage1.len()));
    }
    let t_len = panel.len();
    let mut eps = Matrix::zeros(t_len, panel.n_assets());
    for (i, fit) in stage1.iter().enumerate() {
        if fit.vol_path.len() != t_len {
            return Err(Error::dim(t_len, fit.vol_path.len()));
        }
        for t in 0..t_len {
            let h = fit.vol_path[t];
            if !(h > 0.0) {
                return Err(Error::Internal(format!(
                    "non-positive stage-one volatility {h} for asset {i} at t = {t}"
                )));
            }
            eps.set(t, i, panel.row(t)[i] / h);
        }
    }
    Ok(eps)
}

/// `T^-1 sum_t eps_t eps_t'`. Logs a warning when `T <= n`, in which case
/// the target is singular.
pub fn correlation_target(eps: &Matrix) -> SymMatrix {
    if eps.rows() <= eps.cols() {
        log::warn!(
            "correlation target from {} observations of {} series is rank deficient",
            eps.rows(),
            eps.cols()
        );
    }
    let mut s = eps.gram();
    let t = eps.rows() as f64;
    s.packed_mut().iter_mut().for_each(|v| *v /= t);
    s
}

#[inline]
fn recursion_step(r: &mut [f64], target: &[f64], eps_prev: &[f64], a: f64, b: f64) {
    let w = 1.0 - a - b;
    let mut k = 0;
    for i in 0..eps_prev.len() {
        for j in 0..=i {
            r[k] = w * target[k] + a * eps_prev[i] * eps_prev[j] + b * r[k];
            k += 1;
        }
    }
}

/// Filter `R_t` and `P_t` from `r0`. `r_path[0] = r0`.
pub fn filter_correlations(
    eps: &Matrix,
    p: &DccParams,
    sigma_eps_hat: &SymMatrix,
    r0: &SymMatrix,
) -> Result<CorrelationState> {
    let n = eps.cols();
    if sigma_eps_hat.dim() != n {
        return Err(Error::dim(n, sigma_eps_hat.dim()));
    }
    if r0.dim() != n {
        return Err(Error::dim(n, r0.dim()));
    }
    if eps.rows() == 0 {
        return Err(Error::InvalidInput("no observations to filter".into()));
    }
    if cholesky(r0).is_none() {
        return Err(Error::Init("initial correlation state is not positive definite".into()));
    }
    if !(p.a >= 0.0 && p.b >= 0.0 && p.a + p.b < 1.0) {
        return Err(Error::InfeasibleParams(format!(
            "a = {}, b = {} violate a, b >= 0, a + b < 1",
            p.a, p.b
        )));
    }
    let mut r_path = Vec::with_capacity(eps.rows());
    let mut p_path = Vec::with_capacity(eps.rows());
    let mut r = r0.clone();
    for t in 0..eps.rows() {
        if t > 0 {
            recursion_step(r.packed_mut(), sigma_eps_hat.packed(), eps.row(t - 1), p.a, p.b);
        }
        p_path.push(to_correlation(&r)?);
        r_path.push(r.clone());
    }
    let mut r_next = r;
    recursion_step(
        r_next.packed_mut(),
        sigma_eps_hat.packed(),
        eps.row(eps.rows() - 1),
        p.a,
        p.b,
    );
    Ok(CorrelationState {
        sigma_eps_hat: sigma_eps_hat.clone(),
        r_path,
        p_path,
        r_next,
    })
}

/// Portfolio VaR and ES paths given correlation and volatility paths.
pub fn portfolio_risk_paths(
    corr: &CorrelationState,
    vols: &Matrix,
    w: &PortfolioWeights,
    p: &DccParams,
    mu: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let t_len = corr.p_path.len();
    if vols.rows() != t_len {
        return Err(Error::dim(t_len, vols.rows()));
    }
    if vols.cols() != w.len() {
        return Err(Error::dim(w.len(), vols.cols()));
    }
    let c = p.c();
    let mut v = vec![0.0; w.len()];
    let mut q_path = Vec::with_capacity(t_len);
    let mut es_path = Vec::with_capacity(t_len);
    for t in 0..t_len {
        for (vi, (wi, hi)) in v.iter_mut().zip(w.as_slice().iter().zip(vols.row(t))) {
            *vi = wi * hi;
        }
        let s = packed_quad_form(corr.p_path[t].packed(), &v);
        if !(s > 0.0) {
            return Err(Error::Internal(format!(
                "portfolio variance {s} at t = {t} is not positive"
            )));
        }
        let sd = s.sqrt();
        q_path.push(mu + p.q * sd);
        es_path.push(mu + c * sd);
    }
    Ok((q_path, es_path))
}

/// Inputs of the stage-two objective, precomputed once per fit.
struct Stage2Data<'a> {
    eps: &'a Matrix,
    /// `w_i h_{t,i}`.
    scaled_vols: Matrix,
    returns: Vec<f64>,
    target: &'a SymMatrix,
    alpha: f64,
}

impl Stage2Data<'_> {
    fn loss(&self, p: &DccParams) -> f64 {
        if !(p.a >= 0.0 && p.b >= 0.0 && p.a + p.b <= MAX_PERSISTENCE && p.q < 0.0) {
            return f64::INFINITY;
        }
        let n = self.eps.cols();
        let c = p.c();
        let mut r = self.target.packed().to_vec();
        let mut d = vec![0.0; n];
        let mut loss = 0.0;
        for t in 0..self.returns.len() {
            if t > 0 {
                recursion_step(&mut r, self.target.packed(), self.eps.row(t - 1), p.a, p.b);
            }
            let v = self.scaled_vols.row(t);
            for i in 0..n {
                let rii = r[i * (i + 1) / 2 + i];
                if !(rii > 0.0) {
                    return f64::INFINITY;
                }
                d[i] = v[i] / rii.sqrt();
            }
            let s = packed_quad_form(&r, &d);
            if !(s > 0.0) {
                return f64::INFINITY;
            }
            let sd = s.sqrt();
            loss += al_score_unchecked(self.returns[t], p.q * sd, c * sd, self.alpha);
        }
        if loss.is_finite() {
            loss
        } else {
            f64::INFINITY
        }
    }
}

fn stage1_seed(seed: u64, asset: usize) -> u64 {
    seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(asset as u64 + 1))
}

/// Fit the two-stage model to the portfolio `w` of `panel`.
///
/// The panel is demeaned first; the means are kept in the fit and added back
/// in one-step forecasts. Stage one runs in parallel across assets, with
/// per-asset seeds derived from `cfg.seed`.
pub fn fit_dcc(
    panel: &ReturnPanel,
    w: &PortfolioWeights,
    alpha: RiskLevel,
    cfg: &MultistartConfig,
) -> Result<DccFit> {
    if panel.len() < MIN_FIT_LEN {
        return Err(Error::InvalidInput(format!(
            "panel of length {} is shorter than {MIN_FIT_LEN}",
            panel.len()
        ))
        .in_stage("stage-2"));
    }
    if w.len() != panel.n_assets() {
        return Err(Error::dim(panel.n_assets(), w.len()));
    }
    let (demeaned, mu) = demean(panel);
    let columns: Vec<Vec<f64>> = (0..panel.n_assets()).map(|i| demeaned.column(i)).collect();
    let stage1: Vec<AssetRiskFit> = par::map_indexed(columns.len(), |i| {
        escaviar::fit_asset(&columns[i], alpha, &cfg.with_seed(stage1_seed(cfg.seed, i)))
    })
    .into_iter()
    .collect::<Result<_>>()?;

    estimate_stage2(&demeaned, stage1, w, alpha, mu, cfg).map_err(|e| match e {
        e @ Error::Fit { .. } => e,
        e => e.in_stage("stage-2"),
    })
}

fn estimate_stage2(
    demeaned: &ReturnPanel,
    stage1: Vec<AssetRiskFit>,
    w: &PortfolioWeights,
    alpha: RiskLevel,
    mu: Vec<f64>,
    cfg: &MultistartConfig,
) -> Result<DccFit> {
    let eps = standardize(demeaned, &stage1)?;
    let target = correlation_target(&eps);
    let returns = portfolio_returns(demeaned, w)?;
    let n = demeaned.n_assets();
    let mut scaled_vols = Matrix::zeros(demeaned.len(), n);
    for (i, fit) in stage1.iter().enumerate() {
        for (t, h) in fit.vol_path.iter().enumerate() {
            scaled_vols.set(t, i, w.as_slice()[i] * h);
        }
    }
    let data = Stage2Data {
        eps: &eps,
        scaled_vols,
        returns,
        target: &target,
        alpha: alpha.value(),
    };
    let problem = BoundedProblem::new(
        |x: &[f64]| data.loss(&DccParams::from_slice(x)),
        LOWER_BOUNDS.to_vec(),
        UPPER_BOUNDS.to_vec(),
    )?;
    let start = informed_start(&data.returns, alpha);
    let best = minimize(&problem, cfg, &[start.to_vec()])?;
    let params = DccParams::from_slice(&best.x);
    assemble(demeaned, stage1, eps, target, w, alpha, mu, params)
}

/// Informed stage-two start `(0.05, 0.90, q_emp, -0.86)`.
pub fn informed_start(port_returns: &[f64], alpha: RiskLevel) -> DccParams {
    let sd = stats::std_dev(port_returns);
    let z: Vec<f64> = port_returns.iter().map(|v| v / sd).collect();
    DccParams {
        a: 0.05,
        b: 0.90,
        q: stats::empirical_quantile(&z, alpha.value()).clamp(-9.9, -0.11),
        gamma0: -0.86,
    }
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    demeaned: &ReturnPanel,
    stage1: Vec<AssetRiskFit>,
    eps: Matrix,
    target: SymMatrix,
    w: &PortfolioWeights,
    alpha: RiskLevel,
    mu: Vec<f64>,
    params: DccParams,
) -> Result<DccFit> {
    params.validate()?;
    let corr = filter_correlations(&eps, &params, &target, &target)?;
    let mut fit = DccFit {
        params,
        corr,
        port_var_path: Vec::new(),
        port_es_path: Vec::new(),
        loss: 0.0,
        stage1,
        weights: w.clone(),
        alpha,
        mu,
        eps,
    };
    let (q_path, es_path) = portfolio_risk_paths(&fit.corr, &fit.vol_matrix(), w, &params, 0.0)?;
    let returns = portfolio_returns(demeaned, w)?;
    fit.loss = returns
        .iter()
        .zip(q_path.iter().zip(&es_path))
        .map(|(&r, (&q, &e))| al_score_unchecked(r, q, e, alpha.value()))
        .sum();
    fit.port_var_path = q_path;
    fit.port_es_path = es_path;
    Ok(fit)
}

/// Filter the full model at fixed parameters (no estimation). Window
/// statistics (means, sample variances, correlation target) are recomputed
/// from `panel`.
pub fn filter_dcc(
    panel: &ReturnPanel,
    w: &PortfolioWeights,
    alpha: RiskLevel,
    stage1_params: &[AssetRiskParams],
    params: &DccParams,
) -> Result<DccFit> {
    if stage1_params.len() != panel.n_assets() {
        return Err(Error::dim(panel.n_assets(), stage1_params.len()));
    }
    if w.len() != panel.n_assets() {
        return Err(Error::dim(panel.n_assets(), w.len()));
    }
    let (demeaned, mu) = demean(panel);
    let stage1: Vec<AssetRiskFit> = stage1_params
        .iter()
        .enumerate()
        .map(|(i, p)| escaviar::filter_asset(&demeaned.column(i), p, alpha, InitPolicy::BurnIn))
        .collect::<Result<_>>()?;
    let eps = standardize(&demeaned, &stage1)?;
    let target = correlation_target(&eps);
    assemble(&demeaned, stage1, eps, target, w, alpha, mu, *params)
}

/// One-step-ahead portfolio VaR and ES after the last in-sample
/// observation, including the portfolio mean.
pub fn forecast_one_step(fit: &DccFit) -> Result<JointForecast> {
    let h = fit.forecast_covariance();
    let s = crate::linalg::quad_form(&h, fit.weights.as_slice())?;
    if !(s > 0.0) {
        return Err(Error::Internal(format!("forecast portfolio variance {s}")));
    }
    let mu = fit.portfolio_mean();
    Ok(JointForecast {
        var: mu + fit.params.q * s.sqrt(),
        es: mu + fit.params.c() * s.sqrt(),
    })
}
