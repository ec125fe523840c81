//! Stage one: per-asset ES-CAViaR model with Indirect-GARCH quantile
//! dynamics and a constant multiplicative ES factor.
//!
//! ```text
//! Q_t^2  = omega_q + alpha_q r_{t-1}^2 + beta Q_{t-1}^2,   Q_t = -sqrt(Q_t^2)
//! ES_t^2 = (1 + exp(gamma0)) Q_t^2,                        ES_t < 0
//! omega_q = (q^2 (1 - beta) - alpha_q) V(r)
//! ```
//!
//! With `Q_t = q h_t` the recursion is a variance-targeted GARCH(1,1) for
//! `h_t^2` with ARCH coefficient `alpha_q / q^2`, whose unconditional
//! variance equals the sample variance `V(r)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimizer::{minimize, BoundedProblem, MultistartConfig};
use crate::scoring::{al_score_unchecked, RiskLevel};
use crate::stats;

/// Minimum series length accepted by [`filter_asset`].
pub const MIN_FILTER_LEN: usize = 50;
/// Minimum series length accepted by [`fit_asset`].
pub const MIN_FIT_LEN: usize = 250;

pub const LOWER_BOUNDS: [f64; 4] = [0.0, 0.0, -10.0, -5.0];
pub const UPPER_BOUNDS: [f64; 4] = [10.0, 0.999, -0.1, 5.0];

/// Stage-one coefficients `(alpha_q, beta, q, gamma0)` for one asset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssetRiskParams {
    pub alpha_q: f64,
    pub beta: f64,
    /// VaR factor, stored negative.
    pub q: f64,
    pub gamma0: f64,
}

impl AssetRiskParams {
    pub fn from_slice(x: &[f64]) -> Self {
        AssetRiskParams {
            alpha_q: x[0],
            beta: x[1],
            q: x[2],
            gamma0: x[3],
        }
    }

    pub fn to_vec(self) -> Vec<f64> {
        vec![self.alpha_q, self.beta, self.q, self.gamma0]
    }

    /// ARCH coefficient of the implied GARCH for `h_t^2`.
    pub fn garch_alpha(&self) -> f64 {
        self.alpha_q / (self.q * self.q)
    }

    /// Recursion intercept implied by variance targeting.
    pub fn omega_q(&self, sample_var: f64) -> f64 {
        (self.q * self.q * (1.0 - self.beta) - self.alpha_q) * sample_var
    }

    /// `ES / Q = sqrt(1 + exp(gamma0))`.
    pub fn es_ratio(&self) -> f64 {
        (1.0 + self.gamma0.exp()).sqrt()
    }

    /// Check the admissible region: `alpha_q >= 0`, `0 <= beta < 1`, `q < 0`
    /// and `alpha_q / q^2 + beta < 1` (equivalently a positive intercept).
    pub fn validate(&self) -> Result<()> {
        let finite = [self.alpha_q, self.beta, self.q, self.gamma0]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InfeasibleParams("non-finite coefficient".into()));
        }
        if self.alpha_q < 0.0 {
            return Err(Error::InfeasibleParams(format!("alpha_q = {} < 0", self.alpha_q)));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::InfeasibleParams(format!("beta = {} outside [0, 1)", self.beta)));
        }
        if !(self.q < 0.0) {
            return Err(Error::InfeasibleParams(format!("q = {} is not negative", self.q)));
        }
        if !(self.garch_alpha() + self.beta < 1.0) {
            return Err(Error::InfeasibleParams(format!(
                "alpha_q/q^2 + beta = {} is not below 1",
                self.garch_alpha() + self.beta
            )));
        }
        Ok(())
    }
}

/// Starting value of the `Q^2` recursion.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum InitPolicy {
    /// Pre-sample state `Q^2 = q^2 V0`, `r^2 = V0`, with `V0` the variance of
    /// the first `max(50, T/10)` observations.
    #[default]
    BurnIn,
    /// Pre-sample state built from the given variance `V0`.
    Variance(f64),
}

impl InitPolicy {
    fn variance(self, r: &[f64]) -> f64 {
        match self {
            InitPolicy::BurnIn => {
                let m = MIN_FILTER_LEN.max(r.len() / 10).min(r.len());
                stats::variance(&r[..m])
            }
            InitPolicy::Variance(v) => v,
        }
    }
}

/// Filtered stage-one model for one asset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetRiskFit {
    pub params: AssetRiskParams,
    /// `Q_t`, negative.
    pub var_path: Vec<f64>,
    /// `ES_t`, below `Q_t`.
    pub es_path: Vec<f64>,
    /// `h_t = Q_t / q`, positive.
    pub vol_path: Vec<f64>,
    /// Total AL score at these parameters.
    pub loss: f64,
    /// Sample variance used for variance targeting.
    pub sample_var: f64,
    /// Pre-sample variance `V0` used to start the recursion.
    pub init_var: f64,
    /// One-step-ahead `Q^2` after the last observation.
    pub next_q2: f64,
    /// Last observation of the filtered series.
    pub last_return: f64,
}

impl AssetRiskFit {
    /// One-step-ahead VaR and volatility after the sample.
    pub fn next_var(&self) -> f64 {
        -self.next_q2.sqrt()
    }

    pub fn next_vol(&self) -> f64 {
        self.next_var() / self.params.q
    }
}

/// One step of the variance-targeted recursion.
#[inline]
pub fn step_q2(q2_prev: f64, r_prev: f64, p: &AssetRiskParams, sample_var: f64) -> f64 {
    p.omega_q(sample_var) + p.alpha_q * r_prev * r_prev + p.beta * q2_prev
}

/// Run the recursion over `r`, returning the `Q^2` path and the next value.
fn q2_path(r: &[f64], p: &AssetRiskParams, sample_var: f64, init_var: f64) -> (Vec<f64>, f64) {
    let q2_pre = p.q * p.q * init_var;
    let mut path = Vec::with_capacity(r.len());
    let mut prev = step_q2(q2_pre, init_var.sqrt(), p, sample_var);
    path.push(prev);
    for t in 1..r.len() {
        prev = step_q2(prev, r[t - 1], p, sample_var);
        path.push(prev);
    }
    let next = step_q2(prev, r[r.len() - 1], p, sample_var);
    (path, next)
}

/// Filter VaR, ES and volatility paths for fixed parameters.
pub fn filter_asset(r: &[f64], p: &AssetRiskParams, alpha: RiskLevel, init: InitPolicy) -> Result<AssetRiskFit> {
    if r.len() < MIN_FILTER_LEN {
        return Err(Error::InvalidInput(format!(
            "series of length {} is shorter than {MIN_FILTER_LEN}",
            r.len()
        )));
    }
    p.validate()?;
    let sample_var = stats::variance(r);
    let init_var = init.variance(r);
    let (q2, next_q2) = q2_path(r, p, sample_var, init_var);
    if let Some(t) = q2.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::InfeasibleParams(format!(
            "Q^2 = {} at t = {t} is not positive",
            q2[t]
        )));
    }
    let ratio = p.es_ratio();
    let var_path: Vec<f64> = q2.iter().map(|v| -v.sqrt()).collect();
    let es_path: Vec<f64> = var_path.iter().map(|v| ratio * v).collect();
    let vol_path: Vec<f64> = var_path.iter().map(|v| v / p.q).collect();
    let a = alpha.value();
    let loss = r
        .iter()
        .zip(var_path.iter().zip(&es_path))
        .map(|(&rt, (&qt, &et))| al_score_unchecked(rt, qt, et, a))
        .sum();
    Ok(AssetRiskFit {
        params: *p,
        var_path,
        es_path,
        vol_path,
        loss,
        sample_var,
        init_var,
        next_q2,
        last_return: r[r.len() - 1],
    })
}

/// Stage-one AL loss, `+inf` outside the admissible region.
pub fn stage1_loss(r: &[f64], p: &AssetRiskParams, alpha: f64, sample_var: f64, init_var: f64) -> f64 {
    if p.validate().is_err() {
        return f64::INFINITY;
    }
    let omega = p.omega_q(sample_var);
    let ratio = p.es_ratio();
    let mut q2 = omega + p.alpha_q * init_var + p.beta * p.q * p.q * init_var;
    let mut loss = 0.0;
    for t in 0..r.len() {
        if t > 0 {
            q2 = omega + p.alpha_q * r[t - 1] * r[t - 1] + p.beta * q2;
        }
        if !(q2 > 0.0) {
            return f64::INFINITY;
        }
        let var = -q2.sqrt();
        loss += al_score_unchecked(r[t], var, ratio * var, alpha);
    }
    if loss.is_finite() {
        loss
    } else {
        f64::INFINITY
    }
}

/// Data-driven start: `q` from the empirical quantile of the standardised
/// series, `beta = 0.85`, `alpha_q = 0.1 q^2`, `gamma0 = -0.86`.
pub fn informed_start(r: &[f64], alpha: RiskLevel) -> AssetRiskParams {
    let sd = stats::std_dev(r);
    let z: Vec<f64> = r.iter().map(|v| v / sd).collect();
    let q = stats::empirical_quantile(&z, alpha.value()).clamp(-9.9, -0.11);
    AssetRiskParams {
        alpha_q: (0.1 * q * q).min(9.9),
        beta: 0.85,
        q,
        gamma0: -0.86,
    }
}

/// Estimate stage-one parameters by minimising the AL loss over the box
/// `alpha_q in [0, 10]`, `beta in [0, 0.999]`, `q in [-10, -0.1]`,
/// `gamma0 in [-5, 5]`. The series is expected to be demeaned.
pub fn fit_asset(r: &[f64], alpha: RiskLevel, cfg: &MultistartConfig) -> Result<AssetRiskFit> {
    fit_asset_inner(r, alpha, cfg).map_err(|e| e.in_stage("stage-1"))
}

fn fit_asset_inner(r: &[f64], alpha: RiskLevel, cfg: &MultistartConfig) -> Result<AssetRiskFit> {
    if r.len() < MIN_FIT_LEN {
        return Err(Error::InvalidInput(format!(
            "series of length {} is shorter than {MIN_FIT_LEN}",
            r.len()
        )));
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite return".into()));
    }
    let sample_var = stats::variance(r);
    if !(sample_var > 0.0) {
        return Err(Error::InvalidInput("series has zero variance".into()));
    }
    let init_var = InitPolicy::BurnIn.variance(r);
    let a = alpha.value();
    let objective = |x: &[f64]| stage1_loss(r, &AssetRiskParams::from_slice(x), a, sample_var, init_var);
    let problem = BoundedProblem::new(objective, LOWER_BOUNDS.to_vec(), UPPER_BOUNDS.to_vec())?;
    let start = informed_start(r, alpha).to_vec();
    let best = minimize(&problem, cfg, &[start])?;
    filter_asset(
        r,
        &AssetRiskParams::from_slice(&best.x),
        alpha,
        InitPolicy::Variance(init_var),
    )
}

/// `h_t = Q_t / q` for a fitted model.
pub fn implied_volatility(fit: &AssetRiskFit) -> Vec<f64> {
    fit.var_path.iter().map(|v| v / fit.params.q).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn alpha() -> RiskLevel {
        RiskLevel::new(0.025).unwrap()
    }

    fn normal_series(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
        let m = stats::mean(&x);
        x.iter().map(|v| v - m).collect()
    }

    #[test]
    fn one_step_recursion_by_hand() {
        let p = AssetRiskParams {
            alpha_q: 0.4,
            beta: 0.8,
            q: -(3.8415f64.sqrt()),
            gamma0: -0.861,
        };
        // (3.8415 * 0.2 - 0.4) * 1 + 0.4 * 4 + 0.8 * 3.8415
        assert_abs_diff_eq!(step_q2(3.8415, 2.0, &p, 1.0), 5.0415, epsilon = 1e-10);
    }

    #[test]
    fn degenerate_recursion_is_constant() {
        let r = normal_series(300, 1);
        let p = AssetRiskParams {
            alpha_q: 0.0,
            beta: 0.0,
            q: -1.96,
            gamma0: -0.5,
        };
        let fit = filter_asset(&r, &p, alpha(), InitPolicy::BurnIn).unwrap();
        let expected = -1.96 * stats::variance(&r).sqrt();
        for v in &fit.var_path {
            assert_abs_diff_eq!(*v, expected, epsilon = 1e-12);
        }
        let h = implied_volatility(&fit);
        assert!(h.iter().all(|v| (v - h[0]).abs() < 1e-12));
    }

    #[test]
    fn es_ratio_from_gamma0() {
        let r = normal_series(400, 2);
        let p = AssetRiskParams {
            alpha_q: 0.3,
            beta: 0.8,
            q: -1.96,
            gamma0: -0.8610,
        };
        let fit = filter_asset(&r, &p, alpha(), InitPolicy::BurnIn).unwrap();
        for (q, e) in fit.var_path.iter().zip(&fit.es_path) {
            assert_abs_diff_eq!(e / q, 1.1928, epsilon = 1e-4);
            assert!(e < q && *q < 0.0);
        }
    }

    #[test]
    fn implied_volatility_identity() {
        let r = normal_series(500, 3);
        let p = AssetRiskParams {
            alpha_q: 0.5,
            beta: 0.75,
            q: -2.0,
            gamma0: 0.1,
        };
        let fit = filter_asset(&r, &p, alpha(), InitPolicy::BurnIn).unwrap();
        let h = implied_volatility(&fit);
        assert!(h.iter().all(|v| *v > 0.0));
        for (hv, qv) in h.iter().zip(&fit.var_path) {
            assert_abs_diff_eq!(p.q * hv, *qv, epsilon = 1e-12);
        }
    }

    #[test]
    fn unit_volatility_example() {
        let fit = AssetRiskFit {
            params: AssetRiskParams {
                alpha_q: 0.0,
                beta: 0.0,
                q: -2.0,
                gamma0: 0.0,
            },
            var_path: vec![-2.0, -2.0],
            es_path: vec![-3.0, -3.0],
            vol_path: vec![1.0, 1.0],
            loss: 0.0,
            sample_var: 1.0,
            init_var: 1.0,
            next_q2: 4.0,
            last_return: 0.0,
        };
        assert_eq!(implied_volatility(&fit), vec![1.0, 1.0]);
    }

    #[test]
    fn variance_targeting_identity() {
        // Dividing the Q^2 recursion by q^2 gives a GARCH whose
        // unconditional variance omega / (1 - alpha - beta) equals V(r).
        let p = AssetRiskParams {
            alpha_q: 0.5,
            beta: 0.8,
            q: -2.1,
            gamma0: -0.7,
        };
        let v = 1.7;
        let omega = p.omega_q(v) / (p.q * p.q);
        let uncond = omega / (1.0 - p.garch_alpha() - p.beta);
        assert_abs_diff_eq!(uncond, v, epsilon = 1e-12);
    }

    #[test]
    fn scale_covariance() {
        let r = normal_series(400, 4);
        let p = AssetRiskParams {
            alpha_q: 0.4,
            beta: 0.85,
            q: -1.9,
            gamma0: -0.8,
        };
        let base = filter_asset(&r, &p, alpha(), InitPolicy::BurnIn).unwrap();
        for c in [2.5, -0.3] {
            let scaled: Vec<f64> = r.iter().map(|v| c * v).collect();
            let fit = filter_asset(&scaled, &p, alpha(), InitPolicy::BurnIn).unwrap();
            for (a, b) in fit.var_path.iter().zip(&base.var_path) {
                assert_abs_diff_eq!(*a, c.abs() * b, epsilon = 1e-10);
            }
            for (a, b) in fit.es_path.iter().zip(&base.es_path) {
                assert_abs_diff_eq!(*a, c.abs() * b, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn rejects_inadmissible_parameters() {
        let r = normal_series(100, 5);
        let p = AssetRiskParams {
            alpha_q: 2.0,
            beta: 0.9,
            q: -1.0,
            gamma0: 0.0,
        };
        assert!(matches!(
            filter_asset(&r, &p, alpha(), InitPolicy::BurnIn),
            Err(Error::InfeasibleParams(_))
        ));
        assert!(stage1_loss(&r, &p, 0.025, 1.0, 1.0).is_infinite());
        assert!(filter_asset(&r[..10], &p, alpha(), InitPolicy::BurnIn).is_err());
    }

    #[test]
    fn loss_matches_filtered_paths() {
        let r = normal_series(600, 6);
        let p = AssetRiskParams {
            alpha_q: 0.3,
            beta: 0.85,
            q: -2.0,
            gamma0: -0.9,
        };
        let fit = filter_asset(&r, &p, alpha(), InitPolicy::BurnIn).unwrap();
        let direct = stage1_loss(&r, &p, 0.025, fit.sample_var, fit.init_var);
        assert_abs_diff_eq!(fit.loss, direct, epsilon = 1e-9 * direct.abs());
    }

    #[test]
    fn short_series_is_a_fit_error() {
        let r = normal_series(10, 7);
        let err = fit_asset(&r, alpha(), &MultistartConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Fit { stage: "stage-1", .. }));
    }

    #[test]
    fn iid_data_gives_constant_quantile() {
        let r = normal_series(2000, 8);
        let cfg = MultistartConfig {
            seed: 3,
            ..Default::default()
        };
        let fit = fit_asset(&r, alpha(), &cfg).unwrap();
        assert!(fit.params.garch_alpha() < 0.05, "{:?}", fit.params);
        // A constant-quantile path: the empirical 2.5% quantile lies within
        // one order statistic of the typical fitted VaR level.
        let mut sorted = r.clone();
        sorted.sort_by(f64::total_cmp);
        let k = stats::quantile_rank(r.len(), 0.025) - 1;
        let median_var = {
            let mut v = fit.var_path.clone();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        let spread = fit.var_path.iter().map(|v| (v - median_var).abs()).fold(0.0, f64::max);
        assert!(spread < 0.35, "VaR path spread {spread}");
        let lo = sorted[k - 1];
        let hi = sorted[k + 1];
        assert!(median_var >= lo && median_var <= hi, "{median_var} not in [{lo}, {hi}]");
    }
}
