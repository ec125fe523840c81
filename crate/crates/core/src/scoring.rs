//! Consistent scoring functions for VaR and for the (VaR, ES) pair.
//!
//! The joint score is the negative log of the asymmetric-Laplace
//! quasi-density
//!
//! ```text
//! p(r | Q, ES) = (alpha - 1) / ES * exp((r - Q)(alpha - 1{r <= Q}) / (alpha ES))
//! ```
//!
//! which requires `ES < 0`. It is used both as the estimation objective for
//! every model in this crate and as an out-of-sample evaluation metric.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tail probability `alpha` in `(0, 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct RiskLevel(f64);

impl RiskLevel {
    pub fn new(alpha: f64) -> Result<Self> {
        if alpha > 0.0 && alpha < 0.5 {
            Ok(RiskLevel(alpha))
        } else {
            Err(Error::InvalidInput(format!(
                "risk level must lie in (0, 0.5), got {alpha}"
            )))
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for RiskLevel {
    fn default() -> Self {
        RiskLevel(0.025)
    }
}

impl TryFrom<f64> for RiskLevel {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        RiskLevel::new(v)
    }
}

impl From<RiskLevel> for f64 {
    fn from(r: RiskLevel) -> f64 {
        r.0
    }
}

/// A (VaR, ES) forecast pair. Both are return-space levels, negative for
/// the left tail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointForecast {
    pub var: f64,
    pub es: f64,
}

impl JointForecast {
    pub fn new(var: f64, es: f64) -> Self {
        JointForecast { var, es }
    }
}

/// `(r - q)(alpha - 1{r <= q})`.
#[inline]
pub fn quantile_loss(r: f64, q: f64, alpha: RiskLevel) -> f64 {
    let a = alpha.value();
    let hit = if r <= q { 1.0 } else { 0.0 };
    (r - q) * (a - hit)
}

/// Joint score without the domain check; `+inf` when `es >= 0`.
#[inline]
pub(crate) fn al_score_unchecked(r: f64, var: f64, es: f64, alpha: f64) -> f64 {
    if !(es < 0.0) {
        return f64::INFINITY;
    }
    let hit = if r <= var { 1.0 } else { 0.0 };
    -((alpha - 1.0) / es).ln() - (r - var) * (alpha - hit) / (alpha * es)
}

/// AL log-score of the pair `f` for the realised return `r`.
pub fn al_log_score(r: f64, f: JointForecast, alpha: RiskLevel) -> Result<f64> {
    if !(f.es < 0.0) {
        return Err(Error::Domain(format!(
            "AL score requires ES < 0, got {}",
            f.es
        )));
    }
    Ok(al_score_unchecked(r, f.var, f.es, alpha.value()))
}

/// Totals of the quantile loss and of the AL log-score over a series.
pub fn sum_scores(
    returns: &[f64],
    forecasts: &[JointForecast],
    alpha: RiskLevel,
) -> Result<(f64, f64)> {
    if returns.len() != forecasts.len() {
        return Err(Error::dim(returns.len(), forecasts.len()));
    }
    let mut q_total = 0.0;
    let mut joint_total = 0.0;
    for (&r, &f) in returns.iter().zip(forecasts) {
        q_total += quantile_loss(r, f.var, alpha);
        joint_total += al_log_score(r, f, alpha)?;
    }
    Ok((q_total, joint_total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn a() -> RiskLevel {
        RiskLevel::new(0.025).unwrap()
    }

    #[test]
    fn risk_level_bounds() {
        assert!(RiskLevel::new(0.0).is_err());
        assert!(RiskLevel::new(0.5).is_err());
        assert!(RiskLevel::new(0.01).is_ok());
    }

    #[test]
    fn quantile_loss_examples() {
        assert_abs_diff_eq!(quantile_loss(1.0, -2.0, a()), 0.075, epsilon = 1e-15);
        assert_eq!(quantile_loss(-1.3, -1.3, a()), 0.0);
        assert_abs_diff_eq!(quantile_loss(-3.0, -2.0, a()), 0.975, epsilon = 1e-15);
    }

    #[test]
    fn al_score_examples() {
        let f = JointForecast::new(-1.5, -2.0);
        assert_abs_diff_eq!(al_log_score(-2.0, f, a()).unwrap(), 10.4685, epsilon = 1e-3);
        assert_abs_diff_eq!(al_log_score(0.0, f, a()).unwrap(), 1.4685, epsilon = 1e-3);
        assert!(matches!(
            al_log_score(0.0, JointForecast::new(-1.0, 1.0), a()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn sum_scores_edge_cases() {
        assert_eq!(sum_scores(&[], &[], a()).unwrap(), (0.0, 0.0));
        let f = JointForecast::new(-1.5, -2.0);
        let (q, j) = sum_scores(&[-2.0], &[f], a()).unwrap();
        assert_eq!(q, quantile_loss(-2.0, -1.5, a()));
        assert_eq!(j, al_log_score(-2.0, f, a()).unwrap());
        assert!(matches!(
            sum_scores(&[1.0, 2.0], &[f], a()),
            Err(Error::Dimension { .. })
        ));
    }

    proptest! {
        #[test]
        fn quantile_loss_is_nonnegative(r in -1e3f64..1e3, q in -1e3f64..1e3, alpha in 0.001f64..0.499) {
            let l = quantile_loss(r, q, RiskLevel::new(alpha).unwrap());
            prop_assert!(l >= 0.0);
            if r != q {
                prop_assert!(l > 0.0);
            }
        }
    }
}
