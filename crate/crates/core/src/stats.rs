//! Sample statistics shared by estimation, simulation and evaluation code.

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Variance with `1/m` normalisation.
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
}

pub fn std_dev(x: &[f64]) -> f64 {
    variance(x).sqrt()
}

fn sorted(x: &[f64]) -> Vec<f64> {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Rank (1-based) of the lower empirical `alpha`-quantile: `ceil(alpha * m)`,
/// at least 1.
pub fn quantile_rank(m: usize, alpha: f64) -> usize {
    ((alpha * m as f64).ceil() as usize).clamp(1, m)
}

/// Lower empirical quantile: the `ceil(alpha m)`-th order statistic. This is
/// a minimiser of the summed quantile loss over constant forecasts.
pub fn empirical_quantile(x: &[f64], alpha: f64) -> f64 {
    assert!(!x.is_empty(), "quantile of empty sample");
    let s = sorted(x);
    s[quantile_rank(s.len(), alpha) - 1]
}

/// Lower empirical quantile and the mean of the observations at or below it.
pub fn quantile_and_tail_mean(x: &[f64], alpha: f64) -> (f64, f64) {
    assert!(!x.is_empty(), "quantile of empty sample");
    let s = sorted(x);
    let k = quantile_rank(s.len(), alpha);
    let q = s[k - 1];
    let tail = &s[..k];
    (q, mean(tail))
}

/// Quantile by linear interpolation between order statistics at position
/// `(m - 1) alpha` (the "type 7" definition).
pub fn interpolated_quantile(x: &[f64], alpha: f64) -> f64 {
    assert!(!x.is_empty(), "quantile of empty sample");
    let s = sorted(x);
    let pos = (s.len() - 1) as f64 * alpha.clamp(0.0, 1.0);
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

/// Empirical ES to pair with [`interpolated_quantile`]: mean of the
/// observations at or below the interpolated quantile.
pub fn interpolated_tail_mean(x: &[f64], alpha: f64) -> f64 {
    let q = interpolated_quantile(x, alpha);
    let tail: Vec<f64> = x.iter().copied().filter(|&v| v <= q).collect();
    if tail.is_empty() {
        q
    } else {
        mean(&tail)
    }
}

pub fn rmse(errors: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = errors
        .into_iter()
        .fold((0.0, 0usize), |(s, n), e| (s + e * e, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        (sum / n as f64).sqrt()
    }
}
