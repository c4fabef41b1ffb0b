//! Reference distributions: central F and chi-square tail probabilities and
//! quantiles, noncentral chi-square sampling, and a Kolmogorov-Smirnov
//! statistic for the distributional test harness.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use statrs::distribution::{ChiSquared as ChiSquaredDist, ContinuousCDF, FisherSnedecor};

use crate::error::{Error, Result};

/// Upper-tail probability of `F(d1, d2)`.
pub fn f_sf(x: f64, d1: f64, d2: f64) -> Result<f64> {
    if x <= 0.0 {
        return Ok(1.0);
    }
    let dist = FisherSnedecor::new(d1, d2)
        .map_err(|e| Error::invalid(format!("F({d1}, {d2}): {e}")))?;
    Ok(1.0 - dist.cdf(x))
}

/// Upper-tail probability of `chi2(k)`.
pub fn chi2_sf(x: f64, k: f64) -> Result<f64> {
    if x <= 0.0 {
        return Ok(1.0);
    }
    let dist = ChiSquaredDist::new(k)
        .map_err(|e| Error::invalid(format!("chi2({k}): {e}")))?;
    Ok(1.0 - dist.cdf(x))
}

/// Quantile of `F(d1, d2)`.
pub fn f_quantile(p: f64, d1: f64, d2: f64) -> Result<f64> {
    let dist = FisherSnedecor::new(d1, d2)
        .map_err(|e| Error::invalid(format!("F({d1}, {d2}): {e}")))?;
    Ok(dist.inverse_cdf(p))
}

/// Quantile of `chi2(k)`.
pub fn chi2_quantile(p: f64, k: f64) -> Result<f64> {
    let dist = ChiSquaredDist::new(k)
        .map_err(|e| Error::invalid(format!("chi2({k}): {e}")))?;
    Ok(dist.inverse_cdf(p))
}

/// CDF of `chi2(k)` at `x`.
pub fn chi2_cdf(x: f64, k: f64) -> Result<f64> {
    let dist = ChiSquaredDist::new(k)
        .map_err(|e| Error::invalid(format!("chi2({k}): {e}")))?;
    Ok(dist.cdf(x))
}

/// Draws from the noncentral chi-square `chi2(n; delta)` via the exact
/// decomposition `chi2(n-1) + (Z + sqrt(delta))^2`.
pub fn sample_noncentral_chi2(n: u64, delta: f64, rng: &mut ChaCha12Rng) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("noncentral chi-square needs n >= 1"));
    }
    if delta.is_nan() || delta < 0.0 {
        return Err(Error::invalid("noncentrality must be nonnegative"));
    }
    if delta == 0.0 {
        let d = ChiSquared::new(n as f64).map_err(|e| Error::invalid(e.to_string()))?;
        return Ok(d.sample(rng));
    }
    let z: f64 = rng.sample(StandardNormal);
    let shifted = (z + delta.sqrt()).powi(2);
    if n == 1 {
        return Ok(shifted);
    }
    let d = ChiSquared::new((n - 1) as f64).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(d.sample(rng) + shifted)
}

/// Two-sided Kolmogorov-Smirnov distance between a sample and a reference CDF.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = sample.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite sample"));
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        d = d.max((f - lo).abs()).max((hi - f).abs());
    }
    d
}

/// Asymptotic 1% critical value of the KS distance, `K_0.99 / sqrt(n)` with
/// `K_0.99 = 1.62762` from the Kolmogorov distribution.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.62762 / (n as f64).sqrt()
}
