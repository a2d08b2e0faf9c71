//! Post-estimation quantities derived from the Cholesky factor and the fit.

use super::ProbitError;
use crate::normal;

/// Standard deviation of random coefficient `k`: the norm of row `k` of Γ.
pub fn random_param_stddev(cholesky: &[Vec<f64>], k: usize) -> Result<f64, ProbitError> {
    let row = cholesky
        .get(k)
        .ok_or_else(|| ProbitError::Domain(format!("random coefficient {k} out of range")))?;
    Ok(row.iter().take(k + 1).map(|v| v * v).sum::<f64>().sqrt())
}

/// ΓΓ'.
pub fn random_param_covariance(cholesky: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = cholesky.len();
    (0..k)
        .map(|i| {
            (0..k)
                .map(|j| (0..=i.min(j)).map(|l| cholesky[i][l] * cholesky[j][l]).sum())
                .collect()
        })
        .collect()
}

/// Correlation matrix of the random coefficients. `names` label errors.
pub fn random_param_correlation(cholesky: &[Vec<f64>], names: &[String]) -> Result<Vec<Vec<f64>>, ProbitError> {
    let cov = random_param_covariance(cholesky);
    let sd: Vec<f64> = (0..cov.len()).map(|i| cov[i][i].sqrt()).collect();
    if let Some(i) = sd.iter().position(|s| !(*s > 0.0)) {
        let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
        return Err(ProbitError::Degenerate(format!(
            "random coefficient {name} has zero standard deviation"
        )));
    }
    Ok(cov
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(j, c)| if i == j { 1.0 } else { (c / (sd[i] * sd[j])).clamp(-1.0, 1.0) })
                .collect()
        })
        .collect())
}

/// Fractions of a N(mean, sigma²) coefficient above and below zero.
/// With `sigma == 0` all mass sits on the sign of `mean`.
pub fn share_above_zero(mean: f64, sigma: f64) -> Result<(f64, f64), ProbitError> {
    if sigma < 0.0 || sigma.is_nan() || mean.is_nan() {
        return Err(ProbitError::Domain(format!("invalid mean {mean} / sigma {sigma}")));
    }
    if sigma == 0.0 {
        return match mean.partial_cmp(&0.0) {
            Some(std::cmp::Ordering::Greater) => Ok((1.0, 0.0)),
            Some(std::cmp::Ordering::Less) => Ok((0.0, 1.0)),
            _ => Err(ProbitError::Degenerate("coefficient is identically zero".into())),
        };
    }
    let above = normal::sf(-mean / sigma);
    Ok((above, 1.0 - above))
}

/// 2k − 2 LL.
pub fn aic(n_params: usize, loglik: f64) -> f64 {
    2.0 * n_params as f64 - 2.0 * loglik
}

/// 1 − LL / LL0.
pub fn rho_squared(loglik: f64, loglik0: f64) -> f64 {
    1.0 - loglik / loglik0
}

/// Maximized log-likelihood of the thresholds-only model, Σ n_j ln(n_j / N).
pub fn thresholds_only_loglik(counts: [usize; 3]) -> f64 {
    let n: usize = counts.iter().sum();
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| c as f64 * (c as f64 / n as f64).ln())
        .sum()
}
