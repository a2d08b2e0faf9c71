//! Halton low-discrepancy sequences.

use serde::{Deserialize, Serialize};

use super::ProbitError;
use crate::normal;

/// Radical inverse of `index` in `base`. `index` must be at least 1.
pub fn halton(index: u64, base: u32) -> Result<f64, ProbitError> {
    if index == 0 {
        return Err(ProbitError::Domain("Halton index must be at least 1".into()));
    }
    if base < 2 {
        return Err(ProbitError::Domain(format!("Halton base must be at least 2, got {base}")));
    }
    let b = base as u64;
    let mut i = index;
    let mut f = 1.0;
    let mut value = 0.0;
    while i > 0 {
        f /= base as f64;
        value += f * (i % b) as f64;
        i /= b;
    }
    Ok(value)
}

fn is_prime(n: u32) -> bool {
    n >= 2 && (2..).take_while(|d| d * d <= n).all(|d| n % d != 0)
}

/// The first `count` primes.
pub fn first_primes(count: usize) -> Vec<u32> {
    (2u32..).filter(|&n| is_prime(n)).take(count).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HaltonConfig {
    /// One base per random dimension; empty means 2, 3, 5, ... in order.
    pub bases: Vec<u32>,
    /// Leading points discarded from each sequence.
    pub skip: u64,
}

impl Default for HaltonConfig {
    fn default() -> Self {
        HaltonConfig {
            bases: Vec::new(),
            skip: 10,
        }
    }
}

impl HaltonConfig {
    pub fn bases_for(&self, dims: usize) -> Result<Vec<u32>, ProbitError> {
        if self.bases.is_empty() {
            return Ok(first_primes(dims));
        }
        if self.bases.len() < dims {
            return Err(ProbitError::Spec(format!(
                "{} Halton bases configured for {dims} random dimensions",
                self.bases.len()
            )));
        }
        let bases = self.bases[..dims].to_vec();
        for (i, &b) in bases.iter().enumerate() {
            if !is_prime(b) {
                return Err(ProbitError::Spec(format!("Halton base {b} is not prime")));
            }
            if bases[..i].contains(&b) {
                return Err(ProbitError::Spec(format!("Halton base {b} repeated")));
            }
        }
        Ok(bases)
    }

    /// Standard-normal draws, row-major `n_draws x dims`: draw `r` in
    /// dimension `k` is Φ⁻¹ of point `skip + r + 1` of the base-`k` sequence.
    pub fn normal_draws(&self, n_draws: usize, dims: usize) -> Result<Vec<f64>, ProbitError> {
        let bases = self.bases_for(dims)?;
        let mut out = Vec::with_capacity(n_draws * dims);
        for r in 0..n_draws {
            for &b in &bases {
                let u = halton(self.skip + r as u64 + 1, b)?;
                out.push(normal::inverse_cdf(u).map_err(|e| ProbitError::Domain(e.to_string()))?);
            }
        }
        Ok(out)
    }
}
