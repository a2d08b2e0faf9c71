//! Likelihood-ratio tests of parameter transferability between districts and
//! of pooled versus district-specific models.

use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_lr;
use thiserror::Error;

use crate::probit::{Dataset, EstimationResult, MissingPolicy, ProbitError};

/// Default confidence level for `reject_null`.
pub const DEFAULT_LEVEL: f64 = 0.90;

#[derive(Debug, Error)]
pub enum StabilityError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid test: {0}")]
    Spec(String),
    #[error(transparent)]
    Probit(#[from] ProbitError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, StabilityError>;

/// P(X ≤ x) for X ~ χ²(df), the regularized lower incomplete gamma P(df/2, x/2).
pub fn chi_square_cdf(x: f64, df: u32) -> Result<f64> {
    if df == 0 {
        return Err(StabilityError::Domain("degrees of freedom must be positive".into()));
    }
    if !(x >= 0.0) {
        return Err(StabilityError::Domain(format!("chi-square statistic must be non-negative, got {x}")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x.is_infinite() {
        return Ok(1.0);
    }
    Ok(gamma_lr(f64::from(df) / 2.0, x / 2.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrTestResult {
    pub chi2: f64,
    pub df: u32,
    /// χ² CDF at the statistic; 0 for an anomalous (negative) statistic.
    pub confidence: f64,
    pub level: f64,
    pub reject_null: bool,
    /// The restricted model fit better than the unrestricted one.
    pub anomaly: bool,
}

impl LrTestResult {
    fn from_statistic(chi2: f64, df: u32, level: f64) -> Result<Self> {
        if !(level > 0.0 && level < 1.0) {
            return Err(StabilityError::Domain(format!("confidence level must be in (0, 1), got {level}")));
        }
        if chi2.is_nan() {
            return Err(StabilityError::Domain("chi-square statistic is NaN".into()));
        }
        let anomaly = chi2 < 0.0;
        let confidence = if anomaly {
            if df == 0 {
                return Err(StabilityError::Domain("degrees of freedom must be positive".into()));
            }
            log::warn!("negative likelihood-ratio statistic {chi2}; the restricted model fits better");
            0.0
        } else {
            chi_square_cdf(chi2, df)?
        };
        Ok(LrTestResult {
            chi2,
            df,
            confidence,
            level,
            reject_null: !anomaly && confidence > level,
            anomaly,
        })
    }

    /// `20.00(10) [97.1%]`.
    pub fn format_cell(&self) -> String {
        let conf = if self.confidence > 0.999 {
            ">99.9%".to_string()
        } else {
            format!("{:.1}%", 100.0 * self.confidence)
        };
        format!("{:.2}({}) [{}]", self.chi2, self.df, conf)
    }
}

/// −2 [LL(other district's parameters on this data) − LL(own parameters)].
pub fn lr_transfer_test(ll_own: f64, ll_transferred: f64, df: u32, level: f64) -> Result<LrTestResult> {
    LrTestResult::from_statistic(-2.0 * (ll_transferred - ll_own), df, level)
}

/// −2 [LL(pooled) − Σ LL(district)].
pub fn lr_pooled_test(ll_full: f64, ll_districts: &[f64], df: u32, level: f64) -> Result<LrTestResult> {
    if ll_districts.is_empty() {
        return Err(StabilityError::Spec("pooled test needs at least one district".into()));
    }
    let sum: f64 = ll_districts.iter().sum();
    LrTestResult::from_statistic(-2.0 * (ll_full - sum), df, level)
}

/// Σ district parameter counts − pooled parameter count.
pub fn pooled_df(district_params: &[usize], full_params: usize) -> Result<u32> {
    let total: usize = district_params.iter().sum();
    total
        .checked_sub(full_params)
        .filter(|&d| d > 0)
        .and_then(|d| u32::try_from(d).ok())
        .ok_or_else(|| {
            StabilityError::Spec(format!(
                "district models have {total} parameters in total, pooled model has {full_params}; no positive df"
            ))
        })
}

/// A fitted district model with the data it was fitted on.
#[derive(Debug, Clone, Copy)]
pub struct DistrictFit<'a> {
    pub id: usize,
    pub result: &'a EstimationResult,
    pub data: &'a Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub ids: Vec<usize>,
    /// `cells[a][b]`: district `b`'s parameters on district `a`'s data.
    pub cells: Vec<Vec<Option<LrTestResult>>>,
}

/// Pairwise transferability tests. Parameters are evaluated, never re-fit,
/// on the other district's data; covariates it lacks count as zero.
pub fn transfer_matrix(fits: &[DistrictFit<'_>], level: f64) -> Result<TransferMatrix> {
    let n = fits.len();
    let own: Vec<f64> = fits
        .iter()
        .map(|f| f.result.loglik_on(f.data, MissingPolicy::ZeroFill))
        .collect::<std::result::Result<_, _>>()?;
    let mut cells = vec![vec![None; n]; n];
    for (a, target) in fits.iter().enumerate() {
        for (b, source) in fits.iter().enumerate() {
            if a == b {
                continue;
            }
            let transferred = source.result.loglik_on(target.data, MissingPolicy::ZeroFill)?;
            let df = u32::try_from(source.result.n_params)
                .map_err(|_| StabilityError::Spec("parameter count overflows".into()))?;
            cells[a][b] = Some(lr_transfer_test(own[a], transferred, df, level)?);
        }
    }
    Ok(TransferMatrix {
        ids: fits.iter().map(|f| f.id).collect(),
        cells,
    })
}

impl TransferMatrix {
    /// Grid with rows for the data district and columns for the parameter
    /// source, each cell as `chi2(df) [confidence]`.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        let mut header = vec!["data\\params".to_string()];
        header.extend(self.ids.iter().map(|id| format!("district_{id}")));
        w.write_record(&header)?;
        for (id, row) in self.ids.iter().zip(&self.cells) {
            let mut rec = vec![format!("district_{id}")];
            rec.extend(row.iter().map(|c| c.as_ref().map(LrTestResult::format_cell).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn populated(&self) -> usize {
        self.cells.iter().flatten().filter(|c| c.is_some()).count()
    }
}
