//! Global Moran's I, local Getis-Ord G* and hotspot district extraction.
//!
//! Weights are binary and symmetric (see [`SpatialWeights`]). Moran's
//! variance uses the randomization assumption; G* includes each unit in its
//! own neighbourhood with weight 1.

use std::collections::{BTreeSet, HashSet, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::CrashRecord;
use crate::normal;
use crate::raster::{Rasterized, SpatialWeights};

/// Two-sided 95% critical value for a standard normal score.
pub const Z_CRIT_95: f64 = 1.96;

#[derive(Debug, Error, PartialEq)]
pub enum SpatialError {
    #[error("need at least {need} units, got {got}")]
    TooFewUnits { need: usize, got: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("weights error: {0}")]
    Weights(String),
    #[error("length mismatch: {values} values for {units} spatial units")]
    LengthMismatch { values: usize, units: usize },
}

type Result<T> = std::result::Result<T, SpatialError>;

fn check_inputs(x: &[f64], w: &SpatialWeights) -> Result<()> {
    if x.len() != w.len() {
        return Err(SpatialError::LengthMismatch {
            values: x.len(),
            units: w.len(),
        });
    }
    if x.len() < 2 {
        return Err(SpatialError::TooFewUnits { need: 2, got: x.len() });
    }
    Ok(())
}

fn deviations(x: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let z: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let m2: f64 = z.iter().map(|d| d * d).sum();
    let scale = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m2 <= (f64::EPSILON * scale).powi(2) * n {
        return Err(SpatialError::Degenerate("attribute values are constant".into()));
    }
    Ok((z, m2))
}

fn moran_from_deviations(z: &[f64], m2: f64, w: &SpatialWeights) -> f64 {
    let n = z.len() as f64;
    let cross: f64 = (0..z.len())
        .map(|i| z[i] * w.neighbors(i).iter().map(|&j| z[j]).sum::<f64>())
        .sum();
    n / w.s0() * cross / m2
}

/// Global Moran's I.
pub fn morans_i(x: &[f64], w: &SpatialWeights) -> Result<f64> {
    check_inputs(x, w)?;
    if w.s0() == 0.0 {
        return Err(SpatialError::Weights("no unit has any neighbour".into()));
    }
    let (z, m2) = deviations(x)?;
    Ok(moran_from_deviations(&z, m2, w))
}

/// E[I] = −1/(n−1) under the null of no spatial autocorrelation.
pub fn morans_expectation(n: usize) -> Result<f64> {
    if n < 2 {
        return Err(SpatialError::TooFewUnits { need: 2, got: n });
    }
    Ok(-1.0 / (n as f64 - 1.0))
}

fn for_each_permutation(items: &mut Vec<f64>, k: usize, f: &mut impl FnMut(&[f64])) {
    if k == items.len() {
        f(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        for_each_permutation(items, k + 1, f);
        items.swap(k, i);
    }
}

/// Variance of I under randomization.
///
/// For n ≥ 4 this is the closed-form randomization variance built from
/// S0, S1, S2 and the sample kurtosis. For n < 4 the closed form is
/// undefined and the exact variance over all n! permutations is returned.
pub fn morans_variance(x: &[f64], w: &SpatialWeights) -> Result<f64> {
    check_inputs(x, w)?;
    let s0 = w.s0();
    if s0 == 0.0 {
        return Err(SpatialError::Weights("no unit has any neighbour".into()));
    }
    let (z, m2) = deviations(x)?;
    let n = x.len();
    if n < 4 {
        let mut values = Vec::new();
        let mut items = z.clone();
        for_each_permutation(&mut items, 0, &mut |p| values.push(moran_from_deviations(p, m2, w)));
        let k = values.len() as f64;
        let mean = values.iter().sum::<f64>() / k;
        return Ok(values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k);
    }

    let nf = n as f64;
    // Binary symmetric weights: (w_ij + w_ji)^2 = 4 on every stored link.
    let s1 = 0.5 * 4.0 * s0;
    let s2: f64 = (0..n).map(|i| (2.0 * w.degree(i) as f64).powi(2)).sum();
    let m4: f64 = z.iter().map(|d| d.powi(4)).sum();
    let b2 = nf * m4 / (m2 * m2);
    let a = nf * ((nf * nf - 3.0 * nf + 3.0) * s1 - nf * s2 + 3.0 * s0 * s0);
    let b = b2 * ((nf * nf - nf) * s1 - 2.0 * nf * s2 + 6.0 * s0 * s0);
    let e = -1.0 / (nf - 1.0);
    Ok((a - b) / ((nf - 1.0) * (nf - 2.0) * (nf - 3.0) * s0 * s0) - e * e)
}

/// Standard score and two-sided normal p-value.
pub fn morans_z(i: f64, expectation: f64, variance: f64) -> Result<(f64, f64)> {
    if !(variance > 0.0) {
        return Err(SpatialError::Degenerate(format!(
            "Moran variance is {variance}; the statistic has no spread"
        )));
    }
    let z = (i - expectation) / variance.sqrt();
    Ok((z, normal::two_sided_p(z)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoranResult {
    #[serde(rename = "I")]
    pub i: f64,
    #[serde(rename = "E")]
    pub expectation: f64,
    #[serde(rename = "V")]
    pub variance: f64,
    pub z: f64,
    #[serde(rename = "p")]
    pub p_two_sided: f64,
}

impl MoranResult {
    /// |z| > 1.96.
    pub fn significant(&self) -> bool {
        self.z.abs() > Z_CRIT_95
    }
}

pub fn morans_test(x: &[f64], w: &SpatialWeights) -> Result<MoranResult> {
    let i = morans_i(x, w)?;
    let expectation = morans_expectation(x.len())?;
    let variance = morans_variance(x, w)?;
    // Rounding noise in the closed form can leave a tiny positive variance
    // when the permutation distribution is in fact a point mass.
    if variance <= 1e-12 * expectation * expectation {
        return Err(SpatialError::Degenerate(format!(
            "Moran variance is {variance}; the statistic has no spread"
        )));
    }
    let (z, p_two_sided) = morans_z(i, expectation, variance)?;
    Ok(MoranResult {
        i,
        expectation,
        variance,
        z,
        p_two_sided,
    })
}

/// Mean and variance of I over random relabelings of `x`. Intended for
/// validating the analytic moments, not for reporting.
pub fn morans_permutation_moments<R: Rng>(
    x: &[f64],
    w: &SpatialWeights,
    n_perm: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    morans_i(x, w)?;
    let (mut z, m2) = deviations(x)?;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_perm {
        z.shuffle(rng);
        let v = moran_from_deviations(&z, m2, w);
        sum += v;
        sum_sq += v * v;
    }
    let k = n_perm as f64;
    let mean = sum / k;
    Ok((mean, (sum_sq / k - mean * mean) * k / (k - 1.0)))
}

/// Local G* standard scores, one per unit.
pub fn getis_ord_gstar(x: &[f64], w: &SpatialWeights) -> Result<Vec<f64>> {
    check_inputs(x, w)?;
    let (_, m2) = deviations(x)?;
    let n = x.len();
    let nf = n as f64;
    let mean = x.iter().sum::<f64>() / nf;
    let s = (m2 / nf).sqrt();
    Ok((0..n)
        .map(|i| {
            let neighbors = w.neighbors(i);
            let local: f64 = x[i] + neighbors.iter().map(|&j| x[j]).sum::<f64>();
            // binary weights: sum of w equals sum of w^2
            let wsum = (neighbors.len() + 1) as f64;
            let numerator = local - mean * wsum;
            let spread = (nf * wsum - wsum * wsum) / (nf - 1.0);
            if spread <= 0.0 {
                // every unit is in the neighbourhood; the numerator is zero too
                0.0
            } else {
                numerator / (s * spread.sqrt())
            }
        })
        .collect())
}

/// Confidence bins for local scores, ordered from cold to hot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HotspotCategory {
    Cold99,
    Cold95,
    Cold90,
    NotSignificant,
    Hot90,
    Hot95,
    Hot99,
}

impl HotspotCategory {
    pub fn from_z(z: f64) -> Self {
        use HotspotCategory::*;
        let a = z.abs();
        let hot = z > 0.0;
        if a >= 2.576 {
            if hot { Hot99 } else { Cold99 }
        } else if a >= 1.960 {
            if hot { Hot95 } else { Cold95 }
        } else if a >= 1.645 {
            if hot { Hot90 } else { Cold90 }
        } else {
            NotSignificant
        }
    }

    pub fn as_str(self) -> &'static str {
        use HotspotCategory::*;
        match self {
            Cold99 => "cold99",
            Cold95 => "cold95",
            Cold90 => "cold90",
            NotSignificant => "not_significant",
            Hot90 => "hot90",
            Hot95 => "hot95",
            Hot99 => "hot99",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HotspotLabel {
    pub category: HotspotCategory,
    pub z: f64,
}

pub fn classify_hotspots(z: &[f64]) -> Vec<HotspotLabel> {
    z.iter()
        .map(|&z| HotspotLabel {
            category: HotspotCategory::from_z(z),
            z,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistrictOptions {
    /// Weakest category that qualifies a cell as hot.
    pub level: HotspotCategory,
    pub k: usize,
    pub min_cells: usize,
}

impl Default for DistrictOptions {
    fn default() -> Self {
        DistrictOptions {
            level: HotspotCategory::Hot90,
            k: 4,
            min_cells: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct District {
    /// 1-based rank by crash count.
    pub district_id: usize,
    pub member_cells: Vec<(usize, usize)>,
    pub crash_count: usize,
    pub records: Vec<CrashRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DistrictExtraction {
    pub districts: Vec<District>,
    pub warnings: Vec<String>,
}

/// Group qualifying hot cells into queen-connected components and keep the
/// `k` components with most crashes among those with at least `min_cells`
/// cells.
pub fn extract_districts(
    raster: &Rasterized,
    weights: &SpatialWeights,
    labels: &[HotspotLabel],
    records: &[CrashRecord],
    opts: &DistrictOptions,
) -> Result<DistrictExtraction> {
    let cells = &raster.cells;
    if labels.len() != cells.len() || weights.len() != cells.len() {
        return Err(SpatialError::LengthMismatch {
            values: labels.len(),
            units: cells.len(),
        });
    }
    if opts.k == 0 {
        return Err(SpatialError::Degenerate("district count k must be at least 1".into()));
    }
    if opts.level <= HotspotCategory::NotSignificant {
        return Err(SpatialError::Degenerate(format!(
            "qualifying level {:?} is not a hot category",
            opts.level
        )));
    }
    let hot: Vec<bool> = labels.iter().map(|l| l.category >= opts.level).collect();

    let mut seen = vec![false; cells.len()];
    let mut components: Vec<Vec<usize>> = Vec::new();
    for start in 0..cells.len() {
        if !hot[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            for &j in weights.neighbors(i) {
                if hot[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        comp.sort_unstable();
        components.push(comp);
    }

    let mut ranked: Vec<(usize, Vec<usize>)> = components
        .into_iter()
        .filter(|c| c.len() >= opts.min_cells)
        .map(|c| (c.iter().map(|&i| cells[i].crash_count).sum(), c))
        .collect();
    // Cells are in (row, col) order, so c[0] is the component's first cell.
    ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1[0].cmp(&b.1[0])));

    let mut warnings = Vec::new();
    if ranked.len() < opts.k {
        let msg = format!(
            "requested {} districts but only {} hot components have at least {} cells",
            opts.k,
            ranked.len(),
            opts.min_cells
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let districts = ranked
        .into_iter()
        .take(opts.k)
        .enumerate()
        .map(|(rank, (crash_count, comp))| {
            let member_cells: Vec<(usize, usize)> =
                comp.iter().map(|&i| (cells[i].row, cells[i].col)).collect();
            let members: HashSet<(usize, usize)> = member_cells.iter().copied().collect();
            let recs = records
                .iter()
                .zip(&raster.assignment)
                .filter(|(_, a)| a.is_some_and(|c| members.contains(&c)))
                .map(|(r, _)| r.clone())
                .collect();
            District {
                district_id: rank + 1,
                member_cells,
                crash_count,
                records: recs,
            }
        })
        .collect();
    Ok(DistrictExtraction { districts, warnings })
}

/// Cells claimed by more than one district (always empty for output of
/// [`extract_districts`]).
pub fn overlapping_cells(districts: &[District]) -> BTreeSet<(usize, usize)> {
    let mut seen = HashSet::new();
    let mut dup = BTreeSet::new();
    for d in districts {
        for &c in &d.member_cells {
            if !seen.insert(c) {
                dup.insert(c);
            }
        }
    }
    dup
}
