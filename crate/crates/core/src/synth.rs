//! Seeded synthetic data: ordered probit samples with known parameters, and
//! crash records with planted high-severity clusters on a grid.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{CrashRecord, KabcoLevel, SeverityClass, COVARIATES};
use crate::probit::likelihood::draw_coefficients;
use crate::probit::{Dataset, ModelSpec, Parameters, ProbitError, CONSTANT};
use crate::raster::{GridSpec, RasterError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic design: {0}")]
    Design(String),
    #[error(transparent)]
    Probit(#[from] ProbitError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// A model specification together with the parameters that generate data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbitTruth {
    pub spec: ModelSpec,
    pub params: Parameters,
}

impl ProbitTruth {
    fn check(&self) -> Result<(), SynthError> {
        self.spec.validate()?;
        let fixed = self.spec.fixed_names();
        let random = self.spec.random_names();
        let p = &self.params;
        let shapes_ok = p.beta_fixed.len() == fixed.len()
            && p.beta_random_mean.len() == random.len()
            && p.cholesky.len() == random.len()
            && p.cholesky.iter().all(|r| r.len() == random.len())
            && p.eta.len() == random.len()
            && random
                .iter()
                .zip(&p.eta)
                .all(|(r, e)| e.len() == self.spec.mean_shifters.get(r).map_or(0, Vec::len));
        if !shapes_ok {
            return Err(SynthError::Design("parameter shapes do not match the specification".into()));
        }
        if !(p.threshold_u1 > 0.0) {
            return Err(SynthError::Design(format!("threshold must be positive, got {}", p.threshold_u1)));
        }
        Ok(())
    }

    /// Draw one outcome given a lookup for covariate values.
    fn draw_class<R: Rng, F: Fn(&str) -> f64>(&self, value: F, rng: &mut R) -> Result<SeverityClass, SynthError> {
        let x = |name: &str| if name == CONSTANT { 1.0 } else { value(name) };
        let random = self.spec.random_names();
        let shifters: Vec<Vec<f64>> = random
            .iter()
            .map(|r| {
                self.spec
                    .mean_shifters
                    .get(r)
                    .map(|zs| zs.iter().map(|z| x(z)).collect())
                    .unwrap_or_default()
            })
            .collect();
        let omega: Vec<f64> = (0..random.len()).map(|_| rng.sample(StandardNormal)).collect();
        let coef = draw_coefficients(&self.params, &shifters, &omega)?;
        let xb: f64 = self
            .spec
            .fixed_names()
            .iter()
            .chain(&random)
            .zip(&coef)
            .map(|(name, b)| b * x(name))
            .sum();
        let latent = xb + rng.sample::<f64, _>(StandardNormal);
        let class = if latent < 0.0 {
            SeverityClass::NONE
        } else if latent < self.params.threshold_u1 {
            SeverityClass::MINOR
        } else {
            SeverityClass::SERIOUS
        };
        Ok(class)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateDist {
    Bernoulli { p: f64 },
    Normal { mean: f64, sd: f64 },
    /// Uniform over a finite set of values.
    Levels { values: Vec<f64> },
}

impl CovariateDist {
    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            CovariateDist::Bernoulli { p } => f64::from(u8::from(rng.gen::<f64>() < *p)),
            CovariateDist::Normal { mean, sd } => mean + sd * rng.sample::<f64, _>(StandardNormal),
            CovariateDist::Levels { values } => values[rng.gen_range(0..values.len())],
        }
    }

    fn check(&self) -> Result<(), SynthError> {
        let ok = match self {
            CovariateDist::Bernoulli { p } => (0.0..=1.0).contains(p),
            CovariateDist::Normal { mean, sd } => mean.is_finite() && sd.is_finite() && *sd >= 0.0,
            CovariateDist::Levels { values } => !values.is_empty() && values.iter().all(|v| v.is_finite()),
        };
        if ok {
            Ok(())
        } else {
            Err(SynthError::Design(format!("invalid covariate distribution {self:?}")))
        }
    }
}

/// Observation-level probit sample with independently drawn covariates.
pub fn simulate_probit(
    truth: &ProbitTruth,
    covariates: &[(String, CovariateDist)],
    n: usize,
    seed: u64,
) -> Result<Dataset, SynthError> {
    truth.check()?;
    for (name, dist) in covariates {
        dist.check()?;
        if name == CONSTANT {
            return Err(SynthError::Design("the constant is implicit".into()));
        }
    }
    let names: Vec<String> = covariates.iter().map(|(n, _)| n.clone()).collect();
    for v in truth.spec.covariates() {
        if !names.contains(&v) {
            return Err(SynthError::Design(format!("no distribution for covariate {v}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut columns = vec![Vec::with_capacity(n); covariates.len()];
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = covariates.iter().map(|(_, d)| d.sample(&mut rng)).collect();
        let value = |name: &str| names.iter().position(|n| n == name).map_or(0.0, |i| row[i]);
        y.push(truth.draw_class(value, &mut rng)?);
        for (c, v) in columns.iter_mut().zip(&row) {
            c.push(*v);
        }
    }
    Ok(Dataset::new(names, columns, y)?)
}

fn default_clusters() -> usize {
    4
}

fn default_cluster_side() -> usize {
    3
}

/// Planted-cluster crash generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrashSynthConfig {
    pub n_crashes: usize,
    pub grid: GridSpec,
    #[serde(default = "default_clusters")]
    pub n_clusters: usize,
    /// Clusters are square blocks of `cluster_side` x `cluster_side` cells.
    #[serde(default = "default_cluster_side")]
    pub cluster_side: usize,
    /// Share of crashes placed inside clusters.
    pub cluster_fraction: f64,
    /// Rate of each indicator covariate.
    pub covariate_rate: f64,
    #[serde(default)]
    pub covariate_rates: BTreeMap<String, f64>,
    /// Severity model for background crashes and, by default, clusters.
    pub severity: ProbitTruth,
    /// Per-cluster severity models, in cluster order; missing entries fall
    /// back to `severity`.
    #[serde(default)]
    pub cluster_severity: Vec<ProbitTruth>,
    /// Among serious-class crashes, the share recorded as fatal.
    pub fatal_share: f64,
    /// Among minor-class crashes, the share recorded as B rather than C.
    pub minor_b_share: f64,
}

impl CrashSynthConfig {
    /// A 40 x 40 grid of default-size cells with four 3 x 3 clusters.
    pub fn example(n_crashes: usize) -> Self {
        let spec = ModelSpec {
            fixed_vars: vec!["exceeding_speed_limit".into(), "dark".into()],
            random_vars: vec!["snow".into(), "curve_road".into()],
            mean_shifters: BTreeMap::from([("snow".to_string(), vec!["young_driver".to_string()])]),
            correlated: true,
            n_draws: 200,
            ..Default::default()
        };
        let params = Parameters {
            beta_fixed: vec![-0.2, 0.6, 0.3],
            beta_random_mean: vec![-0.4, 0.5],
            eta: vec![vec![0.4], vec![]],
            cholesky: vec![vec![0.8, 0.0], vec![0.3, 0.6]],
            threshold_u1: 1.1,
        };
        CrashSynthConfig {
            n_crashes,
            grid: GridSpec {
                origin_lat: 40.0,
                origin_lon: -77.0,
                cell_size_km: crate::raster::DEFAULT_CELL_SIZE_KM,
                n_rows: 40,
                n_cols: 40,
            },
            n_clusters: default_clusters(),
            cluster_side: default_cluster_side(),
            cluster_fraction: 0.5,
            covariate_rate: 0.2,
            covariate_rates: BTreeMap::new(),
            severity: ProbitTruth { spec, params },
            cluster_severity: Vec::new(),
            fatal_share: 0.15,
            minor_b_share: 0.4,
        }
    }

    fn check(&self) -> Result<(), SynthError> {
        self.grid.validate()?;
        self.severity.check()?;
        for t in &self.cluster_severity {
            t.check()?;
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.cluster_fraction)
            || !unit(self.covariate_rate)
            || !unit(self.fatal_share)
            || !unit(self.minor_b_share)
            || !self.covariate_rates.values().all(|&v| unit(v))
        {
            return Err(SynthError::Design("rates and shares must lie in [0, 1]".into()));
        }
        if self.n_clusters > 0 && self.cluster_side == 0 {
            return Err(SynthError::Design("cluster_side must be at least 1".into()));
        }
        let cluster_cells = self.n_clusters * self.cluster_side * self.cluster_side;
        let clustered = (self.n_crashes as f64 * self.cluster_fraction).round() as usize;
        if clustered < cluster_cells {
            return Err(SynthError::Design(format!(
                "{clustered} clustered crashes cannot fill {cluster_cells} cluster cells"
            )));
        }
        Ok(())
    }
}

/// Ground truth written next to a synthetic crash file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrashSynthTruth {
    pub seed: u64,
    pub config: CrashSynthConfig,
    /// Cells of each planted cluster in (row, col) order.
    pub clusters: Vec<Vec<(usize, usize)>>,
    /// Crash ids in each cluster.
    pub cluster_members: Vec<Vec<String>>,
    pub n_background: usize,
}

#[derive(Debug, Clone)]
pub struct CrashSynthOutput {
    pub records: Vec<CrashRecord>,
    pub truth: CrashSynthTruth,
}

fn place_clusters<R: Rng>(cfg: &CrashSynthConfig, rng: &mut R) -> Result<Vec<(usize, usize)>, SynthError> {
    let side = cfg.cluster_side;
    // Each cluster keeps a one-cell empty ring, so the footprint is side + 2.
    let foot = side + 2;
    if cfg.n_clusters > 0 && (cfg.grid.n_rows < foot || cfg.grid.n_cols < foot) {
        return Err(SynthError::Design("grid too small for a cluster and its ring".into()));
    }
    let mut corners: Vec<(usize, usize)> = Vec::new();
    let mut attempts = 0;
    while corners.len() < cfg.n_clusters {
        attempts += 1;
        if attempts > 100_000 {
            return Err(SynthError::Design(format!(
                "could not place {} clusters on a {} x {} grid",
                cfg.n_clusters, cfg.grid.n_rows, cfg.grid.n_cols
            )));
        }
        // footprint top-left corner
        let r = rng.gen_range(0..=cfg.grid.n_rows - foot);
        let c = rng.gen_range(0..=cfg.grid.n_cols - foot);
        let clear = corners
            .iter()
            .all(|&(r0, c0)| r + foot <= r0 || r0 + foot <= r || c + foot <= c0 || c0 + foot <= c);
        if clear {
            corners.push((r, c));
        }
    }
    Ok(corners)
}

/// Generate crashes with planted clusters. Every cluster cell receives at
/// least one crash; the ring around each cluster stays empty.
pub fn simulate_crashes(cfg: &CrashSynthConfig, seed: u64) -> Result<CrashSynthOutput, SynthError> {
    cfg.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corners = place_clusters(cfg, &mut rng)?;
    let side = cfg.cluster_side;
    let clusters: Vec<Vec<(usize, usize)>> = corners
        .iter()
        .map(|&(r, c)| {
            (0..side)
                .flat_map(|i| (0..side).map(move |j| (r + 1 + i, c + 1 + j)))
                .collect()
        })
        .collect();
    let blocked: BTreeSet<(usize, usize)> = corners
        .iter()
        .flat_map(|&(r, c)| (0..side + 2).flat_map(move |i| (0..side + 2).map(move |j| (r + i, c + j))))
        .collect();
    let background: Vec<(usize, usize)> = (0..cfg.grid.n_rows)
        .flat_map(|r| (0..cfg.grid.n_cols).map(move |c| (r, c)))
        .filter(|cell| !blocked.contains(cell))
        .collect();

    let n_clustered = if clusters.is_empty() {
        0
    } else {
        (cfg.n_crashes as f64 * cfg.cluster_fraction).round() as usize
    };
    let n_background = cfg.n_crashes - n_clustered;
    if n_background > 0 && background.is_empty() {
        return Err(SynthError::Design("no background cells left outside the clusters".into()));
    }

    // (cell, cluster index) per crash
    let mut slots: Vec<((usize, usize), Option<usize>)> = Vec::with_capacity(cfg.n_crashes);
    let all_cluster_cells: Vec<(usize, (usize, usize))> = clusters
        .iter()
        .enumerate()
        .flat_map(|(k, cells)| cells.iter().map(move |&c| (k, c)))
        .collect();
    for i in 0..n_clustered {
        let (k, cell) = if i < all_cluster_cells.len() {
            all_cluster_cells[i]
        } else {
            all_cluster_cells[rng.gen_range(0..all_cluster_cells.len())]
        };
        slots.push((cell, Some(k)));
    }
    for _ in 0..n_background {
        slots.push((background[rng.gen_range(0..background.len())], None));
    }

    let rate = |name: &str| cfg.covariate_rates.get(name).copied().unwrap_or(cfg.covariate_rate);
    let s = cfg.grid.cell_size_km;
    let mut records = Vec::with_capacity(slots.len());
    let mut cluster_members = vec![Vec::new(); clusters.len()];
    for (i, ((row, col), cluster)) in slots.into_iter().enumerate() {
        let id = format!("S{:06}", i + 1);
        let x = (col as f64 + rng.gen_range(0.05..0.95)) * s;
        let y = (row as f64 + rng.gen_range(0.05..0.95)) * s;
        let (lat, lon) = cfg.grid.unproject(x, y);
        let covariates: BTreeMap<String, u8> = COVARIATES
            .iter()
            .map(|&n| (n.to_string(), u8::from(rng.gen::<f64>() < rate(n))))
            .collect();
        let truth = cluster
            .and_then(|k| cfg.cluster_severity.get(k))
            .unwrap_or(&cfg.severity);
        let class = truth.draw_class(|n| f64::from(covariates.get(n).copied().unwrap_or(0)), &mut rng)?;
        let max_injury = match class {
            SeverityClass::NONE => KabcoLevel::O,
            SeverityClass::MINOR if rng.gen::<f64>() < cfg.minor_b_share => KabcoLevel::B,
            SeverityClass::MINOR => KabcoLevel::C,
            _ if rng.gen::<f64>() < cfg.fatal_share => KabcoLevel::K,
            _ => KabcoLevel::A,
        };
        if let Some(k) = cluster {
            cluster_members[k].push(id.clone());
        }
        records.push(CrashRecord {
            id,
            lat,
            lon,
            max_injury,
            covariates,
        });
    }
    Ok(CrashSynthOutput {
        records,
        truth: CrashSynthTruth {
            seed,
            config: cfg.clone(),
            clusters,
            cluster_members,
            n_background,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::rasterize;

    fn fixed_truth() -> ProbitTruth {
        ProbitTruth {
            spec: ModelSpec {
                fixed_vars: vec!["x".into()],
                ..Default::default()
            },
            params: Parameters {
                beta_fixed: vec![0.2, 0.7],
                beta_random_mean: vec![],
                eta: vec![],
                cholesky: vec![],
                threshold_u1: 1.0,
            },
        }
    }

    #[test]
    fn probit_sample_is_seeded() {
        let cov = vec![("x".to_string(), CovariateDist::Bernoulli { p: 0.5 })];
        let a = simulate_probit(&fixed_truth(), &cov, 500, 7).unwrap();
        let b = simulate_probit(&fixed_truth(), &cov, 500, 7).unwrap();
        let c = simulate_probit(&fixed_truth(), &cov, 500, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 500);
    }

    #[test]
    fn class_shares_follow_the_model() {
        // x = 0 for everyone: P(0) = Φ(−0.2), P(2) = Φ(0.2 − 1).
        let cov = vec![("x".to_string(), CovariateDist::Levels { values: vec![0.0] })];
        let d = simulate_probit(&fixed_truth(), &cov, 40_000, 1).unwrap();
        let counts = d.class_counts();
        let share = |j: usize| counts[j] as f64 / d.len() as f64;
        assert!((share(0) - 0.420_740_290_560_896_8).abs() < 0.01);
        assert!((share(2) - 0.211_855_398_583_397_2).abs() < 0.01);
    }

    #[test]
    fn missing_covariate_distribution() {
        let err = simulate_probit(&fixed_truth(), &[], 10, 0).unwrap_err();
        assert!(err.to_string().contains("x"));
    }

    #[test]
    fn crash_field_layout() {
        let cfg = CrashSynthConfig::example(2000);
        let out = simulate_crashes(&cfg, 42).unwrap();
        assert_eq!(out.records.len(), 2000);
        assert_eq!(out.truth.clusters.len(), 4);
        let raster = rasterize(&out.records, &cfg.grid).unwrap();
        assert!(raster.out_of_extent.is_empty());
        let occupied: BTreeSet<(usize, usize)> = raster.cells.iter().map(|c| (c.row, c.col)).collect();
        for cluster in &out.truth.clusters {
            for &(r, c) in cluster {
                assert!(occupied.contains(&(r, c)));
                // ring cells stay empty
                for (dr, dc) in [(-1i64, -1i64), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)] {
                    let n = ((r as i64 + dr) as usize, (c as i64 + dc) as usize);
                    if !cluster.contains(&n) {
                        assert!(!occupied.contains(&n), "ring cell {n:?} occupied");
                    }
                }
            }
        }
        let clustered: usize = out.truth.cluster_members.iter().map(Vec::len).sum();
        assert_eq!(clustered + out.truth.n_background, 2000);
        let again = simulate_crashes(&cfg, 42).unwrap();
        assert_eq!(out.records, again.records);
    }

    #[test]
    fn too_few_clustered_crashes() {
        let cfg = CrashSynthConfig::example(40);
        assert!(simulate_crashes(&cfg, 1).is_err());
    }
}
