//! Model specification and the mapping between structured parameters and
//! the flat vector seen by the optimizer.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::halton::HaltonConfig;
use super::ProbitError;

/// Name of the intercept term.
pub const CONSTANT: &str = "constant";

fn default_draws() -> usize {
    1000
}

/// Variable roles of a random-parameter ordered probit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default)]
    pub fixed_vars: Vec<String>,
    /// Variables with normally distributed coefficients.
    #[serde(default)]
    pub random_vars: Vec<String>,
    /// Random variable (or `constant`) -> covariates shifting its mean.
    #[serde(default)]
    pub mean_shifters: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub correlated: bool,
    #[serde(default = "default_draws")]
    pub n_draws: usize,
    #[serde(default)]
    pub include_random_intercept: bool,
    #[serde(default)]
    pub halton: HaltonConfig,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            fixed_vars: Vec::new(),
            random_vars: Vec::new(),
            mean_shifters: BTreeMap::new(),
            correlated: false,
            n_draws: default_draws(),
            include_random_intercept: false,
            halton: HaltonConfig::default(),
        }
    }
}

/// Structure imposed on the Cholesky factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CholeskyMode {
    /// Γ = 0: random coefficients collapse to their (shifted) means.
    Zero,
    Diagonal,
    Full,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ProbitError> {
        let mut seen = BTreeSet::new();
        for v in self.fixed_vars.iter().chain(&self.random_vars) {
            if v == CONSTANT {
                return Err(ProbitError::Spec(format!(
                    "{CONSTANT:?} is reserved; use include_random_intercept"
                )));
            }
            if !seen.insert(v.as_str()) {
                return Err(ProbitError::Spec(format!("variable {v} listed more than once")));
            }
        }
        let random = self.random_names();
        for (key, shifters) in &self.mean_shifters {
            if !random.contains(key) {
                return Err(ProbitError::Spec(format!(
                    "mean shifter key {key} is not a random parameter"
                )));
            }
            let mut s = BTreeSet::new();
            for z in shifters {
                if z == CONSTANT || !s.insert(z) {
                    return Err(ProbitError::Spec(format!("invalid mean shifter {z} for {key}")));
                }
            }
        }
        if self.n_draws == 0 {
            return Err(ProbitError::Spec("n_draws must be positive".into()));
        }
        self.halton.bases_for(random.len())?;
        Ok(())
    }

    /// Fixed coefficients in parameter order (intercept first when fixed).
    pub fn fixed_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !self.include_random_intercept {
            v.push(CONSTANT.to_string());
        }
        v.extend(self.fixed_vars.iter().cloned());
        v
    }

    /// Random coefficients in parameter order (intercept first when random).
    pub fn random_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.include_random_intercept {
            v.push(CONSTANT.to_string());
        }
        v.extend(self.random_vars.iter().cloned());
        v
    }

    pub fn cholesky_mode(&self) -> CholeskyMode {
        if self.random_names().is_empty() {
            CholeskyMode::Zero
        } else if self.correlated {
            CholeskyMode::Full
        } else {
            CholeskyMode::Diagonal
        }
    }

    /// Every data column the model reads.
    pub fn covariates(&self) -> Vec<String> {
        let mut set: BTreeSet<String> = self.fixed_vars.iter().chain(&self.random_vars).cloned().collect();
        for z in self.mean_shifters.values().flatten() {
            set.insert(z.clone());
        }
        set.into_iter().collect()
    }

    /// The same variables with every coefficient fixed and no mean shifters.
    pub fn all_fixed(&self) -> ModelSpec {
        let mut fixed = self.fixed_vars.clone();
        fixed.extend(self.random_vars.iter().cloned());
        ModelSpec {
            fixed_vars: fixed,
            random_vars: Vec::new(),
            mean_shifters: BTreeMap::new(),
            correlated: false,
            include_random_intercept: false,
            ..self.clone()
        }
    }
}

/// Structured parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub beta_fixed: Vec<f64>,
    pub beta_random_mean: Vec<f64>,
    /// Mean-shifter coefficients, one row per random coefficient.
    pub eta: Vec<Vec<f64>>,
    /// Lower-triangular factor Γ of the random-coefficient covariance ΓΓ'.
    pub cholesky: Vec<Vec<f64>>,
    /// Upper threshold; the lower one is fixed at 0.
    pub threshold_u1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Fixed,
    RandomMean,
    MeanShifter,
    Cholesky,
    Threshold,
}

/// Flat parameter layout for one specification and Cholesky structure.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub fixed: Vec<String>,
    pub random: Vec<String>,
    pub shifters: Vec<Vec<String>>,
    pub mode: CholeskyMode,
    /// Free Cholesky entries `(row, col)` with `col <= row`.
    pub chol: Vec<(usize, usize)>,
}

impl Layout {
    pub fn new(spec: &ModelSpec, mode: CholeskyMode) -> Self {
        let random = spec.random_names();
        let shifters = random
            .iter()
            .map(|r| spec.mean_shifters.get(r).cloned().unwrap_or_default())
            .collect();
        let k = random.len();
        let chol = match mode {
            CholeskyMode::Zero => Vec::new(),
            CholeskyMode::Diagonal => (0..k).map(|i| (i, i)).collect(),
            CholeskyMode::Full => (0..k).flat_map(|i| (0..=i).map(move |j| (i, j))).collect(),
        };
        Layout {
            fixed: spec.fixed_names(),
            random,
            shifters,
            mode,
            chol,
        }
    }

    pub fn n_random(&self) -> usize {
        self.random.len()
    }

    pub fn n_eta(&self) -> usize {
        self.shifters.iter().map(Vec::len).sum()
    }

    pub fn n_params(&self) -> usize {
        self.fixed.len() + self.random.len() + self.n_eta() + self.chol.len() + 1
    }

    pub fn offset_random(&self) -> usize {
        self.fixed.len()
    }

    pub fn offset_eta(&self) -> usize {
        self.fixed.len() + self.random.len()
    }

    pub fn offset_chol(&self) -> usize {
        self.offset_eta() + self.n_eta()
    }

    pub fn index_threshold(&self) -> usize {
        self.n_params() - 1
    }

    pub fn labels(&self) -> Vec<(String, ParamKind)> {
        let mut out: Vec<(String, ParamKind)> = Vec::with_capacity(self.n_params());
        out.extend(self.fixed.iter().map(|n| (n.clone(), ParamKind::Fixed)));
        out.extend(self.random.iter().map(|n| (n.clone(), ParamKind::RandomMean)));
        for (r, zs) in self.random.iter().zip(&self.shifters) {
            out.extend(zs.iter().map(|z| (format!("{r}: {z}"), ParamKind::MeanShifter)));
        }
        for &(i, j) in &self.chol {
            let label = if i == j {
                format!("chol({})", self.random[i])
            } else {
                format!("chol({}, {})", self.random[i], self.random[j])
            };
            out.push((label, ParamKind::Cholesky));
        }
        out.push(("u1".to_string(), ParamKind::Threshold));
        out
    }

    /// Flatten, storing the threshold as ln(u1).
    pub fn pack(&self, p: &Parameters) -> Result<Vec<f64>, ProbitError> {
        self.check_shape(p)?;
        if !(p.threshold_u1 > 0.0) {
            return Err(ProbitError::Domain(format!(
                "threshold u1 must be positive, got {}",
                p.threshold_u1
            )));
        }
        let mut v = Vec::with_capacity(self.n_params());
        v.extend_from_slice(&p.beta_fixed);
        v.extend_from_slice(&p.beta_random_mean);
        for row in &p.eta {
            v.extend_from_slice(row);
        }
        v.extend(self.chol.iter().map(|&(i, j)| p.cholesky[i][j]));
        v.push(p.threshold_u1.ln());
        Ok(v)
    }

    pub fn unpack(&self, theta: &[f64]) -> Parameters {
        assert_eq!(theta.len(), self.n_params(), "parameter vector length");
        let k = self.n_random();
        let mut it = theta.iter().copied();
        let beta_fixed = it.by_ref().take(self.fixed.len()).collect();
        let beta_random_mean = it.by_ref().take(k).collect();
        let eta = self.shifters.iter().map(|zs| it.by_ref().take(zs.len()).collect()).collect();
        let mut cholesky = vec![vec![0.0; k]; k];
        for &(i, j) in &self.chol {
            cholesky[i][j] = it.next().unwrap();
        }
        let threshold_u1 = it.next().unwrap().exp();
        Parameters {
            beta_fixed,
            beta_random_mean,
            eta,
            cholesky,
            threshold_u1,
        }
    }

    fn check_shape(&self, p: &Parameters) -> Result<(), ProbitError> {
        let k = self.n_random();
        let ok = p.beta_fixed.len() == self.fixed.len()
            && p.beta_random_mean.len() == k
            && p.eta.len() == k
            && p.eta.iter().zip(&self.shifters).all(|(e, z)| e.len() == z.len())
            && p.cholesky.len() == k
            && p.cholesky.iter().all(|r| r.len() == k);
        if !ok {
            return Err(ProbitError::Spec("parameter shapes do not match the model layout".into()));
        }
        for i in 0..k {
            for j in 0..k {
                let free = self.chol.contains(&(i, j));
                if !free && p.cholesky[i][j] != 0.0 {
                    return Err(ProbitError::Spec(format!(
                        "Cholesky entry ({i}, {j}) must be zero for {:?} structure",
                        self.mode
                    )));
                }
            }
        }
        Ok(())
    }

    /// Zero-valued parameters with the given threshold.
    pub fn zeros(&self, threshold_u1: f64) -> Parameters {
        let k = self.n_random();
        Parameters {
            beta_fixed: vec![0.0; self.fixed.len()],
            beta_random_mean: vec![0.0; k],
            eta: self.shifters.iter().map(|z| vec![0.0; z.len()]).collect(),
            cholesky: vec![vec![0.0; k]; k],
            threshold_u1,
        }
    }
}

impl Parameters {
    /// Restrict Γ to the structure of `mode` (dropping disallowed entries).
    pub fn with_cholesky_mode(&self, mode: CholeskyMode) -> Parameters {
        let mut p = self.clone();
        for (i, row) in p.cholesky.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let keep = match mode {
                    CholeskyMode::Zero => false,
                    CholeskyMode::Diagonal => i == j,
                    CholeskyMode::Full => j <= i,
                };
                if !keep {
                    *v = 0.0;
                }
            }
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ModelSpec {
        ModelSpec {
            fixed_vars: vec!["a".into(), "b".into()],
            random_vars: vec!["r1".into(), "r2".into()],
            mean_shifters: [("r1".to_string(), vec!["z".to_string()])].into_iter().collect(),
            correlated: true,
            ..Default::default()
        }
    }

    #[test]
    fn layout_counts() {
        let s = spec();
        let full = Layout::new(&s, CholeskyMode::Full);
        // constant + a + b, r1 + r2, eta, 3 chol, u1
        assert_eq!(full.n_params(), 3 + 2 + 1 + 3 + 1);
        assert_eq!(Layout::new(&s, CholeskyMode::Diagonal).n_params(), 9);
        assert_eq!(Layout::new(&s, CholeskyMode::Zero).n_params(), 7);
        let labels: Vec<String> = full.labels().into_iter().map(|l| l.0).collect();
        assert_eq!(labels[5], "r1: z");
        assert_eq!(labels[7], "chol(r2, r1)");
        assert_eq!(labels[9], "u1");
    }

    #[test]
    fn pack_unpack() {
        let s = spec();
        let l = Layout::new(&s, CholeskyMode::Full);
        let p = Parameters {
            beta_fixed: vec![0.1, 0.2, 0.3],
            beta_random_mean: vec![-1.0, 1.0],
            eta: vec![vec![0.5], vec![]],
            cholesky: vec![vec![2.0, 0.0], vec![1.0, 1.0]],
            threshold_u1: 1.5,
        };
        let theta = l.pack(&p).unwrap();
        let back = l.unpack(&theta);
        assert_eq!(back.cholesky, p.cholesky);
        assert!((back.threshold_u1 - 1.5).abs() < 1e-15);
        let diag = Layout::new(&s, CholeskyMode::Diagonal);
        assert!(diag.pack(&p).is_err());
        assert!(diag.pack(&p.with_cholesky_mode(CholeskyMode::Diagonal)).is_ok());
        let mut bad = p.clone();
        bad.threshold_u1 = 0.0;
        assert!(l.pack(&bad).is_err());
    }

    #[test]
    fn validation() {
        assert!(spec().validate().is_ok());
        let mut s = spec();
        s.fixed_vars.push("r1".into());
        assert!(s.validate().is_err());
        let mut s = spec();
        s.mean_shifters.insert("a".into(), vec!["z".into()]);
        assert!(s.validate().is_err());
        let mut s = spec();
        s.mean_shifters.insert(CONSTANT.into(), vec!["z".into()]);
        assert!(s.validate().is_err());
        s.include_random_intercept = true;
        assert!(s.validate().is_ok());
        assert_eq!(s.random_names()[0], CONSTANT);
        let mut s = spec();
        s.n_draws = 0;
        assert!(s.validate().is_err());
    }
}
