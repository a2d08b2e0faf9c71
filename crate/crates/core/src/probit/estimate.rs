//! Maximum simulated likelihood estimation and reporting.
//!
//! Fits proceed in stages of increasing Cholesky structure (Γ = 0, then
//! diagonal, then full lower-triangular), each warm-started from the
//! previous optimum. Because every stage contains the previous one as a
//! special case, the final log-likelihood is never below that of a simpler
//! structure on the same draws.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::derived::{
    aic, random_param_correlation, random_param_stddev, rho_squared, share_above_zero, thresholds_only_loglik,
};
use super::likelihood::{Evaluator, MissingPolicy};
use super::model::{CholeskyMode, Layout, ModelSpec, ParamKind, Parameters, CONSTANT};
use super::optimize::{minimize, BfgsOptions, BfgsResult};
use super::ProbitError;
use crate::normal;

/// |t| at or above this marks a coefficient significant at 90%.
pub const T_CRIT_90: f64 = 1.645;

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateOptions {
    pub bfgs: BfgsOptions,
    /// Start for the final stage; skips staging when set.
    pub start: Option<Parameters>,
    /// Initial Cholesky diagonal when a stage first frees it.
    pub initial_sigma: f64,
    /// Relative step for the finite-difference Hessian.
    pub hessian_step: f64,
    pub marginal_effects: bool,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        EstimateOptions {
            bfgs: BfgsOptions::default(),
            start: None,
            initial_sigma: 0.5,
            hessian_step: 1e-4,
            marginal_effects: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub name: String,
    pub kind: ParamKind,
    pub estimate: f64,
    pub std_error: Option<f64>,
    pub t_stat: Option<f64>,
    /// |t| ≥ 1.645; an annotation only, nothing is dropped.
    pub significant_90: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeMethod {
    Hessian,
    OuterProduct,
    Unavailable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub converged: bool,
    pub iterations: usize,
    pub gradient_max: f64,
    pub message: String,
    pub n_clamped: usize,
    pub se_method: SeMethod,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomParamSummary {
    pub name: String,
    pub mean: f64,
    pub sigma: f64,
    /// `None` when the coefficient is identically zero.
    pub share_above_zero: Option<f64>,
    pub share_below_zero: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectMode {
    /// Density-weighted coefficient, averaged over observations and draws.
    Derivative,
    /// P(y | x = 1) − P(y | x = 0) for a 0/1 indicator.
    DiscreteChange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalEffect {
    pub variable: String,
    pub mode: EffectMode,
    pub serious: f64,
    pub minor: f64,
    pub none: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub spec: ModelSpec,
    pub n_obs: usize,
    pub class_counts: [usize; 3],
    pub params: Parameters,
    pub estimates: Vec<Estimate>,
    pub n_params: usize,
    pub ll0: f64,
    pub ll: f64,
    pub aic: f64,
    pub rho2: f64,
    pub random_params: Vec<RandomParamSummary>,
    /// Correlations of the random coefficients (empty without any).
    pub correlation: Vec<Vec<f64>>,
    pub marginal_effects: Vec<MarginalEffect>,
    pub diagnostics: Diagnostics,
}

impl EstimationResult {
    pub fn layout(&self) -> Layout {
        Layout::new(&self.spec, self.spec.cholesky_mode())
    }

    pub fn theta(&self) -> Result<Vec<f64>, ProbitError> {
        self.layout().pack(&self.params)
    }

    /// Log-likelihood of these parameters on other data (no re-estimation).
    pub fn loglik_on(&self, data: &Dataset, policy: MissingPolicy) -> Result<f64, ProbitError> {
        super::likelihood::loglik_at(data, &self.spec, &self.params, policy)
    }

    pub fn estimate_named(&self, name: &str) -> Option<&Estimate> {
        self.estimates.iter().find(|e| e.name == name)
    }
}

fn design_columns(spec: &ModelSpec, data: &Dataset) -> Result<Vec<(String, Vec<f64>)>, ProbitError> {
    let get = |name: &str| -> Result<Vec<f64>, ProbitError> {
        if name == CONSTANT {
            return Ok(vec![1.0; data.len()]);
        }
        data.column(name)
            .map(<[f64]>::to_vec)
            .ok_or_else(|| ProbitError::Spec(format!("unknown variable {name}")))
    };
    let mut cols = Vec::new();
    for name in spec.fixed_names().iter().chain(&spec.random_names()) {
        cols.push((name.clone(), get(name)?));
    }
    for r in spec.random_names() {
        for z in spec.mean_shifters.get(&r).into_iter().flatten() {
            let x = get(&r)?;
            let zc = get(z)?;
            cols.push((format!("{r}: {z}"), x.iter().zip(&zc).map(|(a, b)| a * b).collect()));
        }
    }
    Ok(cols)
}

/// Names of design columns that are linear combinations of earlier ones.
pub fn collinear_columns(spec: &ModelSpec, data: &Dataset) -> Result<Vec<String>, ProbitError> {
    let cols = design_columns(spec, data)?;
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut bad = Vec::new();
    for (name, col) in cols {
        let norm0 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut r = col;
        // two passes of modified Gram-Schmidt
        for _ in 0..2 {
            for q in &basis {
                let c: f64 = q.iter().zip(&r).map(|(a, b)| a * b).sum();
                r.iter_mut().zip(q).for_each(|(ri, qi)| *ri -= c * qi);
            }
        }
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm0 == 0.0 || norm <= 1e-9 * norm0 {
            bad.push(name);
        } else {
            basis.push(r.into_iter().map(|v| v / norm).collect());
        }
    }
    Ok(bad)
}

fn thresholds_start(counts: [usize; 3]) -> (f64, f64) {
    let n = counts.iter().sum::<usize>() as f64;
    let s0 = counts[0] as f64 / n;
    let s01 = (counts[0] + counts[1]) as f64 / n;
    match (normal::inverse_cdf(s0), normal::inverse_cdf(s01)) {
        (Ok(a), Ok(b)) if b > a => (-a, b - a),
        _ => (0.0, 1.0),
    }
}

/// Carry a parameter vector to a richer Cholesky structure of the same spec.
fn promote(p: &Parameters, mode: CholeskyMode, sigma0: f64) -> Parameters {
    let mut q = p.with_cholesky_mode(mode);
    if mode != CholeskyMode::Zero {
        for i in 0..q.cholesky.len() {
            if q.cholesky[i][i] == 0.0 {
                q.cholesky[i][i] = sigma0;
            }
        }
    }
    q
}

struct Stage {
    evaluator: Evaluator,
    run: BfgsResult,
}

fn run_stage(
    spec: &ModelSpec,
    mode: CholeskyMode,
    data: &Dataset,
    starts: &[Parameters],
    opts: &BfgsOptions,
) -> Result<Stage, ProbitError> {
    let evaluator = Evaluator::new(spec, mode, data, MissingPolicy::Error)?;
    let mut best: Option<BfgsResult> = None;
    for start in starts {
        let x0 = evaluator.layout().pack(start)?;
        let run = minimize(
            |t| {
                let (ll, g) = evaluator.loglik_and_gradient(t);
                (-ll, g.into_iter().map(|v| -v).collect())
            },
            &x0,
            opts,
        );
        log::debug!(
            "stage {mode:?}: ll={} iterations={} converged={} ({})",
            -run.f,
            run.iterations,
            run.converged,
            run.message
        );
        if best.as_ref().is_none_or(|b| run.f < b.f) {
            best = Some(run);
        }
    }
    Ok(Stage {
        evaluator,
        run: best.expect("at least one start"),
    })
}

fn hessian(ev: &Evaluator, theta: &[f64], rel_step: f64) -> DMatrix<f64> {
    let n = theta.len();
    let mut h = DMatrix::zeros(n, n);
    let mut t = theta.to_vec();
    for j in 0..n {
        let step = rel_step * theta[j].abs().max(1.0);
        t[j] = theta[j] + step;
        let (_, gp) = ev.loglik_and_gradient(&t);
        t[j] = theta[j] - step;
        let (_, gm) = ev.loglik_and_gradient(&t);
        t[j] = theta[j];
        for i in 0..n {
            h[(i, j)] = (gp[i] - gm[i]) / (2.0 * step);
        }
    }
    (&h + h.transpose()) * 0.5
}

fn covariance(ev: &Evaluator, theta: &[f64], rel_step: f64, warnings: &mut Vec<String>) -> (Option<DMatrix<f64>>, SeMethod) {
    let info = -hessian(ev, theta, rel_step);
    if let Some(ch) = info.clone().cholesky() {
        return (Some(ch.inverse()), SeMethod::Hessian);
    }
    let msg = "negative Hessian is not positive definite; using the outer product of gradients".to_string();
    log::warn!("{msg}");
    warnings.push(msg);
    let n = theta.len();
    let mut opg = DMatrix::zeros(n, n);
    for (w, s) in ev.pattern_scores(theta) {
        let v = DMatrix::from_column_slice(n, 1, &s);
        opg += &v * v.transpose() * w;
    }
    match opg.cholesky() {
        Some(ch) => (Some(ch.inverse()), SeMethod::OuterProduct),
        None => {
            warnings.push("outer product of gradients is singular; standard errors unavailable".into());
            (None, SeMethod::Unavailable)
        }
    }
}

/// Fit the model with default options.
pub fn estimate(data: &Dataset, spec: &ModelSpec) -> Result<EstimationResult, ProbitError> {
    estimate_with(data, spec, &EstimateOptions::default())
}

pub fn estimate_with(data: &Dataset, spec: &ModelSpec, opts: &EstimateOptions) -> Result<EstimationResult, ProbitError> {
    spec.validate()?;
    if data.is_empty() {
        return Err(ProbitError::Data("no observations".into()));
    }
    let collinear = collinear_columns(spec, data)?;
    if !collinear.is_empty() {
        return Err(ProbitError::Spec(format!(
            "design matrix is rank deficient; collinear columns: {}",
            collinear.join(", ")
        )));
    }
    let mut warnings = Vec::new();
    let counts = data.class_counts();
    for (j, label) in ["no injury", "minor injury", "serious injury"].iter().enumerate() {
        if counts[j] == 0 {
            let msg = format!("no observations in class {j} ({label}); thresholds are weakly identified");
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }

    let target = spec.cholesky_mode();
    let stage = match &opts.start {
        Some(start) => run_stage(spec, target, data, std::slice::from_ref(start), &opts.bfgs)?,
        None => {
            let (c, u1) = thresholds_start(counts);
            let zero_layout = Layout::new(spec, CholeskyMode::Zero);
            let mut p0 = zero_layout.zeros(u1);
            if spec.include_random_intercept {
                p0.beta_random_mean[0] = c;
            } else {
                p0.beta_fixed[0] = c;
            }
            let mut stage = run_stage(spec, CholeskyMode::Zero, data, &[p0], &opts.bfgs)?;
            for mode in [CholeskyMode::Diagonal, CholeskyMode::Full] {
                if mode > target {
                    break;
                }
                let prev = stage.evaluator.layout().unpack(&stage.run.x);
                // The nested point reproduces the previous optimum exactly,
                // so the better of the two runs can't fall below it.
                let nested = prev.with_cholesky_mode(mode);
                let starts = if mode == CholeskyMode::Diagonal {
                    vec![promote(&prev, mode, opts.initial_sigma), nested]
                } else {
                    vec![nested]
                };
                stage = run_stage(spec, mode, data, &starts, &opts.bfgs)?;
            }
            stage
        }
    };

    let Stage { evaluator: ev, run } = stage;
    let layout = ev.layout().clone();
    let theta = run.x.clone();
    let params = layout.unpack(&theta);
    let eval = ev.evaluate(&theta, false);
    if !run.converged {
        let msg = format!("optimizer did not converge: {}", run.message);
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let (cov, se_method) = covariance(&ev, &theta, opts.hessian_step, &mut warnings);
    let labels = layout.labels();
    let estimates = labels
        .iter()
        .enumerate()
        .map(|(i, (name, kind))| {
            let raw_se = cov.as_ref().map(|c| c[(i, i)].max(0.0).sqrt());
            let (value, se) = if *kind == ParamKind::Threshold {
                let u1 = theta[i].exp();
                (u1, raw_se.map(|s| u1 * s))
            } else {
                (theta[i], raw_se)
            };
            let t = se.filter(|s| *s > 0.0).map(|s| value / s);
            Estimate {
                name: name.clone(),
                kind: *kind,
                estimate: value,
                std_error: se,
                t_stat: t,
                significant_90: t.is_some_and(|t| t.abs() >= T_CRIT_90),
            }
        })
        .collect();

    let ll = eval.loglik;
    let ll0 = thresholds_only_loglik(counts);
    let n_params = layout.n_params();
    let random_names = layout.random.clone();
    let mut random_params = Vec::new();
    for (k, name) in random_names.iter().enumerate() {
        let sigma = random_param_stddev(&params.cholesky, k)?;
        let mean = params.beta_random_mean[k];
        let shares = share_above_zero(mean, sigma).ok();
        random_params.push(RandomParamSummary {
            name: name.clone(),
            mean,
            sigma,
            share_above_zero: shares.map(|s| s.0),
            share_below_zero: shares.map(|s| s.1),
        });
    }
    let correlation = if random_names.is_empty() || layout.chol.is_empty() {
        Vec::new()
    } else {
        match random_param_correlation(&params.cholesky, &random_names) {
            Ok(c) => c,
            Err(e) => {
                warnings.push(e.to_string());
                Vec::new()
            }
        }
    };

    let mut result = EstimationResult {
        spec: spec.clone(),
        n_obs: data.len(),
        class_counts: counts,
        params,
        estimates,
        n_params,
        ll0,
        ll,
        aic: aic(n_params, ll),
        rho2: if ll0 < 0.0 { rho_squared(ll, ll0) } else { 0.0 },
        random_params,
        correlation,
        marginal_effects: Vec::new(),
        diagnostics: Diagnostics {
            converged: run.converged,
            iterations: run.iterations,
            gradient_max: run.gradient.iter().fold(0.0f64, |m, g| m.max(g.abs())),
            message: run.message,
            n_clamped: eval.n_clamped,
            se_method,
            warnings,
        },
    };
    if opts.marginal_effects {
        let mut effects = marginal_effects(&result, data, EffectMode::Derivative)?;
        effects.extend(marginal_effects(&result, data, EffectMode::DiscreteChange)?);
        result.marginal_effects = effects;
    }
    Ok(result)
}

/// Sample-average simulated class probabilities at the estimates.
pub fn predicted_shares(result: &EstimationResult, data: &Dataset) -> Result<[f64; 3], ProbitError> {
    let ev = Evaluator::new(&result.spec, result.spec.cholesky_mode(), data, MissingPolicy::Error)?;
    Ok(ev.mean_probabilities(&result.theta()?))
}

fn is_indicator(data: &Dataset, name: &str) -> bool {
    data.column(name)
        .is_some_and(|c| c.iter().all(|&v| v == 0.0 || v == 1.0))
}

/// Average marginal effect of one covariate on (serious, minor, none).
pub fn marginal_effect(
    result: &EstimationResult,
    data: &Dataset,
    variable: &str,
    mode: EffectMode,
) -> Result<MarginalEffect, ProbitError> {
    let spec = &result.spec;
    if variable == CONSTANT || !spec.covariates().iter().any(|c| c == variable) {
        return Err(ProbitError::Spec(format!("unknown variable {variable}")));
    }
    let theta = result.theta()?;
    let mode_chol = spec.cholesky_mode();
    let [none, minor, serious] = match mode {
        EffectMode::Derivative => {
            let ev = Evaluator::new(spec, mode_chol, data, MissingPolicy::Error)?;
            let layout = ev.layout();
            let nf = layout.fixed.len();
            let k = layout.n_random();
            let fixed_idx = layout.fixed.iter().position(|n| n == variable);
            let random_idx = layout.random.iter().position(|n| n == variable);
            // (flat shifter index, owning random coefficient)
            let mut shifter_terms = Vec::new();
            let mut e = 0;
            for (owner, zs) in layout.shifters.iter().enumerate() {
                for z in zs {
                    if z == variable {
                        shifter_terms.push((e, owner));
                    }
                    e += 1;
                }
            }
            let beta_fixed = fixed_idx.map(|i| theta[i]).unwrap_or(0.0);
            let eta_off = layout.offset_eta();
            let eta: Vec<(f64, usize)> = shifter_terms.iter().map(|&(e, o)| (theta[eta_off + e], o)).collect();
            ev.average_index_effects(&theta, |values, coef| {
                let mut s = beta_fixed;
                if let Some(r) = random_idx {
                    s += coef[r];
                }
                for &(eta_v, owner) in &eta {
                    s += eta_v * values[nf + owner];
                }
                debug_assert_eq!(coef.len(), k);
                s
            })
        }
        EffectMode::DiscreteChange => {
            if !is_indicator(data, variable) {
                return Err(ProbitError::Spec(format!(
                    "discrete change needs a 0/1 indicator; {variable} is not one"
                )));
            }
            let on = Evaluator::new(spec, mode_chol, &data.with_constant_column(variable, 1.0), MissingPolicy::Error)?;
            let off = Evaluator::new(spec, mode_chol, &data.with_constant_column(variable, 0.0), MissingPolicy::Error)?;
            let p1 = on.mean_probabilities(&theta);
            let p0 = off.mean_probabilities(&theta);
            [p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]]
        }
    };
    Ok(MarginalEffect {
        variable: variable.to_string(),
        mode,
        serious,
        minor,
        none,
    })
}

/// Effects for every model covariate; in discrete mode non-indicator
/// covariates are skipped.
pub fn marginal_effects(
    result: &EstimationResult,
    data: &Dataset,
    mode: EffectMode,
) -> Result<Vec<MarginalEffect>, ProbitError> {
    result
        .spec
        .covariates()
        .iter()
        .filter(|v| mode == EffectMode::Derivative || is_indicator(data, v))
        .map(|v| marginal_effect(result, data, v, mode))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::SeverityClass;

    fn balanced() -> Dataset {
        let y = (0..300).map(|i| SeverityClass::new((i % 3) as u8).unwrap()).collect();
        Dataset::new(vec![], vec![], y).unwrap()
    }

    #[test]
    fn constants_only_fit_reproduces_shares() {
        let data = balanced();
        let r = estimate(&data, &ModelSpec::default()).unwrap();
        assert!(r.diagnostics.converged);
        let shares = predicted_shares(&r, &data).unwrap();
        for s in shares {
            assert!((s - 1.0 / 3.0).abs() < 1e-6, "{shares:?}");
        }
        assert!((r.ll - r.ll0).abs() < 1e-8);
        assert_eq!(r.n_params, 2);
    }

    #[test]
    fn rank_deficiency_names_columns() {
        let n = 30;
        let a: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let b: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
        let y = (0..n).map(|i| SeverityClass::new((i % 3) as u8).unwrap()).collect();
        let data = Dataset::new(vec!["a".into(), "b".into(), "zero".into()], vec![a, b, vec![0.0; n]], y).unwrap();
        let spec = ModelSpec {
            fixed_vars: vec!["a".into(), "b".into(), "zero".into()],
            ..Default::default()
        };
        let err = estimate(&data, &spec).unwrap_err().to_string();
        assert!(err.contains("b") && err.contains("zero"), "{err}");
    }

    #[test]
    fn missing_class_warns_but_fits() {
        let y = (0..40).map(|i| SeverityClass::new((i % 2) as u8).unwrap()).collect();
        let data = Dataset::new(vec![], vec![], y).unwrap();
        let r = estimate(&data, &ModelSpec::default()).unwrap();
        assert!(r.diagnostics.warnings.iter().any(|w| w.contains("class 2")));
    }

    #[test]
    fn unknown_variable_effect() {
        let data = balanced();
        let r = estimate(&data, &ModelSpec::default()).unwrap();
        assert!(marginal_effect(&r, &data, "nope", EffectMode::Derivative).is_err());
    }
}
