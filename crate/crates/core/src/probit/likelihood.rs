//! Simulated log-likelihood of the random-parameter ordered probit.
//!
//! For observation i with draws ω_r (shared across observations), the
//! coefficient vector is β_i = β + η z_i + Γ ω_r and
//!
//! ```text
//! LL = Σ_i ln( (1/R) Σ_r P(y_i | β_i^(r)) )
//! ```
//!
//! Observations with identical covariates and response contribute
//! identically, so they are collapsed into weighted patterns before
//! evaluation. Patterns are kept in a canonical order, which makes the
//! reduction independent of the input row order.

use std::collections::BTreeMap;

use super::data::Dataset;
use super::model::{CholeskyMode, Layout, ModelSpec, Parameters, CONSTANT};
use super::ProbitError;
use crate::normal;

/// Simulated probabilities below this are clamped before taking logs.
pub const PROB_FLOOR: f64 = 1e-300;

/// How to treat model covariates absent from a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissingPolicy {
    Error,
    /// Treat the absent column as all zeros.
    ZeroFill,
}

/// P(y = 0), P(y = 1), P(y = 2) for linear index `xb` and threshold `u1`.
pub fn category_probabilities(xb: f64, u1: f64) -> Result<[f64; 3], ProbitError> {
    if !(u1 > 0.0) {
        return Err(ProbitError::Domain(format!("threshold u1 must be positive, got {u1}")));
    }
    let p0 = normal::cdf(-xb);
    let p2 = normal::cdf(xb - u1);
    Ok([p0, middle_probability(xb, u1), p2])
}

/// Φ(u1 − xb) − Φ(−xb), taken in whichever tail keeps precision.
#[inline]
fn middle_probability(xb: f64, u1: f64) -> f64 {
    let d = if xb < 0.0 {
        normal::cdf(u1 - xb) - normal::cdf(-xb)
    } else {
        normal::cdf(xb) - normal::cdf(xb - u1)
    };
    d.max(0.0)
}

/// Probability of class `y` and its derivatives with respect to the linear
/// index and the threshold.
#[inline]
fn class_terms(y: u8, xb: f64, u1: f64) -> (f64, f64, f64) {
    match y {
        0 => (normal::cdf(-xb), -normal::pdf(xb), 0.0),
        1 => {
            let upper = normal::pdf(u1 - xb);
            (middle_probability(xb, u1), normal::pdf(xb) - upper, upper)
        }
        _ => {
            let d = normal::pdf(xb - u1);
            (normal::cdf(xb - u1), d, -d)
        }
    }
}

/// Coefficients for one observation and one standard-normal draw: fixed
/// coefficients unchanged, then β + η z + Γ ω for the random ones.
pub fn draw_coefficients(
    params: &Parameters,
    shifter_values: &[Vec<f64>],
    omega: &[f64],
) -> Result<Vec<f64>, ProbitError> {
    let k = params.beta_random_mean.len();
    if omega.len() != k || shifter_values.len() != k || params.cholesky.len() != k {
        return Err(ProbitError::Spec(format!(
            "draw has {} dimensions, shifters {}, model has {k} random coefficients",
            omega.len(),
            shifter_values.len()
        )));
    }
    let mut out = params.beta_fixed.clone();
    for i in 0..k {
        if shifter_values[i].len() != params.eta[i].len() {
            return Err(ProbitError::Spec(format!(
                "random coefficient {i} expects {} shifter values, got {}",
                params.eta[i].len(),
                shifter_values[i].len()
            )));
        }
        let shift: f64 = params.eta[i].iter().zip(&shifter_values[i]).map(|(e, z)| e * z).sum();
        let noise: f64 = (0..=i).map(|j| params.cholesky[i][j] * omega[j]).sum();
        out.push(params.beta_random_mean[i] + shift + noise);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct Pattern {
    weight: f64,
    y: u8,
    /// Fixed covariates, then random covariates, then shifter values.
    values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loglik: f64,
    pub gradient: Option<Vec<f64>>,
    /// Observations whose simulated probability hit [`PROB_FLOOR`].
    pub n_clamped: usize,
}

/// Precomputed design, draws and layout for repeated likelihood evaluation.
#[derive(Debug, Clone)]
pub struct Evaluator {
    layout: Layout,
    patterns: Vec<Pattern>,
    /// Row-major `n_draws x n_random` standard-normal draws.
    draws: Vec<f64>,
    n_draws: usize,
    n_obs: usize,
    /// Owning random coefficient for each flat shifter index.
    eta_owner: Vec<usize>,
}

fn column<'a>(data: &'a Dataset, name: &str, policy: MissingPolicy) -> Result<Option<&'a [f64]>, ProbitError> {
    if name == CONSTANT {
        return Ok(None);
    }
    match (data.column(name), policy) {
        (Some(c), _) => Ok(Some(c)),
        (None, MissingPolicy::ZeroFill) => Ok(Some(&[])),
        (None, MissingPolicy::Error) => Err(ProbitError::Spec(format!("unknown variable {name}"))),
    }
}

impl Evaluator {
    pub fn new(
        spec: &ModelSpec,
        mode: CholeskyMode,
        data: &Dataset,
        policy: MissingPolicy,
    ) -> Result<Self, ProbitError> {
        spec.validate()?;
        let layout = Layout::new(spec, mode);
        // `None` is the intercept; an empty slice is a zero-filled column.
        let mut cols: Vec<Option<&[f64]>> = Vec::new();
        for name in layout.fixed.iter().chain(&layout.random) {
            cols.push(column(data, name, policy)?);
        }
        let mut eta_owner = Vec::new();
        for (k, zs) in layout.shifters.iter().enumerate() {
            for z in zs {
                cols.push(column(data, z, policy)?);
                eta_owner.push(k);
            }
        }

        let mut grouped: BTreeMap<(u8, Vec<u64>), (f64, Vec<f64>)> = BTreeMap::new();
        for (i, y) in data.response().iter().enumerate() {
            let values: Vec<f64> = cols
                .iter()
                .map(|c| match c {
                    None => 1.0,
                    Some(c) => c.get(i).copied().unwrap_or(0.0),
                })
                .collect();
            let key = (y.ordinal(), values.iter().map(|v| v.to_bits()).collect());
            grouped.entry(key).or_insert((0.0, values)).0 += 1.0;
        }
        let patterns = grouped
            .into_iter()
            .map(|((y, _), (weight, values))| Pattern { weight, y, values })
            .collect();

        let k = layout.n_random();
        let (n_draws, draws) = if layout.chol.is_empty() {
            (1, vec![0.0; k])
        } else {
            (spec.n_draws, spec.halton.normal_draws(spec.n_draws, k)?)
        };
        Ok(Evaluator {
            layout,
            patterns,
            draws,
            n_draws,
            n_obs: data.len(),
            eta_owner,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn n_patterns(&self) -> usize {
        self.patterns.len()
    }

    pub fn n_draws(&self) -> usize {
        self.n_draws
    }

    /// Draw `r` as a slice over random dimensions.
    pub fn draw(&self, r: usize) -> &[f64] {
        let k = self.layout.n_random();
        &self.draws[r * k..(r + 1) * k]
    }

    pub fn loglik(&self, theta: &[f64]) -> f64 {
        self.evaluate(theta, false).loglik
    }

    pub fn loglik_and_gradient(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let e = self.evaluate(theta, true);
        (e.loglik, e.gradient.unwrap())
    }

    pub fn evaluate(&self, theta: &[f64], want_gradient: bool) -> Evaluation {
        let view = View::new(&self.layout, theta);
        let mut ll = Neumaier::default();
        let mut grad = want_gradient.then(|| vec![0.0; theta.len()]);
        let mut scratch = Scratch::new(&self.layout);
        let mut n_clamped = 0;
        for p in &self.patterns {
            let clamped = self.pattern_terms(p, &view, grad.is_some(), &mut scratch);
            if clamped {
                n_clamped += p.weight as usize;
            }
            ll.add(p.weight * scratch.lnl);
            if let Some(g) = grad.as_mut() {
                for (gi, si) in g.iter_mut().zip(&scratch.score) {
                    *gi += p.weight * si;
                }
            }
        }
        Evaluation {
            loglik: ll.sum(),
            gradient: grad,
            n_clamped,
        }
    }

    /// Per-pattern (weight, score) pairs, for outer-product covariance.
    pub fn pattern_scores(&self, theta: &[f64]) -> Vec<(f64, Vec<f64>)> {
        let view = View::new(&self.layout, theta);
        let mut scratch = Scratch::new(&self.layout);
        self.patterns
            .iter()
            .map(|p| {
                self.pattern_terms(p, &view, true, &mut scratch);
                (p.weight, scratch.score.clone())
            })
            .collect()
    }

    /// Simulated class probabilities averaged over draws, per pattern, with
    /// the pattern weight.
    pub fn pattern_probabilities(&self, theta: &[f64]) -> Vec<(f64, [f64; 3])> {
        let view = View::new(&self.layout, theta);
        let mut scratch = Scratch::new(&self.layout);
        self.patterns
            .iter()
            .map(|p| {
                let mut acc = [0.0; 3];
                for xb in self.linear_indices(p, &view, &mut scratch) {
                    let pr = category_probabilities(xb, view.u1).expect("u1 = exp(.) > 0");
                    for (a, v) in acc.iter_mut().zip(pr) {
                        *a += v;
                    }
                }
                let r = self.n_draws as f64;
                (p.weight, acc.map(|a| a / r))
            })
            .collect()
    }

    /// Sample-weighted mean of simulated class probabilities.
    pub fn mean_probabilities(&self, theta: &[f64]) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for (w, pr) in self.pattern_probabilities(theta) {
            for (a, v) in acc.iter_mut().zip(pr) {
                *a += w * v;
            }
        }
        acc.map(|a| a / self.n_obs as f64)
    }

    /// Average of ∂P(y=j)/∂x over observations and draws, where `slope`
    /// gives ∂xb/∂x for a pattern's values and the draw's random coefficients.
    pub fn average_index_effects<F>(&self, theta: &[f64], mut slope: F) -> [f64; 3]
    where
        F: FnMut(&[f64], &[f64]) -> f64,
    {
        let view = View::new(&self.layout, theta);
        let mut scratch = Scratch::new(&self.layout);
        let k = self.layout.n_random();
        let mut acc = [0.0; 3];
        let mut coef = vec![0.0; k];
        for p in &self.patterns {
            let xbs: Vec<f64> = self.linear_indices(p, &view, &mut scratch).collect();
            let mean = scratch.mean.clone();
            let mut sum = [0.0; 3];
            for (r, &xb) in xbs.iter().enumerate() {
                let omega = self.draw(r);
                for i in 0..k {
                    coef[i] = mean[i] + (0..=i).map(|j| view.chol[i * k + j] * omega[j]).sum::<f64>();
                }
                let s = slope(&p.values, &coef);
                let lo = normal::pdf(xb);
                let hi = normal::pdf(view.u1 - xb);
                // [φ(μ_{j-1} − xb) − φ(μ_j − xb)]·∂xb/∂x with μ_{-1} = −∞, μ_0 = 0,
                // μ_1 = u1, μ_2 = +∞.
                sum[0] += -lo * s;
                sum[1] += (lo - hi) * s;
                sum[2] += hi * s;
            }
            for (a, v) in acc.iter_mut().zip(sum) {
                *a += p.weight * v / self.n_draws as f64;
            }
        }
        acc.map(|a| a / self.n_obs as f64)
    }

    fn linear_indices<'a>(
        &'a self,
        p: &Pattern,
        view: &View<'_>,
        scratch: &mut Scratch,
    ) -> impl Iterator<Item = f64> + 'a {
        let base = self.prepare(p, view, scratch);
        let loadings = scratch.loadings.clone();
        let k = self.layout.n_random();
        (0..self.n_draws).map(move |r| {
            let omega = &self.draws[r * k..(r + 1) * k];
            base + loadings.iter().zip(omega).map(|(c, w)| c * w).sum::<f64>()
        })
    }

    /// Deterministic part of the index; fills per-coefficient means and the
    /// draw loadings c_l = Σ_{k ≥ l} x_k Γ_kl.
    fn prepare(&self, p: &Pattern, view: &View<'_>, scratch: &mut Scratch) -> f64 {
        let nf = self.layout.fixed.len();
        let k = self.layout.n_random();
        let x_fixed = &p.values[..nf];
        let x_random = &p.values[nf..nf + k];
        let z = &p.values[nf + k..];
        let mut base: f64 = view.beta_fixed.iter().zip(x_fixed).map(|(b, x)| b * x).sum();
        scratch.mean.copy_from_slice(view.beta_random);
        for (e, (&owner, zv)) in self.eta_owner.iter().zip(z).enumerate() {
            scratch.mean[owner] += view.eta[e] * zv;
        }
        for i in 0..k {
            base += scratch.mean[i] * x_random[i];
        }
        for l in 0..k {
            scratch.loadings[l] = (l..k).map(|i| x_random[i] * view.chol[i * k + l]).sum();
        }
        base
    }

    /// Fills `scratch.lnl` and, if asked, `scratch.score`. Returns whether
    /// the probability was clamped.
    fn pattern_terms(&self, p: &Pattern, view: &View<'_>, want_gradient: bool, scratch: &mut Scratch) -> bool {
        let base = self.prepare(p, view, scratch);
        let k = self.layout.n_random();
        let (mut s, mut d, mut u) = (0.0, 0.0, 0.0);
        scratch.d_omega.iter_mut().for_each(|v| *v = 0.0);
        for r in 0..self.n_draws {
            let omega = &self.draws[r * k..(r + 1) * k];
            let xb = base + scratch.loadings.iter().zip(omega).map(|(c, w)| c * w).sum::<f64>();
            let (pr, dx, du) = class_terms(p.y, xb, view.u1);
            s += pr;
            if want_gradient {
                d += dx;
                u += du;
                for (acc, w) in scratch.d_omega.iter_mut().zip(omega) {
                    *acc += dx * w;
                }
            }
        }
        let r = self.n_draws as f64;
        let clamped = s / r < PROB_FLOOR || !s.is_finite();
        scratch.lnl = if clamped { PROB_FLOOR.ln() } else { (s / r).ln() };
        if !want_gradient {
            return clamped;
        }
        let g = &mut scratch.score;
        if clamped {
            g.iter_mut().for_each(|v| *v = 0.0);
            return true;
        }
        let inv = 1.0 / s;
        let lay = &self.layout;
        let nf = lay.fixed.len();
        let x_random = &p.values[nf..nf + k];
        let z = &p.values[nf + k..];
        for f in 0..nf {
            g[f] = p.values[f] * d * inv;
        }
        let off_r = lay.offset_random();
        for i in 0..k {
            g[off_r + i] = x_random[i] * d * inv;
        }
        let off_e = lay.offset_eta();
        for (e, &owner) in self.eta_owner.iter().enumerate() {
            g[off_e + e] = z[e] * x_random[owner] * d * inv;
        }
        let off_c = lay.offset_chol();
        for (c, &(i, j)) in lay.chol.iter().enumerate() {
            g[off_c + c] = x_random[i] * scratch.d_omega[j] * inv;
        }
        g[lay.index_threshold()] = view.u1 * u * inv;
        false
    }
}

struct View<'a> {
    beta_fixed: &'a [f64],
    beta_random: &'a [f64],
    eta: &'a [f64],
    /// Dense row-major k x k.
    chol: Vec<f64>,
    u1: f64,
}

impl<'a> View<'a> {
    fn new(layout: &Layout, theta: &'a [f64]) -> Self {
        assert_eq!(theta.len(), layout.n_params(), "parameter vector length");
        let k = layout.n_random();
        let mut chol = vec![0.0; k * k];
        let off = layout.offset_chol();
        for (c, &(i, j)) in layout.chol.iter().enumerate() {
            chol[i * k + j] = theta[off + c];
        }
        View {
            beta_fixed: &theta[..layout.fixed.len()],
            beta_random: &theta[layout.offset_random()..layout.offset_eta()],
            eta: &theta[layout.offset_eta()..layout.offset_chol()],
            chol,
            u1: theta[layout.index_threshold()].exp(),
        }
    }
}

struct Scratch {
    mean: Vec<f64>,
    loadings: Vec<f64>,
    d_omega: Vec<f64>,
    score: Vec<f64>,
    lnl: f64,
}

impl Scratch {
    fn new(layout: &Layout) -> Self {
        let k = layout.n_random();
        Scratch {
            mean: vec![0.0; k],
            loadings: vec![0.0; k],
            d_omega: vec![0.0; k],
            score: vec![0.0; layout.n_params()],
            lnl: 0.0,
        }
    }
}

/// Compensated summation.
#[derive(Default, Clone, Copy)]
struct Neumaier {
    sum: f64,
    c: f64,
}

impl Neumaier {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.c += (self.sum - t) + v;
        } else {
            self.c += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn sum(self) -> f64 {
        self.sum + self.c
    }
}

/// Simulated log-likelihood of `params` under `spec` on `data`.
pub fn simulated_loglik(data: &Dataset, spec: &ModelSpec, params: &Parameters) -> Result<f64, ProbitError> {
    loglik_at(data, spec, params, MissingPolicy::Error)
}

/// As [`simulated_loglik`] with an explicit policy for absent covariates.
pub fn loglik_at(
    data: &Dataset,
    spec: &ModelSpec,
    params: &Parameters,
    policy: MissingPolicy,
) -> Result<f64, ProbitError> {
    let ev = Evaluator::new(spec, spec.cholesky_mode(), data, policy)?;
    let theta = ev.layout().pack(params)?;
    let e = ev.evaluate(&theta, false);
    if e.n_clamped > 0 {
        log::warn!("{} simulated probabilities clamped at {PROB_FLOOR:e}", e.n_clamped);
    }
    Ok(e.loglik)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::SeverityClass;

    #[test]
    fn probabilities_at_zero() {
        let p = category_probabilities(0.0, 1.0).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15);
        assert!((p[1] - 0.341_344_746_068_542_9).abs() < 1e-12);
        assert!((p[2] - 0.158_655_253_931_457_05).abs() < 1e-12);
        assert!(category_probabilities(0.0, 0.0).is_err());
    }

    #[test]
    fn probabilities_limit() {
        let p = category_probabilities(60.0, 1.0).unwrap();
        assert_eq!(p, [0.0, 0.0, 1.0]);
        let p = category_probabilities(-60.0, 1.0).unwrap();
        assert_eq!(p, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn draw_coefficient_cases() {
        let p = Parameters {
            beta_fixed: vec![0.7],
            beta_random_mean: vec![1.0, 2.0],
            eta: vec![vec![0.0], vec![]],
            cholesky: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            threshold_u1: 1.0,
        };
        let z = vec![vec![1.0], vec![]];
        assert_eq!(draw_coefficients(&p, &z, &[0.3, -2.0]).unwrap(), vec![0.7, 1.0, 2.0]);
        let mut q = p.clone();
        q.cholesky = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(draw_coefficients(&q, &z, &[1.0, -1.0]).unwrap(), vec![0.7, 2.0, 1.0]);
        q.cholesky = vec![vec![2.0, 0.0], vec![1.0, 1.0]];
        q.beta_random_mean = vec![0.0, 0.0];
        assert_eq!(draw_coefficients(&q, &z, &[1.0, 1.0]).unwrap(), vec![0.7, 2.0, 2.0]);
        q.eta = vec![vec![0.5], vec![]];
        assert_eq!(draw_coefficients(&q, &z, &[1.0, 1.0]).unwrap(), vec![0.7, 2.5, 2.0]);
        assert!(draw_coefficients(&q, &z, &[1.0]).is_err());
    }

    #[test]
    fn single_observation_loglik() {
        let data = Dataset::new(vec![], vec![], vec![SeverityClass::NONE]).unwrap();
        let spec = ModelSpec::default();
        let layout = Layout::new(&spec, CholeskyMode::Zero);
        let mut p = layout.zeros(1.0);
        p.beta_fixed[0] = 0.0;
        let ll = simulated_loglik(&data, &spec, &p).unwrap();
        assert!((ll - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn unknown_variable() {
        let data = Dataset::new(vec![], vec![], vec![SeverityClass::NONE]).unwrap();
        let spec = ModelSpec {
            fixed_vars: vec!["missing".into()],
            ..Default::default()
        };
        let p = Layout::new(&spec, CholeskyMode::Zero).zeros(1.0);
        assert!(matches!(simulated_loglik(&data, &spec, &p), Err(ProbitError::Spec(_))));
        assert!(loglik_at(&data, &spec, &p, MissingPolicy::ZeroFill).is_ok());
    }

    #[test]
    fn clamping_is_counted() {
        let data = Dataset::new(vec![], vec![], vec![SeverityClass::NONE]).unwrap();
        let spec = ModelSpec::default();
        let ev = Evaluator::new(&spec, CholeskyMode::Zero, &data, MissingPolicy::Error).unwrap();
        let e = ev.evaluate(&[100.0, 0.0], true);
        assert_eq!(e.n_clamped, 1);
        assert!(e.loglik.is_finite());
        assert!(e.gradient.unwrap().iter().all(|g| g.is_finite()));
    }
}
