//! BFGS minimization with a strong-Wolfe line search.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Converged when max |g_i| <= gtol_rel * max(|f|, 1).
    pub gtol_rel: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iter: 500,
            gtol_rel: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub message: String,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

struct Probe {
    alpha: f64,
    f: f64,
    g: Vec<f64>,
    dg: f64,
}

/// Minimize `fg`, which returns the objective and its gradient.
pub fn minimize<F>(mut fg: F, x0: &[f64], opts: &BfgsOptions) -> BfgsResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut f, mut g) = fg(&x);
    let mut h = identity(n);
    let mut first = true;
    let converged = |f: f64, g: &[f64]| max_abs(g) <= opts.gtol_rel * f.abs().max(1.0);

    if !f.is_finite() {
        return BfgsResult {
            x,
            f,
            gradient: g,
            iterations: 0,
            converged: false,
            message: "objective not finite at the starting point".into(),
        };
    }

    for iter in 0..opts.max_iter {
        if converged(f, &g) {
            return BfgsResult { x, f, gradient: g, iterations: iter, converged: true, message: "gradient tolerance met".into() };
        }
        let mut d: Vec<f64> = matvec(&h, &g).into_iter().map(|v| -v).collect();
        let mut dg0 = dot(&d, &g);
        if !(dg0 < 0.0) {
            // lost descent; restart from steepest descent
            h = identity(n);
            d = g.iter().map(|v| -v).collect();
            dg0 = dot(&d, &g);
            first = true;
        }
        let alpha0 = if first { (1.0 / max_abs(&g).max(1e-12)).min(1.0) } else { 1.0 };
        let probe = match line_search(&mut fg, &x, f, dg0, &d, alpha0) {
            Some(p) => p,
            None => {
                if !first {
                    h = identity(n);
                    first = true;
                    continue;
                }
                let ok = converged(f, &g);
                return BfgsResult {
                    x,
                    f,
                    gradient: g,
                    iterations: iter,
                    converged: ok,
                    message: "line search failed to decrease the objective".into(),
                };
            }
        };
        let s: Vec<f64> = d.iter().map(|v| probe.alpha * v).collect();
        let y: Vec<f64> = probe.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        for (xi, si) in x.iter_mut().zip(&s) {
            *xi += si;
        }
        let f_prev = f;
        f = probe.f;
        g = probe.g;

        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if first {
                let scale = sy / dot(&y, &y);
                h.iter_mut().for_each(|row| row.iter_mut().for_each(|v| *v *= scale));
                first = false;
            }
            bfgs_update(&mut h, &s, &y, sy);
        }
        if (f_prev - f).abs() <= 1e-15 * f.abs().max(1.0) && max_abs(&s) <= 1e-14 * max_abs(&x).max(1.0) {
            let ok = converged(f, &g);
            return BfgsResult { x, f, gradient: g, iterations: iter + 1, converged: ok, message: "no further progress".into() };
        }
    }
    let ok = converged(f, &g);
    BfgsResult {
        x,
        f,
        gradient: g,
        iterations: opts.max_iter,
        converged: ok,
        message: if ok { "gradient tolerance met".into() } else { "iteration limit reached".into() },
    }
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

fn matvec(h: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    h.iter().map(|row| dot(row, v)).collect()
}

/// H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ.
fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy = matvec(h, y);
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i][j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;

fn line_search<F>(fg: &mut F, x: &[f64], f0: f64, dg0: f64, d: &[f64], alpha0: f64) -> Option<Probe>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut eval = |alpha: f64| {
        let xt: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + alpha * di).collect();
        let (f, g) = fg(&xt);
        let dg = dot(&g, d);
        Probe { alpha, f, g, dg }
    };

    let mut prev = Probe { alpha: 0.0, f: f0, g: Vec::new(), dg: dg0 };
    let mut alpha = alpha0;
    for i in 0..40 {
        let cur = eval(alpha);
        if !cur.f.is_finite() {
            alpha = 0.5 * (prev.alpha + alpha);
            continue;
        }
        if cur.f > f0 + C1 * alpha * dg0 || (i > 0 && cur.f >= prev.f) {
            return zoom(&mut eval, f0, dg0, prev, cur);
        }
        if cur.dg.abs() <= -C2 * dg0 {
            return Some(cur);
        }
        if cur.dg >= 0.0 {
            return zoom(&mut eval, f0, dg0, cur, prev);
        }
        prev = cur;
        alpha *= 2.0;
    }
    None
}

fn zoom<E>(eval: &mut E, f0: f64, dg0: f64, mut lo: Probe, mut hi: Probe) -> Option<Probe>
where
    E: FnMut(f64) -> Probe,
{
    for _ in 0..60 {
        let alpha = interpolate(&lo, &hi);
        let cur = eval(alpha);
        if !cur.f.is_finite() || cur.f > f0 + C1 * alpha * dg0 || cur.f >= lo.f {
            hi = cur;
        } else {
            if cur.dg.abs() <= -C2 * dg0 {
                return Some(cur);
            }
            if cur.dg * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
        if (hi.alpha - lo.alpha).abs() < 1e-16 * lo.alpha.abs().max(1e-300) {
            break;
        }
    }
    // Accept any sufficient-decrease point even without the curvature condition.
    (lo.alpha > 0.0 && lo.f < f0).then_some(lo)
}

/// Minimizer of the cubic through both ends, safeguarded to the interior.
fn interpolate(lo: &Probe, hi: &Probe) -> f64 {
    let (a, b) = (lo.alpha, hi.alpha);
    let mid = 0.5 * (a + b);
    if !hi.f.is_finite() || !lo.f.is_finite() {
        return mid;
    }
    let d1 = lo.dg + hi.dg - 3.0 * (lo.f - hi.f) / (a - b);
    let disc = d1 * d1 - lo.dg * hi.dg;
    if disc < 0.0 {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (hi.dg + d2 - d1) / (hi.dg - lo.dg + 2.0 * d2);
    let (lo_b, hi_b) = (a.min(b), a.max(b));
    let margin = 0.1 * (hi_b - lo_b);
    if t.is_finite() && t > lo_b + margin && t < hi_b - margin {
        t
    } else {
        mid
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let fg = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            (f, g)
        };
        let opts = BfgsOptions { max_iter: 500, gtol_rel: 1e-10 };
        let r = minimize(fg, &[-1.2, 1.0], &opts);
        assert!(r.converged, "{}", r.message);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6, "{:?}", r.x);
    }

    #[test]
    fn quadratic_in_few_iterations() {
        let fg = |x: &[f64]| {
            let f = 0.5 * (x[0] * x[0] + 10.0 * x[1] * x[1] + 100.0 * x[2] * x[2]) - x[0];
            (f, vec![x[0] - 1.0, 10.0 * x[1], 100.0 * x[2]])
        };
        let r = minimize(fg, &[5.0, 5.0, 5.0], &BfgsOptions { max_iter: 100, gtol_rel: 1e-12 });
        assert!(r.converged);
        assert!(r.iterations < 30);
        assert!((r.x[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn iteration_cap_flags_nonconvergence() {
        let fg = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            ((1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2), vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)])
        };
        let r = minimize(fg, &[-1.2, 1.0], &BfgsOptions { max_iter: 3, gtol_rel: 1e-10 });
        assert!(!r.converged);
        assert_eq!(r.iterations, 3);
    }
}
