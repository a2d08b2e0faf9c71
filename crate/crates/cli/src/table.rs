//! Plain-text tables for fit results.

use std::fmt::Write;

use crashsev_core::probit::estimate::{EffectMode, EstimationResult};
use crashsev_core::probit::ParamKind;

/// Four significant digits, without exponent notation for ordinary sizes.
pub fn sig4(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0".into();
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-5..=9).contains(&mag) {
        return format!("{x:.3e}");
    }
    let decimals = (3 - mag).max(0) as usize;
    format!("{x:.decimals$}")
}

fn opt(x: Option<f64>) -> String {
    x.map(sig4).unwrap_or_else(|| "-".into())
}

pub fn fit_table(title: &str, r: &EstimationResult) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "{}", "=".repeat(title.len()));
    let _ = writeln!(
        out,
        "{:<36} {:>11} {:>9} {:>11} {:>11} {:>11}",
        "Variable", "Coefficient", "t-stat", "Serious", "Minor", "None"
    );
    let effect = |name: &str| {
        r.marginal_effects
            .iter()
            .find(|m| m.mode == EffectMode::Derivative && m.variable == name)
    };
    let mut section = None;
    for e in &r.estimates {
        let heading = match e.kind {
            ParamKind::Fixed => "Fixed parameters",
            ParamKind::RandomMean => "Random parameters (mean)",
            ParamKind::MeanShifter => "Heterogeneity in means",
            ParamKind::Cholesky => "Cholesky factor",
            ParamKind::Threshold => "Threshold",
        };
        if section != Some(heading) {
            let _ = writeln!(out, "{heading}");
            section = Some(heading);
        }
        let flag = if e.significant_90 { "" } else { " ns" };
        let (s, m, n) = match effect(&e.name) {
            Some(me) if matches!(e.kind, ParamKind::Fixed | ParamKind::RandomMean) => {
                (sig4(me.serious), sig4(me.minor), sig4(me.none))
            }
            _ => (String::new(), String::new(), String::new()),
        };
        let _ = writeln!(
            out,
            "  {:<34} {:>11} {:>9} {:>11} {:>11} {:>11}",
            format!("{}{flag}", e.name),
            sig4(e.estimate),
            opt(e.t_stat),
            s,
            m,
            n
        );
    }
    let shifter_effects: Vec<_> = r
        .marginal_effects
        .iter()
        .filter(|m| m.mode == EffectMode::Derivative)
        .filter(|m| !r.estimates.iter().any(|e| e.name == m.variable))
        .collect();
    if !shifter_effects.is_empty() {
        let _ = writeln!(out, "Marginal effects of mean-shifting covariates");
        for m in shifter_effects {
            let _ = writeln!(
                out,
                "  {:<34} {:>11} {:>9} {:>11} {:>11} {:>11}",
                m.variable,
                "",
                "",
                sig4(m.serious),
                sig4(m.minor),
                sig4(m.none)
            );
        }
    }
    if !r.random_params.is_empty() {
        let _ = writeln!(out, "Distribution of random parameters");
        let _ = writeln!(out, "  {:<34} {:>11} {:>9} {:>11} {:>11}", "", "Mean", "S.D.", "Above zero", "Below zero");
        for p in &r.random_params {
            let pct = |v: Option<f64>| v.map(|v| format!("{:.2}%", 100.0 * v)).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "  {:<34} {:>11} {:>9} {:>11} {:>11}",
                p.name,
                sig4(p.mean),
                sig4(p.sigma),
                pct(p.share_above_zero),
                pct(p.share_below_zero)
            );
        }
    }
    if !r.correlation.is_empty() {
        let _ = writeln!(out, "Correlation of random parameters");
        for (name, row) in r.random_params.iter().zip(&r.correlation) {
            let cells: Vec<String> = row.iter().map(|c| format!("{:>8}", sig4(*c))).collect();
            let _ = writeln!(out, "  {:<34} {}", name.name, cells.join(" "));
        }
    }
    let _ = writeln!(out, "Model statistics");
    let counts = r.class_counts;
    let _ = writeln!(out, "  {:<34} {}", "Observations", r.n_obs);
    let _ = writeln!(
        out,
        "  {:<34} {} / {} / {}",
        "No injury / minor / serious", counts[0], counts[1], counts[2]
    );
    let _ = writeln!(out, "  {:<34} {}", "Estimated parameters", r.n_params);
    let _ = writeln!(out, "  {:<34} {}", "Halton draws", r.spec.n_draws);
    let _ = writeln!(out, "  {:<34} {}", "Log-likelihood (thresholds only)", sig4(r.ll0));
    let _ = writeln!(out, "  {:<34} {}", "Log-likelihood at convergence", sig4(r.ll));
    let _ = writeln!(out, "  {:<34} {}", "AIC", sig4(r.aic));
    let _ = writeln!(out, "  {:<34} {}", "rho-squared", sig4(r.rho2));
    let d = &r.diagnostics;
    let _ = writeln!(
        out,
        "  {:<34} {} ({} iterations, max |gradient| {})",
        "Converged",
        d.converged,
        d.iterations,
        sig4(d.gradient_max)
    );
    let _ = writeln!(out, "  {:<34} {:?}", "Standard errors", d.se_method);
    for w in &d.warnings {
        let _ = writeln!(out, "  warning: {w}");
    }
    let _ = writeln!(out, "  (ns: |t| below 1.645)");
    out
}
