// SPDX-License-Identifier: MIT OR Apache-2.0

//! Threshold selection.
//!
//! * MS: `A = (1 - alpha) / alpha` keeps the weighted PFA at or below `alpha`
//!   because `PFA(T_A) <= 1 / (1 + A)`.
//! * MSR: `A = (omega b + mean) / alpha`, from the martingale bound.
//! * Bayes cost: `A` solves `r D A (log A)^{r-1} = 1 / c`, the minimizer of
//!   `G(A) = 1/A + c D (log A)^r`.
//!
//! All bounds ignore overshoot, so they are conservative.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::measures::{ChangePrior, MixingGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum ThresholdKind {
    MsPfa {
        alpha: f64,
        q: f64,
    },
    MsrPfa {
        alpha: f64,
        omega: f64,
        b: f64,
        mean: f64,
    },
    BayesCost {
        c: f64,
        r: f64,
        d: f64,
        rhs: f64,
    },
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSpec {
    pub kind: ThresholdKind,
    pub threshold: f64,
    pub log_threshold: f64,
    pub note: String,
}

impl ThresholdSpec {
    pub fn explicit(log_threshold: f64) -> Result<Self> {
        if !log_threshold.is_finite() {
            return domain("log threshold must be finite");
        }
        Ok(Self {
            kind: ThresholdKind::Explicit,
            threshold: log_threshold.exp(),
            log_threshold,
            note: "user-supplied threshold".into(),
        })
    }
}

pub fn ms_threshold(alpha: f64, q: f64) -> Result<ThresholdSpec> {
    if !(alpha > 0.0 && alpha < 1.0 - q) {
        return domain(format!(
            "MS calibration needs 0 < alpha < 1 - q, got alpha = {alpha}, q = {q}"
        ));
    }
    let a = (1.0 - alpha) / alpha;
    Ok(ThresholdSpec {
        kind: ThresholdKind::MsPfa { alpha, q },
        threshold: a,
        log_threshold: (-alpha).ln_1p() - alpha.ln(),
        note: format!("A = (1 - alpha)/alpha guarantees PFA <= {alpha} (bound 1/(1+A))"),
    })
}

pub fn msr_threshold(alpha: f64, omega: f64, prior: &ChangePrior) -> Result<ThresholdSpec> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return domain(format!("alpha must lie in (0, 1), got {alpha}"));
    }
    if !(omega >= 0.0 && omega.is_finite()) {
        return domain(format!("head-start omega must be >= 0, got {omega}"));
    }
    let mean = prior.mean();
    if !mean.is_finite() {
        return domain("MSR calibration needs a prior with finite mean");
    }
    let b = prior.b();
    let numer = omega * b + mean;
    if !(numer > 0.0) {
        return domain("omega b + mean must be positive for a finite MSR threshold");
    }
    let a = numer / alpha;
    Ok(ThresholdSpec {
        kind: ThresholdKind::MsrPfa {
            alpha,
            omega,
            b,
            mean,
        },
        threshold: a,
        log_threshold: numer.ln() - alpha.ln(),
        note: format!("A = (omega b + mean)/alpha guarantees PFA <= {alpha}"),
    })
}

/// `D_{mu,r} = sum_i w_i (I_i + mu)^{-r}`.
pub fn d_constant(grid: &MixingGrid, info: &[f64], mu: f64, r: f64) -> Result<f64> {
    if info.len() != grid.len() {
        return domain(format!(
            "{} information numbers for {} atoms",
            info.len(),
            grid.len()
        ));
    }
    if info.iter().any(|i| !(*i > 0.0)) {
        return domain("information numbers must be positive");
    }
    if !(mu >= 0.0) || r < 1.0 {
        return domain("need mu >= 0 and r >= 1");
    }
    Ok(grid
        .log_weights()
        .iter()
        .zip(info)
        .map(|(lw, i)| (lw - r * (i + mu).ln()).exp())
        .sum())
}

const LOG_A_BRACKET: (f64, f64) = (1.0, 100.0);

/// Solves `r D A (log A)^{r-1} = rhs` for `log A` by bisection on
/// `[1, 100]`.
fn solve_cost_equation(r: f64, d: f64, rhs: f64) -> Result<f64> {
    // residual in log space: increasing in log A on the bracket
    let f = |la: f64| r.ln() + d.ln() + la + (r - 1.0) * la.ln() - rhs.ln();
    let (mut lo, mut hi) = LOG_A_BRACKET;
    if f(lo) > 0.0 || f(hi) < 0.0 {
        return domain(format!(
            "no threshold with log A in [{lo}, {hi}] solves r D A (log A)^(r-1) = {rhs:e} \
             (r = {r}, D = {d})"
        ));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(if f(lo).abs() <= f(hi).abs() { lo } else { hi })
}

fn check_cost_inputs(c: f64, r: f64, d: f64) -> Result<()> {
    if !(c > 0.0 && c.is_finite()) {
        return domain(format!("cost c must be positive, got {c}"));
    }
    if !(r >= 1.0 && r.is_finite()) {
        return domain(format!("moment order r must be >= 1, got {r}"));
    }
    if !(d > 0.0 && d.is_finite()) {
        return domain(format!("D must be positive, got {d}"));
    }
    Ok(())
}

pub fn bayes_threshold(c: f64, r: f64, d: f64) -> Result<ThresholdSpec> {
    check_cost_inputs(c, r, d)?;
    let log_a = solve_cost_equation(r, d, 1.0 / c)?;
    Ok(ThresholdSpec {
        kind: ThresholdKind::BayesCost {
            c,
            r,
            d,
            rhs: 1.0 / c,
        },
        threshold: log_a.exp(),
        log_threshold: log_a,
        note: "minimizer of 1/A + c D (log A)^r".into(),
    })
}

/// MSR variant with right-hand side `(omega b + mean) / c`.
pub fn bayes_threshold_msr(
    c: f64,
    r: f64,
    d: f64,
    omega: f64,
    prior: &ChangePrior,
) -> Result<ThresholdSpec> {
    check_cost_inputs(c, r, d)?;
    let numer = omega * prior.b() + prior.mean();
    if !(numer > 0.0 && numer.is_finite()) {
        return domain("MSR cost calibration needs 0 < omega b + mean < infinity");
    }
    let rhs = numer / c;
    let log_a = solve_cost_equation(r, d, rhs)?;
    Ok(ThresholdSpec {
        kind: ThresholdKind::BayesCost { c, r, d, rhs },
        threshold: log_a.exp(),
        log_threshold: log_a,
        note: "solves r D A (log A)^(r-1) = (omega b + mean)/c".into(),
    })
}

/// `1/A + c D (log A)^r`.
pub fn approximate_cost(a: f64, c: f64, r: f64, d: f64) -> f64 {
    1.0 / a + c * d * a.ln().powf(r)
}
