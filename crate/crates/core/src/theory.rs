// SPDX-License-Identifier: MIT OR Apache-2.0

//! First-order asymptotic predictions. Every value drops `o(1)` terms and is
//! meant for comparison against Monte Carlo estimates across a ladder of
//! thresholds, not for a pass/fail at a single point.

use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub quantity: String,
    pub value: f64,
    pub regime: &'static str,
}

impl Prediction {
    pub fn first_order(quantity: impl Into<String>, value: f64) -> Self {
        Self {
            quantity: quantity.into(),
            value,
            regime: "first-order",
        }
    }
}

/// `(log A / (I + mu))^m` for the MS rule.
pub fn ms_delay_prediction(a: f64, info: f64, mu: f64, m: f64) -> f64 {
    (a.ln() / (info + mu)).powf(m)
}

/// `(log A / I)^m` for the MSR rule; the prior tail exponent does not enter.
pub fn msr_delay_prediction(a: f64, info: f64, m: f64) -> f64 {
    (a.ln() / info).powf(m)
}

/// `D c |log c|^r`.
pub fn integrated_risk_prediction(c: f64, r: f64, d: f64) -> f64 {
    d * c * c.ln().abs().powf(r)
}

/// `(|log alpha| / I)^m`, the `mu = 0` form.
pub fn flat_prior_prediction(alpha: f64, info: f64, m: f64) -> f64 {
    (alpha.ln().abs() / info).powf(m)
}
