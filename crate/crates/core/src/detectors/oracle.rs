// SPDX-License-Identifier: MIT OR Apache-2.0

//! Direct double-sum evaluation of the MS and MSR statistics. Quadratic in
//! `n`; used to cross-check the recursions on short paths.

use crate::error::{domain, Result};
use crate::math::log_sum_exp;
use crate::measures::{ChangePrior, MixingGrid};

pub const MAX_ORACLE_STEPS: usize = 50;

/// `log Lambda^W_{k,n}` from the increment rows `increments[j-1]` for
/// `j = k+1..=n`.
fn log_mixture_lr(increments: &[Vec<f64>], grid: &MixingGrid, k: usize, n: usize) -> f64 {
    log_sum_exp((0..grid.len()).map(|i| {
        let llr: f64 = increments[k..n].iter().map(|row| row[i]).sum();
        grid.log_weights()[i] + llr
    }))
}

fn check(increments: &[Vec<f64>], grid: &MixingGrid, n: usize) -> Result<()> {
    if n > MAX_ORACLE_STEPS {
        return domain(format!("oracle refuses n = {n} (limit {MAX_ORACLE_STEPS})"));
    }
    if increments.len() < n {
        return domain("fewer increment rows than n");
    }
    if increments[..n].iter().any(|row| row.len() != grid.len()) {
        return domain("increment rows must have one entry per atom");
    }
    Ok(())
}

/// `log S_n^W = log[(q Lambda_{0,n} + sum_{k<n} pi_k Lambda_{k,n}) / P(nu >= n)]`.
pub fn brute_force_ms(
    increments: &[Vec<f64>],
    prior: &ChangePrior,
    grid: &MixingGrid,
    n: usize,
) -> Result<f64> {
    check(increments, grid, n)?;
    let log_q = prior.q().ln();
    if n == 0 {
        return Ok(log_q - (-prior.q()).ln_1p());
    }
    let mut terms = Vec::with_capacity(n + 1);
    terms.push(log_q + log_mixture_lr(increments, grid, 0, n));
    for k in 0..n {
        terms.push(prior.log_pmf(k as u64) + log_mixture_lr(increments, grid, k, n));
    }
    Ok(log_sum_exp(terms) - prior.log_tail(n as u64))
}

/// `log R_n^W = log[omega Lambda_{0,n} + sum_{k<n} Lambda_{k,n}]`.
pub fn brute_force_msr(
    increments: &[Vec<f64>],
    omega: f64,
    grid: &MixingGrid,
    n: usize,
) -> Result<f64> {
    check(increments, grid, n)?;
    if n == 0 {
        return Ok(omega.ln());
    }
    let mut terms = Vec::with_capacity(n + 1);
    terms.push(omega.ln() + log_mixture_lr(increments, grid, 0, n));
    for k in 0..n {
        terms.push(log_mixture_lr(increments, grid, k, n));
    }
    Ok(log_sum_exp(terms))
}
