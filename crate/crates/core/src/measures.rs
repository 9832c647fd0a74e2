// SPDX-License-Identifier: MIT OR Apache-2.0

//! Change-point priors and discrete mixing measures.
//!
//! A [`ChangePrior`] carries the mass `q` placed on changes that happened
//! before observation began (`nu <= -1`) plus a pmf on `nu = 0, 1, 2, ...`.
//! Tail values `P(nu >= n)` come from closed forms so that the Shiryaev
//! normalization never drifts over long runs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::math::{hurwitz_zeta, log_sum_exp};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorFamily {
    /// `pi_k = (1-q) rho (1-rho)^k`.
    Geometric { rho: f64 },
    /// `pi_k` proportional to `(k+2)^{-c_exponent}`.
    HeavyTail { c_exponent: f64 },
    /// All non-negative mass at a single index.
    PointMass { at: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChangePrior {
    q: f64,
    family: PriorFamily,
    // log zeta(c, 2) for the heavy-tail family, unused otherwise
    log_norm: f64,
}

pub fn geometric_prior(rho: f64, q: f64) -> Result<ChangePrior> {
    if !(rho > 0.0 && rho < 1.0) {
        return domain(format!("geometric prior needs 0 < rho < 1, got {rho}"));
    }
    check_q(q)?;
    Ok(ChangePrior {
        q,
        family: PriorFamily::Geometric { rho },
        log_norm: 0.0,
    })
}

pub fn heavy_tail_prior(c_exponent: f64, q: f64) -> Result<ChangePrior> {
    if !(c_exponent > 1.0) || !c_exponent.is_finite() {
        return domain(format!(
            "heavy-tail prior needs c_exponent > 1 to normalize, got {c_exponent}"
        ));
    }
    check_q(q)?;
    Ok(ChangePrior {
        q,
        family: PriorFamily::HeavyTail { c_exponent },
        log_norm: hurwitz_zeta(c_exponent, 2.0).ln(),
    })
}

/// Degenerate prior with `P(nu = at) = 1 - q`.
pub fn point_mass_prior(at: u64, q: f64) -> Result<ChangePrior> {
    check_q(q)?;
    Ok(ChangePrior {
        q,
        family: PriorFamily::PointMass { at },
        log_norm: 0.0,
    })
}

fn check_q(q: f64) -> Result<()> {
    if !(0.0..1.0).contains(&q) {
        return domain(format!("q must lie in [0, 1), got {q}"));
    }
    Ok(())
}

impl ChangePrior {
    pub fn from_family(family: PriorFamily, q: f64) -> Result<Self> {
        match family {
            PriorFamily::Geometric { rho } => geometric_prior(rho, q),
            PriorFamily::HeavyTail { c_exponent } => heavy_tail_prior(c_exponent, q),
            PriorFamily::PointMass { at } => point_mass_prior(at, q),
        }
    }

    pub fn family(&self) -> PriorFamily {
        self.family
    }

    /// Mass on `nu <= -1`.
    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn log_pmf(&self, k: u64) -> f64 {
        let log_head = (-self.q).ln_1p();
        match self.family {
            PriorFamily::Geometric { rho } => log_head + rho.ln() + k as f64 * (-rho).ln_1p(),
            PriorFamily::HeavyTail { c_exponent } => {
                log_head - c_exponent * (k as f64 + 2.0).ln() - self.log_norm
            }
            PriorFamily::PointMass { at } => {
                if k == at {
                    log_head
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    pub fn pmf(&self, k: u64) -> f64 {
        self.log_pmf(k).exp()
    }

    /// `log P(nu >= n)` for `n >= 0`.
    pub fn log_tail(&self, n: u64) -> f64 {
        let log_head = (-self.q).ln_1p();
        match self.family {
            PriorFamily::Geometric { rho } => log_head + n as f64 * (-rho).ln_1p(),
            PriorFamily::HeavyTail { c_exponent } => {
                log_head + hurwitz_zeta(c_exponent, n as f64 + 2.0).ln() - self.log_norm
            }
            PriorFamily::PointMass { at } => {
                if n <= at {
                    log_head
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    pub fn tail(&self, n: u64) -> f64 {
        self.log_tail(n).exp()
    }

    /// Exponential rate of the tail, `lim n^{-1} |log P(nu >= n)|`.
    /// Infinite for finite-support priors.
    pub fn mu(&self) -> f64 {
        match self.family {
            PriorFamily::Geometric { rho } => -(-rho).ln_1p(),
            PriorFamily::HeavyTail { .. } => 0.0,
            PriorFamily::PointMass { .. } => f64::INFINITY,
        }
    }

    /// `sum_k k pi_k`, possibly infinite.
    pub fn mean(&self) -> f64 {
        let head = 1.0 - self.q;
        match self.family {
            PriorFamily::Geometric { rho } => head * (1.0 - rho) / rho,
            PriorFamily::HeavyTail { c_exponent } => {
                if c_exponent <= 2.0 {
                    f64::INFINITY
                } else {
                    // sum k (k+2)^{-c} = zeta(c-1, 2) - 2 zeta(c, 2)
                    let z = hurwitz_zeta(c_exponent, 2.0);
                    head * (hurwitz_zeta(c_exponent - 1.0, 2.0) - 2.0 * z) / z
                }
            }
            PriorFamily::PointMass { at } => head * at as f64,
        }
    }

    /// `b = sum_{k>=1} pi_k = P(nu >= 1)`.
    pub fn b(&self) -> f64 {
        self.tail(1)
    }

    /// Draws `nu` from the prior conditioned on `nu >= 0`.
    pub fn sample_nonnegative<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        if let PriorFamily::PointMass { at } = self.family {
            return at;
        }
        // u in (0, 1]
        let u: f64 = 1.0 - rng.random::<f64>();
        match self.family {
            PriorFamily::Geometric { rho } => {
                let k = (u.ln() / (-rho).ln_1p()).floor();
                if k >= u64::MAX as f64 {
                    u64::MAX
                } else {
                    k as u64
                }
            }
            PriorFamily::PointMass { at } => at,
            PriorFamily::HeavyTail { .. } => {
                // largest n with P(nu >= n | nu >= 0) >= u
                let log_u = u.ln();
                let log_head = (-self.q).ln_1p();
                let above = |n: u64| self.log_tail(n) - log_head >= log_u;
                let mut hi = 1u64;
                while above(hi) {
                    if hi > u64::MAX / 4 {
                        return hi;
                    }
                    hi *= 2;
                }
                let mut lo = hi / 2;
                // invariant: above(lo), !above(hi)
                while hi - lo > 1 {
                    let mid = lo + (hi - lo) / 2;
                    if above(mid) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                lo
            }
        }
    }
}

/// Outcome of the finite-horizon surrogate for the `sum pi_k |log pi_k|^r`
/// summability condition. Finiteness cannot be proven numerically; the
/// `consistent` flag only says the partial sums look settled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cp2Report {
    pub partial_sum: f64,
    pub last_summand: f64,
    pub consistent: bool,
}

pub fn check_cp2_partial(prior: &ChangePrior, r: f64, horizon: u64) -> Cp2Report {
    let summand = |k: u64| {
        let lp = prior.log_pmf(k);
        if lp == f64::NEG_INFINITY || lp == 0.0 {
            0.0
        } else {
            (lp + r * lp.abs().ln()).exp()
        }
    };
    let mut partial_sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut last = 0.0;
    for k in 0..=horizon {
        prev = last;
        last = summand(k);
        partial_sum += last;
    }
    let decreasing = horizon == 0 || last <= prev;
    Cp2Report {
        partial_sum,
        last_summand: last,
        consistent: decreasing && last < 1e-8,
    }
}

/// Discrete mixing measure over the post-change parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingGrid {
    atoms: Vec<Vec<f64>>,
    log_weights: Vec<f64>,
}

impl MixingGrid {
    /// Builds a grid from atoms and positive (unnormalized) weights.
    pub fn new(atoms: Vec<Vec<f64>>, weights: &[f64]) -> Result<Self> {
        if atoms.is_empty() {
            return domain("mixing grid needs at least one atom");
        }
        if atoms.len() != weights.len() {
            return domain(format!(
                "{} atoms but {} weights",
                atoms.len(),
                weights.len()
            ));
        }
        let dim = atoms[0].len();
        if dim == 0 {
            return domain("atoms must have dimension >= 1");
        }
        for a in &atoms {
            if a.len() != dim {
                return domain("atoms have inconsistent dimensions");
            }
            if a.iter().any(|v| !v.is_finite()) {
                return domain("atom coordinates must be finite");
            }
        }
        for (i, a) in atoms.iter().enumerate() {
            if atoms[..i].iter().any(|b| b == a) {
                return domain(format!("duplicate atom {a:?}"));
            }
        }
        if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return domain("mixing weights must be strictly positive and finite");
        }
        let log_total = log_sum_exp(weights.iter().map(|w| w.ln()));
        let log_weights = weights.iter().map(|w| w.ln() - log_total).collect();
        Ok(Self { atoms, log_weights })
    }

    /// Single atom with weight one.
    pub fn point(atom: Vec<f64>) -> Result<Self> {
        Self::new(vec![atom], &[1.0])
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].len()
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i]
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|l| l.exp()).collect()
    }

    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, lw) in self.log_weights.iter().enumerate() {
            acc += lw.exp();
            if u < acc {
                return i;
            }
        }
        self.len() - 1
    }
}

/// Tensor-product grid with `counts[j]` equally spaced points on
/// `[lower[j], upper[j]]` (endpoints included) and equal weights. A
/// coordinate with count one sits at the interval midpoint.
pub fn uniform_grid(lower: &[f64], upper: &[f64], counts: &[usize]) -> Result<MixingGrid> {
    let d = lower.len();
    if d == 0 || upper.len() != d || counts.len() != d {
        return domain(format!(
            "uniform grid dimension mismatch: lower {}, upper {}, counts {}",
            lower.len(),
            upper.len(),
            counts.len()
        ));
    }
    let mut axes = Vec::with_capacity(d);
    for j in 0..d {
        let (lo, hi, m) = (lower[j], upper[j], counts[j]);
        if m == 0 {
            return domain("grid counts must be >= 1");
        }
        if !(lo.is_finite() && hi.is_finite()) || lo > hi || (m > 1 && lo >= hi) {
            return domain(format!(
                "grid axis {j}: need lower < upper, got [{lo}, {hi}]"
            ));
        }
        let axis: Vec<f64> = if m == 1 {
            vec![0.5 * (lo + hi)]
        } else {
            (0..m)
                .map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64)
                .collect()
        };
        axes.push(axis);
    }
    let mut atoms: Vec<Vec<f64>> = vec![Vec::new()];
    for axis in &axes {
        atoms = atoms
            .into_iter()
            .flat_map(|prefix| {
                axis.iter().map(move |v| {
                    let mut a = prefix.clone();
                    a.push(*v);
                    a
                })
            })
            .collect();
    }
    let weights = vec![1.0; atoms.len()];
    MixingGrid::new(atoms, &weights)
}
