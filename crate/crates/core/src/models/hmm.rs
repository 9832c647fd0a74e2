// SPDX-License-Identifier: MIT OR Apache-2.0

//! Two-state hidden Markov model with unit-variance Gaussian emissions.
//!
//! Transition matrix rows are `[1 - beta, beta]` from state 1 and
//! `[gamma, 1 - gamma]` from state 2; the chain starts from
//! `P(state 2) = gamma / (beta + gamma)`. The LLR increment at step `n` is the
//! change in `log p_theta(X^n) - log p_theta0(X^n)`, with both marginal
//! likelihoods tracked by log-domain forward recursions over the full path.

use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ObservationModel, PathSampler};
use crate::error::{domain, Error, Result};
use crate::math::{log_add_exp, log_std_normal_pdf};
use crate::measures::MixingGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HmmParams {
    /// Emission means for states 1 and 2.
    pub means: [f64; 2],
    pub beta: f64,
    pub gamma: f64,
}

impl HmmParams {
    fn validate(&self) -> Result<()> {
        for (name, p) in [("beta", self.beta), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&p) {
                return domain(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.beta + self.gamma <= 0.0 {
            return domain("beta + gamma must be positive");
        }
        if self.means.iter().any(|m| !m.is_finite()) {
            return domain("emission means must be finite");
        }
        Ok(())
    }

    fn is_symmetric(&self) -> bool {
        self.beta == 0.5 && self.gamma == 0.5
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hmm2Spec {
    /// Pre-change parameter.
    pub theta0: HmmParams,
    /// `[beta, gamma]` for two-dimensional atoms (emission means only).
    /// Defaults to the pre-change transitions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_transition: Option<[f64; 2]>,
}

impl Hmm2Spec {
    /// Interprets an atom as `[mean1, mean2]` or `[mean1, mean2, beta, gamma]`.
    pub fn params_for(&self, atom: &[f64]) -> Result<HmmParams> {
        let p = match *atom {
            [m1, m2] => {
                let [beta, gamma] = self
                    .post_transition
                    .unwrap_or([self.theta0.beta, self.theta0.gamma]);
                HmmParams {
                    means: [m1, m2],
                    beta,
                    gamma,
                }
            }
            [m1, m2, beta, gamma] => HmmParams {
                means: [m1, m2],
                beta,
                gamma,
            },
            _ => {
                return domain(format!(
                    "HMM atoms have 2 or 4 components, got {}",
                    atom.len()
                ))
            }
        };
        p.validate()?;
        Ok(p)
    }
}

/// Log-domain transition and emission constants for one parameter value.
#[derive(Debug, Clone, Copy)]
struct Chain {
    means: [f64; 2],
    log_stay1: f64,
    log_1to2: f64,
    log_2to1: f64,
    log_stay2: f64,
    // (log P(state 1), log P(state 2)) at time 0
    log_init: (f64, f64),
    init2: f64,
    beta: f64,
    gamma: f64,
}

impl Chain {
    fn new(p: &HmmParams) -> Self {
        let init2 = p.gamma / (p.beta + p.gamma);
        Self {
            means: p.means,
            log_stay1: (1.0 - p.beta).ln(),
            log_1to2: p.beta.ln(),
            log_2to1: p.gamma.ln(),
            log_stay2: (1.0 - p.gamma).ln(),
            log_init: ((1.0 - init2).ln(), init2.ln()),
            init2,
            beta: p.beta,
            gamma: p.gamma,
        }
    }

    /// One forward step: `(log P~_{n-1}, log P_{n-1}) -> (log P~_n, log P_n)`.
    fn forward(&self, (lp1, lp2): (f64, f64), x: f64) -> (f64, f64) {
        let to1 = log_add_exp(lp2 + self.log_2to1, lp1 + self.log_stay1);
        let to2 = log_add_exp(lp2 + self.log_stay2, lp1 + self.log_1to2);
        (
            to1 + log_std_normal_pdf(x - self.means[0]),
            to2 + log_std_normal_pdf(x - self.means[1]),
        )
    }

    /// Next hidden state (0 = state 1, 1 = state 2).
    fn transition<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        match state {
            0 => usize::from(u < self.beta),
            _ => usize::from(u >= self.gamma),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Forward {
    log_p: (f64, f64),
    log_marginal: f64,
}

impl Forward {
    fn start(chain: &Chain) -> Self {
        Self {
            log_p: chain.log_init,
            log_marginal: 0.0,
        }
    }

    /// Advances and returns the increment of the log marginal likelihood.
    fn advance(&mut self, chain: &Chain, x: f64) -> f64 {
        self.log_p = chain.forward(self.log_p, x);
        let m = log_add_exp(self.log_p.0, self.log_p.1);
        let delta = m - self.log_marginal;
        self.log_marginal = m;
        delta
    }
}

#[derive(Debug, Clone)]
pub struct Hmm2 {
    spec: Hmm2Spec,
    grid: Arc<MixingGrid>,
    pre: Chain,
    post: Vec<Chain>,
    pre_forward: Forward,
    post_forward: Vec<Forward>,
}

impl Hmm2 {
    pub fn new(spec: Hmm2Spec, grid: Arc<MixingGrid>) -> Result<Self> {
        spec.theta0.validate()?;
        if let Some([b, g]) = spec.post_transition {
            HmmParams {
                means: [0.0, 0.0],
                beta: b,
                gamma: g,
            }
            .validate()?;
        }
        let post = grid
            .atoms()
            .iter()
            .map(|a| spec.params_for(a).map(|p| Chain::new(&p)))
            .collect::<Result<Vec<_>>>()?;
        let pre = Chain::new(&spec.theta0);
        let post_forward = post.iter().map(Forward::start).collect();
        Ok(Self {
            pre_forward: Forward::start(&pre),
            spec,
            grid,
            pre,
            post,
            post_forward,
        })
    }

    /// Current `log p_theta(X^n)` for atom `i`.
    pub fn log_marginal(&self, atom: usize) -> f64 {
        self.post_forward[atom].log_marginal
    }

    pub fn log_marginal_pre(&self) -> f64 {
        self.pre_forward.log_marginal
    }
}

impl ObservationModel for Hmm2 {
    fn dim(&self) -> usize {
        1
    }

    fn grid(&self) -> &MixingGrid {
        &self.grid
    }

    fn reset(&mut self) {
        self.pre_forward = Forward::start(&self.pre);
        for (f, c) in self.post_forward.iter_mut().zip(&self.post) {
            *f = Forward::start(c);
        }
    }

    fn step(&mut self, x: &[f64], increments: &mut [f64]) {
        let x = x[0];
        let pre_delta = self.pre_forward.advance(&self.pre, x);
        for ((out, f), c) in increments
            .iter_mut()
            .zip(self.post_forward.iter_mut())
            .zip(&self.post)
        {
            *out = f.advance(c, x) - pre_delta;
        }
    }

    fn sampler(&self, change: Option<u64>, theta: &[f64]) -> Result<Box<dyn PathSampler>> {
        let post = match change {
            Some(_) => Chain::new(&self.spec.params_for(theta)?),
            None => self.pre,
        };
        Ok(Box::new(HmmSampler {
            pre: self.pre,
            post,
            filter: Forward::start(&post),
            change,
            n: 0,
            state: None,
        }))
    }

    /// Numeric KL number of the averaged emission density; symmetric
    /// transitions only.
    fn info_number(&self, theta: &[f64]) -> Result<f64> {
        let post = self.spec.params_for(theta)?;
        if !(post.is_symmetric() && self.spec.theta0.is_symmetric()) {
            return Err(Error::Unsupported(
                "information number is only available for beta = gamma = 1/2".into(),
            ));
        }
        Ok(symmetric_kl(post.means, self.spec.theta0.means))
    }

    fn box_clone(&self) -> Box<dyn ObservationModel> {
        Box::new(self.clone())
    }
}

fn log_mix_density(x: f64, means: [f64; 2]) -> f64 {
    log_add_exp(
        log_std_normal_pdf(x - means[0]),
        log_std_normal_pdf(x - means[1]),
    ) - std::f64::consts::LN_2
}

/// `int m_post(x) log(m_post(x) / m_pre(x)) dx` for equal-weight two-component
/// unit-variance Gaussian mixtures, by adaptive Simpson quadrature.
fn symmetric_kl(post: [f64; 2], pre: [f64; 2]) -> f64 {
    let f = |x: f64| {
        let lp = log_mix_density(x, post);
        lp.exp() * (lp - log_mix_density(x, pre))
    };
    let lo = post[0].min(post[1]) - 14.0;
    let hi = post[0].max(post[1]) + 14.0;
    // split into unit panels so the recursion sees every bump
    let panels = (hi - lo).ceil() as usize;
    let width = (hi - lo) / panels as f64;
    (0..panels)
        .map(|i| {
            let a = lo + i as f64 * width;
            adaptive_simpson(&f, a, a + width, 1e-12, 40)
        })
        .sum()
}

fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &impl Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
        }
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = simpson(fa, fm, fb, a, b);
    recurse(f, a, b, fa, fm, fb, whole, tol, depth)
}

struct HmmSampler {
    pre: Chain,
    post: Chain,
    // post-parameter filter on the pre-change data, used to draw the hidden
    // state at the change point
    filter: Forward,
    change: Option<u64>,
    n: u64,
    state: Option<usize>,
}

impl HmmSampler {
    fn initial_state(chain: &Chain, rng: &mut dyn RngCore) -> usize {
        usize::from(rng.random::<f64>() < chain.init2)
    }
}

impl PathSampler for HmmSampler {
    fn next_into(&mut self, rng: &mut dyn RngCore, out: &mut [f64]) {
        self.n += 1;
        let post_phase = matches!(self.change, Some(k) if self.n > k);
        let chain = if post_phase { self.post } else { self.pre };
        let state = match (self.state, self.change) {
            (_, Some(k)) if self.n == k + 1 => {
                // hidden state at time k under the post-change parameter given X^k
                let (l1, l2) = self.filter.log_p;
                let p2 = (l2 - log_add_exp(l1, l2)).exp();
                let at_k = usize::from(rng.random::<f64>() < p2);
                chain.transition(at_k, rng)
            }
            (None, _) => {
                let s0 = Self::initial_state(&chain, rng);
                chain.transition(s0, rng)
            }
            (Some(s), _) => chain.transition(s, rng),
        };
        self.state = Some(state);
        let z: f64 = StandardNormal.sample(rng);
        let x = chain.means[state] + z;
        if !post_phase && self.change.is_some() {
            self.filter.advance(&self.post, x);
        }
        out[0] = x;
    }
}
