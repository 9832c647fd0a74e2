// SPDX-License-Identifier: MIT OR Apache-2.0

//! Observation models.
//!
//! A model turns each new observation into the vector of log-likelihood-ratio
//! increments `log f_theta(X_n | X^{n-1}) - log g(X_n | X^{n-1})`, one entry per
//! mixing atom, and can generate paths under the no-change law or under a
//! change at `nu = k` with a given post-change parameter.

mod ar;
mod gaussian;
mod hmm;

use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};

pub use ar::{q_limit, ArChannel, MultichannelAr, MultichannelArSpec, QEstimate, Signal};
pub use gaussian::GaussianIid;
pub use hmm::{Hmm2, Hmm2Spec, HmmParams};

use crate::error::Result;
use crate::measures::MixingGrid;

/// Stateful LLR source. One instance per trial worker.
pub trait ObservationModel: Send + Sync {
    /// Number of components per observation.
    fn dim(&self) -> usize;

    fn grid(&self) -> &MixingGrid;

    /// Back to time zero with empty history.
    fn reset(&mut self);

    /// Consumes `x` (length `dim()`) and writes one increment per atom.
    fn step(&mut self, x: &[f64], increments: &mut [f64]);

    /// Path generator for change point `change` (`None` = never) and true
    /// post-change parameter `theta`, which need not be a grid atom.
    fn sampler(&self, change: Option<u64>, theta: &[f64]) -> Result<Box<dyn PathSampler>>;

    /// Limit of `n^{-1} lambda_{k,k+n}(theta)` under the change law.
    fn info_number(&self, theta: &[f64]) -> Result<f64>;

    fn box_clone(&self) -> Box<dyn ObservationModel>;

    fn atom_count(&self) -> usize {
        self.grid().len()
    }
}

pub trait PathSampler: Send {
    /// Writes the next observation into `out`.
    fn next_into(&mut self, rng: &mut dyn RngCore, out: &mut [f64]);
}

/// Draws `X_1..X_horizon` with `X_1..X_nu` pre-change.
pub fn sample_path(
    model: &dyn ObservationModel,
    nu: Option<u64>,
    theta: &[f64],
    horizon: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<Vec<f64>>> {
    let mut sampler = model.sampler(nu, theta)?;
    let mut path = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let mut x = vec![0.0; model.dim()];
        sampler.next_into(rng, &mut x);
        path.push(x);
    }
    Ok(path)
}

/// Serializable model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    GaussianIid,
    MultichannelAr(MultichannelArSpec),
    Hmm2(Hmm2Spec),
}

impl ModelSpec {
    pub fn dim(&self) -> usize {
        match self {
            ModelSpec::GaussianIid | ModelSpec::Hmm2(_) => 1,
            ModelSpec::MultichannelAr(spec) => spec.channels.len(),
        }
    }

    /// Admissible dimensions of a mixing atom.
    pub fn param_dims(&self) -> Vec<usize> {
        match self {
            ModelSpec::GaussianIid => vec![1],
            ModelSpec::MultichannelAr(spec) => vec![spec.channels.len()],
            ModelSpec::Hmm2(_) => vec![2, 4],
        }
    }

    pub fn build(&self, grid: Arc<MixingGrid>) -> Result<Box<dyn ObservationModel>> {
        Ok(match self {
            ModelSpec::GaussianIid => Box::new(GaussianIid::new(grid)?),
            ModelSpec::MultichannelAr(spec) => Box::new(MultichannelAr::new(spec.clone(), grid)?),
            ModelSpec::Hmm2(spec) => Box::new(Hmm2::new(spec.clone(), grid)?),
        })
    }
}
