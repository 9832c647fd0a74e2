// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::Arc;

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use super::{ObservationModel, PathSampler};
use crate::error::{domain, Result};
use crate::measures::MixingGrid;

/// i.i.d. `N(0, 1)` before the change, `N(theta, 1)` after.
#[derive(Debug, Clone)]
pub struct GaussianIid {
    grid: Arc<MixingGrid>,
    // (theta, theta^2 / 2) per atom
    coeffs: Vec<(f64, f64)>,
}

impl GaussianIid {
    pub fn new(grid: Arc<MixingGrid>) -> Result<Self> {
        if grid.dim() != 1 {
            return domain(format!(
                "gaussian model needs scalar atoms, grid has dimension {}",
                grid.dim()
            ));
        }
        let coeffs = grid
            .atoms()
            .iter()
            .map(|a| (a[0], 0.5 * a[0] * a[0]))
            .collect();
        Ok(Self { grid, coeffs })
    }
}

impl ObservationModel for GaussianIid {
    fn dim(&self) -> usize {
        1
    }

    fn grid(&self) -> &MixingGrid {
        &self.grid
    }

    fn reset(&mut self) {}

    fn step(&mut self, x: &[f64], increments: &mut [f64]) {
        let x = x[0];
        for (out, (theta, half_sq)) in increments.iter_mut().zip(&self.coeffs) {
            *out = theta * x - half_sq;
        }
    }

    fn sampler(&self, change: Option<u64>, theta: &[f64]) -> Result<Box<dyn PathSampler>> {
        if change.is_some() && theta.len() != 1 {
            return domain("gaussian model needs a scalar post-change parameter");
        }
        Ok(Box::new(GaussianSampler {
            change,
            mean: theta.first().copied().unwrap_or(0.0),
            n: 0,
        }))
    }

    fn info_number(&self, theta: &[f64]) -> Result<f64> {
        match theta {
            [t] => Ok(0.5 * t * t),
            _ => domain("gaussian model needs a scalar parameter"),
        }
    }

    fn box_clone(&self) -> Box<dyn ObservationModel> {
        Box::new(self.clone())
    }
}

struct GaussianSampler {
    change: Option<u64>,
    mean: f64,
    n: u64,
}

impl PathSampler for GaussianSampler {
    fn next_into(&mut self, rng: &mut dyn RngCore, out: &mut [f64]) {
        self.n += 1;
        let z: f64 = StandardNormal.sample(rng);
        let shifted = matches!(self.change, Some(k) if self.n > k);
        out[0] = if shifted { z + self.mean } else { z };
    }
}
