// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic signals with unknown amplitudes in independent AR(p)
//! Gaussian noise, one channel per observation component.
//!
//! Pre-change, the AR residual `X~_n = X_n - sum_j beta_j X_{n-j}` is standard
//! normal; after the change it is shifted by `theta_i S~_n`, the same filter
//! applied to the signal. History before `n = 1` is zero, so the first `p`
//! steps use the truncated order `min(n, p)`.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ObservationModel, PathSampler};
use crate::error::{domain, Result};
use crate::measures::MixingGrid;

const DEFAULT_Q_HORIZON: u64 = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Signal {
    /// `amplitude * sin(frequency * n + phase)`
    Harmonic {
        amplitude: f64,
        frequency: f64,
        phase: f64,
    },
    Constant {
        value: f64,
    },
}

impl Signal {
    pub fn at(&self, n: u64) -> f64 {
        match *self {
            Signal::Harmonic {
                amplitude,
                frequency,
                phase,
            } => amplitude * (frequency * n as f64 + phase).sin(),
            Signal::Constant { value } => value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArChannel {
    pub ar_coeffs: Vec<f64>,
    pub signal: Signal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultichannelArSpec {
    pub channels: Vec<ArChannel>,
    /// Window length used to evaluate the signal-energy limits `Q_i`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_horizon: Option<u64>,
}

impl MultichannelArSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return domain("multichannel AR model needs at least one channel");
        }
        for (i, ch) in self.channels.iter().enumerate() {
            if ch.ar_coeffs.iter().any(|b| !b.is_finite()) {
                return domain(format!("channel {i}: AR coefficients must be finite"));
            }
            let radius = max_root_modulus(&ch.ar_coeffs);
            if !(radius < 1.0 - 1e-9) {
                return domain(format!(
                    "channel {i}: AR process unstable (largest root modulus {radius})"
                ));
            }
        }
        Ok(())
    }
}

/// Largest modulus among the roots of `z^p - beta_1 z^{p-1} - ... - beta_p`,
/// via the eigenvalues of the companion matrix.
fn max_root_modulus(beta: &[f64]) -> f64 {
    let p = beta.len();
    if p == 0 {
        return 0.0;
    }
    let mut companion = DMatrix::<f64>::zeros(p, p);
    for (j, b) in beta.iter().enumerate() {
        companion[(0, j)] = *b;
    }
    for i in 1..p {
        companion[(i, i - 1)] = 1.0;
    }
    companion
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Applies the channel's AR filter to a sequence fed one value at a time.
#[derive(Debug, Clone)]
struct ResidualFilter {
    // newest first, zero-padded
    history: Vec<f64>,
}

impl ResidualFilter {
    fn new(order: usize) -> Self {
        Self {
            history: vec![0.0; order],
        }
    }

    fn push(&mut self, beta: &[f64], value: f64) -> f64 {
        let predicted: f64 = beta.iter().zip(&self.history).map(|(b, h)| b * h).sum();
        if !self.history.is_empty() {
            self.history.rotate_right(1);
            self.history[0] = value;
        }
        value - predicted
    }

    fn clear(&mut self) {
        self.history.iter_mut().for_each(|h| *h = 0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QEstimate {
    /// Larger of the two window averages.
    pub value: f64,
    /// Absolute difference between the two window averages.
    pub spread: f64,
}

/// Average filtered signal energy `n^{-1} sum (S~_j)^2` over the windows
/// `(0, horizon]` and `(horizon, 2 horizon]`.
pub fn q_limit(spec: &MultichannelArSpec, channel: usize, horizon: u64) -> Result<QEstimate> {
    let Some(ch) = spec.channels.get(channel) else {
        return domain(format!("no channel {channel}"));
    };
    if horizon == 0 {
        return domain("q_limit horizon must be positive");
    }
    let mut filter = ResidualFilter::new(ch.ar_coeffs.len());
    let mut first = 0.0;
    let mut second = 0.0;
    for n in 1..=2 * horizon {
        let s = filter.push(&ch.ar_coeffs, ch.signal.at(n));
        if n <= horizon {
            first += s * s;
        } else {
            second += s * s;
        }
    }
    let (a, b) = (first / horizon as f64, second / horizon as f64);
    Ok(QEstimate {
        value: a.max(b),
        spread: (a - b).abs(),
    })
}

#[derive(Debug, Clone)]
pub struct MultichannelAr {
    spec: MultichannelArSpec,
    grid: Arc<MixingGrid>,
    n: u64,
    x_filters: Vec<ResidualFilter>,
    s_filters: Vec<ResidualFilter>,
    // scratch: per-channel (S~ X~, S~^2 / 2)
    terms: Vec<(f64, f64)>,
}

impl MultichannelAr {
    pub fn new(spec: MultichannelArSpec, grid: Arc<MixingGrid>) -> Result<Self> {
        spec.validate()?;
        let channels = spec.channels.len();
        if grid.dim() != channels {
            return domain(format!(
                "grid dimension {} does not match {} channels",
                grid.dim(),
                channels
            ));
        }
        if grid.atoms().iter().flatten().any(|v| !(*v > 0.0)) {
            return domain("signal amplitudes in the grid must be positive");
        }
        let x_filters = spec
            .channels
            .iter()
            .map(|c| ResidualFilter::new(c.ar_coeffs.len()))
            .collect();
        let s_filters = spec
            .channels
            .iter()
            .map(|c| ResidualFilter::new(c.ar_coeffs.len()))
            .collect();
        Ok(Self {
            spec,
            grid,
            n: 0,
            x_filters,
            s_filters,
            terms: vec![(0.0, 0.0); channels],
        })
    }

    pub fn spec(&self) -> &MultichannelArSpec {
        &self.spec
    }

    /// `Q_i` for every channel at the configured horizon.
    pub fn q_values(&self) -> Result<Vec<f64>> {
        let horizon = self.spec.q_horizon.unwrap_or(DEFAULT_Q_HORIZON);
        (0..self.spec.channels.len())
            .map(|i| q_limit(&self.spec, i, horizon).map(|q| q.value))
            .collect()
    }
}

impl ObservationModel for MultichannelAr {
    fn dim(&self) -> usize {
        self.spec.channels.len()
    }

    fn grid(&self) -> &MixingGrid {
        &self.grid
    }

    fn reset(&mut self) {
        self.n = 0;
        self.x_filters.iter_mut().for_each(ResidualFilter::clear);
        self.s_filters.iter_mut().for_each(ResidualFilter::clear);
    }

    fn step(&mut self, x: &[f64], increments: &mut [f64]) {
        self.n += 1;
        for (i, ch) in self.spec.channels.iter().enumerate() {
            let xr = self.x_filters[i].push(&ch.ar_coeffs, x[i]);
            let sr = self.s_filters[i].push(&ch.ar_coeffs, ch.signal.at(self.n));
            self.terms[i] = (sr * xr, 0.5 * sr * sr);
        }
        for (out, atom) in increments.iter_mut().zip(self.grid.atoms()) {
            *out = atom
                .iter()
                .zip(&self.terms)
                .map(|(t, (cross, energy))| t * cross - t * t * energy)
                .sum();
        }
    }

    fn sampler(&self, change: Option<u64>, theta: &[f64]) -> Result<Box<dyn PathSampler>> {
        if change.is_some() && theta.len() != self.dim() {
            return domain(format!(
                "post-change amplitude has {} components, model has {} channels",
                theta.len(),
                self.dim()
            ));
        }
        Ok(Box::new(ArSampler {
            channels: self.spec.channels.clone(),
            amplitudes: theta.to_vec(),
            change,
            n: 0,
            noise: self
                .spec
                .channels
                .iter()
                .map(|c| vec![0.0; c.ar_coeffs.len()])
                .collect(),
        }))
    }

    fn info_number(&self, theta: &[f64]) -> Result<f64> {
        if theta.len() != self.dim() {
            return domain("amplitude vector length must equal the channel count");
        }
        let q = self.q_values()?;
        Ok(theta.iter().zip(&q).map(|(t, qi)| 0.5 * t * t * qi).sum())
    }

    fn box_clone(&self) -> Box<dyn ObservationModel> {
        Box::new(self.clone())
    }
}

struct ArSampler {
    channels: Vec<ArChannel>,
    amplitudes: Vec<f64>,
    change: Option<u64>,
    n: u64,
    // past noise values per channel, newest first
    noise: Vec<Vec<f64>>,
}

impl PathSampler for ArSampler {
    fn next_into(&mut self, rng: &mut dyn RngCore, out: &mut [f64]) {
        self.n += 1;
        let shifted = matches!(self.change, Some(k) if self.n > k);
        for (i, ch) in self.channels.iter().enumerate() {
            let w: f64 = StandardNormal.sample(rng);
            let past = &mut self.noise[i];
            let xi = w + ch
                .ar_coeffs
                .iter()
                .zip(past.iter())
                .map(|(b, h)| b * h)
                .sum::<f64>();
            if !past.is_empty() {
                past.rotate_right(1);
                past[0] = xi;
            }
            out[i] = if shifted {
                xi + self.amplitudes[i] * ch.signal.at(self.n)
            } else {
                xi
            };
        }
    }
}
