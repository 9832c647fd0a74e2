// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mixture Shiryaev (MS) and mixture Shiryaev-Roberts (MSR) statistics.
//!
//! Both are kept in the log domain and updated per atom:
//!
//! ```text
//!   MS:   N_n(theta) = (N_{n-1}(theta) + pi_{n-1}) L_n(theta),  N_0 = q
//!         S_n = sum_i w_i N_n(theta_i) / P(nu >= n)
//!   MSR:  R_n(theta) = (R_{n-1}(theta) + 1) L_n(theta),          R_0 = omega
//!         R_n^W = sum_i w_i R_n(theta_i)
//! ```
//!
//! which are the explicit double sums over candidate change points rewritten
//! as recursions. [`oracle`] keeps the direct sums for cross-checking.

pub mod oracle;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::math::{log_add_exp, log_sum_exp, softplus};
use crate::measures::{ChangePrior, MixingGrid};
use crate::models::{ObservationModel, PathSampler};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DetectorKind {
    Ms,
    Msr {
        #[serde(default)]
        omega: f64,
    },
}

impl DetectorKind {
    pub fn name(&self) -> &'static str {
        match self {
            DetectorKind::Ms => "MS",
            DetectorKind::Msr { .. } => "MSR",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsState {
    n: u64,
    log_num: Vec<f64>,
    log_stat: f64,
}

impl MsState {
    pub fn new(prior: &ChangePrior, atoms: usize) -> Self {
        let log_q = prior.q().ln();
        Self {
            n: 0,
            log_num: vec![log_q; atoms],
            log_stat: log_q - (-prior.q()).ln_1p(),
        }
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn log_num(&self) -> &[f64] {
        &self.log_num
    }

    /// `log S_n^W`.
    pub fn log_stat(&self) -> f64 {
        self.log_stat
    }

    pub fn update(
        &mut self,
        prior: &ChangePrior,
        log_weights: &[f64],
        increments: &[f64],
    ) -> Result<()> {
        debug_assert_eq!(increments.len(), self.log_num.len());
        let next = self.n + 1;
        let log_tail = prior.log_tail(next);
        if log_tail == f64::NEG_INFINITY {
            return Err(Error::State(format!(
                "prior tail P(nu >= {next}) is zero; the MS statistic is undefined"
            )));
        }
        let log_pi = prior.log_pmf(self.n);
        for (num, inc) in self.log_num.iter_mut().zip(increments) {
            *num = log_add_exp(*num, log_pi) + inc;
        }
        self.log_stat = log_sum_exp(
            log_weights
                .iter()
                .zip(&self.log_num)
                .map(|(w, num)| w + num),
        ) - log_tail;
        self.n = next;
        Ok(())
    }
}

/// `P(nu >= n | X^n) = 1 / (1 + S_n^W)`.
pub fn posterior_no_change(state: &MsState) -> f64 {
    (-softplus(state.log_stat)).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsrState {
    n: u64,
    log_r: Vec<f64>,
    log_stat: f64,
    omega: f64,
}

impl MsrState {
    pub fn new(omega: f64, atoms: usize) -> Self {
        let log_omega = omega.ln();
        Self {
            n: 0,
            log_r: vec![log_omega; atoms],
            log_stat: log_omega,
            omega,
        }
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn log_r(&self) -> &[f64] {
        &self.log_r
    }

    /// `log R_n^W`.
    pub fn log_stat(&self) -> f64 {
        self.log_stat
    }

    pub fn update(&mut self, log_weights: &[f64], increments: &[f64]) {
        debug_assert_eq!(increments.len(), self.log_r.len());
        for (r, inc) in self.log_r.iter_mut().zip(increments) {
            *r = log_add_exp(*r, 0.0) + inc;
        }
        self.log_stat = log_sum_exp(log_weights.iter().zip(&self.log_r).map(|(w, r)| w + r));
        self.n += 1;
    }
}

#[derive(Debug, Clone, PartialEq)]
enum StateInner {
    Ms(MsState),
    Msr(MsrState),
}

/// A running MS or MSR statistic bound to a prior and mixing grid.
#[derive(Debug, Clone)]
pub struct Detector<'a> {
    kind: DetectorKind,
    prior: &'a ChangePrior,
    grid: &'a MixingGrid,
    state: StateInner,
}

impl<'a> Detector<'a> {
    pub fn new(kind: DetectorKind, prior: &'a ChangePrior, grid: &'a MixingGrid) -> Result<Self> {
        if let DetectorKind::Msr { omega } = kind {
            if !(omega >= 0.0 && omega.is_finite()) {
                return domain(format!("head-start omega must be >= 0, got {omega}"));
            }
        }
        let state = Self::initial(kind, prior, grid);
        Ok(Self {
            kind,
            prior,
            grid,
            state,
        })
    }

    fn initial(kind: DetectorKind, prior: &ChangePrior, grid: &MixingGrid) -> StateInner {
        match kind {
            DetectorKind::Ms => StateInner::Ms(MsState::new(prior, grid.len())),
            DetectorKind::Msr { omega } => StateInner::Msr(MsrState::new(omega, grid.len())),
        }
    }

    pub fn kind(&self) -> DetectorKind {
        self.kind
    }

    pub fn reset(&mut self) {
        self.state = Self::initial(self.kind, self.prior, self.grid);
    }

    pub fn n(&self) -> u64 {
        match &self.state {
            StateInner::Ms(s) => s.n(),
            StateInner::Msr(s) => s.n(),
        }
    }

    pub fn log_stat(&self) -> f64 {
        match &self.state {
            StateInner::Ms(s) => s.log_stat(),
            StateInner::Msr(s) => s.log_stat(),
        }
    }

    pub fn ms_state(&self) -> Option<&MsState> {
        match &self.state {
            StateInner::Ms(s) => Some(s),
            StateInner::Msr(_) => None,
        }
    }

    /// Applies one vector of increments and returns the new log statistic.
    pub fn update(&mut self, increments: &[f64]) -> Result<f64> {
        let log_weights = self.grid.log_weights();
        match &mut self.state {
            StateInner::Ms(s) => s.update(self.prior, log_weights, increments)?,
            StateInner::Msr(s) => s.update(log_weights, increments),
        }
        Ok(self.log_stat())
    }
}

/// Supplies observations one step at a time.
pub trait ObservationSource {
    /// Fills `out`; returns `false` when the source is exhausted.
    fn next_into(&mut self, out: &mut [f64]) -> bool;
}

pub struct SliceSource<'a> {
    data: &'a [Vec<f64>],
    pos: usize,
}

impl<'a> SliceSource<'a> {
    pub fn new(data: &'a [Vec<f64>]) -> Self {
        Self { data, pos: 0 }
    }
}

impl ObservationSource for SliceSource<'_> {
    fn next_into(&mut self, out: &mut [f64]) -> bool {
        match self.data.get(self.pos) {
            Some(row) => {
                out.copy_from_slice(row);
                self.pos += 1;
                true
            }
            None => false,
        }
    }
}

pub struct SampledSource<'a> {
    sampler: Box<dyn PathSampler>,
    rng: &'a mut dyn RngCore,
}

impl<'a> SampledSource<'a> {
    pub fn new(sampler: Box<dyn PathSampler>, rng: &'a mut dyn RngCore) -> Self {
        Self { sampler, rng }
    }
}

impl ObservationSource for SampledSource<'_> {
    fn next_into(&mut self, out: &mut [f64]) -> bool {
        self.sampler.next_into(self.rng, out);
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlarmRecord {
    /// First `n >= 1` with `log_stat >= log_threshold`; `None` when censored.
    pub stop_time: Option<u64>,
    /// Observations consumed.
    pub steps: u64,
    /// Log statistic at the last step (at the alarm when one fired).
    pub final_log_stat: f64,
    pub trajectory: Option<Vec<f64>>,
}

impl AlarmRecord {
    pub fn censored(&self) -> bool {
        self.stop_time.is_none()
    }
}

fn check_compat(model: &dyn ObservationModel, grid: &MixingGrid) -> Result<()> {
    if model.atom_count() != grid.len() || model.grid().dim() != grid.dim() {
        return domain(format!(
            "model carries {} atoms of dimension {}, grid has {} of dimension {}",
            model.atom_count(),
            model.grid().dim(),
            grid.len(),
            grid.dim()
        ));
    }
    Ok(())
}

/// Runs one detection from the model's current state (the caller resets it)
/// until the first crossing or `horizon` steps.
#[allow(clippy::too_many_arguments)]
pub fn run_detector(
    kind: DetectorKind,
    model: &mut dyn ObservationModel,
    prior: &ChangePrior,
    grid: &MixingGrid,
    log_threshold: f64,
    source: &mut dyn ObservationSource,
    horizon: u64,
    record_trajectory: bool,
) -> Result<AlarmRecord> {
    check_compat(model, grid)?;
    if horizon == 0 {
        return domain("horizon must be >= 1");
    }
    if log_threshold.is_nan() {
        return domain("log threshold is NaN");
    }
    let mut detector = Detector::new(kind, prior, grid)?;
    let mut x = vec![0.0; model.dim()];
    let mut increments = vec![0.0; grid.len()];
    let mut trajectory = record_trajectory.then(Vec::new);
    let mut steps = 0;
    while steps < horizon && source.next_into(&mut x) {
        model.step(&x, &mut increments);
        let stat = detector.update(&increments)?;
        steps += 1;
        if let Some(t) = trajectory.as_mut() {
            t.push(stat);
        }
        if stat >= log_threshold {
            return Ok(AlarmRecord {
                stop_time: Some(steps),
                steps,
                final_log_stat: stat,
                trajectory,
            });
        }
    }
    Ok(AlarmRecord {
        stop_time: None,
        steps,
        final_log_stat: detector.log_stat(),
        trajectory,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub n: u64,
    pub log_stat: f64,
    pub crossed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MulticyclicRecord {
    /// Alarm times, indexed from the start of the stream.
    pub alarms: Vec<u64>,
    pub trajectory: Option<Vec<TrajectoryPoint>>,
}

/// Repeated surveillance: after each alarm the statistic and the model both
/// restart from scratch at the next sample.
pub fn multicyclic_run(
    kind: DetectorKind,
    model: &mut dyn ObservationModel,
    prior: &ChangePrior,
    grid: &MixingGrid,
    log_threshold: f64,
    observations: &[Vec<f64>],
    record_trajectory: bool,
) -> Result<MulticyclicRecord> {
    check_compat(model, grid)?;
    let mut detector = Detector::new(kind, prior, grid)?;
    model.reset();
    let mut increments = vec![0.0; grid.len()];
    let mut alarms = Vec::new();
    let mut trajectory = record_trajectory.then(Vec::new);
    for (i, x) in observations.iter().enumerate() {
        if x.len() != model.dim() {
            return Err(Error::Data {
                line: i + 1,
                msg: format!("expected {} values, got {}", model.dim(), x.len()),
            });
        }
        model.step(x, &mut increments);
        let stat = detector.update(&increments)?;
        let crossed = stat >= log_threshold;
        let n = i as u64 + 1;
        if let Some(t) = trajectory.as_mut() {
            t.push(TrajectoryPoint {
                n,
                log_stat: stat,
                crossed,
            });
        }
        if crossed {
            alarms.push(n);
            detector.reset();
            model.reset();
        }
    }
    Ok(MulticyclicRecord { alarms, trajectory })
}
