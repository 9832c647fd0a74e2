// SPDX-License-Identifier: MIT OR Apache-2.0

//! Monte Carlo estimation of false-alarm probability, detection-delay
//! moments and integrated risk.
//!
//! Every trial draws from its own ChaCha stream keyed by
//! `(seed, scenario stream, trial index)`, and per-trial outcomes are reduced
//! in trial order, so results do not depend on the worker count.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::detectors::{run_detector, AlarmRecord, DetectorKind, SampledSource};
use crate::error::{domain, Error, Result};
use crate::math::softplus;
use crate::measures::{ChangePrior, MixingGrid};
use crate::models::ObservationModel;

/// Censor rate at or above which a delay cell is flagged unreliable.
pub const MAX_RELIABLE_CENSOR_RATE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Estimate {
    pub point: f64,
    pub stderr: f64,
    pub trials: u64,
    pub censored: u64,
    pub ci95: (f64, f64),
    pub estimator: String,
}

impl Estimate {
    /// Sample mean with a normal-approximation interval.
    pub fn from_samples(samples: &[f64], censored: u64, estimator: &str) -> Result<Self> {
        let n = samples.len();
        if n == 0 {
            return Err(Error::Estimation(format!("{estimator}: no samples")));
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let stderr = (var / n as f64).sqrt();
        Ok(Self::new(mean, stderr, n as u64, censored, estimator))
    }

    pub fn new(point: f64, stderr: f64, trials: u64, censored: u64, estimator: &str) -> Self {
        Self {
            point,
            stderr,
            trials,
            censored,
            ci95: (point - 1.96 * stderr, point + 1.96 * stderr),
            estimator: estimator.to_string(),
        }
    }

    pub fn overlaps(&self, other: &Estimate) -> bool {
        self.ci95.0 <= other.ci95.1 && other.ci95.0 <= self.ci95.1
    }
}

/// Everything needed to simulate one detector configuration.
#[derive(Clone)]
pub struct Experiment {
    pub model: Arc<dyn ObservationModel>,
    pub prior: ChangePrior,
    pub grid: Arc<MixingGrid>,
    pub detector: DetectorKind,
    pub log_threshold: f64,
    pub trials: u64,
    pub horizon: u64,
    pub seed: u64,
}

impl Experiment {
    pub fn with_log_threshold(&self, log_threshold: f64) -> Self {
        Self {
            log_threshold,
            ..self.clone()
        }
    }

    pub fn with_trials(&self, trials: u64) -> Self {
        Self {
            trials,
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return domain("trials must be >= 1");
        }
        if self.horizon == 0 {
            return domain("horizon must be >= 1");
        }
        if self.model.atom_count() != self.grid.len() {
            return domain("model and grid disagree on the number of atoms");
        }
        Ok(())
    }
}

/// Independent stream for one trial.
pub fn trial_rng(seed: u64, stream: u64, trial: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(trial);
    rng
}

/// Fans trials out over a fixed-size worker pool.
#[derive(Debug, Clone, Copy)]
pub struct Runner {
    workers: usize,
}

impl Runner {
    pub fn new(workers: usize) -> Self {
        Self {
            workers: workers.max(1),
        }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Runs `trial(model, index)` for every index and returns outcomes in
    /// index order.
    fn map_trials<T, F>(&self, exp: &Experiment, trial: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(&mut dyn ObservationModel, u64) -> Result<T> + Sync,
    {
        let work = || {
            (0..exp.trials)
                .into_par_iter()
                .map_init(
                    || exp.model.box_clone(),
                    |model, i| {
                        model.reset();
                        trial(model.as_mut(), i)
                    },
                )
                .collect::<Result<Vec<T>>>()
        };
        if self.workers == 1 {
            let mut model = exp.model.box_clone();
            return (0..exp.trials)
                .map(|i| {
                    model.reset();
                    trial(model.as_mut(), i)
                })
                .collect();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::Estimation(format!("thread pool: {e}")))?;
        pool.install(work)
    }
}

fn simulate(
    exp: &Experiment,
    model: &mut dyn ObservationModel,
    rng: &mut ChaCha8Rng,
    change: Option<u64>,
    theta: &[f64],
) -> Result<AlarmRecord> {
    let sampler = model.sampler(change, theta)?;
    let mut source = SampledSource::new(sampler, rng);
    run_detector(
        exp.detector,
        model,
        &exp.prior,
        &exp.grid,
        exp.log_threshold,
        &mut source,
        exp.horizon,
        false,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PfaReport {
    pub estimate: Estimate,
    /// Upper bound on the upward bias from censored trials.
    pub censor_bias_bound: f64,
}

/// `PFA = E_inf[P(nu >= T)]`: simulate without a change and average the prior
/// tail at the stopping time. Censored trials contribute `P(nu >= horizon)`.
pub fn estimate_pfa_tail(exp: &Experiment, runner: &Runner, stream: u64) -> Result<PfaReport> {
    exp.validate()?;
    let outcomes = runner.map_trials(exp, |model, i| {
        let mut rng = trial_rng(exp.seed, stream, i);
        let rec = simulate(exp, model, &mut rng, None, &[])?;
        Ok(match rec.stop_time {
            Some(t) => (exp.prior.tail(t), false),
            None => (exp.prior.tail(exp.horizon), true),
        })
    })?;
    let censored = outcomes.iter().filter(|o| o.1).count() as u64;
    let samples: Vec<f64> = outcomes.iter().map(|o| o.0).collect();
    Ok(PfaReport {
        estimate: Estimate::from_samples(&samples, censored, "pfa_tail")?,
        censor_bias_bound: exp.prior.tail(exp.horizon),
    })
}

/// Draws a change point from the full prior: the `q` mass on `nu <= -1` maps
/// to a change before the first observation.
fn sample_change(prior: &ChangePrior, rng: &mut ChaCha8Rng) -> u64 {
    use rand::Rng;
    if prior.q() > 0.0 && rng.random::<f64>() < prior.q() {
        0
    } else {
        prior.sample_nonnegative(rng)
    }
}

/// `PFA = E^pi[1 / (1 + S_T); T < inf]` under the joint law of `(nu, theta,
/// X)`. MS only. Censored trials contribute zero (downward bias at most
/// `censored / (trials (1 + A))`).
pub fn estimate_pfa_posterior(exp: &Experiment, runner: &Runner, stream: u64) -> Result<PfaReport> {
    exp.validate()?;
    if exp.detector != DetectorKind::Ms {
        return domain("the posterior PFA identity holds for the MS statistic only");
    }
    let outcomes = runner.map_trials(exp, |model, i| {
        let mut rng = trial_rng(exp.seed, stream, i);
        let nu = sample_change(&exp.prior, &mut rng);
        let atom = exp.grid.sample_index(&mut rng);
        let theta = exp.grid.atom(atom).to_vec();
        let rec = simulate(exp, model, &mut rng, Some(nu), &theta)?;
        Ok(match rec.stop_time {
            Some(_) => ((-softplus(rec.final_log_stat)).exp(), false),
            None => (0.0, true),
        })
    })?;
    let censored = outcomes.iter().filter(|o| o.1).count() as u64;
    let samples: Vec<f64> = outcomes.iter().map(|o| o.0).collect();
    Ok(PfaReport {
        estimate: Estimate::from_samples(&samples, censored, "pfa_posterior")?,
        censor_bias_bound: censored as f64 / samples.len() as f64 * (-exp.log_threshold).exp(),
    })
}

/// Detection delays `T - nu` of trials with `T > nu`.
#[derive(Debug, Clone, PartialEq)]
pub struct DelaySample {
    pub delays: Vec<f64>,
    /// Trials discarded because `T <= nu`.
    pub rejected: u64,
    /// Surviving trials with no alarm by the horizon (delay recorded as
    /// `horizon - nu`, a lower bound).
    pub censored: u64,
    /// Trials whose change point lay beyond the horizon without an alarm.
    pub undetermined: u64,
    pub trials: u64,
}

impl DelaySample {
    pub fn censor_rate(&self) -> f64 {
        if self.delays.is_empty() {
            1.0
        } else {
            self.censored as f64 / self.delays.len() as f64
        }
    }

    pub fn reliable(&self) -> bool {
        self.censor_rate() < MAX_RELIABLE_CENSOR_RATE && self.undetermined == 0
    }

    /// Estimate of `E[(T - nu)^r | T > nu]`.
    pub fn moment(&self, r: f64) -> Result<Estimate> {
        let powered: Vec<f64> = self.delays.iter().map(|d| d.powf(r)).collect();
        Estimate::from_samples(&powered, self.censored, &format!("delay_moment_r{r}"))
    }

    /// `E[d^2] / E[d]^2` with a delta-method standard error.
    pub fn moment_ratio(&self) -> Result<Estimate> {
        let n = self.delays.len();
        if n < 2 {
            return Err(Error::Estimation("moment ratio needs two delays".into()));
        }
        let nf = n as f64;
        let m1 = self.delays.iter().sum::<f64>() / nf;
        let m2 = self.delays.iter().map(|d| d * d).sum::<f64>() / nf;
        let (mut v11, mut v22, mut v12) = (0.0, 0.0, 0.0);
        for d in &self.delays {
            let (a, b) = (d - m1, d * d - m2);
            v11 += a * a;
            v22 += b * b;
            v12 += a * b;
        }
        let denom = nf - 1.0;
        let (v11, v22, v12) = (v11 / denom, v22 / denom, v12 / denom);
        let ratio = m2 / (m1 * m1);
        let g1 = -2.0 * m2 / (m1 * m1 * m1);
        let g2 = 1.0 / (m1 * m1);
        let var = (g1 * g1 * v11 + g2 * g2 * v22 + 2.0 * g1 * g2 * v12) / nf;
        Ok(Estimate::new(
            ratio,
            var.max(0.0).sqrt(),
            n as u64,
            self.censored,
            "delay_moment_ratio",
        ))
    }
}

fn collect_delays(outcomes: Vec<DelayOutcome>, trials: u64) -> Result<DelaySample> {
    let mut sample = DelaySample {
        delays: Vec::new(),
        rejected: 0,
        censored: 0,
        undetermined: 0,
        trials,
    };
    for o in outcomes {
        match o {
            DelayOutcome::Rejected => sample.rejected += 1,
            DelayOutcome::Delay(d) => sample.delays.push(d),
            DelayOutcome::Censored(d) => {
                sample.censored += 1;
                sample.delays.push(d);
            }
            DelayOutcome::Undetermined => sample.undetermined += 1,
        }
    }
    if sample.delays.is_empty() {
        return Err(Error::Estimation(format!(
            "no trial survived the T > nu conditioning ({} rejected, {} undetermined)",
            sample.rejected, sample.undetermined
        )));
    }
    Ok(sample)
}

enum DelayOutcome {
    Rejected,
    Delay(f64),
    Censored(f64),
    Undetermined,
}

fn classify(rec: &AlarmRecord, nu: u64, horizon: u64) -> DelayOutcome {
    match rec.stop_time {
        Some(t) if t <= nu => DelayOutcome::Rejected,
        Some(t) => DelayOutcome::Delay((t - nu) as f64),
        None if nu < horizon => DelayOutcome::Censored((horizon - nu) as f64),
        None => DelayOutcome::Undetermined,
    }
}

/// Delays under a change at fixed `k` with post-change parameter `theta`
/// (on or off the grid).
pub fn sample_conditional_delays(
    exp: &Experiment,
    runner: &Runner,
    stream: u64,
    k: u64,
    theta: &[f64],
) -> Result<DelaySample> {
    exp.validate()?;
    if k >= exp.horizon {
        return domain("change point must lie before the horizon");
    }
    let outcomes = runner.map_trials(exp, |model, i| {
        let mut rng = trial_rng(exp.seed, stream, i);
        let rec = simulate(exp, model, &mut rng, Some(k), theta)?;
        Ok(classify(&rec, k, exp.horizon))
    })?;
    collect_delays(outcomes, exp.trials)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DelayReport {
    /// `(r, estimate of E[(T - nu)^r | T > nu])`.
    pub moments: Vec<(f64, Estimate)>,
    pub rejected: u64,
    pub survivors: u64,
    pub censored: u64,
    pub reliable: bool,
}

impl DelayReport {
    fn from_sample(sample: &DelaySample, r_list: &[f64]) -> Result<Self> {
        let moments = r_list
            .iter()
            .map(|r| sample.moment(*r).map(|e| (*r, e)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            moments,
            rejected: sample.rejected,
            survivors: sample.delays.len() as u64,
            censored: sample.censored,
            reliable: sample.reliable(),
        })
    }
}

/// Conditional delay moments `E_{k,theta}[(T - k)^r | T > k]`.
pub fn estimate_delay_moments(
    exp: &Experiment,
    runner: &Runner,
    stream: u64,
    k: u64,
    theta: &[f64],
    r_list: &[f64],
) -> Result<DelayReport> {
    let sample = sample_conditional_delays(exp, runner, stream, k, theta)?;
    DelayReport::from_sample(&sample, r_list)
}

/// Delays with `nu` drawn from the prior restricted to `nu >= 0`.
pub fn sample_average_delays(
    exp: &Experiment,
    runner: &Runner,
    stream: u64,
    theta: &[f64],
) -> Result<DelaySample> {
    exp.validate()?;
    if !exp.prior.mean().is_finite() {
        let uncovered = exp.prior.tail(exp.horizon) / (1.0 - exp.prior.q());
        if uncovered > 1e-4 {
            return domain(format!(
                "prior has infinite mean and the horizon leaves {uncovered:e} of its mass uncovered"
            ));
        }
    }
    let outcomes = runner.map_trials(exp, |model, i| {
        let mut rng = trial_rng(exp.seed, stream, i);
        let nu = exp.prior.sample_nonnegative(&mut rng);
        let rec = simulate(exp, model, &mut rng, Some(nu), theta)?;
        Ok(classify(&rec, nu, exp.horizon))
    })?;
    collect_delays(outcomes, exp.trials)
}

/// `E^pi_theta[(T - nu)^r | T > nu, nu >= 0]`.
pub fn estimate_average_delay_risk(
    exp: &Experiment,
    runner: &Runner,
    stream: u64,
    theta: &[f64],
    r: f64,
) -> Result<DelayReport> {
    let sample = sample_average_delays(exp, runner, stream, theta)?;
    DelayReport::from_sample(&sample, &[r])
}

/// `P(T <= nu) + c E[((T - nu)^+)^r]` with `nu` from the prior (`nu >= 0`)
/// and `theta` from the mixing measure. A censored trial contributes the
/// delay cost up to the horizon, a lower bound.
pub fn estimate_integrated_risk(
    exp: &Experiment,
    runner: &Runner,
    stream: u64,
    c: f64,
    r: f64,
) -> Result<Estimate> {
    exp.validate()?;
    if !(c >= 0.0) || r < 1.0 {
        return domain("need c >= 0 and r >= 1");
    }
    let outcomes = runner.map_trials(exp, |model, i| {
        let mut rng = trial_rng(exp.seed, stream, i);
        let nu = exp.prior.sample_nonnegative(&mut rng);
        let atom = exp.grid.sample_index(&mut rng);
        let theta = exp.grid.atom(atom).to_vec();
        let rec = simulate(exp, model, &mut rng, Some(nu), &theta)?;
        Ok(match rec.stop_time {
            Some(t) if t <= nu => (1.0, false),
            Some(t) => (c * ((t - nu) as f64).powf(r), false),
            None => (c * (exp.horizon.saturating_sub(nu) as f64).powf(r), true),
        })
    })?;
    let censored = outcomes.iter().filter(|o| o.1).count() as u64;
    let samples: Vec<f64> = outcomes.iter().map(|o| o.0).collect();
    Estimate::from_samples(&samples, censored, "integrated_risk")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LadderPoint {
    pub log_a: f64,
    pub mean_delay: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub stderr: f64,
    pub intercept: f64,
}

/// Weighted least squares of mean delay on `log A` with weights
/// `1 / stderr^2` (unit weights when every stderr is zero).
pub fn slope_regression(ladder: &[LadderPoint]) -> Result<SlopeFit> {
    if ladder.len() < 4 {
        return domain(format!(
            "slope regression needs >= 4 points, got {}",
            ladder.len()
        ));
    }
    let all_zero = ladder.iter().all(|p| p.stderr == 0.0);
    if !all_zero && ladder.iter().any(|p| !(p.stderr > 0.0)) {
        return domain("ladder mixes zero and positive standard errors");
    }
    let w: Vec<f64> = ladder
        .iter()
        .map(|p| {
            if all_zero {
                1.0
            } else {
                1.0 / (p.stderr * p.stderr)
            }
        })
        .collect();
    let sw: f64 = w.iter().sum();
    let xbar = ladder.iter().zip(&w).map(|(p, w)| w * p.log_a).sum::<f64>() / sw;
    let ybar = ladder
        .iter()
        .zip(&w)
        .map(|(p, w)| w * p.mean_delay)
        .sum::<f64>()
        / sw;
    let sxx: f64 = ladder
        .iter()
        .zip(&w)
        .map(|(p, w)| w * (p.log_a - xbar).powi(2))
        .sum();
    if !(sxx > 0.0) {
        return domain("ladder has no spread in log A");
    }
    let sxy: f64 = ladder
        .iter()
        .zip(&w)
        .map(|(p, w)| w * (p.log_a - xbar) * (p.mean_delay - ybar))
        .sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let stderr = if all_zero {
        let rss: f64 = ladder
            .iter()
            .map(|p| (p.mean_delay - intercept - slope * p.log_a).powi(2))
            .sum();
        (rss / (ladder.len() - 2) as f64 / sxx).sqrt()
    } else {
        (1.0 / sxx).sqrt()
    };
    Ok(SlopeFit {
        slope,
        stderr,
        intercept,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LadderRow {
    pub log_a: f64,
    pub mean_delay: f64,
    pub stderr: f64,
    pub prediction: f64,
    pub censored: u64,
    pub rejected: u64,
}

/// Conditional mean delay at change point `k` for each threshold. Rung `j`
/// uses stream `stream_base + j`.
pub fn delay_ladder(
    exp: &Experiment,
    runner: &Runner,
    stream_base: u64,
    k: u64,
    theta: &[f64],
    log_thresholds: &[f64],
    predicted_slope: f64,
) -> Result<Vec<LadderRow>> {
    log_thresholds
        .iter()
        .enumerate()
        .map(|(j, &log_a)| {
            let rung = exp.with_log_threshold(log_a);
            let sample =
                sample_conditional_delays(&rung, runner, stream_base + j as u64, k, theta)?;
            let est = sample.moment(1.0)?;
            Ok(LadderRow {
                log_a,
                mean_delay: est.point,
                stderr: est.stderr,
                prediction: predicted_slope * log_a,
                censored: sample.censored,
                rejected: sample.rejected,
            })
        })
        .collect()
}

pub fn ladder_points(rows: &[LadderRow]) -> Vec<LadderPoint> {
    rows.iter()
        .map(|r| LadderPoint {
            log_a: r.log_a,
            mean_delay: r.mean_delay,
            stderr: r.stderr,
        })
        .collect()
}
