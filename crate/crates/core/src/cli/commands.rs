// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{pfa_target, ConfigDocument, MonteCarloSpec, Scenario, Setup};
use crate::calibration::{d_constant, ThresholdSpec};
use crate::detectors::{multicyclic_run, run_detector, DetectorKind, SliceSource, TrajectoryPoint};
use crate::error::{config_err, Error, Result};
use crate::measures::{check_cp2_partial, Cp2Report};
use crate::montecarlo::{
    delay_ladder, estimate_average_delay_risk, estimate_integrated_risk, estimate_pfa_posterior,
    estimate_pfa_tail, ladder_points, sample_conditional_delays, slope_regression, Estimate,
    Experiment, LadderRow, Runner, SlopeFit,
};
use crate::theory::{
    integrated_risk_prediction, ms_delay_prediction, msr_delay_prediction, Prediction,
};

pub const WORKERS_ENV: &str = "MIXCPD_WORKERS";

/// Formats with up to ten significant digits and no trailing zeros.
pub fn fmt_num(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x != 0.0 && (x.abs() >= 1e12 || x.abs() < 1e-6) {
        return format!("{x:.9e}");
    }
    let digits = if x == 0.0 {
        0
    } else {
        (9 - x.abs().log10().floor() as i32).max(0) as usize
    };
    let s = format!("{x:.digits$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub fn cmd_calibrate(config: &Path, out: &mut dyn Write) -> Result<ThresholdSpec> {
    let setup = ConfigDocument::load(config)?.validate()?;
    let t = &setup.threshold;
    writeln!(out, "detector: {}", setup.doc.detector.name())?;
    writeln!(out, "A = {}", fmt_num(t.threshold))?;
    writeln!(out, "log A = {:.9}", t.log_threshold)?;
    writeln!(out, "note: {}", t.note)?;
    writeln!(out, "{}", serde_json::to_string_pretty(t)?)?;
    Ok(setup.threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantityResult {
    pub quantity: String,
    pub estimate: Estimate,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prediction: Option<Prediction>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
}

impl QuantityResult {
    fn new(
        quantity: impl Into<String>,
        estimate: Estimate,
        prediction: Option<Prediction>,
    ) -> Self {
        let ratio = prediction
            .as_ref()
            .filter(|p| p.value != 0.0 && p.value.is_finite())
            .map(|p| estimate.point / p.value);
        Self {
            quantity: quantity.into(),
            estimate,
            prediction,
            ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub estimand: String,
    pub trials: u64,
    pub censored: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rejected: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reliable: Option<bool>,
    pub results: Vec<QuantityResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slope: Option<SlopeFit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ladder_csv: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Cp2Check {
    pub r: f64,
    pub horizon: u64,
    #[serde(flatten)]
    pub report: Cp2Report,
    pub label: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationReport {
    pub config: ConfigDocument,
    pub threshold: ThresholdSpec,
    pub pfa_target: f64,
    pub prior_mu: f64,
    pub prior_mean: f64,
    pub cp2: Cp2Check,
    pub scenarios: Vec<ScenarioReport>,
}

/// Worker count: environment override, then config, then the machine.
pub fn resolve_workers(mc: &MonteCarloSpec) -> Result<usize> {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        return match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(config_err(
                WORKERS_ENV,
                format!("expected a positive integer, got `{v}`"),
            )),
        };
    }
    Ok(mc.workers.unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    }))
}

struct Context<'a> {
    setup: &'a Setup,
    exp: Experiment,
    runner: Runner,
}

impl Context<'_> {
    fn info(&self, theta: &[f64]) -> Option<f64> {
        self.setup
            .model
            .info_number(theta)
            .ok()
            .filter(|i| *i > 0.0)
    }

    fn delay_prediction(&self, info: f64, m: f64) -> f64 {
        let a = self.setup.threshold.threshold;
        match self.exp.detector {
            DetectorKind::Ms => ms_delay_prediction(a, info, self.setup.prior.mu(), m),
            DetectorKind::Msr { .. } => msr_delay_prediction(a, info, m),
        }
    }

    fn slope_prediction(&self, info: f64) -> f64 {
        match self.exp.detector {
            DetectorKind::Ms => 1.0 / (info + self.setup.prior.mu()),
            DetectorKind::Msr { .. } => 1.0 / info,
        }
    }

    fn d_constant(&self, r: f64) -> Result<f64> {
        let grid = &self.setup.grid;
        let info = (0..grid.len())
            .map(|i| self.setup.model.info_number(grid.atom(i)))
            .collect::<Result<Vec<_>>>()?;
        let mu = match self.exp.detector {
            DetectorKind::Ms => self.setup.prior.mu(),
            DetectorKind::Msr { .. } => 0.0,
        };
        d_constant(grid, &info, mu, r)
    }
}

fn run_scenario(
    ctx: &Context,
    index: usize,
    scenario: &Scenario,
    out_dir: &Path,
) -> Result<(ScenarioReport, Option<Vec<LadderRow>>)> {
    let stream = (index as u64) << 32;
    let exp = &ctx.exp;
    let mut report = ScenarioReport {
        name: scenario.name().to_string(),
        estimand: scenario.estimand().to_string(),
        trials: exp.trials,
        censored: 0,
        rejected: None,
        reliable: None,
        results: Vec::new(),
        slope: None,
        ladder_csv: None,
        notes: Vec::new(),
    };
    let bound = || Prediction {
        quantity: "pfa_bound".into(),
        value: pfa_target(&ctx.setup.threshold, exp.detector, &ctx.setup.prior),
        regime: "upper bound",
    };
    let mut ladder = None;
    match scenario {
        Scenario::PfaTail { .. } => {
            let rep = estimate_pfa_tail(exp, &ctx.runner, stream)?;
            report.censored = rep.estimate.censored;
            report
                .notes
                .push(format!("censor bias bound {:e}", rep.censor_bias_bound));
            report
                .results
                .push(QuantityResult::new("pfa", rep.estimate, Some(bound())));
        }
        Scenario::PfaPosterior { .. } => {
            let rep = estimate_pfa_posterior(exp, &ctx.runner, stream)?;
            report.censored = rep.estimate.censored;
            report
                .notes
                .push(format!("censor bias bound {:e}", rep.censor_bias_bound));
            report
                .results
                .push(QuantityResult::new("pfa", rep.estimate, Some(bound())));
        }
        Scenario::DelayMoments {
            k, theta, moments, ..
        } => {
            let sample = sample_conditional_delays(exp, &ctx.runner, stream, *k, theta)?;
            report.censored = sample.censored;
            report.rejected = Some(sample.rejected);
            report.reliable = Some(sample.reliable());
            let info = ctx.info(theta);
            if info.is_none() {
                report
                    .notes
                    .push("information number unavailable; no prediction".into());
            }
            for m in moments {
                let est = sample.moment(*m)?;
                let pred = info.map(|i| {
                    Prediction::first_order(
                        format!("delay_moment_r{m}"),
                        ctx.delay_prediction(i, *m),
                    )
                });
                report
                    .results
                    .push(QuantityResult::new(format!("delay_moment_r{m}"), est, pred));
            }
            if sample.delays.len() >= 2 {
                let ratio = sample.moment_ratio()?;
                let pred = Prediction::first_order("delay_moment_ratio", 1.0);
                report
                    .results
                    .push(QuantityResult::new("delay_moment_ratio", ratio, Some(pred)));
            }
        }
        Scenario::AverageDelay { theta, r, .. } => {
            let rep = estimate_average_delay_risk(exp, &ctx.runner, stream, theta, *r)?;
            report.censored = rep.censored;
            report.rejected = Some(rep.rejected);
            report.reliable = Some(rep.reliable);
            let pred = ctx.info(theta).map(|i| {
                Prediction::first_order(format!("average_delay_r{r}"), ctx.delay_prediction(i, *r))
            });
            for (_, est) in rep.moments {
                report.results.push(QuantityResult::new(
                    format!("average_delay_r{r}"),
                    est,
                    pred.clone(),
                ));
            }
        }
        Scenario::IntegratedRisk { c, r, .. } => {
            let (c, r) = ctx
                .setup
                .doc
                .risk_inputs(*c, *r)
                .ok_or_else(|| config_err("montecarlo.scenarios", "missing c or r"))?;
            let est = estimate_integrated_risk(exp, &ctx.runner, stream, c, r)?;
            report.censored = est.censored;
            let pred = match ctx.d_constant(r) {
                Ok(d) => Some(Prediction::first_order(
                    "integrated_risk",
                    integrated_risk_prediction(c, r, d),
                )),
                Err(e) => {
                    report.notes.push(format!("no prediction: {e}"));
                    None
                }
            };
            report
                .results
                .push(QuantityResult::new("integrated_risk", est, pred));
        }
        Scenario::DelayLadder {
            name,
            k,
            theta,
            log_thresholds,
        } => {
            let info = ctx.info(theta);
            let slope_pred = info.map(|i| ctx.slope_prediction(i)).unwrap_or(f64::NAN);
            let rows = delay_ladder(
                exp,
                &ctx.runner,
                stream,
                *k,
                theta,
                log_thresholds,
                slope_pred,
            )?;
            report.censored = rows.iter().map(|r| r.censored).sum();
            report.rejected = Some(rows.iter().map(|r| r.rejected).sum());
            report.reliable = Some(rows.iter().all(|r| r.censored == 0));
            let fit = slope_regression(&ladder_points(&rows))?;
            let est = Estimate::new(
                fit.slope,
                fit.stderr,
                exp.trials,
                report.censored,
                "wls_slope",
            );
            let pred = info.map(|_| Prediction::first_order("delay_slope", slope_pred));
            report
                .results
                .push(QuantityResult::new("delay_slope", est, pred));
            report.slope = Some(fit);
            let file = format!("{name}.csv");
            write_ladder_csv(&out_dir.join(&file), &rows)?;
            report.ladder_csv = Some(file);
            ladder = Some(rows);
        }
    }
    Ok((report, ladder))
}

fn write_ladder_csv(path: &Path, rows: &[LadderRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    w.write_record(["log_A", "mean_delay", "stderr", "prediction"])
        .map_err(csv_io)?;
    for r in rows {
        w.write_record([
            r.log_a.to_string(),
            r.mean_delay.to_string(),
            r.stderr.to_string(),
            r.prediction.to_string(),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Builds the simulation report without touching the filesystem beyond
/// ladder CSVs in `out_dir`.
pub fn simulate_report(setup: &Setup, workers: usize, out_dir: &Path) -> Result<SimulationReport> {
    let mc = setup
        .doc
        .montecarlo
        .as_ref()
        .ok_or_else(|| config_err("montecarlo", "section required for simulate"))?;
    let ctx = Context {
        setup,
        exp: Experiment {
            model: setup.model.clone(),
            prior: setup.prior.clone(),
            grid: setup.grid.clone(),
            detector: setup.doc.detector,
            log_threshold: setup.threshold.log_threshold,
            trials: mc.trials,
            horizon: mc.horizon,
            seed: mc.seed,
        },
        runner: Runner::new(workers),
    };
    let mut scenarios = Vec::new();
    for (i, s) in mc.scenarios.iter().enumerate() {
        let (rep, _) = run_scenario(&ctx, i, s, out_dir).map_err(|e| match e {
            Error::Config { .. } => e,
            other => Error::Estimation(format!("scenario `{}`: {other}", s.name())),
        })?;
        scenarios.push(rep);
    }
    let cp2_r = 2.0;
    Ok(SimulationReport {
        config: setup.doc.clone(),
        threshold: setup.threshold.clone(),
        pfa_target: pfa_target(&setup.threshold, setup.doc.detector, &setup.prior),
        prior_mu: setup.prior.mu(),
        prior_mean: setup.prior.mean(),
        cp2: Cp2Check {
            r: cp2_r,
            horizon: mc.horizon,
            report: check_cp2_partial(&setup.prior, cp2_r, mc.horizon),
            label: "partial-sum surrogate; finiteness is not proven numerically",
        },
        scenarios,
    })
}

pub fn cmd_simulate(config: &Path, out_dir: Option<&Path>, out: &mut dyn Write) -> Result<PathBuf> {
    let setup = ConfigDocument::load(config)?.validate()?;
    let mc = setup
        .doc
        .montecarlo
        .as_ref()
        .ok_or_else(|| config_err("montecarlo", "section required for simulate"))?;
    let workers = resolve_workers(mc)?;
    let dir = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| setup.doc.output.dir.clone());
    fs::create_dir_all(&dir)?;
    let report = simulate_report(&setup, workers, &dir)?;
    let path = dir.join(&setup.doc.output.report);
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
    writeln!(
        out,
        "{:<24} {:<22} {:>14} {:>14} {:>10}",
        "scenario", "quantity", "estimate", "prediction", "ratio"
    )?;
    for s in &report.scenarios {
        for r in &s.results {
            writeln!(
                out,
                "{:<24} {:<22} {:>14} {:>14} {:>10}",
                s.name,
                r.quantity,
                fmt_num(r.estimate.point),
                r.prediction
                    .as_ref()
                    .map(|p| fmt_num(p.value))
                    .unwrap_or_else(|| "-".into()),
                r.ratio
                    .map(|x| format!("{x:.4}"))
                    .unwrap_or_else(|| "-".into()),
            )?;
        }
    }
    writeln!(out, "report: {}", path.display())?;
    Ok(path)
}

/// Reads one observation per row. A first row that does not parse as numbers
/// is taken as a header.
pub fn read_observations(path: &Path, dim: usize) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_io)?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line_of = |pos: Option<&csv::Position>| pos.map(|p| p.line() as usize).unwrap_or(i + 1);
        let record = record.map_err(|e| Error::Data {
            line: line_of(e.position()),
            msg: e.to_string(),
        })?;
        let line = line_of(record.position());
        let parsed: std::result::Result<Vec<f64>, _> =
            record.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(values) => {
                if values.len() != dim {
                    return Err(Error::Data {
                        line,
                        msg: format!("expected {dim} columns, got {}", values.len()),
                    });
                }
                if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
                    return Err(Error::Data {
                        line,
                        msg: format!("non-finite value {bad}"),
                    });
                }
                rows.push(values);
            }
            Err(_) if i == 0 => {}
            Err(e) => {
                return Err(Error::Data {
                    line,
                    msg: format!(
                        "cannot parse `{}`: {e}",
                        record.iter().collect::<Vec<_>>().join(",")
                    ),
                })
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectOutcome {
    pub alarms: Vec<u64>,
    pub trajectory: Option<Vec<TrajectoryPoint>>,
}

pub fn detect(
    setup: &Setup,
    data: &[Vec<f64>],
    multicyclic: bool,
    trajectory: bool,
) -> Result<DetectOutcome> {
    let mut model = setup.model.box_clone();
    model.reset();
    let kind = setup.doc.detector;
    let log_a = setup.threshold.log_threshold;
    if multicyclic {
        let rec = multicyclic_run(
            kind,
            model.as_mut(),
            &setup.prior,
            &setup.grid,
            log_a,
            data,
            trajectory,
        )?;
        return Ok(DetectOutcome {
            alarms: rec.alarms,
            trajectory: rec.trajectory,
        });
    }
    if data.is_empty() {
        return Ok(DetectOutcome {
            alarms: Vec::new(),
            trajectory: trajectory.then(Vec::new),
        });
    }
    let rec = run_detector(
        kind,
        model.as_mut(),
        &setup.prior,
        &setup.grid,
        log_a,
        &mut SliceSource::new(data),
        data.len() as u64,
        trajectory,
    )?;
    Ok(DetectOutcome {
        alarms: rec.stop_time.into_iter().collect(),
        trajectory: rec.trajectory.map(|t| {
            t.into_iter()
                .enumerate()
                .map(|(i, log_stat)| TrajectoryPoint {
                    n: i as u64 + 1,
                    log_stat,
                    crossed: log_stat >= log_a,
                })
                .collect()
        }),
    })
}

pub fn cmd_detect(
    config: &Path,
    data: &Path,
    multicyclic: bool,
    trajectory: bool,
    out_dir: Option<&Path>,
    out: &mut dyn Write,
) -> Result<DetectOutcome> {
    let setup = ConfigDocument::load(config)?.validate()?;
    let rows = read_observations(data, setup.doc.model.dim())?;
    let outcome = detect(&setup, &rows, multicyclic, trajectory)?;
    let dir = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| setup.doc.output.dir.clone());
    fs::create_dir_all(&dir)?;
    let mut alarms = String::from("alarm_time\n");
    if outcome.alarms.is_empty() {
        alarms.push_str("CENSORED\n");
    }
    for a in &outcome.alarms {
        alarms.push_str(&format!("{a}\n"));
    }
    fs::write(dir.join("alarms.csv"), &alarms)?;
    if let Some(t) = &outcome.trajectory {
        let mut text = String::from("n,log_stat,crossed\n");
        for p in t {
            text.push_str(&format!("{},{},{}\n", p.n, p.log_stat, u8::from(p.crossed)));
        }
        fs::write(dir.join("trajectory.csv"), text)?;
    }
    if outcome.alarms.is_empty() {
        writeln!(out, "CENSORED after {} observations", rows.len())?;
    } else {
        let list: Vec<String> = outcome.alarms.iter().map(u64::to_string).collect();
        writeln!(out, "alarms: {}", list.join(","))?;
    }
    Ok(outcome)
}
