// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment configuration document.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::calibration::{
    bayes_threshold, bayes_threshold_msr, d_constant, ms_threshold, msr_threshold, ThresholdSpec,
};
use crate::detectors::DetectorKind;
use crate::error::{config_err, Error, Result};
use crate::measures::{uniform_grid, ChangePrior, MixingGrid, PriorFamily};
use crate::models::{ModelSpec, ObservationModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDocument {
    pub model: ModelSpec,
    pub prior: PriorSpec,
    pub mixing: MixingSpec,
    pub detector: DetectorKind,
    pub calibration: CalibrationSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub montecarlo: Option<MonteCarloSpec>,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    #[serde(default)]
    pub q: f64,
    pub family: PriorFamily,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum MixingSpec {
    /// Explicit atoms; equal weights when `weights` is absent.
    Atoms {
        atoms: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
    },
    Uniform {
        lower: Vec<f64>,
        upper: Vec<f64>,
        counts: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum CalibrationSpec {
    MsPfa {
        alpha: f64,
    },
    MsrPfa {
        alpha: f64,
    },
    /// `d` is computed from the grid's information numbers when absent.
    BayesCost {
        c: f64,
        r: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        d: Option<f64>,
    },
    Explicit {
        log_threshold: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloSpec {
    pub seed: u64,
    pub trials: u64,
    pub horizon: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    pub scenarios: Vec<Scenario>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "estimand", rename_all = "snake_case", deny_unknown_fields)]
pub enum Scenario {
    PfaTail {
        name: String,
    },
    PfaPosterior {
        name: String,
    },
    DelayMoments {
        name: String,
        k: u64,
        theta: Vec<f64>,
        #[serde(default = "default_moments")]
        moments: Vec<f64>,
    },
    AverageDelay {
        name: String,
        theta: Vec<f64>,
        #[serde(default = "default_r")]
        r: f64,
    },
    /// `c` and `r` default to the Bayes-cost calibration inputs.
    IntegratedRisk {
        name: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        c: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        r: Option<f64>,
    },
    DelayLadder {
        name: String,
        k: u64,
        theta: Vec<f64>,
        log_thresholds: Vec<f64>,
    },
}

fn default_moments() -> Vec<f64> {
    vec![1.0, 2.0]
}

fn default_r() -> f64 {
    1.0
}

impl Scenario {
    pub fn name(&self) -> &str {
        match self {
            Scenario::PfaTail { name }
            | Scenario::PfaPosterior { name }
            | Scenario::DelayMoments { name, .. }
            | Scenario::AverageDelay { name, .. }
            | Scenario::IntegratedRisk { name, .. }
            | Scenario::DelayLadder { name, .. } => name,
        }
    }

    pub fn estimand(&self) -> &'static str {
        match self {
            Scenario::PfaTail { .. } => "pfa_tail",
            Scenario::PfaPosterior { .. } => "pfa_posterior",
            Scenario::DelayMoments { .. } => "delay_moments",
            Scenario::AverageDelay { .. } => "average_delay",
            Scenario::IntegratedRisk { .. } => "integrated_risk",
            Scenario::DelayLadder { .. } => "delay_ladder",
        }
    }

    fn theta(&self) -> Option<&[f64]> {
        match self {
            Scenario::DelayMoments { theta, .. }
            | Scenario::AverageDelay { theta, .. }
            | Scenario::DelayLadder { theta, .. } => Some(theta),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_report")]
    pub report: String,
}

fn default_dir() -> PathBuf {
    PathBuf::from(".")
}

fn default_report() -> String {
    "report.json".into()
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            report: default_report(),
        }
    }
}

/// A validated configuration with its derived objects.
pub struct Setup {
    pub doc: ConfigDocument,
    pub prior: ChangePrior,
    pub grid: Arc<MixingGrid>,
    pub model: Arc<dyn ObservationModel>,
    pub threshold: ThresholdSpec,
}

impl std::fmt::Debug for Setup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Setup")
            .field("doc", &self.doc)
            .field("threshold", &self.threshold)
            .finish_non_exhaustive()
    }
}

impl ConfigDocument {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_err(&path, e.into_inner().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err("<file>", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Builds prior, grid, model and threshold, and runs the cross-field
    /// checks.
    pub fn validate(self) -> Result<Setup> {
        let prior = ChangePrior::from_family(self.prior.family, self.prior.q)
            .map_err(|e| config_err("prior", e.to_string()))?;
        let grid = match &self.mixing {
            MixingSpec::Atoms { atoms, weights } => {
                let w = weights.clone().unwrap_or_else(|| vec![1.0; atoms.len()]);
                MixingGrid::new(atoms.clone(), &w)
            }
            MixingSpec::Uniform {
                lower,
                upper,
                counts,
            } => uniform_grid(lower, upper, counts),
        }
        .map_err(|e| config_err("mixing", e.to_string()))?;
        if !self.model.param_dims().contains(&grid.dim()) {
            return Err(config_err(
                "mixing",
                format!(
                    "atom dimension {} does not fit the model (expected one of {:?})",
                    grid.dim(),
                    self.model.param_dims()
                ),
            ));
        }
        let grid = Arc::new(grid);
        let model: Arc<dyn ObservationModel> = Arc::from(
            self.model
                .build(grid.clone())
                .map_err(|e| config_err("model", e.to_string()))?,
        );
        let threshold = self.threshold(&prior, &grid, model.as_ref())?;
        if let Some(mc) = &self.montecarlo {
            self.validate_montecarlo(mc, &prior, &threshold, grid.dim())?;
        }
        Ok(Setup {
            doc: self,
            prior,
            grid,
            model,
            threshold,
        })
    }

    fn threshold(
        &self,
        prior: &ChangePrior,
        grid: &MixingGrid,
        model: &dyn ObservationModel,
    ) -> Result<ThresholdSpec> {
        let field = "calibration";
        let wrap = |e: Error| config_err(field, e.to_string());
        match (&self.calibration, self.detector) {
            (CalibrationSpec::MsPfa { alpha }, DetectorKind::Ms) => {
                if !(*alpha < 1.0 - prior.q()) {
                    return Err(config_err(
                        "calibration.alpha",
                        format!("alpha = {alpha} must be below 1 - q = {}", 1.0 - prior.q()),
                    ));
                }
                ms_threshold(*alpha, prior.q()).map_err(wrap)
            }
            (CalibrationSpec::MsrPfa { alpha }, DetectorKind::Msr { omega }) => {
                msr_threshold(*alpha, omega, prior).map_err(wrap)
            }
            (CalibrationSpec::MsPfa { .. }, _) | (CalibrationSpec::MsrPfa { .. }, _) => {
                Err(config_err(
                    field,
                    "PFA calibration method does not match the detector kind",
                ))
            }
            (CalibrationSpec::BayesCost { c, r, d }, kind) => {
                let mu = match kind {
                    DetectorKind::Ms => prior.mu(),
                    DetectorKind::Msr { .. } => 0.0,
                };
                let d = match d {
                    Some(d) => *d,
                    None => {
                        let info = (0..grid.len())
                            .map(|i| model.info_number(grid.atom(i)))
                            .collect::<Result<Vec<_>>>()
                            .map_err(wrap)?;
                        d_constant(grid, &info, mu, *r).map_err(wrap)?
                    }
                };
                match kind {
                    DetectorKind::Ms => bayes_threshold(*c, *r, d),
                    DetectorKind::Msr { omega } => bayes_threshold_msr(*c, *r, d, omega, prior),
                }
                .map_err(wrap)
            }
            (CalibrationSpec::Explicit { log_threshold }, _) => {
                ThresholdSpec::explicit(*log_threshold).map_err(wrap)
            }
        }
    }

    fn validate_montecarlo(
        &self,
        mc: &MonteCarloSpec,
        prior: &ChangePrior,
        threshold: &ThresholdSpec,
        param_dim: usize,
    ) -> Result<()> {
        if mc.trials == 0 {
            return Err(config_err("montecarlo.trials", "must be >= 1"));
        }
        if mc.horizon == 0 {
            return Err(config_err("montecarlo.horizon", "must be >= 1"));
        }
        if mc.workers == Some(0) {
            return Err(config_err("montecarlo.workers", "must be >= 1"));
        }
        let mut names = std::collections::HashSet::new();
        for (i, s) in mc.scenarios.iter().enumerate() {
            let field = format!("montecarlo.scenarios[{i}]");
            if !names.insert(s.name()) {
                return Err(config_err(
                    &field,
                    format!("duplicate scenario name `{}`", s.name()),
                ));
            }
            if s.name().is_empty()
                || !s
                    .name()
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            {
                return Err(config_err(&field, "name must be non-empty [A-Za-z0-9_-]"));
            }
            if let Some(theta) = s.theta() {
                if theta.len() != param_dim {
                    return Err(config_err(
                        &format!("{field}.theta"),
                        format!("expected {param_dim} components, got {}", theta.len()),
                    ));
                }
            }
            match s {
                Scenario::PfaTail { .. } => {
                    let target = pfa_target(threshold, self.detector, prior);
                    let tail = prior.tail(mc.horizon);
                    if !(tail < 0.01 * target) {
                        return Err(config_err(
                            "montecarlo.horizon",
                            format!(
                                "prior tail at the horizon {tail:e} must be below 0.01 x PFA target {target:e}"
                            ),
                        ));
                    }
                }
                Scenario::PfaPosterior { .. } if self.detector != DetectorKind::Ms => {
                    return Err(config_err(&field, "posterior PFA requires the MS detector"));
                }
                Scenario::DelayMoments { k, moments, .. } => {
                    if *k >= mc.horizon {
                        return Err(config_err(
                            &format!("{field}.k"),
                            "must lie below the horizon",
                        ));
                    }
                    if moments.is_empty() || moments.iter().any(|m| !(*m >= 1.0)) {
                        return Err(config_err(
                            &format!("{field}.moments"),
                            "orders must be >= 1",
                        ));
                    }
                }
                Scenario::AverageDelay { r, .. } if !(*r >= 1.0) => {
                    return Err(config_err(&format!("{field}.r"), "must be >= 1"));
                }
                Scenario::IntegratedRisk { c, r, .. } => {
                    let (c, r) = self.risk_inputs(*c, *r).ok_or_else(|| {
                        config_err(
                            &field,
                            "c and r are required unless calibration is bayes_cost",
                        )
                    })?;
                    if !(c > 0.0) || !(r >= 1.0) {
                        return Err(config_err(&field, "need c > 0 and r >= 1"));
                    }
                }
                Scenario::DelayLadder {
                    k, log_thresholds, ..
                } => {
                    if *k >= mc.horizon {
                        return Err(config_err(
                            &format!("{field}.k"),
                            "must lie below the horizon",
                        ));
                    }
                    if log_thresholds.len() < 4 || log_thresholds.iter().any(|l| !l.is_finite()) {
                        return Err(config_err(
                            &format!("{field}.log_thresholds"),
                            "need at least 4 finite values",
                        ));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Cost inputs for a risk scenario, falling back to the calibration.
    pub fn risk_inputs(&self, c: Option<f64>, r: Option<f64>) -> Option<(f64, f64)> {
        let (cc, cr) = match self.calibration {
            CalibrationSpec::BayesCost { c, r, .. } => (Some(c), Some(r)),
            _ => (None, None),
        };
        Some((c.or(cc)?, r.or(cr)?))
    }
}

/// The false-alarm level the threshold guarantees.
pub fn pfa_target(threshold: &ThresholdSpec, kind: DetectorKind, prior: &ChangePrior) -> f64 {
    match kind {
        DetectorKind::Ms => 1.0 / (1.0 + threshold.threshold),
        DetectorKind::Msr { omega } => {
            let bound = (omega * prior.b() + prior.mean()) / threshold.threshold;
            if bound.is_finite() {
                bound.min(1.0)
            } else {
                1.0
            }
        }
    }
}
