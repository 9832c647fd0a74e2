// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mixture Shiryaev and mixture Shiryaev-Roberts changepoint detection for
//! general (dependent, non-identically distributed) observation models,
//! together with threshold calibration, first-order performance predictions,
//! and a reproducible Monte Carlo harness.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod cli;
pub mod detectors;
pub mod error;
pub mod math;
pub mod measures;
pub mod models;
pub mod montecarlo;
pub mod theory;

pub use error::{Error, Result};
