//! Volumetric bias of soft Dice versus cross-entropy optimization.
//!
//! The crate models an image as a set of independent regions, each with a
//! volume and a probability of belonging to the structure of interest. On
//! top of that it computes expected losses (risks), the predictions that
//! minimize them, and the resulting volume errors:
//!
//! - [`region`]: region models and the canonical background / uncertain /
//!   certain construction.
//! - [`losses`]: Dice score, soft Dice and binary cross-entropy with
//!   analytic gradients.
//! - [`risk`]: expected losses by enumeration, binomial grouping, plug-in
//!   evaluation and Monte Carlo.
//! - [`optim`]: risk-minimizing predictions plus a brute-force grid oracle.
//! - [`sweep`]: risk landscapes, bias curves and switch thresholds.
//! - [`toytrain`]: synthetic datasets and a logistic model trained against
//!   either loss.
//! - [`cli`]: the `volbias` command-line front end.

pub mod cli;
pub mod error;
pub mod fmt;
pub mod losses;
pub mod optim;
pub mod region;
pub mod risk;
pub mod sweep;
pub mod toytrain;

pub use error::{Error, Result};
