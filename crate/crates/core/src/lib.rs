//! Physics-informed energy-based modelling of earthquake catalogs.
//!
//! The crate covers the whole pipeline: catalog ingestion ([`catalog`]),
//! trigger selection and labelling ([`labeling`]), synthetic catalogs with
//! known seismological parameters ([`synthgen`]), multi-scale context grids
//! ([`gridenc`]) and event features ([`features`]), a small reverse-mode
//! differentiation engine ([`diff`]), the network itself ([`model`]), the
//! bounded physics parameterisation and reference estimators ([`physics`]),
//! training objectives ([`losses`]), two-stage optimisation ([`train`]) and
//! evaluation ([`eval`]).

// `!(x > y)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod catalog;
pub mod config;
pub mod dataset;
pub mod diff;
pub mod error;
pub mod eval;
pub mod features;
pub mod gridenc;
pub mod labeling;
pub mod losses;
pub mod model;
pub mod physics;
pub mod synthgen;
pub mod train;

pub use error::{Error, Result};

/// Seconds per day; catalog times are epoch seconds, windows are in days.
pub const SECONDS_PER_DAY: f64 = 86_400.0;
