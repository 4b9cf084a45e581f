//! CT perfusion parameter estimation for a single case.
//!
//! The crate bundles an evidential physics-informed estimator (three coordinate
//! networks trained per case against a box-residue tracer model), classical
//! deconvolution baselines, a synthetic phantom with known ground truth, and
//! the metrics used to compare them.

pub mod classical;
pub mod cli;
pub mod error;
pub mod evidential;
pub mod grid;
pub mod io;
pub mod kinetics;
pub mod maps;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod trainer;

pub use error::{Error, Result};
