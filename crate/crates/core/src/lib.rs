//! Schedule-based passive self-localization with clock-error calibration.
//!
//! Anchors broadcast in a fixed order with a known response delay; a silent
//! listener timestamps the receptions. This crate models those measurements
//! including oscillator skew, delay-generation error and jitter, removes the
//! clock errors (delay payload retrieval and recursive skew estimation),
//! estimates the listener position and evaluates the hybrid Cramér–Rao bound.
//!
//! Module map, in pipeline order:
//! - [`network`]: geometry, range ordering, clock and noise parameters
//! - [`schedule`]: schedule validation and the `S`, `S^+`, `Pi`, `G` matrices
//! - [`sim`]: synthetic measurement batches
//! - [`calibration`]: delay retrieval, outlier screening, RLS skew estimation
//! - [`estimation`]: MAP position estimate, HCRB and error ellipses
//! - [`io`] and [`experiment`]: file formats, presets and end-to-end runs

pub mod error;
pub mod network;
pub mod schedule;
pub mod sim;
pub mod calibration;
pub mod estimation;
pub mod io;
pub mod experiment;
pub mod cli;

pub use error::{Error, Result};
