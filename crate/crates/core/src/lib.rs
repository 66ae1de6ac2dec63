//! Distributed ISAC simulation and estimation.
//!
//! One transmitter illuminates a scene observed by several receivers with
//! unknown positions and clock offsets. Each receiver estimates its multipath
//! parameters from a beamspace MIMO-OFDM snapshot; a fusion center then
//! localizes receivers and passive targets jointly.
//!
//! Module order follows the processing chain: [`scene`] → [`waveform`] →
//! [`estimator`] → [`pipeline`] → [`fusion`], with [`harness`] driving
//! Monte Carlo experiments from a [`config::ScenarioConfig`].

// `!(x >= 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod error;
pub mod estimator;
pub mod fusion;
pub mod harness;
pub mod pipeline;
pub mod scene;
pub mod waveform;

pub use config::ScenarioConfig;
pub use error::{DisacError, Result};
