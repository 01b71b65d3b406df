//! Real-time detector portfolio scheduling.
//!
//! An agent watches a video stream and, at each decision frame, picks one
//! detector out of a portfolio whose members trade accuracy for inference
//! latency. While a slow detector is busy the most recent prediction is held
//! and scored against the frames that arrive in the meantime. The objective is
//! the mean per-frame average precision over a sequence.
//!
//! Modules:
//!
//! - [`metrics`]: IoU, greedy matching, per-image AP.
//! - [`datastore`]: JSON Lines datasets and the prediction lookup table.
//! - [`env`]: the latency-aware decision process and an exact DP oracle.
//! - [`agent`]: categorical distributional Q-learning with double-Q targets.
//! - [`baselines`]: fixed, random, alternating and lighting-threshold policies.
//! - [`synthgen`]: seeded synthetic worlds and simulated detectors.

pub mod agent;
pub mod baselines;
pub mod datastore;
pub mod env;
mod error;
pub mod metrics;
pub mod rng;
pub mod synthgen;

pub use error::{Error, Result};
