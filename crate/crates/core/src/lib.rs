//! Four-class LVEF screening from 12-lead ECG and structured EHR data.
//!
//! The crate covers the whole pipeline: lead reconstruction and filtering
//! ([`signal`]), clinical and time-series ECG features ([`ecg_features`],
//! [`ts_features`]), EHR encoding and cohort statistics ([`ehr`]), cohort
//! pairing and splitting ([`cohort`]), a gradient-boosted tree classifier
//! ([`gbt`]), one-vs-rest evaluation ([`eval`]), TreeSHAP explanations
//! ([`explain`]) and a synthetic data generator ([`synth`]).

pub mod cohort;
pub mod ecg_features;
pub mod ehr;
mod error;
pub mod eval;
pub mod explain;
pub mod features;
pub mod gbt;
pub mod pipeline;
pub mod signal;
pub mod synth;
pub mod timefmt;
pub mod ts_features;

pub use error::{Error, Result};
