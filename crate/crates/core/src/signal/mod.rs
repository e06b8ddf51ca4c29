//! 12-lead reconstruction and lead preprocessing.
//!
//! Recordings carry eight measured leads (I, II, V1-V6). The remaining limb
//! leads are derived samplewise:
//!
//! ```text
//! III = II - I
//! aVR = -(I + II) / 2
//! aVL = I - II / 2
//! aVF = II - I / 2
//! ```
//!
//! Each lead is then high-passed (Butterworth), notched at the mains
//! frequency and z-scored, in that order.

pub mod filter;
pub mod io;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use filter::{Biquad, Sos};

pub const DEFAULT_SAMPLING_RATE: f64 = 500.0;
pub const DEFAULT_DURATION_S: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("missing lead {0}")]
    MissingLead(Lead),
    #[error("lead {lead} has {got} samples, expected {expected}")]
    LengthMismatch {
        lead: Lead,
        expected: usize,
        got: usize,
    },
    #[error("unknown lead name {0:?}")]
    UnknownLead(String),
    #[error("invalid preprocessing config: {0}")]
    InvalidConfig(String),
    #[error("signal of {len} samples is shorter than the {min} required")]
    TooShort { len: usize, min: usize },
    #[error("invalid sampling rate {0}")]
    InvalidSamplingRate(f64),
}

/// The twelve standard leads, ordered as they are conventionally displayed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Lead {
    I,
    II,
    III,
    #[serde(rename = "aVR")]
    AVR,
    #[serde(rename = "aVL")]
    AVL,
    #[serde(rename = "aVF")]
    AVF,
    V1,
    V2,
    V3,
    V4,
    V5,
    V6,
}

impl Lead {
    pub const ALL: [Lead; 12] = [
        Lead::I,
        Lead::II,
        Lead::III,
        Lead::AVR,
        Lead::AVL,
        Lead::AVF,
        Lead::V1,
        Lead::V2,
        Lead::V3,
        Lead::V4,
        Lead::V5,
        Lead::V6,
    ];

    /// Leads present in a raw recording.
    pub const MEASURED: [Lead; 8] = [
        Lead::I,
        Lead::II,
        Lead::V1,
        Lead::V2,
        Lead::V3,
        Lead::V4,
        Lead::V5,
        Lead::V6,
    ];

    pub const DERIVED: [Lead; 4] = [Lead::III, Lead::AVR, Lead::AVL, Lead::AVF];

    pub fn name(self) -> &'static str {
        match self {
            Lead::I => "I",
            Lead::II => "II",
            Lead::III => "III",
            Lead::AVR => "aVR",
            Lead::AVL => "aVL",
            Lead::AVF => "aVF",
            Lead::V1 => "V1",
            Lead::V2 => "V2",
            Lead::V3 => "V3",
            Lead::V4 => "V4",
            Lead::V5 => "V5",
            Lead::V6 => "V6",
        }
    }

    pub fn is_measured(self) -> bool {
        Self::MEASURED.contains(&self)
    }
}

impl fmt::Display for Lead {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Lead {
    type Err = SignalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Lead::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| SignalError::UnknownLead(s.to_string()))
    }
}

/// Identity and acquisition metadata of one recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcgMeta {
    pub record_id: String,
    pub patient_id: String,
    #[serde(with = "crate::timefmt")]
    pub acquired_at: DateTime<Utc>,
    pub sampling_rate: f64,
}

/// A raw recording: metadata plus the measured leads in millivolts.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    pub meta: EcgMeta,
    pub leads: BTreeMap<Lead, Vec<f64>>,
}

impl EcgRecord {
    pub fn n_samples(&self) -> usize {
        self.leads.values().next().map_or(0, Vec::len)
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.meta.sampling_rate
    }

    pub fn lead(&self, lead: Lead) -> Result<&[f64], SignalError> {
        self.leads
            .get(&lead)
            .map(Vec::as_slice)
            .ok_or(SignalError::MissingLead(lead))
    }

    /// Checks the required leads, equal lengths and the sampling rate.
    pub fn validate(&self) -> Result<(), SignalError> {
        if !(self.meta.sampling_rate > 0.0 && self.meta.sampling_rate.is_finite()) {
            return Err(SignalError::InvalidSamplingRate(self.meta.sampling_rate));
        }
        let expected = self.lead(Lead::I)?.len();
        for lead in Lead::MEASURED {
            let got = self.lead(lead)?.len();
            if got != expected {
                return Err(SignalError::LengthMismatch {
                    lead,
                    expected,
                    got,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Measured,
    Derived,
}

/// Full 12-lead representation with per-lead provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct TwelveLeadEcg {
    pub meta: EcgMeta,
    pub leads: BTreeMap<Lead, Vec<f64>>,
    pub provenance: BTreeMap<Lead, Provenance>,
}

impl TwelveLeadEcg {
    pub fn lead(&self, lead: Lead) -> &[f64] {
        &self.leads[&lead]
    }

    pub fn n_samples(&self) -> usize {
        self.leads.values().next().map_or(0, Vec::len)
    }
}

/// Derives III, aVR, aVL and aVF from leads I and II. Leads already present
/// in the record are copied unchanged.
pub fn derive_limb_leads(ecg: &EcgRecord) -> Result<TwelveLeadEcg, SignalError> {
    let lead_i = ecg.lead(Lead::I)?;
    let lead_ii = ecg.lead(Lead::II)?;
    if lead_i.len() != lead_ii.len() {
        return Err(SignalError::LengthMismatch {
            lead: Lead::II,
            expected: lead_i.len(),
            got: lead_ii.len(),
        });
    }
    for (&lead, samples) in &ecg.leads {
        if samples.len() != lead_i.len() {
            return Err(SignalError::LengthMismatch {
                lead,
                expected: lead_i.len(),
                got: samples.len(),
            });
        }
    }

    let mut leads = BTreeMap::new();
    let mut provenance = BTreeMap::new();
    for (&lead, samples) in &ecg.leads {
        if lead.is_measured() {
            leads.insert(lead, samples.clone());
            provenance.insert(lead, Provenance::Measured);
        }
    }
    let pairs = || lead_i.iter().zip(lead_ii);
    let derived = [
        (Lead::III, pairs().map(|(&i, &ii)| ii - i).collect::<Vec<_>>()),
        (Lead::AVR, pairs().map(|(&i, &ii)| -(i + ii) / 2.0).collect()),
        (Lead::AVL, pairs().map(|(&i, &ii)| i - ii / 2.0).collect()),
        (Lead::AVF, pairs().map(|(&i, &ii)| ii - i / 2.0).collect()),
    ];
    for (lead, samples) in derived {
        leads.insert(lead, samples);
        provenance.insert(lead, Provenance::Derived);
    }
    Ok(TwelveLeadEcg {
        meta: ecg.meta.clone(),
        leads,
        provenance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub highpass_cutoff: f64,
    pub filter_order: usize,
    pub powerline_freq: f64,
    pub notch_bandwidth: f64,
    pub standardize: bool,
    /// Forward-backward filtering; `false` selects a single causal pass.
    pub zero_phase: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            highpass_cutoff: 0.5,
            filter_order: 5,
            powerline_freq: 60.0,
            notch_bandwidth: 1.0,
            standardize: true,
            zero_phase: true,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self, fs: f64) -> Result<(), SignalError> {
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(SignalError::InvalidSamplingRate(fs));
        }
        if self.filter_order < 1 {
            return Err(SignalError::InvalidConfig("filter_order must be >= 1".into()));
        }
        let ordered = 0.0 < self.highpass_cutoff
            && self.highpass_cutoff < self.powerline_freq
            && self.powerline_freq < fs / 2.0;
        if !ordered {
            return Err(SignalError::InvalidConfig(format!(
                "need 0 < highpass_cutoff ({}) < powerline_freq ({}) < fs/2 ({})",
                self.highpass_cutoff,
                self.powerline_freq,
                fs / 2.0
            )));
        }
        if !(self.notch_bandwidth > 0.0 && self.notch_bandwidth < self.powerline_freq) {
            return Err(SignalError::InvalidConfig(format!(
                "notch_bandwidth {} out of range",
                self.notch_bandwidth
            )));
        }
        Ok(())
    }

    pub fn min_len(&self) -> usize {
        10 * self.filter_order
    }
}

/// The two filter stages of the preprocessing chain, designed once per
/// sampling rate.
#[derive(Debug, Clone)]
pub struct FilterBank {
    pub highpass: Sos,
    pub notch: Sos,
    zero_phase: bool,
}

impl FilterBank {
    pub fn new(cfg: &PreprocessConfig, fs: f64) -> Result<Self, SignalError> {
        cfg.validate(fs)?;
        Ok(Self {
            highpass: Sos::butterworth_highpass(cfg.filter_order, cfg.highpass_cutoff, fs),
            notch: Sos::notch(cfg.powerline_freq, cfg.notch_bandwidth, fs),
            zero_phase: cfg.zero_phase,
        })
    }

    /// High-pass then notch, without standardization.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        if self.zero_phase {
            self.notch.filtfilt(&self.highpass.filtfilt(x))
        } else {
            self.notch.filter_steady(&self.highpass.filter_steady(x))
        }
    }

    /// Effective magnitude response of [`FilterBank::apply`].
    pub fn gain(&self, freq_hz: f64, fs: f64) -> f64 {
        let one_pass = self.highpass.gain(freq_hz, fs) * self.notch.gain(freq_hz, fs);
        if self.zero_phase {
            one_pass * one_pass
        } else {
            one_pass
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeadQuality {
    Ok,
    /// Zero variance after filtering; the output is all zeros.
    Degenerate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedLead {
    pub samples: Vec<f64>,
    pub quality: LeadQuality,
}

/// Population mean and standard deviation.
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs high-pass, notch and z-score on one lead.
pub fn preprocess_lead(
    x: &[f64],
    fs: f64,
    cfg: &PreprocessConfig,
) -> Result<PreprocessedLead, SignalError> {
    let bank = FilterBank::new(cfg, fs)?;
    preprocess_with(&bank, x, cfg)
}

pub(crate) fn preprocess_with(
    bank: &FilterBank,
    x: &[f64],
    cfg: &PreprocessConfig,
) -> Result<PreprocessedLead, SignalError> {
    if x.len() < cfg.min_len() {
        return Err(SignalError::TooShort {
            len: x.len(),
            min: cfg.min_len(),
        });
    }
    let filtered = bank.apply(x);
    if !cfg.standardize {
        return Ok(PreprocessedLead {
            samples: filtered,
            quality: LeadQuality::Ok,
        });
    }
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let (mean, std) = mean_std(&filtered);
    // Filter round-off on a constant input leaves residue of order eps * scale.
    if std <= 1e-10 * scale.max(1.0) {
        return Ok(PreprocessedLead {
            samples: vec![0.0; x.len()],
            quality: LeadQuality::Degenerate,
        });
    }
    let samples = filtered.iter().map(|v| (v - mean) / std).collect();
    Ok(PreprocessedLead {
        samples,
        quality: LeadQuality::Ok,
    })
}

/// A 12-lead recording after preprocessing, with per-lead quality flags.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedEcg {
    pub ecg: TwelveLeadEcg,
    pub quality: BTreeMap<Lead, LeadQuality>,
}

/// Derives the limb leads and preprocesses all twelve.
pub fn preprocess_record(
    record: &EcgRecord,
    cfg: &PreprocessConfig,
) -> Result<PreprocessedEcg, SignalError> {
    record.validate()?;
    let twelve = derive_limb_leads(record)?;
    let bank = FilterBank::new(cfg, record.meta.sampling_rate)?;
    let mut leads = BTreeMap::new();
    let mut quality = BTreeMap::new();
    for (&lead, samples) in &twelve.leads {
        let out = preprocess_with(&bank, samples, cfg)?;
        quality.insert(lead, out.quality);
        leads.insert(lead, out.samples);
    }
    Ok(PreprocessedEcg {
        ecg: TwelveLeadEcg {
            meta: twelve.meta,
            leads,
            provenance: twelve.provenance,
        },
        quality,
    })
}
