//! Structured EHR features: code vocabularies, lookback-window encoding and
//! cohort summary statistics.

mod stats;
mod vector;
mod vocab;

use std::fs;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{timefmt, Error, Result};

pub use stats::{
    chi_square, cohort_summary_stats, kruskal_wallis, ChiSquare, ClassSummary, FeatureKind,
    FeatureSummary, KruskalWallis, SummaryTable,
};
pub use vector::{build_ehr_vector, ehr_feature_names, CategoryDictionaries, LOOKBACK_DAYS};
pub use vocab::{build_vocabulary, example_keys, CodeKind, CodeVocabulary};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EhrError {
    #[error("no code events to build a vocabulary from")]
    EmptyCorpus,
    #[error("contingency table has an expected count of zero")]
    DegenerateTable,
    #[error("need at least two non-empty groups, got {0}")]
    InsufficientGroups(usize),
    #[error("invalid ICD-10 code {0:?}")]
    InvalidCode(String),
    #[error("vocabulary kind {found:?} where {expected:?} was required")]
    WrongVocabularyKind { expected: CodeKind, found: CodeKind },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    pub age_years: f64,
    pub sex: String,
    pub race: String,
    pub smoking_status: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vital {
    Bmi,
    SystolicBp,
    DiastolicBp,
    TemperatureF,
    Pulse,
}

impl Vital {
    pub const ALL: [Vital; 5] = [
        Vital::Bmi,
        Vital::SystolicBp,
        Vital::DiastolicBp,
        Vital::TemperatureF,
        Vital::Pulse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Vital::Bmi => "bmi",
            Vital::SystolicBp => "systolic_bp",
            Vital::DiastolicBp => "diastolic_bp",
            Vital::TemperatureF => "temperature_f",
            Vital::Pulse => "pulse",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitalMeasurement {
    pub vital: Vital,
    pub value: f64,
    #[serde(with = "timefmt")]
    pub measured_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeEvent {
    pub code: String,
    #[serde(with = "timefmt")]
    pub date: DateTime<Utc>,
}

/// Everything known about one patient's record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EhrSnapshot {
    pub patient_id: String,
    pub demographics: Demographics,
    #[serde(default)]
    pub vitals: Vec<VitalMeasurement>,
    #[serde(default)]
    pub diagnoses: Vec<CodeEvent>,
    #[serde(default)]
    pub medications: Vec<CodeEvent>,
}

impl EhrSnapshot {
    /// Checks every diagnosis code against the ICD-10 shape.
    pub fn validate(&self) -> Result<(), EhrError> {
        for d in &self.diagnoses {
            if !is_icd10(&d.code) {
                return Err(EhrError::InvalidCode(d.code.clone()));
            }
        }
        Ok(())
    }
}

/// `[A-Z][0-9][0-9A-Z]` optionally followed by `.` and anything.
pub fn is_icd10(code: &str) -> bool {
    let b = code.as_bytes();
    b.len() >= 3
        && b[0].is_ascii_uppercase()
        && b[1].is_ascii_digit()
        && (b[2].is_ascii_digit() || b[2].is_ascii_uppercase())
        && (b.len() == 3 || b[3] == b'.')
}

pub fn read_snapshots(path: &Path) -> Result<Vec<EhrSnapshot>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let snap: EhrSnapshot = serde_json::from_str(line)
            .map_err(|e| Error::parse(path, format!("line {}: {e}", i + 1)))?;
        snap.validate()?;
        out.push(snap);
    }
    Ok(out)
}

pub fn write_snapshots(path: &Path, snapshots: &[EhrSnapshot]) -> Result<()> {
    let mut s = String::new();
    for snap in snapshots {
        s.push_str(&serde_json::to_string(snap).expect("snapshot serializes"));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
