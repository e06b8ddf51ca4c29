use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use super::vocab::{example_keys, CodeKind, CodeVocabulary};
use super::{EhrError, EhrSnapshot, Vital};
use crate::features::FeatureVector;

/// Six months, as a half-open window ending just before the index date.
pub const LOOKBACK_DAYS: i64 = 183;

/// Fixed category lists for one-hot encoding. Values outside a list map to
/// its last entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryDictionaries {
    pub sex: Vec<String>,
    pub race: Vec<String>,
    pub smoking_status: Vec<String>,
}

impl Default for CategoryDictionaries {
    fn default() -> Self {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            sex: v(&["Female", "Male", "Unknown"]),
            race: v(&["White", "Black", "Asian", "Hispanic", "Other"]),
            smoking_status: v(&["Never", "Former", "Current", "Unknown"]),
        }
    }
}

fn one_hot(prefix: &str, dict: &[String], value: &str, names: &mut Vec<String>, vals: &mut Vec<f64>) {
    let hit = dict
        .iter()
        .position(|d| d.eq_ignore_ascii_case(value.trim()))
        .unwrap_or(dict.len() - 1);
    for (i, d) in dict.iter().enumerate() {
        names.push(format!("{prefix}__{d}"));
        vals.push(if i == hit { 1.0 } else { 0.0 });
    }
}

/// Column names produced by [`build_ehr_vector`] for the given vocabularies.
pub fn ehr_feature_names(
    vocab_dx: &CodeVocabulary,
    vocab_med: &CodeVocabulary,
    dicts: &CategoryDictionaries,
) -> Vec<String> {
    let mut names = vocab_dx.feature_names();
    names.extend(vocab_med.feature_names());
    names.push("age_years".into());
    for v in Vital::ALL {
        names.push(v.name().to_string());
        names.push(format!("{}_observed", v.name()));
    }
    for (prefix, dict) in [
        ("sex", &dicts.sex),
        ("race", &dicts.race),
        ("smoking", &dicts.smoking_status),
    ] {
        names.extend(dict.iter().map(|d| format!("{prefix}__{d}")));
    }
    names
}

/// Encodes one snapshot relative to `index_date`.
///
/// Code indicators and vitals only see events in
/// `[index_date - 183 days, index_date)`. An unobserved vital is encoded as
/// 0 with its `_observed` indicator at 0.
pub fn build_ehr_vector(
    snapshot: &EhrSnapshot,
    vocab_dx: &CodeVocabulary,
    vocab_med: &CodeVocabulary,
    dicts: &CategoryDictionaries,
    index_date: DateTime<Utc>,
) -> Result<FeatureVector, EhrError> {
    for (vocab, expected) in [(vocab_dx, CodeKind::Diagnosis), (vocab_med, CodeKind::Medication)] {
        if vocab.kind != expected {
            return Err(EhrError::WrongVocabularyKind {
                expected,
                found: vocab.kind,
            });
        }
    }
    let mut names = Vec::new();
    let mut values = Vec::new();
    for vocab in [vocab_dx, vocab_med] {
        let present = example_keys(snapshot, vocab.kind, index_date);
        for (name, key) in vocab.feature_names().into_iter().zip(&vocab.keys) {
            names.push(name);
            values.push(if present.contains(key) { 1.0 } else { 0.0 });
        }
    }

    names.push("age_years".into());
    values.push(snapshot.demographics.age_years);

    let start = index_date - Duration::days(LOOKBACK_DAYS);
    for vital in Vital::ALL {
        let latest = snapshot
            .vitals
            .iter()
            .filter(|m| m.vital == vital && m.measured_at >= start && m.measured_at < index_date)
            .max_by_key(|m| m.measured_at);
        names.push(vital.name().to_string());
        values.push(latest.map_or(0.0, |m| m.value));
        names.push(format!("{}_observed", vital.name()));
        values.push(if latest.is_some() { 1.0 } else { 0.0 });
    }

    let d = &snapshot.demographics;
    one_hot("sex", &dicts.sex, &d.sex, &mut names, &mut values);
    one_hot("race", &dicts.race, &d.race, &mut names, &mut values);
    one_hot("smoking", &dicts.smoking_status, &d.smoking_status, &mut names, &mut values);
    Ok(FeatureVector { names, values })
}

#[cfg(test)]
mod tests {
    use super::super::{CodeEvent, Demographics, VitalMeasurement};
    use super::*;
    use chrono::TimeZone;

    fn index() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2022, 7, 1, 9, 0, 0).unwrap()
    }

    fn vocab(kind: CodeKind, keys: &[&str]) -> CodeVocabulary {
        CodeVocabulary {
            kind,
            k: 50,
            exclusions: vec![],
            keys: keys.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn snapshot() -> EhrSnapshot {
        EhrSnapshot {
            patient_id: "p".into(),
            demographics: Demographics {
                age_years: 64.0,
                sex: "Male".into(),
                race: "Martian".into(),
                smoking_status: "never".into(),
            },
            vitals: vec![
                VitalMeasurement {
                    vital: Vital::Pulse,
                    value: 70.0,
                    measured_at: index() - Duration::days(100),
                },
                VitalMeasurement {
                    vital: Vital::Pulse,
                    value: 95.0,
                    measured_at: index() - Duration::days(3),
                },
                VitalMeasurement {
                    vital: Vital::Bmi,
                    value: 31.0,
                    measured_at: index(),
                },
            ],
            diagnoses: vec![
                CodeEvent {
                    code: "E11.9".into(),
                    date: index() - Duration::days(30),
                },
                CodeEvent {
                    code: "I25.10".into(),
                    date: index() - Duration::days(213),
                },
                CodeEvent {
                    code: "N18.3".into(),
                    date: index(),
                },
            ],
            medications: vec![CodeEvent {
                code: "furosemide 20 mg".into(),
                date: index() - Duration::days(183),
            }],
        }
    }

    fn encode() -> FeatureVector {
        build_ehr_vector(
            &snapshot(),
            &vocab(CodeKind::Diagnosis, &["E11", "I25", "N18"]),
            &vocab(CodeKind::Medication, &["FUROSEMIDE", "ASPIRIN"]),
            &CategoryDictionaries::default(),
            index(),
        )
        .unwrap()
    }

    #[test]
    fn lookback_window_is_half_open() {
        let v = encode();
        assert_eq!(v.get("dx__E11"), Some(1.0));
        // seven months back
        assert_eq!(v.get("dx__I25"), Some(0.0));
        // on the index date itself
        assert_eq!(v.get("dx__N18"), Some(0.0));
        // exactly 183 days back is the window's first instant
        assert_eq!(v.get("med__FUROSEMIDE"), Some(1.0));
        assert_eq!(v.get("med__ASPIRIN"), Some(0.0));
    }

    #[test]
    fn vitals_take_latest_in_window_with_observed_flags() {
        let v = encode();
        assert_eq!(v.get("pulse"), Some(95.0));
        assert_eq!(v.get("pulse_observed"), Some(1.0));
        assert_eq!(v.get("bmi"), Some(0.0));
        assert_eq!(v.get("bmi_observed"), Some(0.0));
        assert_eq!(v.get("systolic_bp"), Some(0.0));
        assert_eq!(v.get("systolic_bp_observed"), Some(0.0));
    }

    #[test]
    fn demographics_are_one_hot() {
        let v = encode();
        assert_eq!(v.get("sex__Male"), Some(1.0));
        assert_eq!(v.get("sex__Female"), Some(0.0));
        assert_eq!(v.get("race__Other"), Some(1.0));
        assert_eq!(v.get("smoking__Never"), Some(1.0));
        assert_eq!(v.get("age_years"), Some(64.0));
    }

    #[test]
    fn names_match_and_width_is_fixed() {
        let dx = vocab(CodeKind::Diagnosis, &["E11", "I25", "N18"]);
        let med = vocab(CodeKind::Medication, &["FUROSEMIDE", "ASPIRIN"]);
        let dicts = CategoryDictionaries::default();
        let v = encode();
        assert_eq!(v.names, ehr_feature_names(&dx, &med, &dicts));
        let mut other = snapshot();
        other.diagnoses.clear();
        other.vitals.clear();
        let w = build_ehr_vector(&other, &dx, &med, &dicts, index()).unwrap();
        assert_eq!(w.names, v.names);
        for (n, x) in w.names.iter().zip(&w.values) {
            if n != "age_years" && !n.ends_with("bp") && !Vital::ALL.iter().any(|vt| vt.name() == n) {
                assert!(*x == 0.0 || *x == 1.0, "{n}");
            }
        }
    }

    #[test]
    fn swapped_vocabularies_are_rejected() {
        let dx = vocab(CodeKind::Diagnosis, &[]);
        let med = vocab(CodeKind::Medication, &[]);
        let err = build_ehr_vector(&snapshot(), &med, &dx, &CategoryDictionaries::default(), index());
        assert!(matches!(err, Err(EhrError::WrongVocabularyKind { .. })));
    }
}
