use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use super::vector::LOOKBACK_DAYS;
use super::{CodeEvent, EhrError, EhrSnapshot};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeKind {
    Diagnosis,
    Medication,
}

impl CodeKind {
    /// Grouping key: ICD-10 three-character category for diagnoses, the
    /// upper-cased leading word for medications.
    pub fn key(self, code: &str) -> String {
        match self {
            CodeKind::Diagnosis => code.trim().chars().take(3).collect::<String>().to_uppercase(),
            CodeKind::Medication => code
                .split(|c: char| !c.is_ascii_alphanumeric() && c != '-')
                .find(|t| !t.is_empty())
                .unwrap_or("")
                .to_uppercase(),
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            CodeKind::Diagnosis => "dx",
            CodeKind::Medication => "med",
        }
    }

    pub fn events(self, snapshot: &EhrSnapshot) -> &[CodeEvent] {
        match self {
            CodeKind::Diagnosis => &snapshot.diagnoses,
            CodeKind::Medication => &snapshot.medications,
        }
    }
}

/// Frequency-ranked grouping keys retained as indicator features.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeVocabulary {
    pub kind: CodeKind,
    pub k: usize,
    pub exclusions: Vec<String>,
    pub keys: Vec<String>,
}

impl CodeVocabulary {
    pub fn feature_names(&self) -> Vec<String> {
        self.keys
            .iter()
            .map(|k| format!("{}__{}", self.kind.prefix(), k))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("vocabulary serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
    }
}

/// Distinct grouping keys with at least one event in the lookback window
/// `[index_date - 183 days, index_date)`.
pub fn example_keys(
    snapshot: &EhrSnapshot,
    kind: CodeKind,
    index_date: DateTime<Utc>,
) -> BTreeSet<String> {
    let start = index_date - Duration::days(LOOKBACK_DAYS);
    kind.events(snapshot)
        .iter()
        .filter(|e| e.date >= start && e.date < index_date)
        .map(|e| kind.key(&e.code))
        .filter(|k| !k.is_empty())
        .collect()
}

/// Top-`k` keys by the number of examples in which they occur, after
/// removing exclusions. Ties are broken by ascending key.
pub fn build_vocabulary(
    kind: CodeKind,
    examples: &[BTreeSet<String>],
    k: usize,
    exclusions: &BTreeSet<String>,
) -> Result<CodeVocabulary, EhrError> {
    let excluded: BTreeSet<String> = exclusions.iter().map(|e| kind.key(e)).collect();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for keys in examples {
        for key in keys {
            *counts.entry(key.as_str()).or_insert(0) += 1;
        }
    }
    if counts.is_empty() {
        return Err(EhrError::EmptyCorpus);
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(key, _)| !excluded.contains(*key))
        .collect();
    // BTreeMap iteration is already ascending by key; the sort is stable.
    ranked.sort_by(|a, b| b.1.cmp(&a.1));
    Ok(CodeVocabulary {
        kind,
        k,
        exclusions: excluded.into_iter().collect(),
        keys: ranked.into_iter().take(k).map(|(key, _)| key.to_string()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(counts: &[(&str, usize)]) -> Vec<BTreeSet<String>> {
        let n = counts.iter().map(|c| c.1).max().unwrap_or(0);
        (0..n)
            .map(|i| {
                counts
                    .iter()
                    .filter(|c| i < c.1)
                    .map(|c| c.0.to_string())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn ranks_by_frequency() {
        let v = build_vocabulary(
            CodeKind::Diagnosis,
            &corpus(&[("A01", 5), ("B02", 3), ("C03", 1)]),
            2,
            &BTreeSet::new(),
        )
        .unwrap();
        assert_eq!(v.keys, vec!["A01", "B02"]);
        assert_eq!(v.feature_names(), vec!["dx__A01", "dx__B02"]);
    }

    #[test]
    fn exclusions_are_removed_before_ranking() {
        let excl: BTreeSet<String> = ["I50".to_string()].into();
        let v = build_vocabulary(
            CodeKind::Diagnosis,
            &corpus(&[("I50", 100), ("I10", 90)]),
            1,
            &excl,
        )
        .unwrap();
        assert_eq!(v.keys, vec!["I10"]);
        // a full code in the exclusion list removes its category
        let excl: BTreeSet<String> = ["I50.22".to_string()].into();
        let v = build_vocabulary(CodeKind::Diagnosis, &corpus(&[("I50", 4)]), 5, &excl).unwrap();
        assert!(v.keys.is_empty());
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = build_vocabulary(
            CodeKind::Diagnosis,
            &corpus(&[("B02", 3), ("A01", 3)]),
            1,
            &BTreeSet::new(),
        )
        .unwrap();
        assert_eq!(v.keys, vec!["A01"]);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert_eq!(
            build_vocabulary(CodeKind::Medication, &[], 50, &BTreeSet::new()),
            Err(EhrError::EmptyCorpus)
        );
        assert_eq!(
            build_vocabulary(CodeKind::Medication, &[BTreeSet::new()], 50, &BTreeSet::new()),
            Err(EhrError::EmptyCorpus)
        );
    }

    #[test]
    fn grouping_keys() {
        assert_eq!(CodeKind::Diagnosis.key("E11.65"), "E11");
        assert_eq!(CodeKind::Medication.key("furosemide 40 mg tablet"), "FUROSEMIDE");
        assert_eq!(CodeKind::Medication.key("Metoprolol Succinate ER"), "METOPROLOL");
    }

    #[test]
    fn vocabulary_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        let v = build_vocabulary(
            CodeKind::Medication,
            &corpus(&[("FUROSEMIDE", 2), ("ASPIRIN", 2)]),
            50,
            &BTreeSet::new(),
        )
        .unwrap();
        v.save(&path).unwrap();
        assert_eq!(CodeVocabulary::load(&path).unwrap(), v);
    }
}
