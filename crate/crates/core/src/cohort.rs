//! Cohort construction: ECG/echo pairing, LVEF labelling and patient-level
//! stratified splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Duration, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::EcgMeta;
use crate::{timefmt, Error, Result};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CohortError {
    #[error("LVEF {0} outside [0, 100]")]
    OutOfRange(f64),
    #[error("class {class} has only {patients} patients (need at least 3)")]
    InsufficientData { class: LvefClass, patients: usize },
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    InvalidFractions([f64; 3]),
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("unknown split {0:?}")]
    UnknownSplit(String),
}

/// Four LVEF strata. The discriminant is the model's class index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LvefClass {
    Severe = 0,
    Moderate = 1,
    Mild = 2,
    Normal = 3,
}

impl LvefClass {
    pub const ALL: [LvefClass; 4] = [
        LvefClass::Severe,
        LvefClass::Moderate,
        LvefClass::Mild,
        LvefClass::Normal,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LvefClass::Severe => "severe",
            LvefClass::Moderate => "moderate",
            LvefClass::Mild => "mild",
            LvefClass::Normal => "normal",
        }
    }

    /// Half-open LVEF band `[lo, hi)` in percent.
    pub fn band(self) -> (f64, f64) {
        match self {
            LvefClass::Severe => (0.0, 30.0),
            LvefClass::Moderate => (30.0, 40.0),
            LvefClass::Mild => (40.0, 50.0),
            LvefClass::Normal => (50.0, 100.0),
        }
    }
}

impl fmt::Display for LvefClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LvefClass {
    type Err = CohortError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| CohortError::UnknownLabel(s.to_string()))
    }
}

/// Maps an LVEF percentage to its stratum: `< 30` severe, `[30, 40)`
/// moderate, `[40, 50)` mild, `>= 50` normal.
pub fn map_lvef_class(lvef: f64) -> Result<LvefClass, CohortError> {
    if !(0.0..=100.0).contains(&lvef) {
        return Err(CohortError::OutOfRange(lvef));
    }
    Ok(if lvef < 30.0 {
        LvefClass::Severe
    } else if lvef < 40.0 {
        LvefClass::Moderate
    } else if lvef < 50.0 {
        LvefClass::Mild
    } else {
        LvefClass::Normal
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EchoResult {
    pub echo_id: String,
    pub patient_id: String,
    #[serde(with = "timefmt")]
    pub performed_at: DateTime<Utc>,
    pub lvef: f64,
    #[serde(default)]
    pub quality_flags: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    External,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::External => "external",
        }
    }
}

impl FromStr for Split {
    type Err = CohortError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Split::Train, Split::Val, Split::Test, Split::External]
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| CohortError::UnknownSplit(s.to_string()))
    }
}

/// One paired ECG + echo observation. The echo id doubles as the example id.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortExample {
    pub ecg_record_id: String,
    pub patient_id: String,
    pub echo_id: String,
    pub index_date: DateTime<Utc>,
    pub lvef: f64,
    pub label: LvefClass,
    pub split: Option<Split>,
    /// ECG time minus echo time, in days.
    pub pairing_gap_days: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    PoorQuality,
    Artifact,
    LvefOutOfRange,
    NoEcgInWindow,
}

impl ExclusionReason {
    pub fn as_str(self) -> &'static str {
        match self {
            ExclusionReason::PoorQuality => "poor_quality",
            ExclusionReason::Artifact => "artifact",
            ExclusionReason::LvefOutOfRange => "lvef_out_of_range",
            ExclusionReason::NoEcgInWindow => "no_ecg_in_window",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exclusion {
    pub echo_id: String,
    pub patient_id: String,
    pub reason: ExclusionReason,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Pairing {
    pub examples: Vec<CohortExample>,
    pub exclusions: Vec<Exclusion>,
}

impl Pairing {
    pub fn exclusion_counts(&self) -> BTreeMap<ExclusionReason, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.exclusions {
            *counts.entry(e.reason).or_insert(0) += 1;
        }
        counts
    }
}

/// Pairs each eligible echo with the closest same-patient ECG within
/// `window_days`. Equidistant candidates resolve to the ECG acquired before
/// the echo, then to the smaller record id. Output follows echo order.
pub fn pair_ecg_echo(ecgs: &[EcgMeta], echos: &[EchoResult], window_days: i64) -> Pairing {
    let mut by_patient: BTreeMap<&str, Vec<&EcgMeta>> = BTreeMap::new();
    for ecg in ecgs {
        by_patient.entry(&ecg.patient_id).or_default().push(ecg);
    }
    let window = Duration::days(window_days);
    let mut out = Pairing::default();
    for echo in echos {
        let exclude = |reason| Exclusion {
            echo_id: echo.echo_id.clone(),
            patient_id: echo.patient_id.clone(),
            reason,
        };
        if echo.quality_flags.contains("poor quality") {
            out.exclusions.push(exclude(ExclusionReason::PoorQuality));
            continue;
        }
        if echo.quality_flags.contains("artifact") {
            out.exclusions.push(exclude(ExclusionReason::Artifact));
            continue;
        }
        let Ok(label) = map_lvef_class(echo.lvef) else {
            out.exclusions.push(exclude(ExclusionReason::LvefOutOfRange));
            continue;
        };
        let best = by_patient
            .get(echo.patient_id.as_str())
            .into_iter()
            .flatten()
            .map(|ecg| (ecg, ecg.acquired_at - echo.performed_at))
            .filter(|(_, gap)| gap.abs() <= window)
            .min_by(|(a, ga), (b, gb)| {
                ga.abs()
                    .cmp(&gb.abs())
                    .then(ga.cmp(gb))
                    .then(a.record_id.cmp(&b.record_id))
            });
        match best {
            Some((ecg, gap)) => out.examples.push(CohortExample {
                ecg_record_id: ecg.record_id.clone(),
                patient_id: echo.patient_id.clone(),
                echo_id: echo.echo_id.clone(),
                index_date: echo.performed_at,
                lvef: echo.lvef,
                label,
                split: None,
                pairing_gap_days: gap.num_seconds() as f64 / 86_400.0,
            }),
            None => out.exclusions.push(exclude(ExclusionReason::NoEcgInWindow)),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    fn as_array(self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }

    pub fn validate(self) -> Result<(), CohortError> {
        let f = self.as_array();
        if f.iter().any(|v| !(*v >= 0.0)) || ((f[0] + f[1] + f[2]) - 1.0).abs() > 1e-9 {
            return Err(CohortError::InvalidFractions(f));
        }
        Ok(())
    }
}

/// Marks examples whose index date is at or after `cutoff` as external.
pub fn assign_temporal_external(examples: &mut [CohortExample], cutoff: DateTime<Utc>) {
    for ex in examples.iter_mut() {
        if ex.index_date >= cutoff {
            ex.split = Some(Split::External);
        }
    }
}

/// Patient-level train/val/test assignment stratified by LVEF class.
///
/// Examples already marked external keep that split and are ignored. Each
/// remaining patient gets a dominant label (their most severe class);
/// patients are shuffled within each dominant-label stratum and each one is
/// placed in the split with the largest remaining example deficit. Returns
/// one split per input example.
pub fn stratified_patient_split(
    examples: &[CohortExample],
    fractions: SplitFractions,
    seed: u64,
) -> Result<Vec<Split>, CohortError> {
    fractions.validate()?;
    let mut patients: BTreeMap<&str, (LvefClass, usize)> = BTreeMap::new();
    let mut class_patients: BTreeMap<LvefClass, BTreeSet<&str>> = BTreeMap::new();
    for ex in examples.iter().filter(|e| e.split != Some(Split::External)) {
        let entry = patients
            .entry(ex.patient_id.as_str())
            .or_insert((ex.label, 0));
        entry.0 = entry.0.min(ex.label);
        entry.1 += 1;
        class_patients
            .entry(ex.label)
            .or_default()
            .insert(&ex.patient_id);
    }
    for class in LvefClass::ALL {
        let n = class_patients.get(&class).map_or(0, BTreeSet::len);
        if n < 3 {
            return Err(CohortError::InsufficientData { class, patients: n });
        }
    }

    let mut strata: BTreeMap<LvefClass, Vec<(&str, usize)>> = BTreeMap::new();
    for (&pid, &(dominant, count)) in &patients {
        strata.entry(dominant).or_default().push((pid, count));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets = fractions.as_array();
    let splits = [Split::Train, Split::Val, Split::Test];
    let mut assignment: BTreeMap<&str, Split> = BTreeMap::new();
    for (_, mut members) in strata {
        members.shuffle(&mut rng);
        let total: usize = members.iter().map(|m| m.1).sum();
        let mut filled = [0usize; 3];
        for (pid, count) in members {
            let deficit = |k: usize| targets[k] * total as f64 - filled[k] as f64;
            let mut best = 0;
            for k in 1..3 {
                if deficit(k) > deficit(best) {
                    best = k;
                }
            }
            filled[best] += count;
            assignment.insert(pid, splits[best]);
        }
    }
    Ok(examples
        .iter()
        .map(|ex| match ex.split {
            Some(Split::External) => Split::External,
            _ => assignment[ex.patient_id.as_str()],
        })
        .collect())
}

const COHORT_HEADER: &str =
    "record_id,patient_id,echo_id,index_date,lvef,label,split,pairing_gap_days";

pub fn write_cohort(path: &Path, examples: &[CohortExample]) -> Result<()> {
    let mut s = String::from(COHORT_HEADER);
    s.push('\n');
    for ex in examples {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            ex.ecg_record_id,
            ex.patient_id,
            ex.echo_id,
            timefmt::format(&ex.index_date),
            ex.lvef,
            ex.label,
            ex.split.map_or("", Split::as_str),
            ex.pairing_gap_days
        ));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_cohort(path: &Path) -> Result<Vec<CohortExample>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e))?;
    let header = reader.headers().map_err(|e| Error::parse(path, e))?;
    if header.iter().collect::<Vec<_>>().join(",") != COHORT_HEADER {
        return Err(Error::parse(path, "unexpected cohort header"));
    }
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::parse(path, e))?;
        let num = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|e| Error::parse(path, format!("{e}")))
        };
        let label: LvefClass = rec[5].parse()?;
        let split = match &rec[6] {
            "" => None,
            s => Some(s.parse::<Split>()?),
        };
        out.push(CohortExample {
            ecg_record_id: rec[0].to_string(),
            patient_id: rec[1].to_string(),
            echo_id: rec[2].to_string(),
            index_date: timefmt::parse(&rec[3]).map_err(|e| Error::parse(path, e))?,
            lvef: num(4)?,
            label,
            split,
            pairing_gap_days: num(7)?,
        });
    }
    Ok(out)
}

pub fn write_exclusions(path: &Path, exclusions: &[Exclusion]) -> Result<()> {
    let mut s = String::from("echo_id,patient_id,reason\n");
    for e in exclusions {
        s.push_str(&format!("{},{},{}\n", e.echo_id, e.patient_id, e.reason.as_str()));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads echo results from newline-delimited JSON.
pub fn read_echos(path: &Path) -> Result<Vec<EchoResult>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::parse(path, e)))
        .collect()
}

pub fn write_echos(path: &Path, echos: &[EchoResult]) -> Result<()> {
    let mut s = String::new();
    for e in echos {
        s.push_str(&serde_json::to_string(e).expect("echo serializes"));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use rand::Rng;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2021, 6, 1, 12, 0, 0).unwrap()
    }

    fn ecg(id: &str, patient: &str, offset_days: i64) -> EcgMeta {
        EcgMeta {
            record_id: id.into(),
            patient_id: patient.into(),
            acquired_at: t0() + Duration::days(offset_days),
            sampling_rate: 500.0,
        }
    }

    fn echo(id: &str, patient: &str, lvef: f64) -> EchoResult {
        EchoResult {
            echo_id: id.into(),
            patient_id: patient.into(),
            performed_at: t0(),
            lvef,
            quality_flags: BTreeSet::new(),
        }
    }

    #[test]
    fn lvef_boundaries() {
        assert_eq!(map_lvef_class(55.0).unwrap(), LvefClass::Normal);
        assert_eq!(map_lvef_class(50.0).unwrap(), LvefClass::Normal);
        assert_eq!(map_lvef_class(49.99).unwrap(), LvefClass::Mild);
        assert_eq!(map_lvef_class(40.0).unwrap(), LvefClass::Mild);
        assert_eq!(map_lvef_class(30.0).unwrap(), LvefClass::Moderate);
        assert_eq!(map_lvef_class(29.9).unwrap(), LvefClass::Severe);
        assert_eq!(map_lvef_class(0.0).unwrap(), LvefClass::Severe);
        assert_eq!(map_lvef_class(100.0).unwrap(), LvefClass::Normal);
        assert!(matches!(map_lvef_class(100.5), Err(CohortError::OutOfRange(_))));
        assert!(map_lvef_class(-1.0).is_err());
        assert!(map_lvef_class(f64::NAN).is_err());
    }

    #[test]
    fn closest_ecg_wins() {
        let p = pair_ecg_echo(
            &[ecg("a", "p", -3), ecg("b", "p", 5)],
            &[echo("e", "p", 60.0)],
            14,
        );
        assert_eq!(p.examples.len(), 1);
        assert_eq!(p.examples[0].ecg_record_id, "a");
        assert_eq!(p.examples[0].pairing_gap_days, -3.0);
    }

    #[test]
    fn ecg_outside_window_excludes_echo() {
        let p = pair_ecg_echo(&[ecg("a", "p", 15)], &[echo("e", "p", 60.0)], 14);
        assert!(p.examples.is_empty());
        assert_eq!(p.exclusions[0].reason, ExclusionReason::NoEcgInWindow);
        // exactly on the boundary is inside
        let p = pair_ecg_echo(&[ecg("a", "p", -14)], &[echo("e", "p", 60.0)], 14);
        assert_eq!(p.examples.len(), 1);
    }

    #[test]
    fn equidistant_tie_prefers_earlier_ecg() {
        let p = pair_ecg_echo(
            &[ecg("after", "p", 2), ecg("before", "p", -2)],
            &[echo("e", "p", 60.0)],
            14,
        );
        assert_eq!(p.examples[0].ecg_record_id, "before");
    }

    #[test]
    fn other_patients_ecgs_are_ignored_and_flags_exclude() {
        let mut bad = echo("e2", "p", 45.0);
        bad.quality_flags.insert("poor quality".into());
        let mut art = echo("e3", "p", 45.0);
        art.quality_flags.insert("artifact".into());
        let echos = vec![echo("e1", "p", 35.0), bad, art, echo("e4", "q", 200.0)];
        let p = pair_ecg_echo(&[ecg("x", "q", 0), ecg("y", "p", 1)], &echos, 14);
        assert_eq!(p.examples.len(), 1);
        assert_eq!(p.examples[0].label, LvefClass::Moderate);
        assert_eq!(p.examples.len() + p.exclusions.len(), echos.len());
        let counts = p.exclusion_counts();
        assert_eq!(counts[&ExclusionReason::PoorQuality], 1);
        assert_eq!(counts[&ExclusionReason::Artifact], 1);
        assert_eq!(counts[&ExclusionReason::LvefOutOfRange], 1);
    }

    fn synthetic_examples(n: usize, seed: u64) -> Vec<CohortExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        let mut patient = 0;
        while out.len() < n {
            let u: f64 = rng.gen();
            let lvef = if u < 0.0226 {
                20.0
            } else if u < 0.0573 {
                35.0
            } else if u < 0.1166 {
                45.0
            } else {
                60.0
            };
            let reps = if rng.gen_bool(0.15) { 2 } else { 1 };
            for r in 0..reps {
                out.push(CohortExample {
                    ecg_record_id: format!("r{patient}-{r}"),
                    patient_id: format!("p{patient}"),
                    echo_id: format!("e{patient}-{r}"),
                    index_date: t0(),
                    lvef,
                    label: map_lvef_class(lvef).unwrap(),
                    split: None,
                    pairing_gap_days: 0.0,
                });
            }
            patient += 1;
        }
        out
    }

    #[test]
    fn split_is_patient_exclusive_and_deterministic() {
        let ex = synthetic_examples(3000, 1);
        let a = stratified_patient_split(&ex, SplitFractions::default(), 7).unwrap();
        let b = stratified_patient_split(&ex, SplitFractions::default(), 7).unwrap();
        assert_eq!(a, b);
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for (e, s) in ex.iter().zip(&a) {
            if let Some(prev) = seen.insert(&e.patient_id, *s) {
                assert_eq!(prev, *s);
            }
        }
        let c = stratified_patient_split(&ex, SplitFractions::default(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn split_fractions_per_class_within_two_points() {
        let ex = synthetic_examples(10_000, 3);
        let splits = stratified_patient_split(&ex, SplitFractions::default(), 11).unwrap();
        for class in LvefClass::ALL {
            let idx: Vec<usize> = (0..ex.len()).filter(|&i| ex[i].label == class).collect();
            let n = idx.len() as f64;
            for (split, target) in [(Split::Train, 0.8), (Split::Val, 0.1), (Split::Test, 0.1)] {
                let got = idx.iter().filter(|&&i| splits[i] == split).count() as f64 / n;
                assert!((got - target).abs() <= 0.02, "{class} {split:?}: {got}");
            }
        }
    }

    #[test]
    fn external_examples_are_left_alone() {
        let mut ex = synthetic_examples(500, 4);
        let cutoff = t0();
        ex[0].index_date = cutoff + Duration::days(1);
        assign_temporal_external(&mut ex[..1], cutoff);
        let splits = stratified_patient_split(&ex, SplitFractions::default(), 1).unwrap();
        assert_eq!(splits[0], Split::External);
    }

    #[test]
    fn too_few_patients_is_an_error() {
        let mut ex = synthetic_examples(200, 5);
        ex.retain(|e| e.label != LvefClass::Severe);
        assert!(matches!(
            stratified_patient_split(&ex, SplitFractions::default(), 1),
            Err(CohortError::InsufficientData {
                class: LvefClass::Severe,
                ..
            })
        ));
        let bad = SplitFractions {
            train: 0.9,
            val: 0.1,
            test: 0.1,
        };
        assert!(stratified_patient_split(&ex, bad, 1).is_err());
    }

    #[test]
    fn cohort_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cohort.csv");
        let mut ex = synthetic_examples(20, 6);
        ex[0].split = Some(Split::Test);
        ex[1].pairing_gap_days = -2.5;
        write_cohort(&path, &ex).unwrap();
        assert_eq!(read_cohort(&path).unwrap(), ex);
    }
}
