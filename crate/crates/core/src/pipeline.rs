//! Stage glue shared by the command-line tool and the test suites: cohort
//! assembly, per-record ECG features, the EHR block, the shared
//! modality-tagged matrix, per-modality training and evaluation.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::cohort::{
    assign_temporal_external, pair_ecg_echo, stratified_patient_split, CohortExample, EchoResult,
    LvefClass, Pairing, Split, SplitFractions,
};
use crate::ecg_features::{clinical_feature_names, extract_clinical_features};
use crate::ehr::{
    build_ehr_vector, build_vocabulary, ehr_feature_names, example_keys, CategoryDictionaries, CodeKind,
    CodeVocabulary, EhrSnapshot,
};
use crate::eval::{evaluate, select_f1_threshold, BootstrapConfig, CohortTag, EvalReport};
use crate::features::{Column, FeatureError, FeatureMatrix, FeatureVector, Modality, ModalitySubset, MISSING};
use crate::gbt::{train, GbtModel, GbtParams};
use crate::signal::{preprocess_record, EcgMeta, EcgRecord, PreprocessConfig, SignalError, TwelveLeadEcg};
use crate::ts_features::{extract_ts_features, TsDescriptorCatalog};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub include_ts: bool,
    pub dx_vocab_size: usize,
    pub med_vocab_size: usize,
    /// Leakage exclusions, as codes or grouping keys.
    pub exclusions: BTreeSet<String>,
    pub dictionaries: CategoryDictionaries,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            include_ts: true,
            dx_vocab_size: 50,
            med_vocab_size: 50,
            exclusions: ["I50".to_string()].into(),
            dictionaries: CategoryDictionaries::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub window_days: i64,
    pub fractions: SplitFractions,
    /// Examples indexed at or after this instant form the temporal
    /// external cohort.
    pub external_cutoff: Option<DateTime<Utc>>,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            window_days: 14,
            fractions: SplitFractions::default(),
            external_cutoff: None,
        }
    }
}

/// Names of the ECG block, clinical catalog first.
pub fn ecg_feature_names(cfg: &FeatureConfig) -> Vec<String> {
    let mut names = clinical_feature_names();
    if cfg.include_ts {
        names.extend(TsDescriptorCatalog::standard().feature_names());
    }
    names
}

/// ECG features of an already preprocessed recording.
pub fn ecg_features(ecg: &TwelveLeadEcg, cfg: &FeatureConfig) -> FeatureVector {
    let mut v = extract_clinical_features(ecg);
    if cfg.include_ts {
        v.extend(extract_ts_features(ecg, &TsDescriptorCatalog::standard()));
    }
    v
}

/// Preprocesses a raw recording and extracts its ECG features.
pub fn record_features(
    record: &EcgRecord,
    pre: &PreprocessConfig,
    cfg: &FeatureConfig,
) -> Result<FeatureVector, SignalError> {
    let p = preprocess_record(record, pre)?;
    Ok(ecg_features(&p.ecg, cfg))
}

/// Maps `f` over `items` on up to `threads` scoped workers, keeping order.
pub fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Pairs echos with ECGs, marks the external cohort and assigns the
/// remaining examples to train/val/test by patient.
pub fn build_cohort(ecgs: &[EcgMeta], echos: &[EchoResult], cfg: &CohortConfig, seed: u64) -> Result<Pairing> {
    let mut pairing = pair_ecg_echo(ecgs, echos, cfg.window_days);
    if let Some(cutoff) = cfg.external_cutoff {
        assign_temporal_external(&mut pairing.examples, cutoff);
    }
    let splits = stratified_patient_split(&pairing.examples, cfg.fractions, seed)?;
    for (ex, s) in pairing.examples.iter_mut().zip(splits) {
        ex.split = Some(s);
    }
    Ok(pairing)
}

/// EHR encoder whose vocabularies come from training examples only.
#[derive(Debug, Clone, PartialEq)]
pub struct EhrEncoder {
    pub vocab_dx: CodeVocabulary,
    pub vocab_med: CodeVocabulary,
    pub dictionaries: CategoryDictionaries,
}

impl EhrEncoder {
    pub fn fit(
        examples: &[CohortExample],
        snapshots: &BTreeMap<String, EhrSnapshot>,
        cfg: &FeatureConfig,
    ) -> Result<Self> {
        let train: Vec<&CohortExample> = examples.iter().filter(|e| e.split == Some(Split::Train)).collect();
        let keys = |kind| -> Vec<BTreeSet<String>> {
            train
                .iter()
                .filter_map(|e| snapshots.get(&e.patient_id).map(|s| example_keys(s, kind, e.index_date)))
                .collect()
        };
        Ok(Self {
            vocab_dx: build_vocabulary(
                CodeKind::Diagnosis,
                &keys(CodeKind::Diagnosis),
                cfg.dx_vocab_size,
                &cfg.exclusions,
            )?,
            vocab_med: build_vocabulary(
                CodeKind::Medication,
                &keys(CodeKind::Medication),
                cfg.med_vocab_size,
                &cfg.exclusions,
            )?,
            dictionaries: cfg.dictionaries.clone(),
        })
    }

    pub fn names(&self) -> Vec<String> {
        ehr_feature_names(&self.vocab_dx, &self.vocab_med, &self.dictionaries)
    }

    /// A patient without a snapshot gets an all-missing block.
    pub fn encode(&self, snapshot: Option<&EhrSnapshot>, index_date: DateTime<Utc>) -> Result<Vec<f64>> {
        match snapshot {
            Some(s) => Ok(build_ehr_vector(s, &self.vocab_dx, &self.vocab_med, &self.dictionaries, index_date)?.values),
            None => Ok(vec![MISSING; self.names().len()]),
        }
    }
}

/// Joins ECG features (keyed by record id) and the EHR block into one
/// matrix with a row per example, keyed by echo id. Records without
/// features contribute missing values.
pub fn assemble_matrix(
    examples: &[CohortExample],
    ecg_names: &[String],
    ecg_rows: &BTreeMap<String, Vec<f64>>,
    encoder: &EhrEncoder,
    snapshots: &BTreeMap<String, EhrSnapshot>,
) -> Result<FeatureMatrix> {
    let ehr_names = encoder.names();
    let columns = ecg_names
        .iter()
        .map(|n| (n, Modality::Ecg))
        .chain(ehr_names.iter().map(|n| (n, Modality::Ehr)))
        .map(|(n, modality)| Column {
            name: n.clone(),
            modality,
        })
        .collect();
    let mut m = FeatureMatrix::new(columns)?;
    let blank = vec![MISSING; ecg_names.len()];
    for ex in examples {
        let ecg = match ecg_rows.get(&ex.ecg_record_id) {
            Some(r) => r,
            None => {
                warn!("no ECG features for record {}", ex.ecg_record_id);
                &blank
            }
        };
        let mut row = ecg.clone();
        row.extend(encoder.encode(snapshots.get(&ex.patient_id), ex.index_date)?);
        m.push_row(ex.echo_id.clone(), &row)?;
    }
    Ok(m)
}

pub fn snapshot_index(snapshots: Vec<EhrSnapshot>) -> BTreeMap<String, EhrSnapshot> {
    snapshots.into_iter().map(|s| (s.patient_id.clone(), s)).collect()
}

/// Rows of one split, aligned with a matrix whose rows follow `examples`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub x: FeatureMatrix,
    pub y: Vec<usize>,
    pub lvef: Vec<f64>,
}

impl SplitData {
    pub fn new(x: &FeatureMatrix, examples: &[CohortExample], split: Split) -> Self {
        let rows: Vec<usize> = examples
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == Some(split))
            .map(|(i, _)| i)
            .collect();
        Self {
            x: x.select_rows(&rows),
            y: rows.iter().map(|&i| examples[i].label.index()).collect(),
            lvef: rows.iter().map(|&i| examples[i].lvef).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Checks that matrix rows and examples line up one to one.
pub fn check_alignment(x: &FeatureMatrix, examples: &[CohortExample]) -> Result<()> {
    if x.n_rows() != examples.len() || x.row_ids.iter().zip(examples).any(|(id, e)| *id != e.echo_id) {
        return Err(FeatureError::RowsMisaligned.into());
    }
    Ok(())
}

/// Trains on the train split of the modality's columns, with early stopping
/// on the validation split when it is not empty.
pub fn train_modality(
    x: &FeatureMatrix,
    examples: &[CohortExample],
    subset: ModalitySubset,
    params: &GbtParams,
) -> Result<GbtModel> {
    check_alignment(x, examples)?;
    let cols = x.select_modality(subset);
    let tr = SplitData::new(&cols, examples, Split::Train);
    let va = SplitData::new(&cols, examples, Split::Val);
    let val = (!va.is_empty()).then_some((&va.x, va.y.as_slice()));
    Ok(train(&tr.x, &tr.y, params, val)?)
}

/// Per-class F1-maximizing thresholds on the validation split. A class with
/// no validation positives falls back to 0.5.
pub fn validation_thresholds(model: &GbtModel, x: &FeatureMatrix, examples: &[CohortExample]) -> Result<Vec<f64>> {
    let va = SplitData::new(&model_columns(model, x)?, examples, Split::Val);
    let proba = model.predict_proba_matrix(&va.x)?;
    Ok(LvefClass::ALL
        .iter()
        .map(|c| {
            let scores: Vec<f64> = proba.iter().map(|p| p[c.index()]).collect();
            select_f1_threshold(&scores, &va.y, c.index()).unwrap_or_else(|e| {
                warn!("threshold for {c}: {e}; using 0.5");
                0.5
            })
        })
        .collect())
}

/// The columns of `x` the model was trained on, in its order.
pub fn model_columns(model: &GbtModel, x: &FeatureMatrix) -> Result<FeatureMatrix> {
    let keep = model
        .feature_names
        .iter()
        .map(|n| {
            x.column_index(n)
                .ok_or_else(|| FeatureError::UnknownFeature(n.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(x.select_columns(&keep))
}

pub fn cohort_tag(split: Split) -> CohortTag {
    match split {
        Split::External => CohortTag::TemporalExternal,
        _ => CohortTag::InternalTest,
    }
}

/// Evaluates a trained model on one split.
pub fn evaluate_split(
    model: &GbtModel,
    x: &FeatureMatrix,
    examples: &[CohortExample],
    split: Split,
    thresholds: &[f64],
    bootstrap: &BootstrapConfig,
    subset: ModalitySubset,
) -> Result<EvalReport> {
    check_alignment(x, examples)?;
    let data = SplitData::new(&model_columns(model, x)?, examples, split);
    let proba = model.predict_proba_matrix(&data.x)?;
    Ok(evaluate(
        &proba,
        &data.y,
        Some(&data.lvef),
        thresholds,
        bootstrap,
        subset,
        cohort_tag(split),
    )?)
}
