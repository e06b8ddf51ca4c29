//! TreeSHAP attributions of the per-class margins, importance rankings,
//! bootstrap stability of the top features and dependence-plot data.
//!
//! Attributions use the path-dependent algorithm: the background
//! distribution is the training data as summarized by node covers, so no
//! background sample is needed at explain time.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ecg_features::{clinical_catalog, AMP_BAND_RANGE, N_AMP_BANDS};
use crate::ehr::Vital;
use crate::features::{format_value, is_missing, FeatureMatrix, MISSING};
use crate::gbt::{GbtModel, TreeNode};
use crate::signal::Lead;
use crate::ts_features::TsDescriptorCatalog;
use crate::{Error, Result};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExplainError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty attribution matrix")]
    EmptyMatrix,
    #[error("need at least two non-missing points")]
    FewerThanTwoPoints,
    #[error("class {class} outside 0..{n_classes}")]
    InvalidClass { class: usize, n_classes: usize },
}

#[derive(Clone, Copy)]
struct PathElement {
    feature: Option<usize>,
    zero_fraction: f64,
    one_fraction: f64,
    pweight: f64,
}

fn extend_path(path: &mut Vec<PathElement>, zero_fraction: f64, one_fraction: f64, feature: Option<usize>) {
    let depth = path.len();
    path.push(PathElement {
        feature,
        zero_fraction,
        one_fraction,
        pweight: if depth == 0 { 1.0 } else { 0.0 },
    });
    let d = depth as f64;
    for i in (0..depth).rev() {
        let w = path[i].pweight;
        path[i + 1].pweight += one_fraction * w * (i as f64 + 1.0) / (d + 1.0);
        path[i].pweight = zero_fraction * w * (d - i as f64) / (d + 1.0);
    }
}

fn unwind_path(path: &mut Vec<PathElement>, index: usize) {
    let depth = path.len() - 1;
    let d = depth as f64;
    let PathElement {
        one_fraction,
        zero_fraction,
        ..
    } = path[index];
    let mut next = path[depth].pweight;
    for i in (0..depth).rev() {
        if one_fraction != 0.0 {
            let tmp = path[i].pweight;
            path[i].pweight = next * (d + 1.0) / ((i as f64 + 1.0) * one_fraction);
            next = tmp - path[i].pweight * zero_fraction * (d - i as f64) / (d + 1.0);
        } else {
            path[i].pweight = path[i].pweight * (d + 1.0) / (zero_fraction * (d - i as f64));
        }
    }
    for i in index..depth {
        path[i].feature = path[i + 1].feature;
        path[i].zero_fraction = path[i + 1].zero_fraction;
        path[i].one_fraction = path[i + 1].one_fraction;
    }
    path.pop();
}

fn unwound_path_sum(path: &[PathElement], index: usize) -> f64 {
    let depth = path.len() - 1;
    let d = depth as f64;
    let PathElement {
        one_fraction,
        zero_fraction,
        ..
    } = path[index];
    let mut next = path[depth].pweight;
    let mut total = 0.0;
    for i in (0..depth).rev() {
        if one_fraction != 0.0 {
            let tmp = next * (d + 1.0) / ((i as f64 + 1.0) * one_fraction);
            total += tmp;
            next = path[i].pweight - tmp * zero_fraction * (d - i as f64) / (d + 1.0);
        } else if zero_fraction != 0.0 {
            total += path[i].pweight / zero_fraction / ((d - i as f64) / (d + 1.0));
        }
    }
    total
}

fn recurse(
    node: &TreeNode,
    x: &[f64],
    phi: &mut [f64],
    mut path: Vec<PathElement>,
    zero_fraction: f64,
    one_fraction: f64,
    feature: Option<usize>,
) {
    extend_path(&mut path, zero_fraction, one_fraction, feature);
    match node {
        TreeNode::Leaf { weight, .. } => {
            for i in 1..path.len() {
                let w = unwound_path_sum(&path, i);
                let el = path[i];
                let f = el.feature.expect("only the root element has no feature");
                phi[f] += w * (el.one_fraction - el.zero_fraction) * weight;
            }
        }
        TreeNode::Split {
            feature: f,
            threshold,
            default_left,
            cover,
            left,
            right,
            ..
        } => {
            let v = x[*f];
            let go_left = if v.is_nan() { *default_left } else { v < *threshold };
            let (hot, cold) = if go_left { (left, right) } else { (right, left) };
            let (mut inc_zero, mut inc_one) = (1.0, 1.0);
            if let Some(k) = path.iter().skip(1).position(|e| e.feature == Some(*f)) {
                let k = k + 1;
                inc_zero = path[k].zero_fraction;
                inc_one = path[k].one_fraction;
                unwind_path(&mut path, k);
            }
            recurse(hot, x, phi, path.clone(), hot.cover() / cover * inc_zero, inc_one, Some(*f));
            recurse(cold, x, phi, path, cold.cover() / cover * inc_zero, 0.0, Some(*f));
        }
    }
}

/// Cover-weighted mean leaf value.
pub fn expected_value(tree: &TreeNode) -> f64 {
    match tree {
        TreeNode::Leaf { weight, .. } => *weight,
        TreeNode::Split {
            cover, left, right, ..
        } => (left.cover() * expected_value(left) + right.cover() * expected_value(right)) / cover,
    }
}

/// Adds one tree's attributions for row `x` into `phi`.
pub fn tree_shap_single(tree: &TreeNode, x: &[f64], phi: &mut [f64]) {
    recurse(tree, x, phi, Vec::with_capacity(16), 1.0, 1.0, None);
}

/// Base value of class `k`: the model's base score plus the expected value
/// of every class-`k` tree.
pub fn base_value(model: &GbtModel, k: usize) -> f64 {
    model.base_score[k] + model.class_trees(k).map(expected_value).sum::<f64>()
}

/// Attributions of the class-`k` margin for one row, and the base value.
/// `base + sum(phi)` equals the model margin.
pub fn tree_shap(model: &GbtModel, x: &[f64], k: usize) -> Result<(Vec<f64>, f64), ExplainError> {
    check(model, x.len(), k)?;
    let mut phi = vec![0.0; x.len()];
    for tree in model.class_trees(k) {
        tree_shap_single(tree, x, &mut phi);
    }
    Ok((phi, base_value(model, k)))
}

fn check(model: &GbtModel, width: usize, k: usize) -> Result<(), ExplainError> {
    if width != model.n_features() {
        return Err(ExplainError::DimensionMismatch {
            expected: model.n_features(),
            got: width,
        });
    }
    if k >= model.n_classes() {
        return Err(ExplainError::InvalidClass {
            class: k,
            n_classes: model.n_classes(),
        });
    }
    Ok(())
}

/// Per-row attributions for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapMatrix {
    pub class: usize,
    pub base_value: f64,
    pub feature_names: Vec<String>,
    pub row_ids: Vec<String>,
    /// Row-major, `row_ids.len()` rows of `feature_names.len()` values.
    pub values: Vec<Vec<f64>>,
    pub labels_applied: bool,
    pub provenance: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ShapSidecar {
    class: usize,
    base_value: f64,
    labels_applied: bool,
    #[serde(default)]
    provenance: BTreeMap<String, String>,
}

impl ShapMatrix {
    pub fn compute(model: &GbtModel, x: &FeatureMatrix, k: usize) -> Result<Self, ExplainError> {
        check(model, x.n_cols(), k)?;
        let trees: Vec<&TreeNode> = model.class_trees(k).collect();
        let values = x
            .rows()
            .map(|r| {
                let mut phi = vec![0.0; r.len()];
                for t in &trees {
                    tree_shap_single(t, r, &mut phi);
                }
                phi
            })
            .collect();
        Ok(Self {
            class: k,
            base_value: base_value(model, k),
            feature_names: x.names(),
            row_ids: x.row_ids.clone(),
            values,
            labels_applied: false,
            provenance: model.provenance.clone(),
        })
    }

    /// Copy whose feature names are replaced by display labels. Values are
    /// untouched.
    pub fn with_display_labels(&self) -> Self {
        Self {
            feature_names: self.feature_names.iter().map(|n| display_label(n).0).collect(),
            labels_applied: true,
            ..self.clone()
        }
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.iter().map(|r| r[j]).collect()
    }

    pub fn sidecar_path(csv_path: &Path) -> std::path::PathBuf {
        csv_path.with_extension("json")
    }

    /// CSV with an `example_id` column, plus a JSON sidecar holding the
    /// class and base value.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e))?;
        let mut header = vec!["example_id".to_string()];
        header.extend(self.feature_names.iter().cloned());
        w.write_record(&header).map_err(|e| Error::parse(path, e))?;
        for (id, row) in self.row_ids.iter().zip(&self.values) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|v| format_value(*v)));
            w.write_record(&rec).map_err(|e| Error::parse(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        let side = ShapSidecar {
            class: self.class,
            base_value: self.base_value,
            labels_applied: self.labels_applied,
            provenance: self.provenance.clone(),
        };
        let sp = Self::sidecar_path(path);
        let text = serde_json::to_string_pretty(&side).expect("sidecar serializes") + "\n";
        fs::write(&sp, text).map_err(|e| Error::io(&sp, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let sp = Self::sidecar_path(path);
        let text = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
        let side: ShapSidecar = serde_json::from_str(&text).map_err(|e| Error::parse(&sp, e))?;
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e))?;
        let header = r.headers().map_err(|e| Error::parse(path, e))?.clone();
        let feature_names: Vec<String> = header.iter().skip(1).map(String::from).collect();
        let (mut row_ids, mut values) = (Vec::new(), Vec::new());
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::parse(path, e))?;
            row_ids.push(rec[0].to_string());
            let row = rec
                .iter()
                .skip(1)
                .map(crate::features::parse_value)
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| Error::parse(path, e))?;
            values.push(row);
        }
        Ok(Self {
            class: side.class,
            base_value: side.base_value,
            feature_names,
            row_ids,
            values,
            labels_applied: side.labels_applied,
            provenance: side.provenance,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub feature: String,
    pub mean_abs_shap: f64,
}

fn rank(names: &[String], scores: Vec<f64>) -> Vec<Importance> {
    let mut out: Vec<Importance> = names
        .iter()
        .zip(scores)
        .map(|(n, s)| Importance {
            feature: n.clone(),
            mean_abs_shap: s,
        })
        .collect();
    out.sort_by(|a, b| {
        b.mean_abs_shap
            .total_cmp(&a.mean_abs_shap)
            .then_with(|| a.feature.cmp(&b.feature))
    });
    out
}

/// Features ranked by mean absolute attribution; ties alphabetical.
pub fn global_importance(shap: &ShapMatrix) -> Result<Vec<Importance>, ExplainError> {
    weighted_importance(shap, &vec![1.0; shap.values.len()])
}

/// Importance with per-row multiplicities, as produced by a resample.
fn weighted_importance(shap: &ShapMatrix, weights: &[f64]) -> Result<Vec<Importance>, ExplainError> {
    if shap.values.is_empty() || shap.feature_names.is_empty() {
        return Err(ExplainError::EmptyMatrix);
    }
    let total: f64 = weights.iter().sum();
    let mut acc = vec![0.0; shap.feature_names.len()];
    for (row, &w) in shap.values.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        for (a, v) in acc.iter_mut().zip(row) {
            *a += w * v.abs();
        }
    }
    Ok(rank(&shap.feature_names, acc.into_iter().map(|a| a / total).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub class: usize,
    pub resamples: usize,
    pub top_k: usize,
    pub seed: u64,
    pub top_sets: Vec<Vec<String>>,
    /// Symmetric, unit diagonal.
    pub jaccard: Vec<Vec<f64>>,
    /// Over distinct pairs.
    pub mean_jaccard: f64,
    pub min_jaccard: f64,
    /// Share of resamples whose top set contains the feature.
    pub frequency: BTreeMap<String, f64>,
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

impl StabilityReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        1.0
    } else {
        a.intersection(b).count() as f64 / union as f64
    }
}

/// Pairwise Jaccard similarities and selection frequencies of given
/// top-feature sets.
pub fn stability_from_sets(class: usize, top_k: usize, seed: u64, sets: Vec<Vec<String>>) -> StabilityReport {
    let b = sets.len();
    let as_sets: Vec<BTreeSet<String>> = sets.iter().map(|s| s.iter().cloned().collect()).collect();
    let mut matrix = vec![vec![1.0; b]; b];
    let mut pairs = Vec::new();
    for i in 0..b {
        for j in i + 1..b {
            let v = jaccard(&as_sets[i], &as_sets[j]);
            matrix[i][j] = v;
            matrix[j][i] = v;
            pairs.push(v);
        }
    }
    let mut frequency = BTreeMap::new();
    for s in &as_sets {
        for f in s {
            *frequency.entry(f.clone()).or_insert(0.0) += 1.0 / b as f64;
        }
    }
    let (mean, min) = if pairs.is_empty() {
        (1.0, 1.0)
    } else {
        (
            pairs.iter().sum::<f64>() / pairs.len() as f64,
            pairs.iter().cloned().fold(f64::INFINITY, f64::min),
        )
    };
    StabilityReport {
        class,
        resamples: b,
        top_k,
        seed,
        top_sets: sets,
        jaccard: matrix,
        mean_jaccard: mean,
        min_jaccard: min,
        frequency,
        provenance: BTreeMap::new(),
    }
}

/// Top-`top_k` stability over `resamples` bootstrap resamples of the rows
/// of `shap`. With `resample = false` every draw is the full set.
pub fn stability_from_shap(
    shap: &ShapMatrix,
    resamples: usize,
    top_k: usize,
    seed: u64,
    resample: bool,
) -> Result<StabilityReport, ExplainError> {
    let n = shap.values.len();
    if n == 0 {
        return Err(ExplainError::EmptyMatrix);
    }
    let mut sets = Vec::with_capacity(resamples);
    for b in 0..resamples {
        let mut weights = vec![0.0; n];
        if resample {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            for _ in 0..n {
                weights[rng.gen_range(0..n)] += 1.0;
            }
        } else {
            weights.iter_mut().for_each(|w| *w = 1.0);
        }
        let ranked = weighted_importance(shap, &weights)?;
        sets.push(ranked.into_iter().take(top_k).map(|i| i.feature).collect());
    }
    Ok(stability_from_sets(shap.class, top_k, seed, sets))
}

/// Attributions are computed once per test row; each bootstrap resample
/// only reweights rows.
pub fn stability_analysis(
    model: &GbtModel,
    test: &FeatureMatrix,
    class: usize,
    resamples: usize,
    top_k: usize,
    seed: u64,
) -> Result<StabilityReport, ExplainError> {
    if test.n_rows() == 0 {
        return Err(ExplainError::EmptyMatrix);
    }
    let shap = ShapMatrix::compute(model, test, class)?;
    let mut report = stability_from_shap(&shap, resamples, top_k, seed, true)?;
    report.provenance = model.provenance.clone();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dependence {
    pub pairs: Vec<(f64, f64)>,
    pub n_missing: usize,
    pub slope: f64,
    pub intercept: f64,
    /// Missing when either coordinate is constant.
    pub r2: f64,
}

/// Scatter pairs and an ordinary least-squares line of attribution on
/// feature value. Rows with a missing value are dropped and counted. A
/// constant feature gets slope 0 and the mean attribution as intercept.
pub fn dependence_data(values: &[f64], shap: &[f64]) -> Result<Dependence, ExplainError> {
    if values.len() != shap.len() {
        return Err(ExplainError::DimensionMismatch {
            expected: values.len(),
            got: shap.len(),
        });
    }
    let pairs: Vec<(f64, f64)> = values
        .iter()
        .zip(shap)
        .filter(|(v, _)| !is_missing(**v))
        .map(|(&v, &s)| (v, s))
        .collect();
    let n_missing = values.len() - pairs.len();
    if pairs.len() < 2 {
        return Err(ExplainError::FewerThanTwoPoints);
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = pairs.iter().map(|p| (p.1 - my).powi(2)).sum();
    let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let r2 = if sxx > 0.0 && syy > 0.0 {
        (sxy * sxy / (sxx * syy)).min(1.0)
    } else {
        MISSING
    };
    Ok(Dependence {
        pairs,
        n_missing,
        slope,
        intercept: my - slope * mx,
        r2,
    })
}

const LABEL_CSV: &str = include_str!("../labels/display_labels.csv");

fn label_table() -> &'static (BTreeMap<String, String>, BTreeMap<String, String>) {
    static TABLE: OnceLock<(BTreeMap<String, String>, BTreeMap<String, String>)> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut forward = BTreeMap::new();
        let mut inverse = BTreeMap::new();
        let mut r = csv::Reader::from_reader(LABEL_CSV.as_bytes());
        for rec in r.records() {
            let rec = rec.expect("shipped label table parses");
            forward.insert(rec[0].to_string(), rec[1].to_string());
            inverse.insert(rec[1].to_string(), rec[0].to_string());
        }
        (forward, inverse)
    })
}

/// Human-readable label for a raw feature name, and whether the name was in
/// the shipped table. Unmapped names come back unchanged.
pub fn display_label(raw: &str) -> (String, bool) {
    match label_table().0.get(raw) {
        Some(l) => (l.clone(), true),
        None => (raw.to_string(), false),
    }
}

/// Inverse lookup of [`display_label`].
pub fn raw_name(label: &str) -> Option<&'static str> {
    label_table().1.get(label).map(String::as_str)
}

fn lead_label(lead: Lead) -> String {
    format!("Lead {}", lead.name())
}

/// Rows of the shipped label table, generated from the feature catalogs,
/// the EHR column grammar and the diagnosis and medication keys of the
/// default synthetic priors.
pub fn generate_label_table() -> Vec<(String, String)> {
    let mut rows = Vec::new();
    let global = [
        ("beats__count", "Beat count"),
        ("rr__mean_ms", "Average RR interval"),
        ("rr__std_ms", "RR interval standard deviation"),
        ("rr__min_ms", "Shortest RR interval"),
        ("rr__max_ms", "Longest RR interval"),
        ("rr__rmssd_ms", "RR interval RMSSD"),
        ("heart_rate__bpm", "Heart rate"),
        ("pr_interval__mean_ms", "Average PR interval"),
        ("qrs_duration__mean_ms", "Average QRS duration"),
        ("qt_interval__mean_ms", "Average QT interval"),
    ];
    rows.extend(global.iter().map(|(a, b)| (a.to_string(), b.to_string())));
    let components = [
        ("qr_interval_amplitude", "QR-interval", "amplitude"),
        ("rs_interval_voltage", "RS-interval", "voltage"),
        ("st_segment_voltage", "ST-segment", "voltage"),
        ("r_amplitude", "R-wave", "amplitude"),
        ("t_amplitude", "T-wave", "amplitude"),
    ];
    let (lo, hi) = AMP_BAND_RANGE;
    let width = (hi - lo) / N_AMP_BANDS as f64;
    let clinical: BTreeSet<String> = clinical_catalog().names().map(String::from).collect();
    for lead in Lead::ALL {
        for (key, part, quantity) in components {
            for (stat, word) in [("mean", "average"), ("median", "median")] {
                let raw = format!("{lead}__{key}__{stat}");
                if clinical.contains(&raw) {
                    rows.push((raw, format!("{} {part} {word} {quantity}", lead_label(lead))));
                }
            }
        }
        for k in 0..N_AMP_BANDS {
            let a = lo + width * k as f64;
            rows.push((
                format!("{lead}__amp_band__{k}"),
                format!("{} amplitude band {a} to {} share", lead_label(lead), a + width),
            ));
        }
        for d in TsDescriptorCatalog::standard().descriptors {
            let name = d.name();
            rows.push((
                format!("{lead}__ts__{name}"),
                format!("{} {}", lead_label(lead), name.replace('_', " ")),
            ));
        }
    }
    rows.push(("age_years".into(), "Age".into()));
    for v in Vital::ALL {
        let label = match v {
            Vital::Bmi => "Body mass index",
            Vital::SystolicBp => "Systolic blood pressure",
            Vital::DiastolicBp => "Diastolic blood pressure",
            Vital::TemperatureF => "Temperature",
            Vital::Pulse => "Pulse",
        };
        rows.push((v.name().to_string(), label.to_string()));
        rows.push((format!("{}_observed", v.name()), format!("{label} recorded")));
    }
    let dicts = crate::ehr::CategoryDictionaries::default();
    for (prefix, word, dict) in [
        ("sex", "Sex", &dicts.sex),
        ("race", "Race", &dicts.race),
        ("smoking", "Smoking status", &dicts.smoking_status),
    ] {
        for d in dict {
            rows.push((format!("{prefix}__{d}"), format!("{word}: {d}")));
        }
    }
    let profile = crate::synth::SynthProfile::for_class(crate::cohort::LvefClass::Normal);
    for code in profile.ehr.diagnoses.keys() {
        rows.push((format!("dx__{code}"), format!("Diagnosis {code}")));
    }
    for med in profile.ehr.medications.keys() {
        rows.push((format!("med__{med}"), format!("Medication {}", med.to_lowercase())));
    }
    rows
}
