//! One-vs-rest discrimination metrics, bootstrap intervals and operating
//! points.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::LvefClass;
use crate::features::{format_value, ModalitySubset, MISSING};
use crate::{Error, Result};

/// Redraws allowed per resample before giving up.
pub const MAX_REDRAWS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("need both positive and negative examples")]
    OneClassOnly,
    #[error("bootstrap resample stayed degenerate after {0} redraws")]
    DegenerateResampling(usize),
    #[error("cutoff {0} is not a class boundary (30, 40 or 50)")]
    MisalignedCutoff(f64),
    #[error("length mismatch: {expected} vs {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid bootstrap settings: {0}")]
    InvalidBootstrap(String),
}

fn same_len(a: usize, b: usize) -> Result<(), EvalError> {
    if a == b {
        Ok(())
    } else {
        Err(EvalError::DimensionMismatch { expected: a, got: b })
    }
}

/// Mann-Whitney AUROC; tied scores count one half.
pub fn auroc_binary(scores: &[f64], positive: &[bool]) -> Result<f64, EvalError> {
    same_len(scores.len(), positive.len())?;
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::OneClassOnly);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // wins = sum over positives of (#negatives below + half of tied negatives)
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let pos_tied = idx[i..j].iter().filter(|&&r| positive[r]).count();
        let neg_tied = (j - i) - pos_tied;
        wins += pos_tied as f64 * (neg_below as f64 + 0.5 * neg_tied as f64);
        neg_below += neg_tied;
        i = j;
    }
    Ok(wins / (n_pos as f64 * n_neg as f64))
}

pub fn auroc_ovr(scores: &[f64], labels: &[usize], k: usize) -> Result<f64, EvalError> {
    let pos: Vec<bool> = labels.iter().map(|&l| l == k).collect();
    auroc_binary(scores, &pos)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn at(scores: &[f64], positive: &[bool], threshold: f64) -> Self {
        let mut c = Confusion {
            tp: 0,
            fp: 0,
            tn: 0,
            fn_: 0,
        };
        for (&s, &p) in scores.iter().zip(positive) {
            match (s >= threshold, p) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    fn ratio(num: usize, den: usize) -> f64 {
        if den == 0 {
            MISSING
        } else {
            num as f64 / den as f64
        }
    }

    pub fn sensitivity(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        Self::ratio(self.tn, self.tn + self.fp)
    }

    pub fn f1(&self) -> f64 {
        Self::ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdMetrics {
    pub f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub confusion: Confusion,
}

/// F1, sensitivity and specificity of `score >= threshold` for class `k`
/// against the rest. Zero denominators give the missing marker.
pub fn threshold_metrics(scores: &[f64], labels: &[usize], k: usize, threshold: f64) -> ThresholdMetrics {
    let pos: Vec<bool> = labels.iter().map(|&l| l == k).collect();
    let c = Confusion::at(scores, &pos, threshold);
    ThresholdMetrics {
        f1: c.f1(),
        sensitivity: c.sensitivity(),
        specificity: c.specificity(),
        confusion: c,
    }
}

/// Threshold maximizing one-vs-rest F1 for class `k`.
///
/// Candidates are the distinct observed scores plus one value above the
/// maximum (predict nothing). Ties go to the largest threshold. Requires at
/// least one positive example.
pub fn select_f1_threshold(scores: &[f64], labels: &[usize], k: usize) -> Result<f64, EvalError> {
    same_len(scores.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&l| l == k).count();
    if n_pos == 0 {
        return Err(EvalError::OneClassOnly);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let top = scores[idx[0]];
    let mut best_t = top + 1.0;
    let mut best_f1 = 0.0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let v = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == v {
            if labels[idx[i]] == k {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let f1 = 2.0 * tp as f64 / (2 * tp + fp + (n_pos - tp)) as f64;
        if f1 > best_f1 {
            best_f1 = f1;
            best_t = v;
        }
    }
    Ok(best_t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve from the most to the least specific threshold. The first
/// point's threshold lies above every score and gives (0, 0).
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> Result<Vec<RocPoint>, EvalError> {
    same_len(scores.len(), positive.len())?;
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::OneClassOnly);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = vec![RocPoint {
        threshold: scores[idx[0]] + 1.0,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let v = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == v {
            if positive[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push(RocPoint {
            threshold: v,
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
        });
    }
    Ok(out)
}

/// Binary AUROC for `lvef < cutoff`, scored by the summed probability of
/// the classes lying wholly below the cutoff. Columns of `proba` follow
/// class indices (severe, moderate, mild, normal).
pub fn binary_auc_at_cutoff(proba: &[Vec<f64>], lvef: &[f64], cutoff: f64) -> Result<f64, EvalError> {
    same_len(proba.len(), lvef.len())?;
    if ![30.0, 40.0, 50.0].contains(&cutoff) {
        return Err(EvalError::MisalignedCutoff(cutoff));
    }
    let below: Vec<usize> = LvefClass::ALL
        .iter()
        .filter(|c| c.band().1 <= cutoff)
        .map(|c| c.index())
        .collect();
    let scores: Vec<f64> = proba.iter().map(|p| below.iter().map(|&k| p[k]).sum()).collect();
    let positive: Vec<bool> = lvef.iter().map(|&v| v < cutoff).collect();
    auroc_binary(&scores, &positive)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            resamples: 1000,
            alpha: 0.05,
            seed: 0,
        }
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap interval of `metric` over with-replacement
/// resamples of `n` examples.
///
/// `metric` receives the resampled indices. A resample on which it returns
/// [`EvalError::OneClassOnly`] is redrawn, at most [`MAX_REDRAWS`] times.
/// Resample `b` draws from its own ChaCha stream, so the result does not
/// depend on evaluation order.
pub fn bootstrap_ci<F>(n: usize, cfg: &BootstrapConfig, mut metric: F) -> Result<(f64, f64), EvalError>
where
    F: FnMut(&[usize]) -> Result<f64, EvalError>,
{
    if cfg.resamples < 2 {
        return Err(EvalError::InvalidBootstrap("need at least 2 resamples".into()));
    }
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(EvalError::InvalidBootstrap("alpha must be in (0, 1)".into()));
    }
    if n == 0 {
        return Err(EvalError::OneClassOnly);
    }
    let mut values = Vec::with_capacity(cfg.resamples);
    let mut idx = vec![0usize; n];
    for b in 0..cfg.resamples {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(b as u64);
        let mut value = None;
        for _ in 0..=MAX_REDRAWS {
            for v in idx.iter_mut() {
                *v = rng.gen_range(0..n);
            }
            match metric(&idx) {
                Ok(v) => {
                    value = Some(v);
                    break;
                }
                Err(EvalError::OneClassOnly) => continue,
                Err(e) => return Err(e),
            }
        }
        values.push(value.ok_or(EvalError::DegenerateResampling(MAX_REDRAWS))?);
    }
    values.sort_unstable_by(f64::total_cmp);
    Ok((quantile(&values, cfg.alpha / 2.0), quantile(&values, 1.0 - cfg.alpha / 2.0)))
}

/// Serializes NaN as `null` and back.
mod nan_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// A point estimate with its bootstrap interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    #[serde(with = "nan_null")]
    pub point: f64,
    #[serde(with = "nan_null")]
    pub lo: f64,
    #[serde(with = "nan_null")]
    pub hi: f64,
    /// Set when the full-sample value falls outside the interval.
    pub point_outside_ci: bool,
}

impl Estimate {
    pub fn new(point: f64, (lo, hi): (f64, f64)) -> Self {
        Self {
            point,
            lo,
            hi,
            point_outside_ci: !point.is_nan() && !(lo <= point && point <= hi),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CohortTag {
    InternalTest,
    TemporalExternal,
}

impl CohortTag {
    pub fn as_str(self) -> &'static str {
        match self {
            CohortTag::InternalTest => "internal_test",
            CohortTag::TemporalExternal => "temporal_external",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: LvefClass,
    pub n_positive: usize,
    pub auroc: Estimate,
    pub threshold: f64,
    pub f1: Estimate,
    pub sensitivity: Estimate,
    pub specificity: Estimate,
    pub roc: Vec<RocPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub modality: ModalitySubset,
    pub cohort: CohortTag,
    pub n_examples: usize,
    pub bootstrap: BootstrapConfig,
    pub classes: Vec<ClassReport>,
    /// Binary AUROC for LVEF < 50 %, when both sides are present.
    pub binary_auc_50: Option<Estimate>,
    pub provenance: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn class(&self, class: LvefClass) -> Option<&ClassReport> {
        self.classes.iter().find(|c| c.class == class)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
    }

    /// ROC points as `class,threshold,fpr,tpr` rows.
    pub fn write_roc_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("class,threshold,fpr,tpr\n");
        for c in &self.classes {
            for p in &c.roc {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    c.class,
                    format_value(p.threshold),
                    format_value(p.fpr),
                    format_value(p.tpr)
                ));
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Full per-class evaluation of predicted probabilities.
///
/// `thresholds[k]` is the operating point for class `k`, normally chosen on
/// the validation set. Classes without positives in the evaluation set
/// get missing AUROC and sensitivity. `lvef` enables the binary 50 % AUC.
pub fn evaluate(
    proba: &[Vec<f64>],
    labels: &[usize],
    lvef: Option<&[f64]>,
    thresholds: &[f64],
    cfg: &BootstrapConfig,
    modality: ModalitySubset,
    cohort: CohortTag,
) -> Result<EvalReport, EvalError> {
    same_len(proba.len(), labels.len())?;
    same_len(LvefClass::ALL.len(), thresholds.len())?;
    let n = labels.len();
    let mut classes = Vec::new();
    for class in LvefClass::ALL {
        let k = class.index();
        let scores: Vec<f64> = proba.iter().map(|p| p[k]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        let n_positive = pos.iter().filter(|&&p| p).count();
        let t = thresholds[k];
        let resample = |idx: &[usize]| -> (Vec<f64>, Vec<bool>) {
            (idx.iter().map(|&i| scores[i]).collect(), idx.iter().map(|&i| pos[i]).collect())
        };
        let missing = Estimate::new(MISSING, (MISSING, MISSING));
        let with_ci = |point: f64, f: &dyn Fn(&Confusion) -> f64| -> Result<Estimate, EvalError> {
            if point.is_nan() {
                return Ok(missing);
            }
            let ci = bootstrap_ci(n, cfg, |idx| {
                let (s, p) = resample(idx);
                let v = f(&Confusion::at(&s, &p, t));
                if v.is_nan() {
                    Err(EvalError::OneClassOnly)
                } else {
                    Ok(v)
                }
            })?;
            Ok(Estimate::new(point, ci))
        };
        let (auroc, roc) = match auroc_binary(&scores, &pos) {
            Ok(a) => {
                let ci = bootstrap_ci(n, cfg, |idx| {
                    let (s, p) = resample(idx);
                    auroc_binary(&s, &p)
                })?;
                (Estimate::new(a, ci), roc_curve(&scores, &pos)?)
            }
            Err(EvalError::OneClassOnly) => (missing, Vec::new()),
            Err(e) => return Err(e),
        };
        let c = Confusion::at(&scores, &pos, t);
        classes.push(ClassReport {
            class,
            n_positive,
            auroc,
            threshold: t,
            f1: with_ci(c.f1(), &|c| c.f1())?,
            sensitivity: with_ci(c.sensitivity(), &|c| c.sensitivity())?,
            specificity: with_ci(c.specificity(), &|c| c.specificity())?,
            roc,
        });
    }
    let binary_auc_50 = match lvef {
        Some(v) => match binary_auc_at_cutoff(proba, v, 50.0) {
            Ok(a) => {
                let ci = bootstrap_ci(n, cfg, |idx| {
                    let p: Vec<Vec<f64>> = idx.iter().map(|&i| proba[i].clone()).collect();
                    let l: Vec<f64> = idx.iter().map(|&i| v[i]).collect();
                    binary_auc_at_cutoff(&p, &l, 50.0)
                })?;
                Some(Estimate::new(a, ci))
            }
            Err(EvalError::OneClassOnly) => None,
            Err(e) => return Err(e),
        },
        None => None,
    };
    Ok(EvalReport {
        modality,
        cohort,
        n_examples: n,
        bootstrap: *cfg,
        classes,
        binary_auc_50,
        provenance: BTreeMap::new(),
    })
}
