//! Beat detection, fiducial delineation and the clinical ECG feature catalog.
//!
//! Morphology definitions used by the catalog:
//!
//! * `qr_interval_amplitude`: mean voltage over the inclusive Q..R segment
//!   of a beat;
//! * `rs_interval_voltage`: mean voltage over the inclusive R..S segment;
//! * `st_segment_voltage`: mean voltage over S+20 ms ..= S+80 ms;
//! * `amp_band__k`: fraction of the lead's samples in the k-th of eight
//!   0.5-unit bands covering [-2, 2] (the last band is closed).
//!
//! Beat-level values are aggregated per lead with the mean and the median.
//! RR statistics come from the R peaks of the detection lead (II, or the
//! first non-flat lead). Standard deviations are population (ddof = 0).

use std::collections::VecDeque;

use crate::features::{CatalogManifest, FeatureSpec, FeatureVector, MISSING};
use crate::signal::{Lead, TwelveLeadEcg};

pub const CATALOG_NAME: &str = "clinical_ecg";
pub const CATALOG_VERSION: &str = "1.0.0";

pub const REFRACTORY_MS: f64 = 200.0;
const INTEGRATION_MS: f64 = 150.0;
const REFINE_MS: f64 = 60.0;
const THRESHOLD_FRACTION: f64 = 0.5;
const MEDIAN_MEMORY: usize = 8;

pub const N_AMP_BANDS: usize = 8;
pub const AMP_BAND_RANGE: (f64, f64) = (-2.0, 2.0);

/// Detected R peaks for one lead.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RPeaks {
    pub indices: Vec<usize>,
    /// Set when no rhythm could be detected.
    pub undetectable: bool,
}

/// Derivative-energy QRS detector.
///
/// The squared central difference is smoothed with a centred 150 ms moving
/// window. Local maxima are thinned greedily by height to one per 200 ms and
/// then accepted in time order when they reach half the running median of
/// the last eight accepted heights (seeded with the eight tallest). Each
/// accepted peak is moved to the signal maximum within ±60 ms.
pub fn detect_r_peaks(x: &[f64], fs: f64) -> RPeaks {
    let n = x.len();
    let flagged = RPeaks {
        indices: Vec::new(),
        undetectable: true,
    };
    if n < 3 || !(fs > 0.0) || x.iter().any(|v| !v.is_finite()) {
        return flagged;
    }
    let mut energy = vec![0.0; n];
    for i in 1..n - 1 {
        let d = 0.5 * (x[i + 1] - x[i - 1]);
        energy[i] = d * d;
    }
    let half = ((INTEGRATION_MS / 1000.0 * fs) / 2.0).round().max(1.0) as usize;
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + energy[i];
    }
    let mwi: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect();
    let peak_max = mwi.iter().cloned().fold(0.0, f64::max);
    if !(peak_max > 1e-20) {
        return flagged;
    }

    let refractory = (REFRACTORY_MS / 1000.0 * fs).round() as usize;
    let mut maxima: Vec<usize> = (1..n - 1)
        .filter(|&i| mwi[i] > mwi[i - 1] && mwi[i] >= mwi[i + 1] && mwi[i] > 1e-3 * peak_max)
        .collect();
    maxima.sort_unstable_by(|&a, &b| mwi[b].total_cmp(&mwi[a]).then(a.cmp(&b)));
    let mut taken: Vec<usize> = Vec::new();
    for i in maxima {
        if taken.iter().all(|&t| t.abs_diff(i) >= refractory) {
            taken.push(i);
        }
    }
    let mut memory: VecDeque<f64> = taken.iter().take(MEDIAN_MEMORY).map(|&i| mwi[i]).collect();
    taken.sort_unstable();

    let reach = (REFINE_MS / 1000.0 * fs).round() as usize;
    let mut peaks: Vec<(usize, f64)> = Vec::new();
    for i in taken {
        let h = mwi[i];
        if h < THRESHOLD_FRACTION * median(memory.iter().copied()) {
            continue;
        }
        memory.push_back(h);
        if memory.len() > MEDIAN_MEMORY {
            memory.pop_front();
        }
        let lo = i.saturating_sub(reach);
        let hi = (i + reach + 1).min(n);
        let r = (lo..hi).fold(lo, |best, k| if x[k] > x[best] { k } else { best });
        match peaks.last_mut() {
            Some(last) if r.saturating_sub(last.0) < refractory => {
                if h > last.1 {
                    *last = (r, h);
                }
            }
            _ => peaks.push((r, h)),
        }
    }
    RPeaks {
        undetectable: peaks.is_empty(),
        indices: peaks.into_iter().map(|p| p.0).collect(),
    }
}

fn median(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return MISSING;
    }
    v.sort_unstable_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        MISSING
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// A located fiducial point. `confident` is false when the search window
/// overlapped a neighbouring beat.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fiducial {
    pub index: usize,
    pub confident: bool,
}

/// Fiducial points of one beat; absent points are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BeatFiducials {
    pub p_onset: Option<Fiducial>,
    pub p_peak: Option<Fiducial>,
    pub q: Option<Fiducial>,
    pub r: usize,
    pub s: Option<Fiducial>,
    pub t_peak: Option<Fiducial>,
    pub t_offset: Option<Fiducial>,
}

impl BeatFiducials {
    /// Present indices in temporal order.
    pub fn indices(&self) -> Vec<usize> {
        let before = [self.p_onset, self.p_peak, self.q];
        let after = [self.s, self.t_peak, self.t_offset];
        before
            .iter()
            .flatten()
            .map(|f| f.index)
            .chain(std::iter::once(self.r))
            .chain(after.iter().flatten().map(|f| f.index))
            .collect()
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Extremum {
    Min,
    Max,
    Abs,
}

/// Strict local extremum of the requested kind with the largest magnitude
/// in the open interval `(lo, hi)`, measured in samples. `None` when the
/// interval leaves the record or holds no extremum.
fn extremum(x: &[f64], lo: f64, hi: f64, kind: Extremum) -> Option<usize> {
    if lo < 0.0 || hi > (x.len() - 1) as f64 {
        return None;
    }
    let first = (lo.floor() as usize + 1).max(1);
    let last = (hi.ceil() as usize).saturating_sub(1).min(x.len() - 2);
    let mut best: Option<(usize, f64)> = None;
    for i in first..=last {
        let (a, v) = (x[i - 1], x[i]);
        // a plateau counts only if the signal turns back inside the window
        let b = match x[i + 1..=last + 1].iter().find(|&&w| w != v) {
            Some(&w) => w,
            None => continue,
        };
        let is_min = v < a && v < b;
        let is_max = v > a && v > b;
        let score = match kind {
            Extremum::Min if is_min => -v,
            Extremum::Max if is_max => v,
            Extremum::Abs if is_min || is_max => v.abs(),
            _ => continue,
        };
        if best.map_or(true, |(_, s)| score > s) {
            best = Some((i, score));
        }
    }
    best.map(|b| b.0)
}

/// Walks from the steepest point between `peak` and `limit` away from the
/// peak until the slope falls under a fifth of that steepest slope.
fn slope_boundary(x: &[f64], peak: usize, limit: usize) -> Option<usize> {
    let slope = |i: usize| (x[i + 1] - x[i]).abs();
    if peak == limit || peak + 1 >= x.len() || limit + 1 >= x.len() {
        return None;
    }
    let path: Vec<usize> = if limit < peak {
        (limit..peak).rev().collect()
    } else {
        (peak..limit).collect()
    };
    let (steep_at, steep) = path
        .iter()
        .enumerate()
        .map(|(k, &i)| (k, slope(i)))
        .fold((0, 0.0), |acc, v| if v.1 > acc.1 { v } else { acc });
    if steep <= 0.0 {
        return None;
    }
    path[steep_at..]
        .iter()
        .find(|&&i| slope(i) < 0.2 * steep)
        .map(|&i| if limit < peak { i } else { i + 1 })
}

/// Locates P, Q, S and T around each given R peak.
///
/// Search windows relative to R: Q is the deepest minimum in (R-80, R) ms,
/// S the deepest minimum in (R, R+80) ms, the T peak the largest absolute
/// extremum in (R+100, R+400) ms and the P peak the highest maximum in
/// (R-300, R-100) ms. A window that leaves the record makes its point
/// absent. P onset and T offset follow the slope within 100 ms / 150 ms.
pub fn delineate_beats(x: &[f64], r_peaks: &[usize], fs: f64) -> Vec<BeatFiducials> {
    let ms = |v: f64| v / 1000.0 * fs;
    let mut out = Vec::with_capacity(r_peaks.len());
    for (k, &r) in r_peaks.iter().enumerate() {
        if r >= x.len() {
            continue;
        }
        let rf = r as f64;
        let prev = k.checked_sub(1).map(|j| r_peaks[j] as f64);
        let next = r_peaks.get(k + 1).map(|&j| j as f64);
        let find = |lo_ms: f64, hi_ms: f64, kind: Extremum| {
            let (lo, hi) = (rf + ms(lo_ms), rf + ms(hi_ms));
            extremum(x, lo, hi, kind).map(|index| Fiducial {
                index,
                confident: prev.map_or(true, |p| lo > p) && next.map_or(true, |n| hi < n),
            })
        };
        let q = find(-80.0, 0.0, Extremum::Min);
        let s = find(0.0, 80.0, Extremum::Min);
        let t_peak = find(100.0, 400.0, Extremum::Abs);
        let p_peak = find(-300.0, -100.0, Extremum::Max);
        let p_onset = p_peak.and_then(|p| {
            let limit = (p.index as f64 - ms(100.0)).max(0.0) as usize;
            slope_boundary(x, p.index, limit).map(|index| Fiducial {
                index,
                confident: p.confident,
            })
        });
        let t_offset = t_peak.and_then(|t| {
            let limit = ((t.index as f64 + ms(150.0)) as usize).min(x.len() - 2);
            slope_boundary(x, t.index, limit).map(|index| Fiducial {
                index,
                confident: t.confident,
            })
        });
        out.push(BeatFiducials {
            p_onset,
            p_peak,
            q,
            r,
            s,
            t_peak,
            t_offset,
        });
    }
    out
}

const MORPHOLOGY: [(&str, &str, &str); 5] = [
    ("qr_interval_amplitude", "mV", "mean voltage over the inclusive Q..R segment"),
    ("rs_interval_voltage", "mV", "mean voltage over the inclusive R..S segment"),
    ("st_segment_voltage", "mV", "mean voltage over S+20 ms ..= S+80 ms"),
    ("r_amplitude", "mV", "voltage at the R peak"),
    ("t_amplitude", "mV", "voltage at the T peak"),
];

const GLOBAL: [(&str, &str, &str); 10] = [
    ("beats__count", "count", "number of detected R peaks"),
    ("rr__mean_ms", "ms", "mean RR interval"),
    ("rr__std_ms", "ms", "population standard deviation of RR intervals"),
    ("rr__min_ms", "ms", "shortest RR interval"),
    ("rr__max_ms", "ms", "longest RR interval"),
    ("rr__rmssd_ms", "ms", "root mean square of successive RR differences"),
    ("heart_rate__bpm", "bpm", "60000 / rr__mean_ms"),
    ("pr_interval__mean_ms", "ms", "mean P onset to Q time on the detection lead"),
    ("qrs_duration__mean_ms", "ms", "mean Q to S time on the detection lead"),
    ("qt_interval__mean_ms", "ms", "mean Q to T offset time on the detection lead"),
];

fn band_edges(k: usize) -> (f64, f64) {
    let (lo, hi) = AMP_BAND_RANGE;
    let w = (hi - lo) / N_AMP_BANDS as f64;
    (lo + w * k as f64, lo + w * (k + 1) as f64)
}

/// The clinical catalog, in output order: global rhythm and interval
/// features, then per lead (standard order) the morphology statistics
/// followed by the amplitude bands.
pub fn clinical_catalog() -> CatalogManifest {
    let spec = |name: String, unit: &str, definition: String| FeatureSpec {
        name,
        unit: unit.to_string(),
        definition,
    };
    let mut features: Vec<FeatureSpec> = GLOBAL
        .iter()
        .map(|(n, u, d)| spec(n.to_string(), u, d.to_string()))
        .collect();
    for lead in Lead::ALL {
        for (component, unit, def) in MORPHOLOGY {
            for stat in ["mean", "median"] {
                features.push(spec(
                    format!("{lead}__{component}__{stat}"),
                    unit,
                    format!("{stat} across beats of the {def}"),
                ));
            }
        }
        for k in 0..N_AMP_BANDS {
            let (lo, hi) = band_edges(k);
            let close = if k + 1 == N_AMP_BANDS { "]" } else { ")" };
            features.push(spec(
                format!("{lead}__amp_band__{k}"),
                "fraction",
                format!("fraction of samples in [{lo}, {hi}{close} standardized units"),
            ));
        }
    }
    CatalogManifest {
        catalog: CATALOG_NAME.to_string(),
        version: CATALOG_VERSION.to_string(),
        features,
    }
}

pub fn clinical_feature_names() -> Vec<String> {
    clinical_catalog().features.into_iter().map(|f| f.name).collect()
}

fn is_flat(x: &[f64]) -> bool {
    x.iter().all(|&v| v == x[0])
}

/// Lead used for rhythm detection: II unless flat, then the first
/// non-flat lead in standard order.
pub fn detection_lead(ecg: &TwelveLeadEcg) -> Option<Lead> {
    std::iter::once(Lead::II)
        .chain(Lead::ALL)
        .find(|l| ecg.leads.get(l).is_some_and(|x| !x.is_empty() && !is_flat(x)))
}

/// Computes the full clinical catalog for one preprocessed record.
///
/// Features that cannot be measured are the missing marker. A flat lead
/// has all of its per-lead features missing.
pub fn extract_clinical_features(ecg: &TwelveLeadEcg) -> FeatureVector {
    let fs = ecg.meta.sampling_rate;
    let to_ms = |samples: f64| samples * 1000.0 / fs;
    let mut values: Vec<f64> = Vec::new();

    let lead = detection_lead(ecg);
    let peaks = lead.map_or_else(RPeaks::default, |l| detect_r_peaks(ecg.lead(l), fs));
    let r = &peaks.indices;
    let rr: Vec<f64> = r.windows(2).map(|w| to_ms((w[1] - w[0]) as f64)).collect();
    values.push(r.len() as f64);
    if rr.is_empty() {
        values.extend([MISSING; 6]);
    } else {
        let m = mean(&rr);
        let sd = (rr.iter().map(|v| (v - m).powi(2)).sum::<f64>() / rr.len() as f64).sqrt();
        let lo = rr.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = rr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let diffs: Vec<f64> = rr.windows(2).map(|w| (w[1] - w[0]).powi(2)).collect();
        let rmssd = if diffs.is_empty() { MISSING } else { mean(&diffs).sqrt() };
        values.extend([m, sd, lo, hi, rmssd, 60_000.0 / m]);
    }

    let beats_on = |l: Lead| delineate_beats(ecg.lead(l), r, fs);
    let main_beats = lead.map(beats_on).unwrap_or_default();
    let span = |a: Option<Fiducial>, b: Option<Fiducial>| -> Option<f64> {
        Some(to_ms(b?.index as f64 - a?.index as f64))
    };
    type Ends = fn(&BeatFiducials) -> (Option<Fiducial>, Option<Fiducial>);
    let intervals: [Ends; 3] = [|b| (b.p_onset, b.q), |b| (b.q, b.s), |b| (b.q, b.t_offset)];
    for ends in intervals {
        let d: Vec<f64> = main_beats
            .iter()
            .filter_map(|b| {
                let (a, c) = ends(b);
                span(a, c)
            })
            .collect();
        values.push(mean(&d));
    }

    let st = |s: usize| -> (usize, usize) {
        let a = s + (20.0 / 1000.0 * fs).round() as usize;
        let b = s + (80.0 / 1000.0 * fs).round() as usize;
        (a, b)
    };
    for l in Lead::ALL {
        let x = ecg.leads.get(&l).map(Vec::as_slice).unwrap_or(&[]);
        let per_lead = 2 * MORPHOLOGY.len() + N_AMP_BANDS;
        if x.is_empty() || is_flat(x) {
            values.extend(std::iter::repeat(MISSING).take(per_lead));
            continue;
        }
        let seg_mean = |a: usize, b: usize| -> Option<f64> {
            (a <= b && b < x.len()).then(|| x[a..=b].iter().sum::<f64>() / (b - a + 1) as f64)
        };
        let beats = beats_on(l);
        let mut per: [Vec<f64>; 5] = Default::default();
        for b in &beats {
            if let Some(q) = b.q {
                per[0].extend(seg_mean(q.index, b.r));
            }
            if let Some(s) = b.s {
                per[1].extend(seg_mean(b.r, s.index));
                let (a, c) = st(s.index);
                per[2].extend(seg_mean(a, c));
            }
            per[3].push(x[b.r]);
            if let Some(t) = b.t_peak {
                per[4].push(x[t.index]);
            }
        }
        for v in &per {
            values.push(mean(v));
            values.push(median(v.iter().copied()));
        }
        let mut counts = [0usize; N_AMP_BANDS];
        let (lo, hi) = AMP_BAND_RANGE;
        let width = (hi - lo) / N_AMP_BANDS as f64;
        for &v in x {
            if (lo..=hi).contains(&v) {
                let k = (((v - lo) / width) as usize).min(N_AMP_BANDS - 1);
                counts[k] += 1;
            }
        }
        values.extend(counts.iter().map(|&c| c as f64 / x.len() as f64));
    }

    let names = clinical_feature_names();
    debug_assert_eq!(names.len(), values.len());
    FeatureVector { names, values }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::is_missing;
    use crate::signal::{derive_limb_leads, preprocess_record, EcgMeta, PreprocessConfig};
    use crate::synth::{generate_record, GroundTruth, SynthProfile};
    use chrono::{TimeZone, Utc};

    fn meta() -> EcgMeta {
        EcgMeta {
            record_id: "R".into(),
            patient_id: "P".into(),
            acquired_at: Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap(),
            sampling_rate: 500.0,
        }
    }

    fn noisy(hr: f64, seed: u64) -> (TwelveLeadEcg, GroundTruth) {
        let mut p = SynthProfile::clean(hr);
        p.noise_sd_mv = 0.02;
        p.powerline_amp_mv = 0.05;
        p.wander_amp_mv = 0.1;
        let (rec, truth) = generate_record(&p, seed, meta()).unwrap();
        let pre = preprocess_record(&rec, &PreprocessConfig::default()).unwrap();
        (pre.ecg, truth)
    }

    fn clean(hr: f64) -> (TwelveLeadEcg, GroundTruth) {
        let (rec, truth) = generate_record(&SynthProfile::clean(hr), 1, meta()).unwrap();
        (derive_limb_leads(&rec).unwrap(), truth)
    }

    #[test]
    fn detects_sixty_bpm() {
        for seed in 0..5 {
            let (ecg, truth) = noisy(60.0, seed);
            let peaks = detect_r_peaks(ecg.lead(Lead::II), 500.0);
            assert!(!peaks.undetectable);
            let n = peaks.indices.len();
            assert!((9..=11).contains(&n), "{n}");
            assert_eq!(n, truth.beats.len());
            let rr: Vec<f64> = peaks.indices.windows(2).map(|w| (w[1] - w[0]) as f64 * 2.0).collect();
            let m = rr.iter().sum::<f64>() / rr.len() as f64;
            assert!((m - 1000.0).abs() <= 10.0, "{m}");
            for (got, want) in peaks.indices.iter().zip(truth.r_samples()) {
                assert!(got.abs_diff(want) <= 3, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn detects_one_twenty_bpm() {
        for seed in 0..5 {
            let (ecg, _) = noisy(120.0, seed);
            let n = detect_r_peaks(ecg.lead(Lead::II), 500.0).indices.len();
            assert!((19..=21).contains(&n), "{n}");
        }
    }

    #[test]
    fn flatline_is_flagged() {
        let peaks = detect_r_peaks(&[0.0; 5000], 500.0);
        assert!(peaks.indices.is_empty());
        assert!(peaks.undetectable);
        assert!(detect_r_peaks(&[], 500.0).undetectable);
    }

    #[test]
    fn peaks_respect_refractory_period() {
        for hr in [45.0, 90.0, 150.0] {
            let (ecg, _) = noisy(hr, 2);
            let p = detect_r_peaks(ecg.lead(Lead::II), 500.0).indices;
            assert!(p.windows(2).all(|w| w[1] > w[0] && w[1] - w[0] >= 100));
        }
    }

    #[test]
    fn q_wave_matches_template() {
        let (ecg, truth) = noisy(60.0, 4);
        let x = ecg.lead(Lead::II);
        let beats = delineate_beats(x, &truth.r_samples(), 500.0);
        for (b, t) in beats.iter().zip(&truth.beats) {
            let q = b.q.expect("Q present").index;
            assert!(q.abs_diff(t.q) <= 3, "{q} vs {}", t.q);
            let s = b.s.expect("S present").index;
            assert!(s.abs_diff(t.s) <= 3);
            let idx = b.indices();
            assert!(idx.windows(2).all(|w| w[0] < w[1]), "{idx:?}");
        }
    }

    #[test]
    fn edge_beat_has_no_p_wave() {
        let (ecg, _) = clean(60.0);
        let x = ecg.lead(Lead::II);
        let beats = delineate_beats(x, &[100], 500.0);
        assert!(beats[0].p_peak.is_none());
        assert!(beats[0].p_onset.is_none());
        let beats = delineate_beats(x, &[x.len() - 100], 500.0);
        assert!(beats[0].t_peak.is_none());
    }

    #[test]
    fn flat_segment_after_r_has_no_s() {
        let mut x = vec![0.0; 1000];
        for (k, v) in x[480..=500].iter_mut().enumerate() {
            *v = k as f64 / 20.0;
        }
        let beats = delineate_beats(&x, &[500], 500.0);
        assert!(beats[0].s.is_none());
    }

    #[test]
    fn regular_rhythm_statistics() {
        let (ecg, _) = clean(60.0);
        let f = extract_clinical_features(&ecg);
        let sd = f.get("rr__std_ms").unwrap();
        assert!(sd <= 2.0, "{sd}");
        let m = f.get("rr__mean_ms").unwrap();
        let hr = f.get("heart_rate__bpm").unwrap();
        assert!((hr - 60_000.0 / m).abs() < 1e-12);
        assert!((m - 1000.0).abs() <= 2.0);
        assert!(f.get("rr__min_ms").unwrap() <= m && m <= f.get("rr__max_ms").unwrap());
    }

    #[test]
    fn heart_rate_identity() {
        // 10 R peaks exactly 500 samples apart at 500 Hz
        let mut x = vec![0.0; 5000];
        for k in 0..10 {
            let c = 200 + 500 * k;
            for d in 0..=20 {
                let v = 1.0 - d as f64 / 20.0;
                x[c - d] = v;
                x[c + d] = v;
            }
        }
        let peaks = detect_r_peaks(&x, 500.0).indices;
        let rr: Vec<usize> = peaks.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(rr.iter().all(|&d| d == 500), "{rr:?}");
        assert_eq!(60_000.0 / 1000.0, 60.0);
    }

    #[test]
    fn qr_amplitude_equals_segment_mean_oracle() {
        let (ecg, truth) = clean(60.0);
        let f = extract_clinical_features(&ecg);
        for lead in [Lead::I, Lead::II, Lead::V6] {
            let x = ecg.lead(lead);
            let seg: Vec<f64> = truth
                .beats
                .iter()
                .map(|b| x[b.q..=b.r].iter().sum::<f64>() / (b.r - b.q + 1) as f64)
                .collect();
            let oracle = seg.iter().sum::<f64>() / seg.len() as f64;
            let got = f.get(&format!("{lead}__qr_interval_amplitude__mean")).unwrap();
            assert!((got - oracle).abs() < 1e-3, "{lead}: {got} vs {oracle}");
        }
    }

    #[test]
    fn catalog_closure_and_band_invariants() {
        let (ecg, _) = noisy(75.0, 8);
        let f = extract_clinical_features(&ecg);
        assert_eq!(f.names, clinical_feature_names());
        let unique: std::collections::BTreeSet<_> = f.names.iter().collect();
        assert_eq!(unique.len(), f.names.len());
        for lead in Lead::ALL {
            let bands: Vec<f64> = (0..N_AMP_BANDS)
                .map(|k| f.get(&format!("{lead}__amp_band__{k}")).unwrap())
                .collect();
            assert!(bands.iter().all(|b| (0.0..=1.0).contains(b)));
            assert!(bands.iter().sum::<f64>() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn flat_record_is_missing_not_zero() {
        let (mut ecg, _) = clean(60.0);
        for x in ecg.leads.values_mut() {
            x.iter_mut().for_each(|v| *v = 0.0);
        }
        let f = extract_clinical_features(&ecg);
        assert_eq!(f.get("beats__count"), Some(0.0));
        assert!(is_missing(f.get("rr__mean_ms").unwrap()));
        assert!(is_missing(f.get("V5__st_segment_voltage__mean").unwrap()));
        assert!(is_missing(f.get("I__amp_band__3").unwrap()));
    }

    #[test]
    fn deterministic_output() {
        let (ecg, _) = noisy(70.0, 3);
        let a = extract_clinical_features(&ecg);
        let b = extract_clinical_features(&ecg);
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn shift_by_one_period_keeps_rr() {
        let (ecg, _) = clean(60.0);
        let mut shifted = ecg.clone();
        for x in shifted.leads.values_mut() {
            x.rotate_right(500);
        }
        let a = extract_clinical_features(&ecg);
        let b = extract_clinical_features(&shifted);
        for name in ["rr__mean_ms", "rr__std_ms", "rr__min_ms", "rr__max_ms"] {
            let (x, y) = (a.get(name).unwrap(), b.get(name).unwrap());
            assert!((x - y).abs() < 2.0, "{name}: {x} vs {y}");
        }
    }

    #[test]
    fn shipped_manifest_matches_catalog() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/catalogs/clinical_ecg.json");
        if std::env::var_os("LVEF_BLESS").is_some() {
            std::fs::write(path, clinical_catalog().to_json()).unwrap();
        }
        assert_eq!(std::fs::read_to_string(path).unwrap(), clinical_catalog().to_json());
    }
}
