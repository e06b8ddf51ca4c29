use chrono::{TimeZone, Utc};
use lvef_core::ecg_features::detect_r_peaks;
use lvef_core::signal::{derive_limb_leads, preprocess_record, EcgMeta, Lead, PreprocessConfig};
use lvef_core::synth::{generate_record, SynthProfile};

fn meta(i: usize) -> EcgMeta {
    EcgMeta {
        record_id: format!("R{i}"),
        patient_id: format!("P{i}"),
        acquired_at: Utc.with_ymd_and_hms(2022, 5, 1, 8, 0, 0).unwrap(),
        sampling_rate: 500.0,
    }
}

/// Samples at each record edge where a QRS complex may be cut off.
const EDGE: usize = 30;
const LEN: usize = 5000;

/// Each true R peak away from the edges must have a detection within `tol`
/// samples and no detection may be unmatched.
fn assert_matched(truth: &[usize], found: &[usize], tol: usize, what: &str) {
    let inner = |v: &[usize]| -> Vec<usize> { v.iter().copied().filter(|&i| i >= EDGE && i < LEN - EDGE).collect() };
    let (truth, found) = (inner(truth), inner(found));
    assert_eq!(truth.len(), found.len(), "{what}: {truth:?} vs {found:?}");
    for (t, f) in truth.iter().zip(&found) {
        assert!(t.abs_diff(*f) <= tol, "{what}: true {t}, detected {f}");
    }
}

#[test]
fn noise_free_r_peaks_within_two_samples() {
    for (i, hr) in [45.0, 60.0, 75.0, 100.0, 130.0, 160.0].into_iter().enumerate() {
        for seed in 0..3 {
            let (record, truth) = generate_record(&SynthProfile::clean(hr), seed, meta(i)).unwrap();
            let twelve = derive_limb_leads(&record).unwrap();
            let peaks = detect_r_peaks(twelve.lead(Lead::II), 500.0);
            assert!(!peaks.undetectable);
            assert_matched(&truth.r_samples(), &peaks.indices, 2, &format!("raw, {hr} bpm"));
        }
    }
}

#[test]
fn zero_phase_preprocessing_keeps_r_peak_timing() {
    for (i, hr) in [55.0, 80.0, 120.0].into_iter().enumerate() {
        let (record, truth) = generate_record(&SynthProfile::clean(hr), 7, meta(i)).unwrap();
        let pre = preprocess_record(&record, &PreprocessConfig::default()).unwrap();
        let peaks = detect_r_peaks(pre.ecg.lead(Lead::II), 500.0);
        assert_matched(&truth.r_samples(), &peaks.indices, 2, &format!("filtered, {hr} bpm"));
    }
}

#[test]
fn noisy_records_still_find_every_beat() {
    let profile = SynthProfile::for_class(lvef_core::cohort::LvefClass::Normal);
    for seed in 0..10 {
        let (record, truth) = generate_record(&profile, seed, meta(0)).unwrap();
        let pre = preprocess_record(&record, &PreprocessConfig::default()).unwrap();
        let peaks = detect_r_peaks(pre.ecg.lead(Lead::II), 500.0);
        assert_matched(&truth.r_samples(), &peaks.indices, 6, &format!("seed {seed}"));
    }
}
