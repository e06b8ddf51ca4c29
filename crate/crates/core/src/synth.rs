//! Seeded synthetic ECG + EHR cohorts with exact ground truth.
//!
//! Beats are a sum of Gaussian bumps (P, Q, R, S, T) placed at RR intervals
//! drawn from the profile; white noise, baseline wander and a mains sine are
//! added on top. Class-conditional effects are synthetic assumptions chosen
//! so that both modalities carry partial, complementary signal:
//!
//! * reduced-EF classes get lower lateral-lead (I, V5, V6) R and T
//!   amplitudes, faster rates and wider QRS complexes;
//! * reduced-EF classes get higher diuretic, device and coronary-disease
//!   code priors, plus the heart-failure code that the leakage exclusion
//!   must remove.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{EchoResult, LvefClass};
use crate::ehr::{CodeEvent, Demographics, EhrSnapshot, Vital, VitalMeasurement};
use crate::signal::{EcgMeta, EcgRecord, Lead};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("prevalences must be non-negative and sum to 1, got {0:?}")]
    InvalidPrevalence([f64; 4]),
}

/// Measured-lead order used by per-lead arrays.
pub const MEASURED: [Lead; 8] = Lead::MEASURED;

/// One Gaussian bump of the beat template.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    /// Centre relative to the R peak, ms.
    pub offset_ms: f64,
    /// Standard deviation, ms.
    pub width_ms: f64,
    /// Amplitude per measured lead, mV.
    pub amplitude: [f64; 8],
}

/// Beat template in measured-lead order `I, II, V1..V6`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeatTemplate {
    pub p: Wave,
    pub q: Wave,
    pub r: Wave,
    pub s: Wave,
    pub t: Wave,
}

impl BeatTemplate {
    pub fn standard(qrs_width_ms: f64) -> Self {
        let narrow = qrs_width_ms / 12.0;
        Self {
            p: Wave {
                offset_ms: -170.0,
                width_ms: 22.0,
                amplitude: [0.08, 0.15, 0.05, 0.08, 0.08, 0.08, 0.08, 0.08],
            },
            q: Wave {
                offset_ms: -40.0,
                width_ms: narrow,
                amplitude: [-0.08, -0.1, 0.0, 0.0, -0.05, -0.08, -0.1, -0.1],
            },
            r: Wave {
                offset_ms: 0.0,
                width_ms: qrs_width_ms / 8.0,
                amplitude: [0.7, 1.0, 0.3, 0.6, 0.9, 1.2, 1.3, 1.1],
            },
            s: Wave {
                offset_ms: 40.0,
                width_ms: narrow,
                amplitude: [-0.1, -0.25, -0.9, -1.1, -0.7, -0.4, -0.25, -0.15],
            },
            t: Wave {
                offset_ms: 280.0,
                width_ms: 40.0,
                amplitude: [0.2, 0.3, 0.05, 0.3, 0.35, 0.35, 0.3, 0.25],
            },
        }
    }

    fn waves(&self) -> [&Wave; 5] {
        [&self.p, &self.q, &self.r, &self.s, &self.t]
    }
}

/// Record-to-record spread applied when a cohort instantiates a profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Variability {
    pub hr_sd_bpm: f64,
    pub amplitude_log_sd: f64,
    pub qrs_sd_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VitalPrior {
    pub mean: f64,
    pub sd: f64,
    pub observed_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EhrPriors {
    /// Per-code probability that the patient carries the code.
    pub diagnoses: BTreeMap<String, f64>,
    pub medications: BTreeMap<String, f64>,
    pub age_mean: f64,
    pub age_sd: f64,
    pub male_prob: f64,
    pub vitals: BTreeMap<Vital, VitalPrior>,
}

/// Generative parameters for one LVEF class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthProfile {
    pub label: LvefClass,
    pub hr_mean_bpm: f64,
    /// Beat-to-beat spread of the instantaneous rate.
    pub hr_sd_bpm: f64,
    /// Multiplies every wave of each measured lead.
    pub lead_scale: [f64; 8],
    /// Extra multiplier on the T wave of each measured lead.
    pub t_scale: [f64; 8],
    pub qrs_width_ms: f64,
    pub noise_sd_mv: f64,
    pub powerline_amp_mv: f64,
    pub powerline_freq_hz: f64,
    pub wander_amp_mv: f64,
    pub sampling_rate: f64,
    pub duration_s: f64,
    pub between: Variability,
    pub ehr: EhrPriors,
}

const BASE_DX: &[(&str, f64)] = &[
    ("I10", 0.45), ("E78", 0.38), ("Z79", 0.30), ("Z00", 0.25), ("E11", 0.20),
    ("R07", 0.15), ("Z87", 0.12), ("I25", 0.10), ("E66", 0.10), ("K21", 0.10),
    ("M54", 0.10), ("Z13", 0.09), ("F41", 0.08), ("R06", 0.08), ("I48", 0.07),
    ("F32", 0.07), ("G47", 0.07), ("N18", 0.06), ("J44", 0.06), ("E03", 0.06),
    ("Z86", 0.06), ("Z12", 0.06), ("D64", 0.05), ("J45", 0.05), ("M17", 0.05),
    ("R00", 0.05), ("E87", 0.04), ("N39", 0.04), ("R10", 0.04), ("R53", 0.04),
    ("M25", 0.04), ("E55", 0.04), ("N40", 0.04), ("I50", 0.03), ("Z95", 0.03),
    ("R51", 0.03), ("K57", 0.03), ("J30", 0.03), ("M79", 0.03), ("R42", 0.03),
    ("I34", 0.025), ("R60", 0.025), ("I73", 0.02), ("I35", 0.02), ("H52", 0.02),
    ("L57", 0.02), ("B35", 0.02), ("R19", 0.02), ("I49", 0.02), ("Z72", 0.02),
    ("E86", 0.015), ("N17", 0.015), ("D69", 0.015), ("I42", 0.03), ("I21", 0.01),
    ("I63", 0.01), ("Z68", 0.01), ("Z99", 0.01), ("I44", 0.01), ("I47", 0.01),
];

const BASE_MED: &[(&str, f64)] = &[
    ("ATORVASTATIN", 0.30), ("ASPIRIN", 0.30), ("LISINOPRIL", 0.20), ("AMLODIPINE", 0.20),
    ("METFORMIN", 0.15), ("METOPROLOL", 0.15), ("OMEPRAZOLE", 0.15), ("LEVOTHYROXINE", 0.10),
    ("GABAPENTIN", 0.08), ("HYDROCHLOROTHIAZIDE", 0.08), ("LOSARTAN", 0.08),
    ("SIMVASTATIN", 0.07), ("PANTOPRAZOLE", 0.07), ("SERTRALINE", 0.06), ("FUROSEMIDE", 0.06),
    ("INSULIN", 0.06), ("APIXABAN", 0.05), ("ROSUVASTATIN", 0.05), ("TAMSULOSIN", 0.05),
    ("MONTELUKAST", 0.04), ("ALBUTEROL", 0.04), ("PREDNISONE", 0.04), ("TRAZODONE", 0.04),
    ("CLOPIDOGREL", 0.04), ("POTASSIUM", 0.035), ("WARFARIN", 0.03), ("CARVEDILOL", 0.03),
    ("SPIRONOLACTONE", 0.03), ("ESCITALOPRAM", 0.03), ("FLUTICASONE", 0.03),
    ("CETIRIZINE", 0.03), ("VITAMIN", 0.03), ("TRAMADOL", 0.02), ("ALLOPURINOL", 0.02),
    ("DILTIAZEM", 0.02), ("BUPROPION", 0.02), ("DULOXETINE", 0.02), ("FAMOTIDINE", 0.02),
    ("GLIPIZIDE", 0.02), ("MELOXICAM", 0.02), ("CYCLOBENZAPRINE", 0.015),
    ("HYDRALAZINE", 0.015), ("ISOSORBIDE", 0.015), ("DIGOXIN", 0.02), ("SACUBITRIL", 0.02),
    ("AMIODARONE", 0.01), ("BUMETANIDE", 0.02), ("EMPAGLIFLOZIN", 0.01), ("ENTRESTO", 0.005),
    ("RIVAROXABAN", 0.02), ("OXYCODONE", 0.02), ("LORAZEPAM", 0.02), ("ZOLPIDEM", 0.015),
];

/// Relative risk in the severe class; scaled down for milder classes.
const DX_RISK: &[(&str, f64)] = &[
    ("I50", 12.0), ("Z95", 8.0), ("I42", 15.0), ("I25", 2.5), ("I48", 2.2), ("N18", 2.0),
    ("R06", 2.0), ("E87", 2.0), ("I49", 2.5), ("R60", 2.5),
];

const MED_RISK: &[(&str, f64)] = &[
    ("FUROSEMIDE", 5.0), ("CARVEDILOL", 7.0), ("SPIRONOLACTONE", 7.0), ("SACUBITRIL", 20.0),
    ("DIGOXIN", 6.0), ("BUMETANIDE", 6.0), ("METOPROLOL", 1.8), ("APIXABAN", 2.0),
    ("EMPAGLIFLOZIN", 4.0), ("POTASSIUM", 2.0),
];

fn class_strength(label: LvefClass) -> f64 {
    match label {
        LvefClass::Severe => 1.0,
        LvefClass::Moderate => 0.75,
        LvefClass::Mild => 0.45,
        LvefClass::Normal => 0.0,
    }
}

impl SynthProfile {
    /// Default class-conditional profile.
    pub fn for_class(label: LvefClass) -> Self {
        let s = class_strength(label);
        let lerp = |normal: f64, severe: f64| normal + s * (severe - normal);
        // I, II, V1..V6: lateral leads are I, V5, V6
        let lateral = [true, false, false, false, false, false, true, true];
        let mut lead_scale = [1.0; 8];
        let mut t_scale = [1.0; 8];
        for i in 0..8 {
            if lateral[i] {
                lead_scale[i] = lerp(1.0, 0.9);
                t_scale[i] = lerp(1.0, 0.75);
            }
        }
        let scale_codes = |base: &[(&str, f64)], risk: &[(&str, f64)]| {
            base.iter()
                .map(|&(code, p)| {
                    let rr = risk.iter().find(|r| r.0 == code).map_or(1.0, |r| r.1);
                    let m = 1.0 + s * (rr - 1.0);
                    (code.to_string(), (p * m).min(0.95))
                })
                .collect::<BTreeMap<_, _>>()
        };
        let vitals = [
            (Vital::Bmi, lerp(29.0, 28.0), 6.0),
            (Vital::SystolicBp, lerp(131.0, 112.0), 17.0),
            (Vital::DiastolicBp, lerp(78.0, 72.0), 10.0),
            (Vital::TemperatureF, 97.8, 0.5),
            (Vital::Pulse, lerp(72.0, 88.0), 12.0),
        ]
        .into_iter()
        .map(|(v, mean, sd)| {
            (
                v,
                VitalPrior {
                    mean,
                    sd,
                    observed_prob: 0.7,
                },
            )
        })
        .collect();
        Self {
            label,
            hr_mean_bpm: lerp(70.0, 74.0),
            hr_sd_bpm: 2.0,
            lead_scale,
            t_scale,
            qrs_width_ms: lerp(90.0, 96.0),
            noise_sd_mv: 0.02,
            powerline_amp_mv: 0.05,
            powerline_freq_hz: 60.0,
            wander_amp_mv: 0.1,
            sampling_rate: 500.0,
            duration_s: 10.0,
            between: Variability {
                hr_sd_bpm: 11.0,
                amplitude_log_sd: 0.25,
                qrs_sd_ms: 10.0,
            },
            ehr: EhrPriors {
                diagnoses: scale_codes(BASE_DX, DX_RISK),
                medications: scale_codes(BASE_MED, MED_RISK),
                age_mean: lerp(62.0, 68.0),
                age_sd: 15.0,
                male_prob: lerp(0.45, 0.65),
                vitals,
            },
        }
    }

    /// A clean, noise-free profile at a fixed rate.
    pub fn clean(hr_bpm: f64) -> Self {
        Self {
            hr_mean_bpm: hr_bpm,
            hr_sd_bpm: 0.0,
            noise_sd_mv: 0.0,
            powerline_amp_mv: 0.0,
            wander_amp_mv: 0.0,
            ..Self::for_class(LvefClass::Normal)
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let positive = [
            ("hr_mean_bpm", self.hr_mean_bpm),
            ("qrs_width_ms", self.qrs_width_ms),
            ("sampling_rate", self.sampling_rate),
            ("duration_s", self.duration_s),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SynthError::InvalidProfile(format!("{name} must be positive")));
            }
        }
        let non_negative = [
            ("hr_sd_bpm", self.hr_sd_bpm),
            ("noise_sd_mv", self.noise_sd_mv),
            ("powerline_amp_mv", self.powerline_amp_mv),
            ("wander_amp_mv", self.wander_amp_mv),
            ("between.hr_sd_bpm", self.between.hr_sd_bpm),
            ("between.amplitude_log_sd", self.between.amplitude_log_sd),
            ("between.qrs_sd_ms", self.between.qrs_sd_ms),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SynthError::InvalidProfile(format!("{name} must be >= 0")));
            }
        }
        if self.lead_scale.iter().chain(&self.t_scale).any(|v| !(*v >= 0.0)) {
            return Err(SynthError::InvalidProfile("lead scales must be >= 0".into()));
        }
        let probs = self
            .ehr
            .diagnoses
            .values()
            .chain(self.ehr.medications.values())
            .chain(std::iter::once(&self.ehr.male_prob))
            .chain(self.ehr.vitals.values().map(|v| &v.observed_prob));
        for &p in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(SynthError::InvalidProfile(format!("probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Ground-truth sample indices for one beat whose R peak lies inside the
/// record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeatTruth {
    pub p: usize,
    pub q: usize,
    pub r: usize,
    pub s: usize,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// R-peak times in seconds (unrounded).
    pub r_times_s: Vec<f64>,
    pub beats: Vec<BeatTruth>,
}

impl GroundTruth {
    pub fn r_samples(&self) -> Vec<usize> {
        self.beats.iter().map(|b| b.r).collect()
    }

    pub fn rr_ms(&self) -> Vec<f64> {
        self.r_times_s.windows(2).map(|w| (w[1] - w[0]) * 1000.0).collect()
    }
}

/// Renders one 8-lead record.
pub fn generate_record(
    profile: &SynthProfile,
    seed: u64,
    meta: EcgMeta,
) -> Result<(EcgRecord, GroundTruth), SynthError> {
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = profile.sampling_rate;
    let n = (profile.duration_s * fs).round() as usize;
    let template = BeatTemplate::standard(profile.qrs_width_ms);

    // Beat times: start half a beat or so before the record so that the
    // first visible P/T waves are complete, stop past the end.
    let mean_rr = 60.0 / profile.hr_mean_bpm;
    let rate = Normal::new(profile.hr_mean_bpm, profile.hr_sd_bpm).expect("sd >= 0");
    let mut t = rng.gen_range(0.15..0.15 + mean_rr) - mean_rr;
    let mut beats = Vec::new();
    while t < profile.duration_s + 0.5 {
        beats.push(t);
        let hr = rate.sample(&mut rng).clamp(25.0, 250.0);
        t += 60.0 / hr;
    }

    let mut leads: Vec<Vec<f64>> = vec![vec![0.0; n]; 8];
    for &beat in &beats {
        for (w_idx, wave) in template.waves().into_iter().enumerate() {
            let centre = beat + wave.offset_ms / 1000.0;
            let sigma = wave.width_ms / 1000.0;
            let lo = (((centre - 5.0 * sigma) * fs).floor().max(0.0)) as usize;
            let hi = (((centre + 5.0 * sigma) * fs).ceil().max(0.0) as usize).min(n);
            if lo >= hi {
                continue;
            }
            let bump: Vec<f64> = (lo..hi)
                .map(|i| {
                    let dt = i as f64 / fs - centre;
                    (-0.5 * (dt / sigma).powi(2)).exp()
                })
                .collect();
            for (li, lead) in leads.iter_mut().enumerate() {
                let mut amp = wave.amplitude[li] * profile.lead_scale[li];
                if w_idx == 4 {
                    amp *= profile.t_scale[li];
                }
                if amp == 0.0 {
                    continue;
                }
                for (v, b) in lead[lo..hi].iter_mut().zip(&bump) {
                    *v += amp * b;
                }
            }
        }
    }

    if profile.noise_sd_mv > 0.0 || profile.powerline_amp_mv > 0.0 || profile.wander_amp_mv > 0.0 {
        let noise = Normal::new(0.0, profile.noise_sd_mv).expect("sd >= 0");
        for lead in leads.iter_mut() {
            let mains_phase = rng.gen_range(0.0..2.0 * PI);
            let wander_phase = rng.gen_range(0.0..2.0 * PI);
            let wander_freq = rng.gen_range(0.15..0.35);
            for (k, v) in lead.iter_mut().enumerate() {
                let time = k as f64 / fs;
                *v += profile.powerline_amp_mv
                    * (2.0 * PI * profile.powerline_freq_hz * time + mains_phase).sin()
                    + profile.wander_amp_mv * (2.0 * PI * wander_freq * time + wander_phase).sin();
                if profile.noise_sd_mv > 0.0 {
                    *v += noise.sample(&mut rng);
                }
            }
        }
    }

    let to_idx = |sec: f64| (sec * fs).round() as i64;
    let mut truth = GroundTruth {
        r_times_s: Vec::new(),
        beats: Vec::new(),
    };
    for &beat in &beats {
        let r = to_idx(beat);
        if r < 0 || r >= n as i64 {
            continue;
        }
        let at = |w: &Wave| to_idx(beat + w.offset_ms / 1000.0).clamp(0, n as i64 - 1) as usize;
        truth.r_times_s.push(beat);
        truth.beats.push(BeatTruth {
            p: at(&template.p),
            q: at(&template.q),
            r: r as usize,
            s: at(&template.s),
            t: at(&template.t),
        });
    }

    let record = EcgRecord {
        meta: EcgMeta {
            sampling_rate: fs,
            ..meta
        },
        leads: MEASURED.into_iter().zip(leads).collect(),
    };
    Ok((record, truth))
}

/// Class prevalences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prevalence {
    pub normal: f64,
    pub mild: f64,
    pub moderate: f64,
    pub severe: f64,
}

impl Prevalence {
    /// Development-cohort prevalences of the reference study.
    pub const REFERENCE: Prevalence = Prevalence {
        normal: 0.8835,
        mild: 0.0593,
        moderate: 0.0347,
        severe: 0.0226,
    };

    /// Published prevalences are rounded percentages, so sums within 1e-3 of
    /// one are accepted and renormalized.
    pub const SUM_TOLERANCE: f64 = 1e-3;

    fn by_class(self) -> [(LvefClass, f64); 4] {
        [
            (LvefClass::Normal, self.normal),
            (LvefClass::Mild, self.mild),
            (LvefClass::Moderate, self.moderate),
            (LvefClass::Severe, self.severe),
        ]
    }

    /// Largest-remainder apportionment of `n` examples; the returned counts
    /// sum to `n`. Equal remainders favour the rarer class.
    pub fn counts(self, n: usize) -> Result<BTreeMap<LvefClass, usize>, SynthError> {
        let raw = [self.normal, self.mild, self.moderate, self.severe];
        let sum: f64 = raw.iter().sum();
        if raw.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(SynthError::InvalidPrevalence(raw));
        }
        let quotas: Vec<(LvefClass, f64)> = self
            .by_class()
            .into_iter()
            .map(|(c, p)| (c, p / sum * n as f64))
            .collect();
        let mut counts: BTreeMap<LvefClass, usize> =
            quotas.iter().map(|&(c, q)| (c, q.floor() as usize)).collect();
        let assigned: usize = counts.values().sum();
        let mut order: Vec<(LvefClass, f64)> =
            quotas.iter().map(|&(c, q)| (c, q - q.floor())).collect();
        order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for (c, _) in order.into_iter().take(n - assigned) {
            *counts.get_mut(&c).expect("class present") += 1;
        }
        Ok(counts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortOptions {
    #[serde(with = "crate::timefmt")]
    pub start: DateTime<Utc>,
    #[serde(with = "crate::timefmt")]
    pub end: DateTime<Utc>,
    /// Fraction of echos that belong to a patient with a second echo.
    pub repeat_patient_fraction: f64,
    /// Fraction of echos with an extra same-patient ECG that should lose
    /// the pairing (farther away, or outside the window).
    pub distractor_fraction: f64,
    pub poor_quality_fraction: f64,
    pub artifact_fraction: f64,
    pub window_days: i64,
}

impl Default for CohortOptions {
    fn default() -> Self {
        Self {
            start: Utc.with_ymd_and_hms(2020, 3, 1, 0, 0, 0).unwrap(),
            end: Utc.with_ymd_and_hms(2024, 6, 30, 0, 0, 0).unwrap(),
            repeat_patient_fraction: 0.15,
            distractor_fraction: 0.1,
            poor_quality_fraction: 0.01,
            artifact_fraction: 0.005,
            window_days: 14,
        }
    }
}

/// Everything needed to render one ECG on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordPlan {
    pub meta: EcgMeta,
    pub profile: SynthProfile,
    pub seed: u64,
}

impl RecordPlan {
    pub fn render(&self) -> (EcgRecord, GroundTruth) {
        generate_record(&self.profile, self.seed, self.meta.clone())
            .expect("planned profiles are validated")
    }
}

/// A generated cohort. ECG waveforms are rendered lazily from their plans.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCohort {
    pub records: Vec<RecordPlan>,
    pub snapshots: Vec<EhrSnapshot>,
    pub echos: Vec<EchoResult>,
}

impl SynthCohort {
    pub fn ecg_metas(&self) -> Vec<EcgMeta> {
        self.records.iter().map(|r| r.meta.clone()).collect()
    }
}

fn individualize(profile: &SynthProfile, rng: &mut ChaCha8Rng) -> SynthProfile {
    let mut p = profile.clone();
    let v = profile.between;
    let normal = |rng: &mut ChaCha8Rng, sd: f64| -> f64 {
        if sd > 0.0 {
            Normal::new(0.0, sd).expect("sd > 0").sample(rng)
        } else {
            0.0
        }
    };
    p.hr_mean_bpm = (profile.hr_mean_bpm + normal(rng, v.hr_sd_bpm)).clamp(40.0, 150.0);
    p.qrs_width_ms = (profile.qrs_width_ms + normal(rng, v.qrs_sd_ms)).clamp(60.0, 180.0);
    let global = normal(rng, v.amplitude_log_sd).exp();
    for s in p.lead_scale.iter_mut() {
        *s *= global * normal(rng, v.amplitude_log_sd / 2.0).exp();
    }
    for s in p.t_scale.iter_mut() {
        *s *= normal(rng, v.amplitude_log_sd).exp();
    }
    p
}

fn draw_code_events(
    priors: &BTreeMap<String, f64>,
    index: DateTime<Utc>,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<CodeEvent>,
    dx: bool,
) {
    for (code, &p) in priors {
        if rng.gen_bool(p) {
            let k = rng.gen_range(1..=3);
            for _ in 0..k {
                let back = rng.gen_range(3600..365 * 86_400);
                let code = if dx && rng.gen_bool(0.5) {
                    format!("{code}.{}", rng.gen_range(0..10))
                } else {
                    code.clone()
                };
                out.push(CodeEvent {
                    code,
                    date: index - Duration::seconds(back),
                });
            }
        }
    }
}

/// Generates a cohort of `n` echos with class counts apportioned from
/// `prevalence`. Each eligible echo has a same-patient ECG within the
/// pairing window.
pub fn generate_cohort(
    n: usize,
    prevalence: Prevalence,
    profiles: &BTreeMap<LvefClass, SynthProfile>,
    options: &CohortOptions,
    seed: u64,
) -> Result<SynthCohort, SynthError> {
    let counts = prevalence.counts(n)?;
    for class in LvefClass::ALL {
        let p = profiles
            .get(&class)
            .ok_or_else(|| SynthError::InvalidProfile(format!("no profile for {class}")))?;
        p.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<LvefClass> = counts
        .iter()
        .flat_map(|(&c, &k)| std::iter::repeat(c).take(k))
        .collect();
    labels.shuffle(&mut rng);

    // group echos into patients: a fraction of same-class echos share one
    let mut by_class: BTreeMap<LvefClass, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let mut patients: Vec<Vec<usize>> = Vec::new();
    for (_, idx) in by_class {
        let mut i = 0;
        while i < idx.len() {
            if i + 1 < idx.len() && rng.gen_bool(options.repeat_patient_fraction / 2.0) {
                patients.push(vec![idx[i], idx[i + 1]]);
                i += 2;
            } else {
                patients.push(vec![idx[i]]);
                i += 1;
            }
        }
    }
    patients.sort_by_key(|p| p[0]);

    let span = (options.end - options.start).num_seconds().max(1);
    let window = options.window_days * 86_400;
    let mut records = Vec::new();
    let mut snapshots = Vec::new();
    let mut echos: Vec<Option<EchoResult>> = vec![None; n];
    for (p_idx, members) in patients.iter().enumerate() {
        let patient_id = format!("P{p_idx:06}");
        let class = labels[members[0]];
        let profile = individualize(&profiles[&class], &mut rng);
        let priors = &profile.ehr;
        let age = Normal::new(priors.age_mean, priors.age_sd)
            .expect("sd >= 0")
            .sample(&mut rng)
            .clamp(18.0, 95.0);
        let sex = if rng.gen_bool(priors.male_prob) { "Male" } else { "Female" };
        let race = ["White", "White", "White", "Black", "Hispanic", "Asian", "Other"]
            .choose(&mut rng)
            .expect("non-empty");
        let smoking = ["Never", "Never", "Former", "Current", "Unknown"]
            .choose(&mut rng)
            .expect("non-empty");
        let mut snapshot = EhrSnapshot {
            patient_id: patient_id.clone(),
            demographics: Demographics {
                age_years: (age * 10.0).round() / 10.0,
                sex: sex.to_string(),
                race: race.to_string(),
                smoking_status: smoking.to_string(),
            },
            vitals: Vec::new(),
            diagnoses: Vec::new(),
            medications: Vec::new(),
        };

        let mut when = options.start + Duration::seconds(rng.gen_range(0..span));
        for (k, &echo_idx) in members.iter().enumerate() {
            if k > 0 {
                when += Duration::days(rng.gen_range(90..400));
            }
            let (lo, hi) = labels[echo_idx].band();
            let lvef = (rng.gen_range(lo..hi.min(80.0)) * 10.0).floor() / 10.0;
            let mut flags = BTreeSet::new();
            let u: f64 = rng.gen();
            if u < options.poor_quality_fraction {
                flags.insert("poor quality".to_string());
            } else if u < options.poor_quality_fraction + options.artifact_fraction {
                flags.insert("artifact".to_string());
            }
            let echo_id = format!("E{echo_idx:06}");
            echos[echo_idx] = Some(EchoResult {
                echo_id,
                patient_id: patient_id.clone(),
                performed_at: when,
                lvef,
                quality_flags: flags,
            });

            let gap = rng.gen_range(-window..=window);
            let mut ecg_times = vec![when + Duration::seconds(gap)];
            if rng.gen_bool(options.distractor_fraction) {
                let far = if rng.gen_bool(0.5) {
                    // inside the window but farther than the primary
                    let extra = rng.gen_range(gap.abs()..=window).max(gap.abs() + 1);
                    if extra > window { window + 86_400 } else { extra }
                } else {
                    rng.gen_range(window + 86_400..=4 * window)
                };
                let sign = if rng.gen_bool(0.5) { 1 } else { -1 };
                ecg_times.push(when + Duration::seconds(sign * far));
            }
            for at in ecg_times {
                let record_id = format!("R{:06}", records.len());
                records.push(RecordPlan {
                    meta: EcgMeta {
                        record_id,
                        patient_id: patient_id.clone(),
                        acquired_at: at,
                        sampling_rate: profile.sampling_rate,
                    },
                    profile: profile.clone(),
                    seed: rng.gen(),
                });
            }

            draw_code_events(&priors.diagnoses, when, &mut rng, &mut snapshot.diagnoses, true);
            draw_code_events(&priors.medications, when, &mut rng, &mut snapshot.medications, false);
            for (&vital, prior) in &priors.vitals {
                if rng.gen_bool(prior.observed_prob) {
                    let value = Normal::new(prior.mean, prior.sd).expect("sd >= 0").sample(&mut rng);
                    snapshot.vitals.push(VitalMeasurement {
                        vital,
                        value: (value * 10.0).round() / 10.0,
                        measured_at: when - Duration::seconds(rng.gen_range(3600..150 * 86_400)),
                    });
                }
            }
        }
        snapshot.diagnoses.sort_by(|a, b| a.date.cmp(&b.date).then(a.code.cmp(&b.code)));
        snapshot.medications.sort_by(|a, b| a.date.cmp(&b.date).then(a.code.cmp(&b.code)));
        snapshot.vitals.sort_by_key(|v| (v.measured_at, v.vital));
        snapshots.push(snapshot);
    }
    Ok(SynthCohort {
        records,
        snapshots,
        echos: echos.into_iter().map(|e| e.expect("every echo generated")).collect(),
    })
}

/// The default per-class profiles.
pub fn default_profiles() -> BTreeMap<LvefClass, SynthProfile> {
    LvefClass::ALL
        .into_iter()
        .map(|c| (c, SynthProfile::for_class(c)))
        .collect()
}
