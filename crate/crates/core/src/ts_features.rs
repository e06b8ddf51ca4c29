//! Generic time-series descriptors computed per lead.
//!
//! Conventions: variances are population (ddof = 0); skewness and kurtosis
//! are the moment ratios (kurtosis as excess); the spectrum of a length-n
//! signal is its unnormalized DFT; power quantities use the one-sided
//! spectrum folded so that band energies add up to the sum of squares.
//! Descriptors that are undefined for the input (autocorrelation or
//! moment ratios of a constant signal, say) are the missing marker.

use std::collections::BTreeMap;
use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{CatalogManifest, FeatureSpec, FeatureVector, MISSING};
use crate::signal::{Lead, TwelveLeadEcg};

pub const CATALOG_NAME: &str = "ts_descriptors";
pub const CATALOG_VERSION: &str = "1.0.0";
pub const MIN_SPECTRAL_LEN: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TsError {
    #[error("signal has zero power")]
    ZeroPower,
    #[error("signal too short: {len} samples, need {min}")]
    TooShort { len: usize, min: usize },
}

/// One parameterized descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Descriptor {
    Mean,
    Variance,
    StdDev,
    Skewness,
    Kurtosis,
    Median,
    Minimum,
    Maximum,
    Range,
    MeanAbs,
    Rms,
    Quantile { q: f64 },
    InterquartileRange,
    Autocorrelation { lag: usize },
    VarFirstDiff,
    MeanAbsChange,
    MeanSecondDerivative,
    /// Largest over smallest variance across equal windows.
    WindowedVarianceRatio { windows: usize },
    /// Standard deviation of the window means.
    WindowedMeanStd { windows: usize },
    BinnedEntropy { bins: usize },
    SpectralEntropy,
    TrendSlope,
    TrendIntercept,
    TrendR2,
    FftMagnitude { k: usize },
    SpectralCentroid,
    DominantFrequency,
    /// Energy in `[lo_hz, hi_hz)`; the band ending at Nyquist is closed.
    BandEnergy { lo_hz: f64, hi_hz: f64 },
    CountAboveMean,
    CountBelowMean,
    LongestStrikeAboveMean,
    LongestStrikeBelowMean,
    ZeroCrossings,
    PeakCount { support: usize },
    SumOfSquares,
    AbsSumOfChanges,
    C3 { lag: usize },
    CidCe,
    RatioBeyondSigma { r: f64 },
}

impl Descriptor {
    pub fn name(&self) -> String {
        use Descriptor::*;
        match *self {
            Mean => "mean".into(),
            Variance => "variance".into(),
            StdDev => "std".into(),
            Skewness => "skewness".into(),
            Kurtosis => "kurtosis".into(),
            Median => "median".into(),
            Minimum => "minimum".into(),
            Maximum => "maximum".into(),
            Range => "range".into(),
            MeanAbs => "mean_abs".into(),
            Rms => "rms".into(),
            Quantile { q } => format!("quantile_q{}", (q * 100.0).round()),
            InterquartileRange => "iqr".into(),
            Autocorrelation { lag } => format!("autocorr_lag_{lag}"),
            VarFirstDiff => "var_first_diff".into(),
            MeanAbsChange => "mean_abs_change".into(),
            MeanSecondDerivative => "mean_second_derivative".into(),
            WindowedVarianceRatio { windows } => format!("windowed_var_ratio_w{windows}"),
            WindowedMeanStd { windows } => format!("windowed_mean_std_w{windows}"),
            BinnedEntropy { bins } => format!("binned_entropy_{bins}"),
            SpectralEntropy => "spectral_entropy".into(),
            TrendSlope => "trend_slope".into(),
            TrendIntercept => "trend_intercept".into(),
            TrendR2 => "trend_r2".into(),
            FftMagnitude { k } => format!("fft_abs_{k}"),
            SpectralCentroid => "spectral_centroid_hz".into(),
            DominantFrequency => "dominant_freq_hz".into(),
            BandEnergy { lo_hz, hi_hz } => format!("band_energy_{lo_hz}_{hi_hz}hz"),
            CountAboveMean => "count_above_mean".into(),
            CountBelowMean => "count_below_mean".into(),
            LongestStrikeAboveMean => "longest_strike_above_mean".into(),
            LongestStrikeBelowMean => "longest_strike_below_mean".into(),
            ZeroCrossings => "zero_crossings".into(),
            PeakCount { support } => format!("peak_count_s{support}"),
            SumOfSquares => "sum_of_squares".into(),
            AbsSumOfChanges => "abs_sum_of_changes".into(),
            C3 { lag } => format!("c3_lag_{lag}"),
            CidCe => "cid_ce".into(),
            RatioBeyondSigma { r } => format!("ratio_beyond_{r}_sigma"),
        }
    }

    fn unit_and_definition(&self) -> (&'static str, String) {
        use Descriptor::*;
        let d = |s: &str| s.to_string();
        match *self {
            Mean => ("signal", d("arithmetic mean")),
            Variance => ("signal^2", d("population variance")),
            StdDev => ("signal", d("population standard deviation")),
            Skewness => ("1", d("third standardized moment")),
            Kurtosis => ("1", d("fourth standardized moment minus 3")),
            Median => ("signal", d("median")),
            Minimum => ("signal", d("minimum")),
            Maximum => ("signal", d("maximum")),
            Range => ("signal", d("maximum minus minimum")),
            MeanAbs => ("signal", d("mean absolute value")),
            Rms => ("signal", d("root mean square")),
            Quantile { q } => ("signal", format!("{q} quantile, linear interpolation")),
            InterquartileRange => ("signal", d("0.75 minus 0.25 quantile")),
            Autocorrelation { lag } => ("1", format!("autocorrelation at lag {lag}")),
            VarFirstDiff => ("signal^2", d("variance of first differences")),
            MeanAbsChange => ("signal", d("mean absolute first difference")),
            MeanSecondDerivative => ("signal", d("mean central second difference / 2")),
            WindowedVarianceRatio { windows } => {
                ("1", format!("max/min variance across {windows} equal windows"))
            }
            WindowedMeanStd { windows } => {
                ("signal", format!("std of window means across {windows} equal windows"))
            }
            BinnedEntropy { bins } => ("nats", format!("entropy of a {bins}-bin histogram over [min, max]")),
            SpectralEntropy => ("1", d("normalized Shannon entropy of the Hann periodogram")),
            TrendSlope => ("signal/sample", d("least-squares slope against sample index")),
            TrendIntercept => ("signal", d("least-squares intercept at sample 0")),
            TrendR2 => ("1", d("coefficient of determination of the linear trend")),
            FftMagnitude { k } => ("signal", format!("magnitude of DFT coefficient {k}")),
            SpectralCentroid => ("Hz", d("power-weighted mean frequency of the Hann periodogram")),
            DominantFrequency => ("Hz", d("frequency of the largest non-DC periodogram bin")),
            BandEnergy { lo_hz, hi_hz } => {
                ("signal^2", format!("signal energy in [{lo_hz}, {hi_hz}) Hz"))
            }
            CountAboveMean => ("count", d("samples above the mean")),
            CountBelowMean => ("count", d("samples below the mean")),
            LongestStrikeAboveMean => ("count", d("longest run above the mean")),
            LongestStrikeBelowMean => ("count", d("longest run below the mean")),
            ZeroCrossings => ("count", d("sign changes between consecutive samples")),
            PeakCount { support } => ("count", format!("samples larger than {support} neighbours on each side")),
            SumOfSquares => ("signal^2", d("sum of squared samples")),
            AbsSumOfChanges => ("signal", d("sum of absolute first differences")),
            C3 { lag } => ("signal^3", format!("mean of x[t+2l]*x[t+l]*x[t], l = {lag}")),
            CidCe => ("signal", d("root of summed squared first differences")),
            RatioBeyondSigma { r } => ("fraction", format!("fraction of samples farther than {r} std from the mean")),
        }
    }
}

/// An ordered, versioned descriptor list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsDescriptorCatalog {
    pub version: String,
    pub descriptors: Vec<Descriptor>,
}

const BAND_EDGES_HZ: [f64; 9] = [0.0, 1.0, 5.0, 10.0, 15.0, 25.0, 40.0, 100.0, 250.0];

impl TsDescriptorCatalog {
    /// The 64-descriptor default catalog for 500 Hz records.
    pub fn standard() -> Self {
        use Descriptor::*;
        let mut d = vec![
            Mean,
            Variance,
            StdDev,
            Skewness,
            Kurtosis,
            Median,
            Minimum,
            Maximum,
            Range,
            MeanAbs,
            Rms,
            Quantile { q: 0.05 },
            Quantile { q: 0.1 },
            Quantile { q: 0.9 },
            Quantile { q: 0.95 },
            InterquartileRange,
        ];
        d.extend([1, 2, 3, 5, 10].map(|lag| Autocorrelation { lag }));
        d.extend([
            VarFirstDiff,
            MeanAbsChange,
            MeanSecondDerivative,
            WindowedVarianceRatio { windows: 10 },
            WindowedMeanStd { windows: 10 },
            BinnedEntropy { bins: 10 },
            SpectralEntropy,
            TrendSlope,
            TrendIntercept,
            TrendR2,
        ]);
        d.extend((0..10).map(|k| FftMagnitude { k }));
        d.extend([SpectralCentroid, DominantFrequency]);
        d.extend(BAND_EDGES_HZ.windows(2).map(|w| BandEnergy {
            lo_hz: w[0],
            hi_hz: w[1],
        }));
        d.extend([
            CountAboveMean,
            CountBelowMean,
            LongestStrikeAboveMean,
            LongestStrikeBelowMean,
            ZeroCrossings,
            PeakCount { support: 5 },
            SumOfSquares,
            AbsSumOfChanges,
            C3 { lag: 1 },
            C3 { lag: 2 },
            CidCe,
            RatioBeyondSigma { r: 1.0 },
            RatioBeyondSigma { r: 2.0 },
        ]);
        Self {
            version: CATALOG_VERSION.to_string(),
            descriptors: d,
        }
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    /// Output names for every lead in standard order.
    pub fn feature_names(&self) -> Vec<String> {
        let own: Vec<String> = self.descriptors.iter().map(Descriptor::name).collect();
        Lead::ALL
            .iter()
            .flat_map(|l| own.iter().map(move |n| format!("{l}__ts__{n}")))
            .collect()
    }

    pub fn manifest(&self) -> CatalogManifest {
        let mut features = Vec::new();
        for lead in Lead::ALL {
            for d in &self.descriptors {
                let (unit, def) = d.unit_and_definition();
                features.push(FeatureSpec {
                    name: format!("{lead}__ts__{}", d.name()),
                    unit: unit.to_string(),
                    definition: format!("{def}, lead {lead}"),
                });
            }
        }
        CatalogManifest {
            catalog: CATALOG_NAME.to_string(),
            version: self.version.clone(),
            features,
        }
    }
}

/// Hann-window periodogram, one-sided, bins `0..=n/2`.
pub fn hann_periodogram(x: &[f64]) -> Vec<f64> {
    let fft = FftPlanner::new().plan_fft_forward(x.len());
    periodogram_with(&fft, &hann(x.len()), x)
}

fn hann(n: usize) -> Vec<f64> {
    let denom = (n.max(2) - 1) as f64;
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / denom).cos())
        .collect()
}

fn periodogram_with(fft: &Arc<dyn Fft<f64>>, window: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut buf: Vec<Complex<f64>> = x.iter().zip(window).map(|(&v, &w)| Complex::new(v * w, 0.0)).collect();
    fft.process(&mut buf);
    buf[..n / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
}

/// Shannon entropy of a power spectrum normalized to sum 1, divided by the
/// log of the number of bins.
pub fn normalized_entropy(psd: &[f64]) -> Result<f64, TsError> {
    let total: f64 = psd.iter().sum();
    if !(total > 0.0) {
        return Err(TsError::ZeroPower);
    }
    if psd.len() < 2 {
        return Ok(0.0);
    }
    let h: f64 = psd
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| {
            let q = p / total;
            -q * q.ln()
        })
        .sum();
    Ok((h / (psd.len() as f64).ln()).clamp(0.0, 1.0))
}

/// Normalized spectral entropy in `[0, 1]`: 0 for a single tone, 1 for a
/// flat spectrum. The sampling rate does not change the value.
pub fn spectral_entropy(x: &[f64], _fs: f64) -> Result<f64, TsError> {
    if x.len() < MIN_SPECTRAL_LEN {
        return Err(TsError::TooShort {
            len: x.len(),
            min: MIN_SPECTRAL_LEN,
        });
    }
    if x.iter().all(|&v| v == 0.0) {
        return Err(TsError::ZeroPower);
    }
    normalized_entropy(&hann_periodogram(x))
}

/// Autocorrelation estimate at `lag`; `None` for a constant signal or a
/// lag that leaves no overlap.
pub fn autocorrelation(x: &[f64], lag: usize) -> Option<f64> {
    let n = x.len();
    if lag >= n {
        return None;
    }
    let (m, var) = mean_var(x);
    if !(var > 0.0) {
        return None;
    }
    let s: f64 = (0..n - lag).map(|t| (x[t] - m) * (x[t + lag] - m)).sum();
    Some(s / ((n - lag) as f64 * var))
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    (m, v)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn longest_run(x: &[f64], pred: impl Fn(f64) -> bool) -> usize {
    let (mut best, mut cur) = (0, 0);
    for &v in x {
        if pred(v) {
            cur += 1;
            best = best.max(cur);
        } else {
            cur = 0;
        }
    }
    best
}

/// Per-lead quantities shared by several descriptors.
struct LeadStats<'a> {
    x: &'a [f64],
    fs: f64,
    mean: f64,
    var: f64,
    sorted: Vec<f64>,
    spectrum: Vec<Complex<f64>>,
    periodogram: Vec<f64>,
}

impl<'a> LeadStats<'a> {
    fn new(x: &'a [f64], fs: f64, fft: &Arc<dyn Fft<f64>>, window: &[f64]) -> Self {
        let (mean, var) = mean_var(x);
        let mut sorted = x.to_vec();
        sorted.sort_unstable_by(f64::total_cmp);
        let mut spectrum: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft.process(&mut spectrum);
        Self {
            x,
            fs,
            mean,
            var,
            sorted,
            spectrum,
            periodogram: periodogram_with(fft, window, x),
        }
    }

    fn n(&self) -> f64 {
        self.x.len() as f64
    }

    fn std_ratio(&self, p: i32) -> f64 {
        if !(self.var > 0.0) {
            return MISSING;
        }
        let m = self.x.iter().map(|v| (v - self.mean).powi(p)).sum::<f64>() / self.n();
        m / self.var.powf(p as f64 / 2.0)
    }

    /// Energy per one-sided bin; sums to the sum of squares.
    fn folded_energy(&self, k: usize) -> f64 {
        let n = self.x.len();
        let p = self.spectrum[k].norm_sqr() / n as f64;
        if k == 0 || 2 * k == n {
            p
        } else {
            2.0 * p
        }
    }

    fn trend(&self) -> (f64, f64, f64) {
        let n = self.n();
        let t_mean = (n - 1.0) / 2.0;
        let stt = n * (n * n - 1.0) / 12.0;
        let sty: f64 = self
            .x
            .iter()
            .enumerate()
            .map(|(t, &y)| (t as f64 - t_mean) * (y - self.mean))
            .sum();
        let slope = if stt > 0.0 { sty / stt } else { 0.0 };
        let intercept = self.mean - slope * t_mean;
        let syy = self.var * n;
        let r2 = if syy > 0.0 && stt > 0.0 {
            (sty * sty / (stt * syy)).min(1.0)
        } else {
            MISSING
        };
        (slope, intercept, r2)
    }

    fn windows(&self, w: usize) -> Vec<&[f64]> {
        let size = self.x.len() / w;
        if size == 0 {
            return Vec::new();
        }
        (0..w).map(|i| &self.x[i * size..(i + 1) * size]).collect()
    }

    fn eval(&self, d: &Descriptor) -> f64 {
        use Descriptor::*;
        let x = self.x;
        let n = x.len();
        if n == 0 {
            return MISSING;
        }
        let diffs = || x.windows(2).map(|w| w[1] - w[0]);
        match *d {
            Mean => self.mean,
            Variance => self.var,
            StdDev => self.var.sqrt(),
            Skewness => self.std_ratio(3),
            Kurtosis => self.std_ratio(4) - 3.0,
            Median => quantile(&self.sorted, 0.5),
            Minimum => self.sorted[0],
            Maximum => self.sorted[n - 1],
            Range => self.sorted[n - 1] - self.sorted[0],
            MeanAbs => x.iter().map(|v| v.abs()).sum::<f64>() / self.n(),
            Rms => (x.iter().map(|v| v * v).sum::<f64>() / self.n()).sqrt(),
            Quantile { q } => quantile(&self.sorted, q),
            InterquartileRange => quantile(&self.sorted, 0.75) - quantile(&self.sorted, 0.25),
            Autocorrelation { lag } => autocorrelation(x, lag).unwrap_or(MISSING),
            VarFirstDiff => {
                if n < 2 {
                    return MISSING;
                }
                mean_var(&diffs().collect::<Vec<_>>()).1
            }
            MeanAbsChange => {
                if n < 2 {
                    return MISSING;
                }
                diffs().map(f64::abs).sum::<f64>() / (n - 1) as f64
            }
            MeanSecondDerivative => {
                if n < 3 {
                    return MISSING;
                }
                x.windows(3).map(|w| (w[2] - 2.0 * w[1] + w[0]) / 2.0).sum::<f64>() / (n - 2) as f64
            }
            WindowedVarianceRatio { windows } => {
                let vars: Vec<f64> = self.windows(windows).iter().map(|w| mean_var(w).1).collect();
                let lo = vars.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vars.iter().cloned().fold(0.0, f64::max);
                if vars.is_empty() || !(lo > 0.0) {
                    MISSING
                } else {
                    hi / lo
                }
            }
            WindowedMeanStd { windows } => {
                let means: Vec<f64> = self.windows(windows).iter().map(|w| mean_var(w).0).collect();
                if means.is_empty() {
                    MISSING
                } else {
                    mean_var(&means).1.sqrt()
                }
            }
            BinnedEntropy { bins } => {
                let (lo, hi) = (self.sorted[0], self.sorted[n - 1]);
                let mut counts = vec![0usize; bins.max(1)];
                let width = (hi - lo) / bins as f64;
                for &v in x {
                    let k = if width > 0.0 { ((v - lo) / width) as usize } else { 0 };
                    counts[k.min(bins - 1)] += 1;
                }
                counts
                    .iter()
                    .filter(|&&c| c > 0)
                    .map(|&c| {
                        let p = c as f64 / self.n();
                        -p * p.ln()
                    })
                    .sum()
            }
            SpectralEntropy => {
                if n < MIN_SPECTRAL_LEN {
                    return MISSING;
                }
                normalized_entropy(&self.periodogram).unwrap_or(MISSING)
            }
            TrendSlope => self.trend().0,
            TrendIntercept => self.trend().1,
            TrendR2 => self.trend().2,
            FftMagnitude { k } => self.spectrum.get(k).map_or(MISSING, |c| c.norm()),
            SpectralCentroid => {
                let total: f64 = self.periodogram.iter().sum();
                if !(total > 0.0) {
                    return MISSING;
                }
                let df = self.fs / self.n();
                self.periodogram
                    .iter()
                    .enumerate()
                    .map(|(k, p)| k as f64 * df * p)
                    .sum::<f64>()
                    / total
            }
            DominantFrequency => {
                let best = self
                    .periodogram
                    .iter()
                    .enumerate()
                    .skip(1)
                    .fold((0, 0.0), |acc, (k, &p)| if p > acc.1 { (k, p) } else { acc });
                if best.1 > 0.0 {
                    best.0 as f64 * self.fs / self.n()
                } else {
                    MISSING
                }
            }
            BandEnergy { lo_hz, hi_hz } => {
                let nyquist = self.fs / 2.0;
                let df = self.fs / self.n();
                (0..=n / 2)
                    .filter(|&k| {
                        let f = k as f64 * df;
                        f >= lo_hz && (f < hi_hz || (hi_hz >= nyquist && f <= hi_hz))
                    })
                    .map(|k| self.folded_energy(k))
                    .sum()
            }
            CountAboveMean => x.iter().filter(|&&v| v > self.mean).count() as f64,
            CountBelowMean => x.iter().filter(|&&v| v < self.mean).count() as f64,
            LongestStrikeAboveMean => longest_run(x, |v| v > self.mean) as f64,
            LongestStrikeBelowMean => longest_run(x, |v| v < self.mean) as f64,
            ZeroCrossings => x
                .windows(2)
                .filter(|w| (w[0] < 0.0) != (w[1] < 0.0))
                .count() as f64,
            PeakCount { support } => (support..n.saturating_sub(support))
                .filter(|&i| {
                    (1..=support).all(|j| x[i] > x[i - j] && x[i] > x[i + j])
                })
                .count() as f64,
            SumOfSquares => x.iter().map(|v| v * v).sum(),
            AbsSumOfChanges => diffs().map(f64::abs).sum(),
            C3 { lag } => {
                if n <= 2 * lag {
                    return MISSING;
                }
                (0..n - 2 * lag)
                    .map(|t| x[t + 2 * lag] * x[t + lag] * x[t])
                    .sum::<f64>()
                    / (n - 2 * lag) as f64
            }
            CidCe => diffs().map(|d| d * d).sum::<f64>().sqrt(),
            RatioBeyondSigma { r } => {
                let sd = self.var.sqrt();
                x.iter().filter(|&&v| (v - self.mean).abs() > r * sd).count() as f64 / self.n()
            }
        }
    }
}

/// Evaluates every catalog descriptor on one signal.
pub fn describe(x: &[f64], fs: f64, catalog: &TsDescriptorCatalog) -> Vec<f64> {
    if x.is_empty() {
        return vec![MISSING; catalog.len()];
    }
    let fft = FftPlanner::new().plan_fft_forward(x.len());
    let stats = LeadStats::new(x, fs, &fft, &hann(x.len()));
    catalog.descriptors.iter().map(|d| stats.eval(d)).collect()
}

/// Descriptors for all twelve leads, named `<lead>__ts__<descriptor>`.
/// Absent leads produce missing values so the width is always
/// `12 * catalog.len()`.
pub fn extract_ts_features(ecg: &TwelveLeadEcg, catalog: &TsDescriptorCatalog) -> FeatureVector {
    let fs = ecg.meta.sampling_rate;
    let mut planner = FftPlanner::new();
    let mut windows: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut values = Vec::with_capacity(12 * catalog.len());
    for lead in Lead::ALL {
        match ecg.leads.get(&lead).filter(|x| !x.is_empty()) {
            Some(x) => {
                let fft = planner.plan_fft_forward(x.len());
                let window = windows.entry(x.len()).or_insert_with(|| hann(x.len()));
                let stats = LeadStats::new(x, fs, &fft, window);
                values.extend(catalog.descriptors.iter().map(|d| stats.eval(d)));
            }
            None => values.extend(std::iter::repeat(MISSING).take(catalog.len())),
        }
    }
    FeatureVector {
        names: catalog.feature_names(),
        values,
    }
}
