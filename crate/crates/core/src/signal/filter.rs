//! IIR filter design and application as cascaded second-order sections.
//!
//! Sections use the transposed direct form II. Zero-phase filtering runs the
//! cascade forward and backward over an odd-reflection padded signal, with
//! each pass started from the steady-state response to its first sample so
//! that DC offsets produce no start-up transient.

use std::f64::consts::PI;

use num_complex::Complex64;

/// One second-order section, `a0` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z_inv2 = z_inv * z_inv;
        (self.b0 + self.b1 * z_inv + self.b2 * z_inv2) / (1.0 + self.a1 * z_inv + self.a2 * z_inv2)
    }

    fn dc_gain(&self) -> f64 {
        (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2)
    }

    /// State for which a constant input `x0` yields a constant output.
    fn steady_state(&self, x0: f64) -> [f64; 2] {
        let y = self.dc_gain() * x0;
        let z2 = self.b2 * x0 - self.a2 * y;
        let z1 = self.b1 * x0 - self.a1 * y + z2;
        [z1, z2]
    }

    fn scaled(mut self, gain: f64) -> Self {
        self.b0 *= gain;
        self.b1 *= gain;
        self.b2 *= gain;
        self
    }
}

/// A cascade of second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct Sos {
    pub sections: Vec<Biquad>,
}

impl Sos {
    /// Digital Butterworth high-pass of the given order, designed by the
    /// bilinear transform with cutoff prewarping.
    pub fn butterworth_highpass(order: usize, cutoff_hz: f64, fs: f64) -> Self {
        assert!(order >= 1);
        let warped = 2.0 * fs * (PI * cutoff_hz / fs).tan();
        let k = 2.0 * fs;
        let mut sections = Vec::with_capacity(order.div_ceil(2));
        // Low-pass prototype poles in the upper half plane, plus the real pole
        // for odd orders. Conjugates are implied by the section structure.
        for i in 0..order / 2 {
            let theta = PI * (2 * i + order + 1) as f64 / (2 * order) as f64;
            let proto = Complex64::from_polar(1.0, theta);
            let s_pole = warped / proto;
            let z_pole = (k + s_pole) / (k - s_pole);
            let section = Biquad {
                b0: 1.0,
                b1: -2.0,
                b2: 1.0,
                a1: -2.0 * z_pole.re,
                a2: z_pole.norm_sqr(),
            };
            sections.push(normalize_at_nyquist(section));
        }
        if order % 2 == 1 {
            let s_pole = -warped;
            let z_pole = (k + s_pole) / (k - s_pole);
            let section = Biquad {
                b0: 1.0,
                b1: -1.0,
                b2: 0.0,
                a1: -z_pole,
                a2: 0.0,
            };
            sections.push(normalize_at_nyquist(section));
        }
        Sos { sections }
    }

    /// Second-order notch with -3 dB bandwidth `bandwidth_hz` centred on
    /// `freq_hz`.
    pub fn notch(freq_hz: f64, bandwidth_hz: f64, fs: f64) -> Self {
        let w0 = 2.0 * PI * freq_hz / fs;
        let bw = 2.0 * PI * bandwidth_hz / fs;
        let gain = 1.0 / (1.0 + (bw / 2.0).tan());
        let section = Biquad {
            b0: gain,
            b1: -2.0 * gain * w0.cos(),
            b2: gain,
            a1: -2.0 * gain * w0.cos(),
            a2: 2.0 * gain - 1.0,
        };
        Sos { sections: vec![section] }
    }

    pub fn order(&self) -> usize {
        self.sections
            .iter()
            .map(|s| if s.a2 == 0.0 && s.b2 == 0.0 { 1 } else { 2 })
            .sum()
    }

    /// Complex frequency response of one causal pass at `freq_hz`.
    pub fn response(&self, freq_hz: f64, fs: f64) -> Complex64 {
        let w = 2.0 * PI * freq_hz / fs;
        let z_inv = Complex64::from_polar(1.0, -w);
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(z_inv))
    }

    /// Magnitude response of one causal pass.
    pub fn gain(&self, freq_hz: f64, fs: f64) -> f64 {
        self.response(freq_hz, fs).norm()
    }

    /// Causal filtering from a zero initial state.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for section in &self.sections {
            run_section(section, &mut y, [0.0, 0.0]);
        }
        y
    }

    /// Causal filtering with every section started at its steady state for
    /// the first sample.
    pub fn filter_steady(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        self.filter_steady_in_place(&mut y);
        y
    }

    fn filter_steady_in_place(&self, y: &mut [f64]) {
        let Some(&first) = y.first() else { return };
        let mut x0 = first;
        for section in &self.sections {
            let zi = section.steady_state(x0);
            run_section(section, y, zi);
            x0 *= section.dc_gain();
        }
    }

    /// Number of samples of odd-reflection padding used by [`Sos::filtfilt`].
    pub fn pad_len(&self) -> usize {
        3 * (self.order() + 1)
    }

    /// Forward-backward (zero-phase) filtering. The effective magnitude
    /// response is the square of [`Sos::gain`] and the phase is zero.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = self.pad_len().min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        let (first, last) = (x[0], x[n - 1]);
        ext.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * last - x[n - 1 - i]));

        self.filter_steady_in_place(&mut ext);
        ext.reverse();
        self.filter_steady_in_place(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

fn normalize_at_nyquist(section: Biquad) -> Biquad {
    let g = section.response(Complex64::new(-1.0, 0.0)).norm();
    section.scaled(1.0 / g)
}

fn run_section(s: &Biquad, y: &mut [f64], zi: [f64; 2]) {
    let [mut z1, mut z2] = zi;
    for v in y.iter_mut() {
        let x = *v;
        let out = s.b0 * x + z1;
        z1 = s.b1 * x - s.a1 * out + z2;
        z2 = s.b2 * x - s.a2 * out;
        *v = out;
    }
}
