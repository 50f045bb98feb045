//! Butterworth design via the analog prototype, bilinear transform with
//! prewarping, and realization as second-order sections.

use num_complex::Complex64;
use std::f64::consts::PI;

use super::DspError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterKind {
    Lowpass(f64),
    Highpass(f64),
    Bandpass(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub order: usize,
    pub zero_phase: bool,
}

impl FilterSpec {
    pub fn lowpass(cutoff_hz: f64, order: usize) -> Self {
        Self {
            kind: FilterKind::Lowpass(cutoff_hz),
            order,
            zero_phase: true,
        }
    }

    pub fn highpass(cutoff_hz: f64, order: usize) -> Self {
        Self {
            kind: FilterKind::Highpass(cutoff_hz),
            order,
            zero_phase: true,
        }
    }

    pub fn bandpass(low_hz: f64, high_hz: f64, order: usize) -> Self {
        Self {
            kind: FilterKind::Bandpass(low_hz, high_hz),
            order,
            zero_phase: true,
        }
    }

    pub fn cutoffs(&self) -> Vec<f64> {
        match self.kind {
            FilterKind::Lowpass(f) | FilterKind::Highpass(f) => vec![f],
            FilterKind::Bandpass(lo, hi) => vec![lo, hi],
        }
    }

    pub fn validate(&self, sample_rate_hz: f64) -> Result<(), DspError> {
        if !(sample_rate_hz > 0.0) {
            return Err(DspError::InvalidRate(sample_rate_hz));
        }
        if self.order == 0 {
            return Err(DspError::InvalidFilter("order must be positive".into()));
        }
        let nyquist = sample_rate_hz / 2.0;
        for f in self.cutoffs() {
            if !(f > 0.0) {
                return Err(DspError::InvalidFilter(format!(
                    "cutoff {f} Hz must be positive"
                )));
            }
            if f >= nyquist {
                return Err(DspError::CutoffAboveNyquist {
                    cutoff_hz: f,
                    nyquist_hz: nyquist,
                });
            }
        }
        if let FilterKind::Bandpass(lo, hi) = self.kind {
            if lo >= hi {
                return Err(DspError::InvalidFilter(format!(
                    "bandpass needs low < high, got {lo} >= {hi}"
                )));
            }
        }
        Ok(())
    }
}

/// One biquad `b0 + b1 z^-1 + b2 z^-2 / 1 + a1 z^-1 + a2 z^-2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    pub fn response(&self, z: Complex64) -> Complex64 {
        let zi = z.inv();
        let zi2 = zi * zi;
        (self.b[0] + self.b[1] * zi + self.b[2] * zi2) / (1.0 + self.a[0] * zi + self.a[1] * zi2)
    }

    /// Roots of `z^2 + a1 z + a2`.
    pub fn poles(&self) -> [Complex64; 2] {
        let [a1, a2] = self.a;
        let disc = Complex64::new(a1 * a1 - 4.0 * a2, 0.0).sqrt();
        [(-a1 + disc) / 2.0, (-a1 - disc) / 2.0]
    }

    pub fn is_stable(&self) -> bool {
        self.poles().iter().all(|p| p.norm() < 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiquadCascade {
    pub sections: Vec<Biquad>,
}

impl BiquadCascade {
    /// Complex frequency response at `freq_hz`.
    pub fn response_at(&self, freq_hz: f64, sample_rate_hz: f64) -> Complex64 {
        let z = Complex64::from_polar(1.0, 2.0 * PI * freq_hz / sample_rate_hz);
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(z))
    }

    pub fn magnitude_at(&self, freq_hz: f64, sample_rate_hz: f64) -> f64 {
        self.response_at(freq_hz, sample_rate_hz).norm()
    }

    pub fn is_stable(&self) -> bool {
        self.sections.iter().all(Biquad::is_stable)
    }

    /// Total number of poles.
    pub fn order(&self) -> usize {
        self.sections
            .iter()
            .map(|s| if s.a[1] == 0.0 && s.b[2] == 0.0 { 1 } else { 2 })
            .sum()
    }
}

fn prewarp(f: f64, fs: f64) -> f64 {
    2.0 * fs * (PI * f / fs).tan()
}

pub fn design_butterworth(spec: &FilterSpec, sample_rate_hz: f64) -> Result<BiquadCascade, DspError> {
    spec.validate(sample_rate_hz)?;
    let fs = sample_rate_hz;
    let n = spec.order;
    let proto: Vec<Complex64> = (0..n)
        .map(|k| Complex64::from_polar(1.0, PI * (2 * k + n + 1) as f64 / (2 * n) as f64))
        .collect();

    // analog poles plus the digital zero locations implied by each transform
    let (poles, zero_at_dc, zero_at_nyq, ref_freq) = match spec.kind {
        FilterKind::Lowpass(fc) => {
            let wc = prewarp(fc, fs);
            (proto.iter().map(|p| p * wc).collect::<Vec<_>>(), 0, n, 0.0)
        }
        FilterKind::Highpass(fc) => {
            let wc = prewarp(fc, fs);
            (proto.iter().map(|p| wc / p).collect(), n, 0, fs / 2.0)
        }
        FilterKind::Bandpass(lo, hi) => {
            let w1 = prewarp(lo, fs);
            let w2 = prewarp(hi, fs);
            let bw = w2 - w1;
            let w0sq = w1 * w2;
            let mut out = Vec::with_capacity(2 * n);
            for p in &proto {
                let pb = p * bw / 2.0;
                let disc = (pb * pb - w0sq).sqrt();
                out.push(pb + disc);
                out.push(pb - disc);
            }
            let f0 = fs / PI * (w0sq.sqrt() / (2.0 * fs)).atan();
            (out, n, n, f0)
        }
    };

    let digital: Vec<Complex64> = poles
        .iter()
        .map(|&s| (2.0 * fs + s) / (2.0 * fs - s))
        .collect();

    // conjugate pairs from the upper half plane, real poles left over
    let mut complex_poles: Vec<Complex64> = digital.iter().copied().filter(|p| p.im > 1e-12).collect();
    complex_poles.sort_by(|a, b| a.norm().partial_cmp(&b.norm()).unwrap());
    let mut real_poles: Vec<f64> = digital
        .iter()
        .filter(|p| p.im.abs() <= 1e-12)
        .map(|p| p.re)
        .collect();
    real_poles.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut dc_left = zero_at_dc;
    let mut nyq_left = zero_at_nyq;
    let mut take_zeros = |count: usize| -> Vec<f64> {
        let mut z = Vec::with_capacity(count);
        for _ in 0..count {
            if dc_left > 0 && (dc_left >= nyq_left) {
                dc_left -= 1;
                z.push(1.0);
            } else if nyq_left > 0 {
                nyq_left -= 1;
                z.push(-1.0);
            }
        }
        z
    };

    let mut sections = Vec::new();
    for p in complex_poles {
        let zeros = take_zeros(2);
        sections.push(section_from(&zeros, [-2.0 * p.re, p.norm_sqr()]));
    }
    let mut reals = real_poles.into_iter();
    while let Some(p1) = reals.next() {
        match reals.next() {
            Some(p2) => {
                let zeros = take_zeros(2);
                sections.push(section_from(&zeros, [-(p1 + p2), p1 * p2]));
            }
            None => {
                let zeros = take_zeros(1);
                let mut s = section_from(&zeros, [-p1, 0.0]);
                s.a[1] = 0.0;
                sections.push(s);
            }
        }
    }

    let mut cascade = BiquadCascade { sections };
    let gain = cascade.magnitude_at(ref_freq, fs);
    if let Some(first) = cascade.sections.first_mut() {
        for b in &mut first.b {
            *b /= gain;
        }
    }
    Ok(cascade)
}

fn section_from(zeros: &[f64], a: [f64; 2]) -> Biquad {
    let b = match zeros {
        [] => [1.0, 0.0, 0.0],
        [z] => [1.0, -z, 0.0],
        [z1, z2, ..] => [1.0, -(z1 + z2), z1 * z2],
    };
    Biquad { b, a }
}

/// Direct-form-II-transposed pass through every section. `state` holds two
/// delay values per section.
fn run_cascade(cascade: &BiquadCascade, signal: &mut [f64], state: &mut [[f64; 2]]) {
    for (s, z) in cascade.sections.iter().zip(state.iter_mut()) {
        let [b0, b1, b2] = s.b;
        let [a1, a2] = s.a;
        for x in signal.iter_mut() {
            let y = b0 * *x + z[0];
            z[0] = b1 * *x - a1 * y + z[1];
            z[1] = b2 * *x - a2 * y;
            *x = y;
        }
    }
}

/// Per-section delay states for a steady unit-step input.
fn steady_state(cascade: &BiquadCascade) -> Vec<[f64; 2]> {
    let mut input = 1.0;
    cascade
        .sections
        .iter()
        .map(|s| {
            let [b0, b1, b2] = s.b;
            let [a1, a2] = s.a;
            let gain = (b0 + b1 + b2) / (1.0 + a1 + a2);
            let y = gain * input;
            let z1 = b2 * input - a2 * y;
            let z0 = b1 * input - a1 * y + z1;
            input = y;
            [z0, z1]
        })
        .collect()
}

/// Edge padding length used by zero-phase filtering.
pub fn zero_phase_padlen(cascade: &BiquadCascade) -> usize {
    3 * cascade.order()
}

pub fn apply_filter(cascade: &BiquadCascade, signal: &[f32], zero_phase: bool) -> Result<Vec<f32>, DspError> {
    let x: Vec<f64> = signal.iter().map(|&v| v as f64).collect();
    Ok(apply_filter_f64(cascade, &x, zero_phase)?
        .into_iter()
        .map(|v| v as f32)
        .collect())
}

pub fn apply_filter_f64(cascade: &BiquadCascade, signal: &[f64], zero_phase: bool) -> Result<Vec<f64>, DspError> {
    if !zero_phase {
        let mut y = signal.to_vec();
        let mut state = vec![[0.0; 2]; cascade.sections.len()];
        run_cascade(cascade, &mut y, &mut state);
        return Ok(y);
    }
    let n = signal.len();
    let pad = zero_phase_padlen(cascade);
    if n <= pad {
        return Err(DspError::TooShort {
            len: n,
            min: pad + 1,
        });
    }
    // odd reflection about the end samples
    let first = signal[0];
    let last = signal[n - 1];
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - signal[i]));
    ext.extend_from_slice(signal);
    ext.extend((1..=pad).map(|i| 2.0 * last - signal[n - 1 - i]));

    let zi = steady_state(cascade);
    let scaled = |x0: f64| -> Vec<[f64; 2]> { zi.iter().map(|z| [z[0] * x0, z[1] * x0]).collect() };

    let mut state = scaled(ext[0]);
    run_cascade(cascade, &mut ext, &mut state);
    ext.reverse();
    let mut state = scaled(ext[0]);
    run_cascade(cascade, &mut ext, &mut state);
    ext.reverse();
    Ok(ext[pad..pad + n].to_vec())
}
