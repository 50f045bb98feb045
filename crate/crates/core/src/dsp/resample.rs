//! Band-limited rate conversion with a Kaiser-windowed sinc kernel.
//!
//! Each output sample is a normalized weighted sum of nearby inputs, so the
//! kernel has unit DC gain at every fractional offset (including at the
//! edges, where part of the support falls outside the signal).

use std::f64::consts::PI;

use super::DspError;

pub const KAISER_BETA: f64 = 8.0;
pub const TAPS_PER_SIDE: usize = 32;

/// Largest reduced numerator for which a polyphase table is precomputed.
const MAX_POLYPHASE_PHASES: u64 = 1024;

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

struct Kernel {
    /// fraction of the input Nyquist kept (1 when upsampling)
    cutoff: f64,
    /// half-width of the support in input samples
    half_width: f64,
    i0_beta: f64,
}

impl Kernel {
    fn new(from_hz: f64, to_hz: f64) -> Self {
        let cutoff = (to_hz / from_hz).min(1.0);
        Self {
            cutoff,
            half_width: TAPS_PER_SIDE as f64 / cutoff,
            i0_beta: bessel_i0(KAISER_BETA),
        }
    }

    fn weight(&self, d: f64) -> f64 {
        let r = d / self.half_width;
        if r.abs() >= 1.0 {
            return 0.0;
        }
        let window = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / self.i0_beta;
        self.cutoff * sinc(self.cutoff * d) * window
    }

    /// Input index range and weights for an output centered at `pos`.
    fn taps(&self, pos: f64) -> (isize, Vec<f64>) {
        let lo = (pos - self.half_width).ceil() as isize;
        let hi = (pos + self.half_width).floor() as isize;
        (lo, (lo..=hi).map(|i| self.weight(pos - i as f64)).collect())
    }
}

fn as_ratio(from_hz: f64, to_hz: f64) -> Option<(u64, u64)> {
    let integral = |v: f64| v.fract() == 0.0 && v < 1e12;
    if !(integral(from_hz) && integral(to_hz)) {
        return None;
    }
    let (a, b) = (from_hz as u64, to_hz as u64);
    let g = gcd(a, b);
    let (down, up) = (a / g, b / g);
    (up <= MAX_POLYPHASE_PHASES).then_some((up, down))
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn weighted(signal: &[f64], start: isize, weights: &[f64]) -> f64 {
    let mut acc = 0.0;
    let mut norm = 0.0;
    for (j, w) in weights.iter().enumerate() {
        let i = start + j as isize;
        if i >= 0 && (i as usize) < signal.len() {
            acc += w * signal[i as usize];
            norm += w;
        }
    }
    if norm.abs() > 1e-12 {
        acc / norm
    } else {
        0.0
    }
}

pub fn resample(signal: &[f32], from_hz: f64, to_hz: f64) -> Result<Vec<f32>, DspError> {
    let x: Vec<f64> = signal.iter().map(|&v| v as f64).collect();
    Ok(resample_f64(&x, from_hz, to_hz)?
        .into_iter()
        .map(|v| v as f32)
        .collect())
}

pub fn resample_f64(signal: &[f64], from_hz: f64, to_hz: f64) -> Result<Vec<f64>, DspError> {
    for r in [from_hz, to_hz] {
        if !(r.is_finite() && r > 0.0) {
            return Err(DspError::InvalidRate(r));
        }
    }
    if from_hz == to_hz {
        return Ok(signal.to_vec());
    }
    if signal.len() < 2 {
        return Err(DspError::TooShort {
            len: signal.len(),
            min: 2,
        });
    }
    let out_len = (signal.len() as f64 * to_hz / from_hz).round() as usize;
    let kernel = Kernel::new(from_hz, to_hz);

    if let Some((up, down)) = as_ratio(from_hz, to_hz) {
        // output j sits at input position j * down / up; its fractional part
        // cycles through `up` phases
        let table: Vec<(isize, Vec<f64>)> = (0..up)
            .map(|phase| kernel.taps((phase * down % up) as f64 / up as f64))
            .collect();
        Ok((0..out_len as u64)
            .map(|j| {
                let base = (j * down / up) as isize;
                let (lo, w) = &table[(j % up) as usize];
                weighted(signal, base + lo, w)
            })
            .collect())
    } else {
        let step = from_hz / to_hz;
        Ok((0..out_len)
            .map(|j| {
                let (lo, w) = kernel.taps(j as f64 * step);
                weighted(signal, lo, &w)
            })
            .collect())
    }
}
