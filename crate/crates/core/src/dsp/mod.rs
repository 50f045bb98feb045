//! Preprocessing chains: resampling, Butterworth filtering and unit scaling.

mod butterworth;
mod resample;

pub use butterworth::{
    apply_filter, apply_filter_f64, design_butterworth, zero_phase_padlen, Biquad, BiquadCascade,
    FilterKind, FilterSpec,
};
pub use resample::{resample, resample_f64, KAISER_BETA, TAPS_PER_SIDE};

use crate::record::{RecordError, WaveformRecord};

/// Working sample rate of every model input and output.
pub const TARGET_RATE_HZ: f64 = 128.0;
pub const FILTER_ORDER: usize = 4;
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum DspError {
    #[error("sample rate must be positive and finite, got {0}")]
    InvalidRate(f64),
    #[error("cutoff {cutoff_hz} Hz is not below Nyquist {nyquist_hz} Hz")]
    CutoffAboveNyquist { cutoff_hz: f64, nyquist_hz: f64 },
    #[error("invalid filter: {0}")]
    InvalidFilter(String),
    #[error("signal of length {len} is too short, need at least {min}")]
    TooShort { len: usize, min: usize },
    #[error(transparent)]
    Record(#[from] RecordError),
}

/// z-score followed by division by the peak magnitude; output lies in [-1, 1].
pub fn standardize_unit(signal: &[f32]) -> Vec<f32> {
    let x: Vec<f64> = signal.iter().map(|&v| v as f64).collect();
    standardize_unit_f64(&x).into_iter().map(|v| v as f32).collect()
}

pub fn standardize_unit_f64(signal: &[f64]) -> Vec<f64> {
    if signal.is_empty() {
        return Vec::new();
    }
    let n = signal.len() as f64;
    let mean = signal.iter().sum::<f64>() / n;
    let var = signal.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(NORM_EPS);
    let z: Vec<f64> = signal.iter().map(|v| (v - mean) / std).collect();
    let peak = z.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(NORM_EPS);
    z.into_iter().map(|v| (v / peak).clamp(-1.0, 1.0)).collect()
}

/// Physiological role of a channel, which selects its preprocessing chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelRole {
    Ppg,
    Ecg,
    Resp,
    Abp,
}

impl ChannelRole {
    pub fn from_label(label: &str) -> Option<Self> {
        match label.to_ascii_lowercase().as_str() {
            "ppg" => Some(Self::Ppg),
            "ecg" => Some(Self::Ecg),
            "resp" => Some(Self::Resp),
            "abp" => Some(Self::Abp),
            _ => None,
        }
    }

    /// Filter applied before standardization; `None` for ABP, which keeps
    /// its physical units.
    pub fn filter(self) -> Option<FilterSpec> {
        match self {
            Self::Ppg => Some(FilterSpec::bandpass(0.5, 4.0, FILTER_ORDER)),
            Self::Ecg => Some(FilterSpec::highpass(0.5, FILTER_ORDER)),
            Self::Resp => Some(FilterSpec::lowpass(1.0, FILTER_ORDER)),
            Self::Abp => None,
        }
    }
}

/// Runs one channel through its role's chain at the signal's own rate.
pub fn preprocess_signal(signal: &[f32], role: ChannelRole, sample_rate_hz: f64) -> Result<Vec<f32>, DspError> {
    match role.filter() {
        None => Ok(signal.to_vec()),
        Some(spec) => {
            let cascade = design_butterworth(&spec, sample_rate_hz)?;
            let x: Vec<f64> = signal.iter().map(|&v| v as f64).collect();
            let y = apply_filter_f64(&cascade, &x, spec.zero_phase)?;
            Ok(standardize_unit_f64(&y).into_iter().map(|v| v as f32).collect())
        }
    }
}

/// Brings every channel of `record` to 128 Hz and processes `channel_label`
/// with the chain for `role`. Other channels are only resampled.
pub fn preprocess_task(
    record: &WaveformRecord,
    channel_label: &str,
    role: ChannelRole,
) -> Result<WaveformRecord, DspError> {
    if record.channel(channel_label).is_none() {
        return Err(RecordError::MissingChannel(channel_label.to_string()).into());
    }
    let mut out = resample_record(record, TARGET_RATE_HZ)?;
    let channel = out.channel_mut(channel_label).expect("checked above");
    channel.samples = preprocess_signal(&channel.samples, role, TARGET_RATE_HZ)?;
    Ok(out)
}

pub fn resample_record(record: &WaveformRecord, to_hz: f64) -> Result<WaveformRecord, DspError> {
    if record.sample_rate_hz == to_hz {
        return Ok(record.clone());
    }
    let mut out = record.clone();
    for ch in &mut out.channels {
        ch.samples = resample(&ch.samples, record.sample_rate_hz, to_hz)?;
    }
    out.sample_rate_hz = to_hz;
    Ok(out)
}
