//! Windowed vital-sign errors: heart rate from detected R-peaks,
//! respiratory rate from the dominant spectral peak, and systolic/diastolic
//! pressure from per-window extrema.

use std::fmt::{self, Write as _};

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::dsp::{apply_filter_f64, design_butterworth, DspError, FilterSpec};

pub const HR_WINDOW_S: f64 = 8.0;
pub const RR_WINDOW_S: f64 = 60.0;
pub const BP_WINDOW_S: f64 = 8.0;
pub const RR_BAND_HZ: (f64, f64) = (0.05, 1.0);

/// Detector settings.
pub const QRS_BAND_HZ: (f64, f64) = (8.0, 16.0);
pub const ENVELOPE_S: f64 = 0.08;
pub const THRESHOLD_FACTOR: f64 = 0.45;
pub const PEAK_HISTORY: usize = 8;
pub const REFRACTORY_S: f64 = 0.2;
pub const REFINE_S: f64 = 0.04;
/// Half-width of the neighbourhood in which an envelope sample must be the
/// maximum to become a candidate.
pub const CANDIDATE_RADIUS_S: f64 = 0.05;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("sample rate {0} Hz is below the required {1} Hz")]
    RateTooLow(f64, f64),
    #[error("signal of {len} samples is shorter than the required {min}")]
    TooShort { len: usize, min: usize },
    #[error("predicted and true signals differ in length ({pred} vs {truth})")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("no complete {window_s} s window in {len} samples")]
    NoWindows { window_s: f64, len: usize },
    #[error(transparent)]
    Dsp(#[from] DspError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Hr,
    Rr,
    Sbp,
    Dbp,
}

impl MetricKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::Hr => "HR Error [bpm]",
            Self::Rr => "RR Error [bpm]",
            Self::Sbp => "SBP Error [mmHg]",
            Self::Dbp => "DBP Error [mmHg]",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Self::Hr | Self::Rr => "bpm",
            Self::Sbp | Self::Dbp => "mmHg",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowValue {
    pub index: usize,
    pub predicted: f64,
    pub truth: f64,
    pub abs_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedWindow {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub kind: MetricKind,
    pub per_window: Vec<WindowValue>,
    pub skipped: Vec<SkippedWindow>,
    /// Mean absolute error over valid windows; `None` when none was valid.
    pub mae: Option<f64>,
}

impl MetricReport {
    fn new(kind: MetricKind, per_window: Vec<WindowValue>, skipped: Vec<SkippedWindow>) -> Self {
        let mae = if per_window.is_empty() {
            None
        } else {
            Some(per_window.iter().map(|w| w.abs_error).sum::<f64>() / per_window.len() as f64)
        };
        Self {
            kind,
            per_window,
            skipped,
            mae,
        }
    }

    pub fn n_valid(&self) -> usize {
        self.per_window.len()
    }

    pub fn n_windows(&self) -> usize {
        self.per_window.len() + self.skipped.len()
    }

    /// Merges reports of the same kind (e.g. across subjects); window
    /// indices are kept as given.
    pub fn combine(kind: MetricKind, reports: &[MetricReport]) -> Self {
        let per_window = reports.iter().flat_map(|r| r.per_window.iter().cloned()).collect();
        let skipped = reports.iter().flat_map(|r| r.skipped.iter().cloned()).collect();
        Self::new(kind, per_window, skipped)
    }

    /// Rows `window,predicted,truth,abs_error` for valid windows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("window,predicted,truth,abs_error\n");
        for w in &self.per_window {
            writeln!(s, "{},{},{},{}", w.index, w.predicted, w.truth, w.abs_error).expect("string write");
        }
        s
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mae {
            Some(m) => write!(f, "{}: {m:.4}", self.kind.label())?,
            None => write!(f, "{}: no valid windows", self.kind.label())?,
        }
        write!(f, " (valid {}/{}, skipped {})", self.n_valid(), self.n_windows(), self.skipped.len())
    }
}

fn check_pair(pred: &[f32], truth: &[f32]) -> Result<(), MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    Ok(())
}

fn window_len(window_s: f64, fs: f64) -> usize {
    (window_s * fs).round() as usize
}

fn centered_moving_average(x: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut prefix = vec![0.0; x.len() + 1];
    for (i, v) in x.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
    }
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(x.len());
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// QRS detector in the style of Hamilton and Tompkins. Returns ascending
/// sample indices of R-peaks.
pub fn detect_r_peaks(ecg: &[f32], fs: f64) -> Result<Vec<usize>, MetricError> {
    if !(fs >= 100.0) {
        return Err(MetricError::RateTooLow(fs, 100.0));
    }
    let min = window_len(2.0, fs);
    if ecg.len() < min {
        return Err(MetricError::TooShort { len: ecg.len(), min });
    }
    let raw: Vec<f64> = ecg.iter().map(|&v| v as f64).collect();
    let band = design_butterworth(&FilterSpec::bandpass(QRS_BAND_HZ.0, QRS_BAND_HZ.1, 2), fs)?;
    let filtered = apply_filter_f64(&band, &raw, true)?;
    let mut deriv = vec![0.0; filtered.len()];
    for i in 1..filtered.len() {
        deriv[i] = (filtered[i] - filtered[i - 1]).abs();
    }
    let env = centered_moving_average(&deriv, window_len(ENVELOPE_S, fs).max(1));

    let radius = window_len(CANDIDATE_RADIUS_S, fs).max(1);
    let refractory = window_len(REFRACTORY_S, fs);
    let refine = window_len(REFINE_S, fs);
    let global_mean = env.iter().sum::<f64>() / env.len() as f64;
    let mut history: Vec<f64> = vec![global_mean];
    let mut accepted: Vec<usize> = Vec::new();

    for i in 1..env.len() - 1 {
        let v = env[i];
        // first sample of a plateau that dominates its neighbourhood
        if !(v > 0.0 && v > env[i - 1] && v >= env[i + 1]) {
            continue;
        }
        let lo = i.saturating_sub(radius);
        let hi = (i + radius + 1).min(env.len());
        if env[lo..hi].iter().any(|&u| u > v) {
            continue;
        }
        let threshold = THRESHOLD_FACTOR * history.iter().sum::<f64>() / history.len() as f64;
        if v <= threshold {
            continue;
        }
        if let Some(&last) = accepted.last() {
            if i - last < refractory {
                continue;
            }
        }
        accepted.push(i);
        history.push(v);
        if history.len() > PEAK_HISTORY {
            history.remove(0);
        }
    }

    let mut peaks: Vec<usize> = accepted
        .into_iter()
        .map(|c| {
            let lo = c.saturating_sub(refine);
            let hi = (c + refine + 1).min(raw.len());
            let mut best = lo;
            for j in lo..hi {
                if raw[j] > raw[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    peaks.dedup();
    Ok(peaks)
}

/// `60 · (n − 1) / (t_last − t_first)` for peaks in seconds; `None` with
/// fewer than two peaks.
pub fn rate_from_peaks(peaks: &[usize], fs: f64) -> Option<f64> {
    if peaks.len() < 2 {
        return None;
    }
    let span = (peaks[peaks.len() - 1] - peaks[0]) as f64 / fs;
    Some(60.0 * (peaks.len() - 1) as f64 / span)
}

/// Heart-rate error over non-overlapping windows anchored at sample 0.
/// Peaks are detected on the whole signal, then grouped by window.
pub fn hr_error(pred_ecg: &[f32], true_ecg: &[f32], fs: f64, window_s: f64) -> Result<MetricReport, MetricError> {
    check_pair(pred_ecg, true_ecg)?;
    let w = window_len(window_s, fs);
    let n_windows = if w == 0 { 0 } else { pred_ecg.len() / w };
    if n_windows == 0 {
        return Err(MetricError::NoWindows {
            window_s,
            len: pred_ecg.len(),
        });
    }
    let pp = detect_r_peaks(pred_ecg, fs)?;
    let tp = detect_r_peaks(true_ecg, fs)?;
    let in_window = |peaks: &[usize], i: usize| -> Vec<usize> {
        peaks.iter().copied().filter(|&p| p >= i * w && p < (i + 1) * w).collect()
    };
    let mut values = Vec::new();
    let mut skipped = Vec::new();
    for i in 0..n_windows {
        let p = rate_from_peaks(&in_window(&pp, i), fs);
        let t = rate_from_peaks(&in_window(&tp, i), fs);
        match (p, t) {
            (Some(p), Some(t)) => values.push(WindowValue {
                index: i,
                predicted: p,
                truth: t,
                abs_error: (p - t).abs(),
            }),
            (p, t) => {
                let side = match (p.is_none(), t.is_none()) {
                    (true, true) => "both signals",
                    (true, false) => "predicted signal",
                    _ => "true signal",
                };
                skipped.push(SkippedWindow {
                    index: i,
                    reason: format!("fewer than 2 R-peaks in {side}"),
                });
            }
        }
    }
    Ok(MetricReport::new(MetricKind::Hr, values, skipped))
}

/// Dominant frequency in `band` of a mean-removed, Hann-tapered segment,
/// refined by a parabola through the peak bin and its neighbours.
pub fn dominant_frequency(segment: &[f64], fs: f64, band: (f64, f64)) -> Option<f64> {
    let n = segment.len();
    if n < 4 {
        return None;
    }
    let mean = segment.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex64> = segment
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let w = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos());
            Complex64::new((v - mean) * w, 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let mag: Vec<f64> = buf[..n / 2 + 1].iter().map(|c| c.norm()).collect();
    let df = fs / n as f64;
    let lo = (band.0 / df).ceil() as usize;
    let hi = ((band.1 / df).floor() as usize).min(mag.len() - 1);
    if lo > hi {
        return None;
    }
    let mut k = lo;
    for j in lo..=hi {
        if mag[j] > mag[k] {
            k = j;
        }
    }
    if !(mag[k] > 0.0) {
        return None;
    }
    let mut offset = 0.0;
    if k > 0 && k + 1 < mag.len() {
        let (a, b, c) = (mag[k - 1], mag[k], mag[k + 1]);
        let denom = a - 2.0 * b + c;
        if denom.abs() > 0.0 {
            offset = (0.5 * (a - c) / denom).clamp(-0.5, 0.5);
        }
    }
    Some((k as f64 + offset) * df)
}

/// Respiratory-rate error over non-overlapping windows.
pub fn rr_error(pred_resp: &[f32], true_resp: &[f32], fs: f64, window_s: f64) -> Result<MetricReport, MetricError> {
    check_pair(pred_resp, true_resp)?;
    let w = window_len(window_s, fs);
    let n_windows = if w == 0 { 0 } else { pred_resp.len() / w };
    if n_windows == 0 {
        return Err(MetricError::NoWindows {
            window_s,
            len: pred_resp.len(),
        });
    }
    let mut values = Vec::new();
    let mut skipped = Vec::new();
    for i in 0..n_windows {
        let seg = |x: &[f32]| -> Vec<f64> { x[i * w..(i + 1) * w].iter().map(|&v| v as f64).collect() };
        let p = dominant_frequency(&seg(pred_resp), fs, RR_BAND_HZ);
        let t = dominant_frequency(&seg(true_resp), fs, RR_BAND_HZ);
        match (p, t) {
            (Some(p), Some(t)) => {
                let (p, t) = (60.0 * p, 60.0 * t);
                values.push(WindowValue {
                    index: i,
                    predicted: p,
                    truth: t,
                    abs_error: (p - t).abs(),
                });
            }
            _ => skipped.push(SkippedWindow {
                index: i,
                reason: "no spectral peak in the respiratory band".into(),
            }),
        }
    }
    Ok(MetricReport::new(MetricKind::Rr, values, skipped))
}

/// Systolic (window maximum) and diastolic (window minimum) errors.
pub fn bp_error(
    pred_abp: &[f32],
    true_abp: &[f32],
    fs: f64,
    window_s: f64,
) -> Result<(MetricReport, MetricReport), MetricError> {
    check_pair(pred_abp, true_abp)?;
    let w = window_len(window_s, fs);
    let n_windows = if w == 0 { 0 } else { pred_abp.len() / w };
    if n_windows == 0 {
        return Err(MetricError::NoWindows {
            window_s,
            len: pred_abp.len(),
        });
    }
    let extrema = |x: &[f32]| -> (f64, f64) {
        x.iter().fold((f64::NEG_INFINITY, f64::INFINITY), |(hi, lo), &v| {
            (hi.max(v as f64), lo.min(v as f64))
        })
    };
    let mut sbp = Vec::new();
    let mut dbp = Vec::new();
    for i in 0..n_windows {
        let (p_hi, p_lo) = extrema(&pred_abp[i * w..(i + 1) * w]);
        let (t_hi, t_lo) = extrema(&true_abp[i * w..(i + 1) * w]);
        sbp.push(WindowValue {
            index: i,
            predicted: p_hi,
            truth: t_hi,
            abs_error: (p_hi - t_hi).abs(),
        });
        dbp.push(WindowValue {
            index: i,
            predicted: p_lo,
            truth: t_lo,
            abs_error: (p_lo - t_lo).abs(),
        });
    }
    Ok((
        MetricReport::new(MetricKind::Sbp, sbp, Vec::new()),
        MetricReport::new(MetricKind::Dbp, dbp, Vec::new()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    const FS: f64 = 128.0;

    /// Gaussian spikes (σ = 20 ms) at the given times.
    fn spikes(times: &[f64], seconds: f64) -> Vec<f32> {
        let n = (seconds * FS) as usize;
        let sigma = 0.02;
        (0..n)
            .map(|i| {
                let t = i as f64 / FS;
                times
                    .iter()
                    .map(|&c| (-(t - c).powi(2) / (2.0 * sigma * sigma)).exp())
                    .sum::<f64>() as f32
            })
            .collect()
    }

    fn train(rate_bpm: f64, seconds: f64, start: f64) -> Vec<f32> {
        let period = 60.0 / rate_bpm;
        let times: Vec<f64> = (0..).map(|k| start + k as f64 * period).take_while(|&t| t < seconds).collect();
        spikes(&times, seconds)
    }

    #[test]
    fn one_hertz_train_detected() {
        let times: Vec<f64> = (0..10).map(|k| 0.5 + k as f64).collect();
        let ecg = spikes(&times, 10.0);
        let peaks = detect_r_peaks(&ecg, FS).unwrap();
        assert_eq!(peaks.len(), 10, "{peaks:?}");
        for (p, t) in peaks.iter().zip(&times) {
            assert!((*p as f64 - t * FS).abs() <= 2.0);
        }
    }

    #[test]
    fn flat_signal_has_no_peaks() {
        assert!(detect_r_peaks(&[0.0; 1024], FS).unwrap().is_empty());
    }

    #[test]
    fn refractory_rejects_close_second_peak() {
        let ecg = spikes(&[1.0, 1.15], 3.0);
        let peaks = detect_r_peaks(&ecg, FS).unwrap();
        assert_eq!(peaks.len(), 1, "{peaks:?}");
        assert!((peaks[0] as f64 - FS).abs() <= 3.0);
    }

    #[test]
    fn detector_errors() {
        assert!(matches!(detect_r_peaks(&[0.0; 1000], 90.0), Err(MetricError::RateTooLow(..))));
        assert!(matches!(detect_r_peaks(&[0.0; 100], FS), Err(MetricError::TooShort { .. })));
    }

    #[test]
    fn hr_identity_and_gap() {
        let truth = train(60.0, 64.0, 0.3);
        let same = hr_error(&truth, &truth, FS, HR_WINDOW_S).unwrap();
        assert_eq!(same.mae, Some(0.0));
        assert_eq!(same.n_windows(), 8);
        let pred = train(72.0, 64.0, 0.1);
        let gap = hr_error(&pred, &truth, FS, HR_WINDOW_S).unwrap();
        assert!((gap.mae.unwrap() - 12.0).abs() <= 0.5, "{gap}");
    }

    #[test]
    fn hr_flat_truth_skips_everything() {
        let pred = train(60.0, 32.0, 0.3);
        let r = hr_error(&pred, &vec![0.0; pred.len()], FS, HR_WINDOW_S).unwrap();
        assert_eq!(r.mae, None);
        assert_eq!(r.n_valid(), 0);
        assert_eq!(r.skipped.len(), 4);
        assert!(r.to_string().contains("no valid windows"));
    }

    #[test]
    fn hr_amplitude_invariant() {
        let truth = train(66.0, 32.0, 0.2);
        let pred = train(80.0, 32.0, 0.4);
        let base = hr_error(&pred, &truth, FS, HR_WINDOW_S).unwrap().mae.unwrap();
        let scaled: Vec<f32> = pred.iter().map(|v| v * 3.5).collect();
        let again = hr_error(&scaled, &truth, FS, HR_WINDOW_S).unwrap().mae.unwrap();
        assert!((base - again).abs() < 1e-9);
    }

    fn tone(f: f64, seconds: f64) -> Vec<f32> {
        (0..(seconds * FS) as usize)
            .map(|i| (2.0 * PI * f * i as f64 / FS).sin() as f32)
            .collect()
    }

    #[test]
    fn rr_tones() {
        let a = tone(0.25, 60.0);
        let same = rr_error(&a, &a, FS, RR_WINDOW_S).unwrap();
        assert_eq!(same.mae, Some(0.0));
        assert!((same.per_window[0].truth - 15.0).abs() < 1e-6);
        let gap = rr_error(&tone(0.2, 120.0), &tone(0.3, 120.0), FS, RR_WINDOW_S).unwrap();
        assert!((gap.mae.unwrap() - 6.0).abs() <= 0.2);
        assert!(matches!(
            rr_error(&a[..100], &a[..100], FS, RR_WINDOW_S),
            Err(MetricError::NoWindows { .. })
        ));
    }

    #[test]
    fn rr_off_bin_tone_is_interpolated() {
        let f = 0.2125; // between bins of a 60 s window
        let r = rr_error(&tone(f, 60.0), &tone(f, 60.0), FS, RR_WINDOW_S).unwrap();
        assert!((r.per_window[0].truth - 60.0 * f).abs() < 0.3);
    }

    #[test]
    fn bp_examples() {
        let saw: Vec<f32> = (0..(16.0 * FS) as usize)
            .map(|i| 80.0 + 40.0 * ((i % 128) as f32 / 127.0))
            .collect();
        let (s, d) = bp_error(&saw, &saw, FS, BP_WINDOW_S).unwrap();
        assert_eq!((s.mae, d.mae), (Some(0.0), Some(0.0)));
        assert_eq!((s.per_window[0].truth, d.per_window[0].truth), (120.0, 80.0));
        let shifted: Vec<f32> = saw.iter().map(|v| v + 5.0).collect();
        let (s, d) = bp_error(&shifted, &saw, FS, BP_WINDOW_S).unwrap();
        assert_eq!((s.mae, d.mae), (Some(5.0), Some(5.0)));
        let scaled: Vec<f32> = saw.iter().map(|v| v * 1.1).collect();
        let (s, d) = bp_error(&scaled, &saw, FS, BP_WINDOW_S).unwrap();
        assert!((s.mae.unwrap() - 12.0).abs() < 1e-4);
        assert!((d.mae.unwrap() - 8.0).abs() < 1e-4);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        assert!(matches!(
            bp_error(&[0.0; 10], &[0.0; 11], FS, 8.0),
            Err(MetricError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn report_csv_and_combine() {
        let a = tone(0.25, 60.0);
        let r = rr_error(&a, &a, FS, RR_WINDOW_S).unwrap();
        let both = MetricReport::combine(MetricKind::Rr, &[r.clone(), r.clone()]);
        assert_eq!(both.n_valid(), 2);
        assert!(r.to_csv().starts_with("window,predicted,truth,abs_error\n0,"));
    }
}
