//! Synthetic paired recordings with known ground truth: PPG with ECG,
//! respiration or arterial pressure, generated at 128 Hz.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::record::{write_record, Channel, RecordError, Task, WaveformRecord};

pub const SYNTH_RATE_HZ: f64 = 128.0;
pub const ECG_SPIKE_SIGMA_S: f64 = 0.02;
pub const ECG_NOISE_STD: f64 = 0.01;
pub const PPG_NOISE_STD: f64 = 0.02;
/// Time from an R-peak to the peak of its PPG pulse.
pub const PPG_DELAY_S: f64 = 0.2;
pub const PPG_RISE_S: f64 = 0.06;
pub const PPG_DECAY_S: f64 = 0.24;
pub const ABP_PPG_DELAY_S: f64 = 0.15;
pub const MAX_HR_STEP_BPM_PER_S: f64 = 2.0;
pub const MAX_RR_STEP_BPM_PER_S: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("cannot create {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub task: Task,
    pub n_subjects: usize,
    pub seconds_per_subject: f64,
    pub fs: f64,
    pub hr_range: (f64, f64),
    pub rr_range: (f64, f64),
    pub sbp_range: (f64, f64),
    pub dbp_range: (f64, f64),
    pub seed: u64,
    /// Constant heart rate in bpm instead of the random walk.
    pub hr_override: Option<f64>,
    /// Constant respiratory rate in breaths per minute.
    pub rr_override: Option<f64>,
    /// Fixed `(SBP, DBP)` instead of per-subject draws.
    pub bp_override: Option<(f64, f64)>,
    pub bp_drift: bool,
    /// Depth of the respiratory modulation of the PPG.
    pub resp_modulation: f64,
}

impl SynthConfig {
    pub fn new(task: Task, n_subjects: usize, seconds_per_subject: f64, seed: u64) -> Self {
        Self {
            task,
            n_subjects,
            seconds_per_subject,
            fs: SYNTH_RATE_HZ,
            hr_range: (50.0, 120.0),
            rr_range: (6.0, 30.0),
            sbp_range: (90.0, 160.0),
            dbp_range: (55.0, 95.0),
            seed,
            hr_override: None,
            rr_override: None,
            bp_override: None,
            bp_drift: true,
            resp_modulation: 0.3,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.n_subjects == 0 {
            return bad("n_subjects must be at least 1".into());
        }
        if self.fs != SYNTH_RATE_HZ {
            return bad(format!("sample rate must be {SYNTH_RATE_HZ} Hz, got {}", self.fs));
        }
        if !(self.seconds_per_subject.is_finite() && self.seconds_per_subject >= 1.0) {
            return bad(format!("seconds_per_subject must be at least 1, got {}", self.seconds_per_subject));
        }
        for (name, (lo, hi)) in [
            ("hr_range", self.hr_range),
            ("rr_range", self.rr_range),
            ("sbp_range", self.sbp_range),
            ("dbp_range", self.dbp_range),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
                return bad(format!("{name} [{lo}, {hi}] is empty or invalid"));
            }
        }
        if self.sbp_range.1 < self.dbp_range.0 + 20.0 {
            return bad("no SBP/DBP pair in range is at least 20 mmHg apart".into());
        }
        if let Some((s, d)) = self.bp_override {
            if s < d + 20.0 {
                return bad(format!("SBP {s} must exceed DBP {d} by at least 20 mmHg"));
            }
        }
        for (name, v) in [("hr_override", self.hr_override), ("rr_override", self.rr_override)] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return bad(format!("{name} must be positive, got {v}"));
                }
            }
        }
        if !(self.resp_modulation.is_finite() && (0.0..1.0).contains(&self.resp_modulation)) {
            return bad(format!("resp_modulation must lie in [0, 1), got {}", self.resp_modulation));
        }
        Ok(())
    }

    fn n_samples(&self) -> usize {
        (self.seconds_per_subject * self.fs).round() as usize
    }
}

pub fn subject_rng(cfg: &SynthConfig, subject: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(subject as u64))
}

pub fn subject_id(subject: usize) -> String {
    format!("subject_{subject}")
}

/// Rate trace in events per minute, one value per sample: a walk with one
/// uniform step of at most `max_step` per second, reflected into `range`
/// and linearly interpolated between seconds.
fn rate_walk(rng: &mut ChaCha8Rng, range: (f64, f64), max_step: f64, n: usize, fs: f64) -> Vec<f64> {
    let seconds = (n as f64 / fs).ceil() as usize + 1;
    let mut knots = Vec::with_capacity(seconds + 1);
    let mut r = if range.0 < range.1 { rng.random_range(range.0..range.1) } else { range.0 };
    for _ in 0..=seconds {
        knots.push(r);
        if max_step > 0.0 {
            r += rng.random_range(-max_step..=max_step);
        }
        if r > range.1 {
            r = 2.0 * range.1 - r;
        }
        if r < range.0 {
            r = 2.0 * range.0 - r;
        }
        r = r.clamp(range.0, range.1);
    }
    (0..n)
        .map(|i| {
            let s = i as f64 / fs;
            let k = s.floor() as usize;
            let f = s - k as f64;
            knots[k] * (1.0 - f) + knots[k + 1] * f
        })
        .collect()
}

/// Integrates a rate trace (per minute) into a cycle phase starting at
/// `phase0`; returns the phase per sample.
fn integrate_phase(rate_per_min: &[f64], fs: f64, phase0: f64) -> Vec<f64> {
    let mut phase = phase0;
    rate_per_min
        .iter()
        .map(|r| {
            let p = phase;
            phase += r / 60.0 / fs;
            p
        })
        .collect()
}

/// Times (s) at which the phase crosses an integer, linearly interpolated.
fn crossing_times(phase: &[f64], fs: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 1..phase.len() {
        let (a, b) = (phase[i - 1], phase[i]);
        if b.floor() > a.floor() {
            let target = b.floor();
            let frac = (target - a) / (b - a);
            out.push((i as f64 - 1.0 + frac) / fs);
        }
    }
    out
}

fn heart_beats(cfg: &SynthConfig, rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    let hr = match cfg.hr_override {
        Some(v) => vec![v; n],
        None => rate_walk(rng, cfg.hr_range, MAX_HR_STEP_BPM_PER_S, n, cfg.fs),
    };
    let phase = integrate_phase(&hr, cfg.fs, rng.random_range(0.0..1.0));
    // the beat preceding the first sample still shapes the record's start
    let rate0 = (phase[1] - phase[0]) * cfg.fs;
    let mut beats = vec![-(phase[0] - phase[0].floor()) / rate0];
    beats.extend(crossing_times(&phase, cfg.fs));
    (phase, beats)
}

/// Adds `amp · kernel(t − center)` to `out` for every sample inside
/// `[center − before, center + after]`.
fn add_kernel(out: &mut [f64], fs: f64, center: f64, before: f64, after: f64, amp: f64, kernel: impl Fn(f64) -> f64) {
    let lo = ((center - before) * fs).ceil().max(0.0) as usize;
    let hi = (((center + after) * fs).floor() as isize).min(out.len() as isize - 1);
    if hi < 0 {
        return;
    }
    for (i, v) in out.iter_mut().enumerate().take(hi as usize + 1).skip(lo) {
        *v += amp * kernel(i as f64 / fs - center);
    }
}

fn gaussian_spike(dt: f64) -> f64 {
    (-dt * dt / (2.0 * ECG_SPIKE_SIGMA_S * ECG_SPIKE_SIGMA_S)).exp()
}

/// Unit-peak pulse with its maximum at `dt = 0`: raised-cosine rise over
/// 60 ms and raised-cosine decay over 240 ms.
pub fn ppg_pulse(dt: f64) -> f64 {
    if dt < -PPG_RISE_S || dt > PPG_DECAY_S {
        0.0
    } else if dt <= 0.0 {
        0.5 * (1.0 + (PI * dt / PPG_RISE_S).cos())
    } else {
        0.5 * (1.0 + (PI * dt / PPG_DECAY_S).cos())
    }
}

fn ecg_from_beats(beats: &[f64], n: usize, fs: f64) -> Vec<f64> {
    let mut ecg = vec![0.0; n];
    let reach = 5.0 * ECG_SPIKE_SIGMA_S;
    for &b in beats {
        add_kernel(&mut ecg, fs, b, reach, reach, 1.0, gaussian_spike);
    }
    ecg
}

fn ppg_from_beats(beats: &[f64], n: usize, fs: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut ppg = vec![0.0; n];
    for &b in beats {
        let amp = rng.random_range(0.9..=1.1);
        add_kernel(&mut ppg, fs, b + PPG_DELAY_S, PPG_RISE_S, PPG_DECAY_S, amp, ppg_pulse);
    }
    ppg
}

fn add_noise(x: &mut [f64], std: f64, rng: &mut ChaCha8Rng) {
    let normal = Normal::new(0.0, std).expect("positive std");
    for v in x.iter_mut() {
        *v += normal.sample(rng);
    }
}

fn to_f32(x: Vec<f64>) -> Vec<f32> {
    x.into_iter().map(|v| v as f32).collect()
}

fn make_record(cfg: &SynthConfig, subject: usize, task: Task, target: (&str, Vec<f64>), ppg: Vec<f64>) -> WaveformRecord {
    WaveformRecord::new(
        subject_id(subject),
        task,
        cfg.fs,
        vec![Channel::new("ppg", to_f32(ppg)), Channel::new(target.0, to_f32(target.1))],
    )
    .expect("generated channels are consistent")
}

/// PPG and ECG driven by one heart-rate walk. The PPG pulse of each beat
/// peaks 200 ms after its R-peak.
pub fn gen_cardiac(cfg: &SynthConfig, subject: usize) -> Result<WaveformRecord, SynthError> {
    cfg.validate()?;
    let mut rng = subject_rng(cfg, subject);
    let n = cfg.n_samples();
    let (_, beats) = heart_beats(cfg, &mut rng, n);
    let mut ecg = ecg_from_beats(&beats, n, cfg.fs);
    let mut ppg = ppg_from_beats(&beats, n, cfg.fs, &mut rng);
    add_noise(&mut ecg, ECG_NOISE_STD, &mut rng);
    add_noise(&mut ppg, PPG_NOISE_STD, &mut rng);
    Ok(make_record(cfg, subject, Task::Ecg, ("ecg", ecg), ppg))
}

/// Respiration as a unit sine of the respiratory phase; the PPG pulse train
/// is amplitude-modulated and baseline-shifted by it.
pub fn gen_resp(cfg: &SynthConfig, subject: usize) -> Result<WaveformRecord, SynthError> {
    cfg.validate()?;
    let mut rng = subject_rng(cfg, subject);
    let n = cfg.n_samples();
    let (_, beats) = heart_beats(cfg, &mut rng, n);
    let rr = match cfg.rr_override {
        Some(v) => vec![v; n],
        None => rate_walk(&mut rng, cfg.rr_range, MAX_RR_STEP_BPM_PER_S, n, cfg.fs),
    };
    let phase = integrate_phase(&rr, cfg.fs, rng.random_range(0.0..1.0));
    let resp: Vec<f64> = phase.iter().map(|p| (TAU * p).sin()).collect();
    let pulses = ppg_from_beats(&beats, n, cfg.fs, &mut rng);
    let depth = cfg.resp_modulation;
    let shift = depth * (0.2 / 0.3);
    let mut ppg: Vec<f64> = pulses
        .iter()
        .zip(&resp)
        .map(|(p, r)| p * (1.0 + depth * r) + shift * r)
        .collect();
    add_noise(&mut ppg, PPG_NOISE_STD, &mut rng);
    Ok(make_record(cfg, subject, Task::Resp, ("resp", resp), ppg))
}

/// One cardiac cycle of the pressure shape, normalized to [0, 1]: systolic
/// peak, a secondary bump after the notch and a slow diastolic tail.
pub struct AbpShape {
    table: Vec<f64>,
}

impl AbpShape {
    const COMPONENTS: [(f64, f64, f64); 3] = [(1.0, 0.2, 0.07), (0.3, 0.45, 0.06), (0.15, 0.6, 0.2)];
    const RESOLUTION: usize = 4096;

    pub fn new() -> Self {
        let raw = |x: f64| -> f64 {
            Self::COMPONENTS
                .iter()
                .map(|&(a, mu, s)| {
                    // wrapped so the shape is continuous across beats
                    (-1..=1)
                        .map(|k| {
                            let d = x - mu + k as f64;
                            a * (-d * d / (2.0 * s * s)).exp()
                        })
                        .sum::<f64>()
                })
                .sum()
        };
        let vals: Vec<f64> = (0..=Self::RESOLUTION).map(|i| raw(i as f64 / Self::RESOLUTION as f64)).collect();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Self {
            table: vals.into_iter().map(|v| (v - lo) / (hi - lo)).collect(),
        }
    }

    /// Shape value at cycle fraction `x` (any real; wrapped into [0, 1)).
    pub fn at(&self, x: f64) -> f64 {
        let f = x.rem_euclid(1.0) * Self::RESOLUTION as f64;
        let i = (f.floor() as usize).min(Self::RESOLUTION - 1);
        let w = f - i as f64;
        self.table[i] * (1.0 - w) + self.table[i + 1] * w
    }
}

impl Default for AbpShape {
    fn default() -> Self {
        Self::new()
    }
}

/// Pressure waveform scaled per beat to `[DBP, SBP]` plus an optional slow
/// drift, with a PPG following the same beats 150 ms later.
pub fn gen_abp(cfg: &SynthConfig, subject: usize) -> Result<WaveformRecord, SynthError> {
    cfg.validate()?;
    let mut rng = subject_rng(cfg, subject);
    let n = cfg.n_samples();
    let (phase, beats) = heart_beats(cfg, &mut rng, n);
    let (sbp, dbp) = match cfg.bp_override {
        Some(v) => v,
        None => {
            let sbp_lo = cfg.sbp_range.0.max(cfg.dbp_range.0 + 20.0);
            let sbp = if sbp_lo < cfg.sbp_range.1 { rng.random_range(sbp_lo..cfg.sbp_range.1) } else { sbp_lo };
            let dbp_hi = cfg.dbp_range.1.min(sbp - 20.0);
            let dbp = if cfg.dbp_range.0 < dbp_hi { rng.random_range(cfg.dbp_range.0..dbp_hi) } else { cfg.dbp_range.0 };
            (sbp, dbp)
        }
    };
    let drift_phase = rng.random_range(0.0..TAU);
    let duration = n as f64 / cfg.fs;
    let drift = |i: usize| -> f64 {
        if cfg.bp_drift {
            5.0 * (TAU * i as f64 / cfg.fs / duration + drift_phase).sin()
        } else {
            0.0
        }
    };
    let shape = AbpShape::new();
    let abp: Vec<f64> = phase
        .iter()
        .enumerate()
        .map(|(i, p)| dbp + drift(i) + (sbp - dbp) * shape.at(*p))
        .collect();

    // per-beat jitter, indexed by the integer part of the delayed phase,
    // which starts at most one cycle before the first sample's phase
    let first_beat = phase[0].floor() as i64 - 1;
    let jitter: Vec<f64> = (0..beats.len() + 4).map(|_| rng.random_range(0.9..=1.1)).collect();
    let delay = (ABP_PPG_DELAY_S * cfg.fs).round() as usize;
    let mut ppg: Vec<f64> = (0..n)
        .map(|i| {
            // phase of the pressure wave 150 ms earlier, extrapolated before the start
            let p = if i >= delay {
                phase[i - delay]
            } else {
                phase[0] - (delay - i) as f64 * (phase[1] - phase[0])
            };
            let beat = (p.floor() as i64 - first_beat).clamp(0, jitter.len() as i64 - 1) as usize;
            jitter[beat] * shape.at(p)
        })
        .collect();
    add_noise(&mut ppg, PPG_NOISE_STD, &mut rng);
    Ok(make_record(cfg, subject, Task::Abp, ("abp", abp), ppg))
}

pub fn generate(cfg: &SynthConfig, subject: usize) -> Result<WaveformRecord, SynthError> {
    match cfg.task {
        Task::Ecg => gen_cardiac(cfg, subject),
        Task::Resp => gen_resp(cfg, subject),
        Task::Abp => gen_abp(cfg, subject),
    }
}

/// Writes `out_dir/subject_<idx>.vsr` for every subject.
pub fn write_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<Vec<PathBuf>, SynthError> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|source| SynthError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    (0..cfg.n_subjects)
        .into_par_iter()
        .map(|i| {
            let rec = generate(cfg, i)?;
            let path = out_dir.join(format!("{}.vsr", subject_id(i)));
            write_record(&rec, &path)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pulse_shape() {
        assert_eq!(ppg_pulse(0.0), 1.0);
        assert_eq!(ppg_pulse(-PPG_RISE_S - 1e-9), 0.0);
        assert_eq!(ppg_pulse(PPG_DECAY_S + 1e-9), 0.0);
        assert!(ppg_pulse(-0.03) > 0.4 && ppg_pulse(0.12) > 0.4);
    }

    #[test]
    fn abp_shape_normalized() {
        let s = AbpShape::new();
        let vals: Vec<f64> = (0..1000).map(|i| s.at(i as f64 / 1000.0)).collect();
        let hi = vals.iter().cloned().fold(f64::MIN, f64::max);
        let lo = vals.iter().cloned().fold(f64::MAX, f64::min);
        assert!(hi > 0.999 && hi <= 1.0);
        assert!(lo >= 0.0 && lo < 1e-3);
        assert!((s.at(0.0) - s.at(1.0)).abs() < 1e-12);
    }

    #[test]
    fn rate_walk_bounded_and_smooth() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = rate_walk(&mut rng, (50.0, 120.0), 2.0, 128 * 600, 128.0);
        assert!(r.iter().all(|v| (50.0..=120.0).contains(v)));
        for s in 1..599 {
            assert!((r[s * 128] - r[(s - 1) * 128]).abs() <= 2.0 + 1e-9);
        }
    }

    #[test]
    fn crossings_of_constant_rate() {
        let phase = integrate_phase(&vec![60.0; 128 * 5], 128.0, 0.5);
        let t = crossing_times(&phase, 128.0);
        assert_eq!(t.len(), 5);
        for (k, v) in t.iter().enumerate() {
            assert!((v - (0.5 + k as f64)).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = SynthConfig::new(Task::Ecg, 1, 10.0, 0);
        c.hr_range = (120.0, 50.0);
        assert!(gen_cardiac(&c, 0).is_err());
        let mut c = SynthConfig::new(Task::Abp, 1, 10.0, 0);
        c.bp_override = Some((100.0, 90.0));
        assert!(gen_abp(&c, 0).is_err());
        let mut c = SynthConfig::new(Task::Ecg, 1, 10.0, 0);
        c.fs = 100.0;
        assert!(c.validate().is_err());
    }
}
