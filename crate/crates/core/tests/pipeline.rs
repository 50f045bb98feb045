use vitalflow::dsp::{preprocess_signal, ChannelRole};
use vitalflow::flow::{reconstruct_windows, SamplerConfig};
use vitalflow::metrics::{bp_error, detect_r_peaks, dominant_frequency, hr_error, rr_error, RR_BAND_HZ};
use vitalflow::network::{FlowModel, ModelConfig};
use vitalflow::record::{window_pairs, Task, WaveformRecord, WindowPair};
use vitalflow::synth::{generate, SynthConfig};
use vitalflow::train::{ablation_variants, train, Ablation, TrainConfig};

const FS: f64 = 128.0;

fn record(task: Task, seconds: f64, seed: u64, tweak: impl FnOnce(&mut SynthConfig)) -> WaveformRecord {
    let mut cfg = SynthConfig::new(task, 4, seconds, seed);
    tweak(&mut cfg);
    generate(&cfg, 1).unwrap()
}

fn as_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

#[test]
fn constant_heart_rate_closes_the_loop() {
    let rec = record(Task::Ecg, 60.0, 3, |c| c.hr_override = Some(72.0));
    let ecg = rec.samples("ecg").unwrap();
    let peaks = detect_r_peaks(ecg, FS).unwrap();
    assert!((71..=73).contains(&peaks.len()), "{} peaks", peaks.len());
    assert_eq!(hr_error(ecg, ecg, FS, 8.0).unwrap().mae, Some(0.0));
}

#[test]
fn generators_are_deterministic() {
    for task in [Task::Ecg, Task::Resp, Task::Abp] {
        let a = record(task, 20.0, 9, |_| {});
        let b = record(task, 20.0, 9, |_| {});
        assert_eq!(a, b);
        let c = record(task, 20.0, 10, |_| {});
        assert_ne!(a.samples("ppg").unwrap(), c.samples("ppg").unwrap());
    }
}

#[test]
fn ppg_lags_ecg_by_two_hundred_ms() {
    let rec = record(Task::Ecg, 60.0, 4, |_| {});
    let centred = |x: &[f32]| {
        let v = as_f64(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.into_iter().map(|s| s - m).collect::<Vec<_>>()
    };
    let ecg = centred(rec.samples("ecg").unwrap());
    let ppg = centred(rec.samples("ppg").unwrap());
    let n = ecg.len();
    let max_lag = 64usize;
    let best = (0..=max_lag)
        .max_by(|&a, &b| {
            let c = |lag: usize| (0..n - max_lag).map(|i| ecg[i] * ppg[i + lag]).sum::<f64>();
            c(a).total_cmp(&c(b))
        })
        .unwrap();
    let ms = best as f64 / FS * 1000.0;
    assert!((ms - 200.0).abs() <= 20.0, "lag {ms} ms");
}

#[test]
fn respiration_closure_and_negative_control() {
    let rec = record(Task::Resp, 120.0, 5, |c| c.rr_override = Some(12.0));
    let resp = rec.samples("resp").unwrap();
    let report = rr_error(resp, resp, FS, 60.0).unwrap();
    assert_eq!(report.mae, Some(0.0));
    for w in &report.per_window {
        assert!((w.truth - 12.0).abs() <= 0.5, "{}", w.truth);
    }

    // envelope: PPG after the cardiac bandpass, rectified and smoothed over a beat
    let envelope_peak = |rec: &WaveformRecord| {
        let filtered = preprocess_signal(rec.samples("ppg").unwrap(), ChannelRole::Ppg, FS).unwrap();
        let rect: Vec<f64> = filtered.iter().map(|v| v.abs() as f64).collect();
        let w = FS as usize;
        let smooth: Vec<f64> = rect.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect();
        (dominant_frequency(&smooth, FS, RR_BAND_HZ), power_at_breath_rate(&smooth))
    };
    let (f, modulated_power) = envelope_peak(&rec);
    assert!((f.unwrap() * 60.0 - 12.0).abs() <= 0.5);
    let flat = record(Task::Resp, 120.0, 5, |c| {
        c.rr_override = Some(12.0);
        c.resp_modulation = 0.0;
    });
    let (_, flat_power) = envelope_peak(&flat);
    assert!(flat_power < 0.05 * modulated_power, "{flat_power} vs {modulated_power}");
}

/// Power at 12 breaths per minute (0.2 Hz), by direct DFT.
fn power_at_breath_rate(x: &[f64]) -> f64 {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    let f = 0.2;
    let (mut re, mut im) = (0.0, 0.0);
    for (i, v) in x.iter().enumerate() {
        let ph = std::f64::consts::TAU * f * i as f64 / FS;
        re += (v - m) * ph.cos();
        im += (v - m) * ph.sin();
    }
    (re * re + im * im) / x.len() as f64
}

#[test]
fn blood_pressure_closure_and_bounds() {
    let rec = record(Task::Abp, 64.0, 6, |c| {
        c.bp_override = Some((120.0, 80.0));
        c.bp_drift = false;
    });
    let abp = rec.samples("abp").unwrap();
    let (s, d) = bp_error(abp, abp, FS, 8.0).unwrap();
    assert_eq!((s.mae, d.mae), (Some(0.0), Some(0.0)));
    for w in &s.per_window {
        assert!((w.truth - 120.0).abs() <= 0.5, "{}", w.truth);
    }
    for w in &d.per_window {
        assert!((w.truth - 80.0).abs() <= 0.5, "{}", w.truth);
    }

    let cfg = SynthConfig::new(Task::Abp, 30, 16.0, 2);
    for i in 0..30 {
        let rec = generate(&cfg, i).unwrap();
        let (s, d) = bp_error(rec.samples("abp").unwrap(), rec.samples("abp").unwrap(), FS, 16.0).unwrap();
        // drift moves both ends together
        assert!(s.per_window[0].truth - d.per_window[0].truth >= 20.0 - 1e-3);
    }
}

#[test]
fn rate_changes_are_measured() {
    let slow = record(Task::Ecg, 64.0, 7, |c| c.hr_override = Some(60.0));
    let fast = record(Task::Ecg, 64.0, 7, |c| c.hr_override = Some(90.0));
    let mae = hr_error(fast.samples("ecg").unwrap(), slow.samples("ecg").unwrap(), FS, 8.0)
        .unwrap()
        .mae
        .unwrap();
    assert!((mae - 30.0).abs() <= 3.0, "{mae}");
}

fn cardiac_pairs(subjects: std::ops::Range<usize>, window: usize, stride: usize) -> Vec<WindowPair> {
    let cfg = SynthConfig::new(Task::Ecg, 6, 48.0, 1);
    subjects
        .flat_map(|i| {
            let raw = generate(&cfg, i).unwrap();
            let mut rec = raw.clone();
            for (label, role) in [("ppg", ChannelRole::Ppg), ("ecg", ChannelRole::Ecg)] {
                let ch = rec.channel_mut(label).unwrap();
                ch.samples = preprocess_signal(&ch.samples, role, FS).unwrap();
            }
            window_pairs(&rec, "ppg", "ecg", window, stride).unwrap()
        })
        .collect()
}

fn toy_config() -> TrainConfig {
    TrainConfig {
        model: ModelConfig::small(1, 8, 8, 128),
        batch_size: 8,
        max_epochs: 4,
        lr: 3e-3,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn training_reduces_loss_and_is_repeatable() {
    let train_pairs = cardiac_pairs(0..4, 128, 64);
    let val_pairs = cardiac_pairs(4..5, 128, 128);
    let cfg = toy_config();
    let a = train(&cfg, &train_pairs, &val_pairs).unwrap();
    assert_eq!(a.history.len(), 4);
    assert!(a.history[3].train_loss < a.history[0].train_loss, "{:?}", a.history);

    let b = train(&cfg, &train_pairs, &val_pairs).unwrap();
    assert_eq!(a.best.params, b.best.params);
    for (x, y) in a.history.iter().zip(&b.history) {
        assert_eq!((x.train_loss, x.val_loss), (y.train_loss, y.val_loss));
    }
}

#[test]
fn ablations_change_outputs_except_ignored_condition() {
    let variants = ablation_variants(&TrainConfig {
        model: ModelConfig::small(2, 8, 8, 64),
        ..TrainConfig::default()
    });
    let x: Vec<f32> = (0..64).map(|i| (i as f32 * 0.3).sin()).collect();
    let z: Vec<f32> = (0..64).map(|i| (i as f32 * 0.2).cos()).collect();
    let z2: Vec<f32> = z.iter().map(|v| 2.0 - v).collect();
    // perturb every parameter so neutral-initialized heads are active
    let perturbed = |cfg: &ModelConfig| {
        let mut m = FlowModel::<f32>::init(cfg.clone(), 3).unwrap();
        for (i, (_, t)) in m.params.iter_mut().enumerate() {
            for (j, v) in t.data.iter_mut().enumerate() {
                *v += 0.05 * (((i * 31 + j * 7) % 13) as f32 / 13.0 - 0.5);
            }
        }
        m
    };
    let full = perturbed(&variants[0].1.model).forward(&x, &z, 0.4).unwrap();
    for (ablation, cfg) in &variants[1..] {
        let m = perturbed(&cfg.model);
        let out = m.forward(&x, &z, 0.4).unwrap();
        assert_ne!(out, full, "{}", ablation.name());
        if *ablation == Ablation::NoPpgCond {
            assert_eq!(out, m.forward(&x, &z2, 0.4).unwrap());
            let sampler = SamplerConfig {
                steps: 3,
                ..SamplerConfig::default()
            };
            let a = reconstruct_windows(&m, &[z.clone()], &sampler).unwrap();
            let b = reconstruct_windows(&m, &[z2.clone()], &sampler).unwrap();
            assert_eq!(a, b);
        }
    }
}
