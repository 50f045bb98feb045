use num_complex::Complex;
use proptest::collection::vec;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitalflow::config::FlatConfig;
use vitalflow::record::{
    decode_record, encode_record, split_subjects, window_count, window_pairs, Channel, Task, WaveformRecord,
};
use vitalflow::ssm::{scan_parallel, scan_sequential, StateSeq};

fn task() -> impl Strategy<Value = Task> {
    prop_oneof![Just(Task::Ecg), Just(Task::Resp), Just(Task::Abp)]
}

fn waveform() -> impl Strategy<Value = WaveformRecord> {
    (task(), 1usize..4, 0usize..200, "[a-z0-9_]{1,12}", 1.0f64..1000.0).prop_flat_map(
        |(task, n_ch, n, id, rate)| {
            vec(vec(-1e6f32..1e6, n), n_ch).prop_map(move |chans| {
                let channels = chans
                    .into_iter()
                    .enumerate()
                    .map(|(i, s)| Channel::new(format!("ch{i}"), s))
                    .collect();
                WaveformRecord::new(id.clone(), task, rate, channels).unwrap()
            })
        },
    )
}

proptest! {
    #[test]
    fn record_bytes_round_trip(rec in waveform()) {
        let bytes = encode_record(&rec).unwrap();
        let back = decode_record(&bytes).unwrap();
        prop_assert_eq!(&back, &rec);
        prop_assert_eq!(encode_record(&back).unwrap(), bytes);
    }

    #[test]
    fn truncated_bytes_never_decode(rec in waveform(), cut in 1usize..64) {
        let bytes = encode_record(&rec).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(decode_record(&bytes[..keep]).is_err());
    }

    #[test]
    fn splits_partition_subjects(n in 3usize..60, a in 1u32..10, b in 1u32..4, c in 1u32..4, seed: u64) {
        let ids: Vec<String> = (0..n).map(|i| format!("s{i:03}")).collect();
        let split = split_subjects(&ids, (a, b, c), seed).unwrap();
        prop_assert!(!split.train.is_empty() && !split.val.is_empty() && !split.test.is_empty());
        let mut all: Vec<String> = split.train.iter().chain(&split.val).chain(&split.test).cloned().collect();
        all.sort();
        prop_assert_eq!(all, ids.clone());
        prop_assert_eq!(split_subjects(&ids, (a, b, c), seed).unwrap(), split);
    }

    #[test]
    fn windows_match_count_and_source(n in 1usize..400, window in 1usize..100, stride in 1usize..50) {
        prop_assume!(window <= n);
        let ppg: Vec<f32> = (0..n).map(|i| i as f32).collect();
        let target: Vec<f32> = (0..n).map(|i| -(i as f32)).collect();
        let rec = WaveformRecord::new(
            "s", Task::Ecg, 128.0,
            vec![Channel::new("ppg", ppg), Channel::new("ecg", target)],
        ).unwrap();
        let pairs = window_pairs(&rec, "ppg", "ecg", window, stride).unwrap();
        prop_assert_eq!(pairs.len(), window_count(n, window, stride));
        for (i, p) in pairs.iter().enumerate() {
            prop_assert_eq!(p.start_index, i * stride);
            prop_assert_eq!(p.ppg[0] as usize, p.start_index);
            prop_assert_eq!(p.target[window - 1], -((p.start_index + window - 1) as f32));
        }
        if let Some(last) = pairs.last() {
            prop_assert!(last.start_index + window + stride > n);
        }
    }

    #[test]
    fn scans_agree(
        poles in vec((0.0f64..0.999, -3.2f64..3.2), 1..5),
        len in 1usize..300,
        seed: u64,
    ) {
        let a: Vec<Complex<f64>> = poles.iter().map(|&(r, th)| Complex::from_polar(r, th)).collect();
        let mut u = StateSeq::<f64>::zeros(a.len(), len);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut u.data {
            *v = Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        }
        let seq = scan_sequential(&a, &u);
        let par = scan_parallel(&a, &u);
        for (x, y) in seq.data.iter().zip(&par.data) {
            prop_assert!((x - y).norm() <= 1e-9 * (1.0 + x.norm()), "{} vs {}", x, y);
        }
    }

    #[test]
    fn flat_config_round_trips(entries in vec(("[a-z]{1,6}\\.[a-z_]{1,8}", "[A-Za-z0-9_.+-]{1,12}"), 0..12)) {
        let mut cfg = FlatConfig::new();
        for (k, v) in &entries {
            cfg.set(k.clone(), v);
        }
        let back = FlatConfig::parse(&cfg.to_string()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
