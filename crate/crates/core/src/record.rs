//! Waveform records, the VSR1 binary container, text ingestion, subject
//! splits and windowing into training pairs.
//!
//! VSR1 layout (little-endian):
//!
//! ```text
//! "VSR1" | version u16 = 1 | task u8 | sample_rate_hz f64
//! | subject_id (u16 len + utf8) | channel count u8
//! | per channel: label (u16 len + utf8)
//! | n_samples u64 | payload: f32, channel-major
//! ```

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const VSR1_MAGIC: &[u8; 4] = b"VSR1";
pub const VSR1_VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum RecordError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes {0:?}, expected \"VSR1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown task code {0}")]
    UnknownTask(u8),
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("invalid record: {0}")]
    Invalid(String),
    #[error("non-finite sample in channel '{channel}' at index {index}")]
    NonFinite { channel: String, index: usize },
    #[error("missing column '{0}'")]
    MissingColumn(String),
    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("missing channel '{0}'")]
    MissingChannel(String),
    #[error("window length {window} exceeds record length {n_samples}")]
    WindowTooLong { window: usize, n_samples: usize },
    #[error("invalid split: {0}")]
    Split(String),
}

/// Reconstruction target of a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Ecg,
    Resp,
    Abp,
}

impl Task {
    pub fn code(self) -> u8 {
        match self {
            Task::Ecg => 0,
            Task::Resp => 1,
            Task::Abp => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, RecordError> {
        match code {
            0 => Ok(Task::Ecg),
            1 => Ok(Task::Resp),
            2 => Ok(Task::Abp),
            other => Err(RecordError::UnknownTask(other)),
        }
    }

    /// Conventional label of the target channel for this task.
    pub fn target_label(self) -> &'static str {
        match self {
            Task::Ecg => "ecg",
            Task::Resp => "resp",
            Task::Abp => "abp",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.target_label())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ecg" => Ok(Task::Ecg),
            "resp" => Ok(Task::Resp),
            "abp" => Ok(Task::Abp),
            other => Err(format!("unknown task '{other}' (expected ecg, resp or abp)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub label: String,
    pub samples: Vec<f32>,
}

impl Channel {
    pub fn new(label: impl Into<String>, samples: Vec<f32>) -> Self {
        Self {
            label: label.into(),
            samples,
        }
    }
}

/// A labeled multi-channel recording of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveformRecord {
    pub subject_id: String,
    pub task: Task,
    pub sample_rate_hz: f64,
    pub channels: Vec<Channel>,
}

impl WaveformRecord {
    pub fn new(
        subject_id: impl Into<String>,
        task: Task,
        sample_rate_hz: f64,
        channels: Vec<Channel>,
    ) -> Result<Self, RecordError> {
        let record = Self {
            subject_id: subject_id.into(),
            task,
            sample_rate_hz,
            channels,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn n_samples(&self) -> usize {
        self.channels.first().map_or(0, |c| c.samples.len())
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.sample_rate_hz
    }

    pub fn channel(&self, label: &str) -> Option<&Channel> {
        self.channels.iter().find(|c| c.label == label)
    }

    pub fn channel_mut(&mut self, label: &str) -> Option<&mut Channel> {
        self.channels.iter_mut().find(|c| c.label == label)
    }

    pub fn samples(&self, label: &str) -> Result<&[f32], RecordError> {
        self.channel(label)
            .map(|c| c.samples.as_slice())
            .ok_or_else(|| RecordError::MissingChannel(label.to_string()))
    }

    pub fn validate(&self) -> Result<(), RecordError> {
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return Err(RecordError::Invalid(format!(
                "sample rate must be positive, got {}",
                self.sample_rate_hz
            )));
        }
        if self.subject_id.len() > u16::MAX as usize {
            return Err(RecordError::Invalid("subject id too long".into()));
        }
        if self.channels.len() > u8::MAX as usize {
            return Err(RecordError::Invalid("more than 255 channels".into()));
        }
        let n = self.n_samples();
        let mut seen = HashSet::new();
        for ch in &self.channels {
            if !seen.insert(ch.label.as_str()) {
                return Err(RecordError::Invalid(format!(
                    "duplicate channel label '{}'",
                    ch.label
                )));
            }
            if ch.label.len() > u16::MAX as usize {
                return Err(RecordError::Invalid("channel label too long".into()));
            }
            if ch.samples.len() != n {
                return Err(RecordError::Invalid(format!(
                    "channel '{}' has {} samples, expected {n}",
                    ch.label,
                    ch.samples.len()
                )));
            }
            if let Some(index) = ch.samples.iter().position(|v| !v.is_finite()) {
                return Err(RecordError::NonFinite {
                    channel: ch.label.clone(),
                    index,
                });
            }
        }
        Ok(())
    }
}

pub fn encode_record(record: &WaveformRecord) -> Result<Vec<u8>, RecordError> {
    record.validate()?;
    let n = record.n_samples();
    let mut buf = Vec::with_capacity(64 + 4 * n * record.channels.len());
    buf.extend_from_slice(VSR1_MAGIC);
    buf.extend_from_slice(&VSR1_VERSION.to_le_bytes());
    buf.push(record.task.code());
    buf.extend_from_slice(&record.sample_rate_hz.to_le_bytes());
    put_str(&mut buf, &record.subject_id);
    buf.push(record.channels.len() as u8);
    for ch in &record.channels {
        put_str(&mut buf, &ch.label);
    }
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    for ch in &record.channels {
        for v in &ch.samples {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u16).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], RecordError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                RecordError::Truncated(format!(
                    "{what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8, RecordError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, RecordError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, RecordError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64, RecordError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String, RecordError> {
        let len = self.u16(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| RecordError::Invalid(format!("{what} is not valid UTF-8")))
    }
}

pub fn decode_record(bytes: &[u8]) -> Result<WaveformRecord, RecordError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4, "magic")?.try_into().unwrap();
    if &magic != VSR1_MAGIC {
        return Err(RecordError::BadMagic(magic));
    }
    let version = cur.u16("version")?;
    if version != VSR1_VERSION {
        return Err(RecordError::UnsupportedVersion(version));
    }
    let task = Task::from_code(cur.u8("task")?)?;
    let sample_rate_hz = cur.f64("sample rate")?;
    let subject_id = cur.string("subject id")?;
    let n_channels = cur.u8("channel count")? as usize;
    let labels = (0..n_channels)
        .map(|_| cur.string("channel label"))
        .collect::<Result<Vec<_>, _>>()?;
    let n = cur.u64("n_samples")?;
    let n = usize::try_from(n).map_err(|_| RecordError::Truncated("n_samples overflow".into()))?;
    let payload_len = n
        .checked_mul(4)
        .and_then(|b| b.checked_mul(n_channels))
        .ok_or_else(|| RecordError::Truncated("payload size overflow".into()))?;
    let payload = cur.take(payload_len, "payload")?;
    let channels = labels
        .into_iter()
        .enumerate()
        .map(|(c, label)| {
            let chunk = &payload[c * n * 4..(c + 1) * n * 4];
            let samples = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Channel { label, samples }
        })
        .collect();
    WaveformRecord::new(subject_id, task, sample_rate_hz, channels)
}

pub fn write_record(record: &WaveformRecord, path: impl AsRef<Path>) -> Result<(), RecordError> {
    let bytes = encode_record(record)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn read_record(path: impl AsRef<Path>) -> Result<WaveformRecord, RecordError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_record(&bytes)
}

/// Reads a comma-separated file with one header row and keeps the requested
/// columns, in the order given, as channels.
pub fn read_delimited_text(
    path: impl AsRef<Path>,
    sample_rate_hz: f64,
    column_labels: &[&str],
    subject_id: &str,
    task: Task,
) -> Result<WaveformRecord, RecordError> {
    let text = fs::read_to_string(path)?;
    parse_delimited_text(&text, sample_rate_hz, column_labels, subject_id, task)
}

pub fn parse_delimited_text(
    text: &str,
    sample_rate_hz: f64,
    column_labels: &[&str],
    subject_id: &str,
    task: Task,
) -> Result<WaveformRecord, RecordError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| RecordError::Invalid("empty file, expected a header row".into()))?
        .split(',')
        .map(str::trim)
        .collect();
    let columns = column_labels
        .iter()
        .map(|&want| {
            header
                .iter()
                .position(|&h| h == want)
                .ok_or_else(|| RecordError::MissingColumn(want.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut data: Vec<Vec<f32>> = vec![Vec::new(); columns.len()];
    for (row_idx, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        // row numbers are 1-based and count the header
        let row = row_idx + 2;
        for (out, (&col, &label)) in data.iter_mut().zip(columns.iter().zip(column_labels)) {
            let cell = cells.get(col).ok_or_else(|| RecordError::Parse {
                row,
                column: label.to_string(),
                message: "missing cell".into(),
            })?;
            let value: f32 = cell.parse().map_err(|_| RecordError::Parse {
                row,
                column: label.to_string(),
                message: format!("'{cell}' is not a number"),
            })?;
            if !value.is_finite() {
                return Err(RecordError::Parse {
                    row,
                    column: label.to_string(),
                    message: format!("'{cell}' is not finite"),
                });
            }
            out.push(value);
        }
    }
    let channels = column_labels
        .iter()
        .zip(data)
        .map(|(&l, s)| Channel::new(l, s))
        .collect();
    WaveformRecord::new(subject_id, task, sample_rate_hz, channels)
}

/// Subject-disjoint train/val/test partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Shuffles subjects with `seed` and cuts contiguous train/val/test blocks.
///
/// Val and test each receive `max(1, round(share))` subjects; train takes
/// the remainder.
pub fn split_subjects(
    subject_ids: &[String],
    ratio: (u32, u32, u32),
    seed: u64,
) -> Result<DatasetSplit, RecordError> {
    let (a, b, c) = ratio;
    if a == 0 || b == 0 || c == 0 {
        return Err(RecordError::Split("ratio parts must be positive".into()));
    }
    let mut ids: Vec<String> = subject_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() != subject_ids.len() {
        return Err(RecordError::Split("duplicate subject ids".into()));
    }
    let n = ids.len();
    if n < 3 {
        return Err(RecordError::Split(format!(
            "need at least 3 subjects for a 3-way split, got {n}"
        )));
    }
    let total = (a + b + c) as f64;
    let share = |p: u32| ((n as f64 * p as f64 / total).round() as usize).max(1);
    let mut n_val = share(b);
    let mut n_test = share(c);
    // keep at least one training subject
    while n_val + n_test > n - 1 {
        if n_val >= n_test && n_val > 1 {
            n_val -= 1;
        } else if n_test > 1 {
            n_test -= 1;
        } else {
            break;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_train = n - n_val - n_test;
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    Ok(DatasetSplit {
        train: ids,
        val,
        test,
    })
}

/// Aligned (PPG, target) windows of length `K` cut from one record.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    pub ppg: Vec<f32>,
    pub target: Vec<f32>,
    pub subject_id: String,
    pub start_index: usize,
}

impl WindowPair {
    pub fn len(&self) -> usize {
        self.ppg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ppg.is_empty()
    }
}

/// Number of full windows: `floor((n - K) / stride) + 1` for `n >= K`.
pub fn window_count(n_samples: usize, window: usize, stride: usize) -> usize {
    if window == 0 || stride == 0 || n_samples < window {
        0
    } else {
        (n_samples - window) / stride + 1
    }
}

pub fn window_pairs(
    record: &WaveformRecord,
    ppg_label: &str,
    target_label: &str,
    window: usize,
    stride: usize,
) -> Result<Vec<WindowPair>, RecordError> {
    let ppg = record.samples(ppg_label)?;
    let target = record.samples(target_label)?;
    if window == 0 || stride == 0 {
        return Err(RecordError::Invalid(
            "window and stride must be at least 1".into(),
        ));
    }
    let n = record.n_samples();
    if window > n {
        return Err(RecordError::WindowTooLong {
            window,
            n_samples: n,
        });
    }
    Ok((0..window_count(n, window, stride))
        .map(|i| {
            let start = i * stride;
            WindowPair {
                ppg: ppg[start..start + window].to_vec(),
                target: target[start..start + window].to_vec(),
                subject_id: record.subject_id.clone(),
                start_index: start,
            }
        })
        .collect())
}
