use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use vitalflow::dsp::{preprocess_signal, resample_record, ChannelRole, TARGET_RATE_HZ};
use vitalflow::record::{read_delimited_text, write_record, Task, WaveformRecord};

use crate::commands::echo_config;
use crate::dataset::{create_dir, files_with_ext, load_record, RECORD_EXT};
use crate::failure::{fail, CmdResult, WithCode, EXIT_IO, EXIT_SCHEMA, EXIT_USAGE};
use crate::settings::{DataSettings, Settings};
use crate::ConfigArgs;

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// A record, a comma-separated text file, or a directory of either.
    #[arg(long)]
    input: PathBuf,
    /// Output directory for the processed records.
    #[arg(long)]
    out: PathBuf,
    /// Sample rate of text inputs in Hz; their task is `data.task`.
    #[arg(long)]
    rate: Option<f64>,
    #[command(flatten)]
    config: ConfigArgs,
}

pub fn task_role(task: Task) -> ChannelRole {
    match task {
        Task::Ecg => ChannelRole::Ecg,
        Task::Resp => ChannelRole::Resp,
        Task::Abp => ChannelRole::Abp,
    }
}

/// Role of the target channel; its label, when it names a role, must agree
/// with the record's task.
fn target_role(label: &str, task: Task) -> CmdResult<ChannelRole> {
    let expected = task_role(task);
    match ChannelRole::from_label(label) {
        Some(r) if r != expected => fail(
            EXIT_SCHEMA,
            format!("target channel '{label}' is a {r:?} channel but the record task is {task}"),
        ),
        _ => Ok(expected),
    }
}

pub fn process_record(rec: &WaveformRecord, data: &DataSettings) -> CmdResult<WaveformRecord> {
    if let Some(task) = data.task.filter(|&t| t != rec.task) {
        return fail(
            EXIT_SCHEMA,
            format!("subject '{}' is a {} record but data.task is {task}", rec.subject_id, rec.task),
        );
    }
    let target = data.target_label_for(rec.task);
    let role = target_role(&target, rec.task)?;
    for label in [data.ppg_label.as_str(), target.as_str()] {
        if rec.channel(label).is_none() {
            let have: Vec<&str> = rec.channels.iter().map(|c| c.label.as_str()).collect();
            return fail(
                EXIT_SCHEMA,
                format!(
                    "subject '{}' has no '{label}' channel (channels: {})",
                    rec.subject_id,
                    have.join(", ")
                ),
            );
        }
    }
    let mut out = resample_record(rec, TARGET_RATE_HZ)
        .with_context(|| format!("cannot resample subject '{}'", rec.subject_id))
        .code(EXIT_SCHEMA)?;
    for (label, role) in [(data.ppg_label.as_str(), ChannelRole::Ppg), (target.as_str(), role)] {
        let ch = out.channel_mut(label).expect("checked above");
        ch.samples = preprocess_signal(&ch.samples, role, TARGET_RATE_HZ)
            .with_context(|| format!("cannot filter '{label}' of subject '{}'", rec.subject_id))
            .code(EXIT_SCHEMA)?;
    }
    Ok(out)
}

fn inputs(path: &Path) -> CmdResult<(Vec<PathBuf>, Vec<PathBuf>)> {
    if path.is_dir() {
        return Ok((files_with_ext(path, RECORD_EXT)?, files_with_ext(path, "csv")?));
    }
    if !path.exists() {
        return fail(EXIT_IO, format!("input {} does not exist", path.display()));
    }
    let is_text = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    Ok(if is_text {
        (Vec::new(), vec![path.to_path_buf()])
    } else {
        (vec![path.to_path_buf()], Vec::new())
    })
}

pub fn run(args: PreprocessArgs) -> CmdResult {
    let settings = Settings::load(args.config.config.as_deref(), &args.config.sets)?;
    let data = &settings.data;
    let (records, texts) = inputs(&args.input)?;
    if records.is_empty() && texts.is_empty() {
        return fail(EXIT_IO, format!("no .vsr or .csv inputs in {}", args.input.display()));
    }
    let text_task = match (texts.is_empty(), args.rate, data.task) {
        (true, _, _) => Task::Ecg,
        (false, Some(_), Some(t)) => t,
        _ => return fail(EXIT_USAGE, "text inputs need --rate and an explicit data.task"),
    };

    let mut loaded = Vec::new();
    for path in &records {
        loaded.push(load_record(path)?);
    }
    for path in &texts {
        let subject = path.file_stem().and_then(|s| s.to_str()).unwrap_or("subject").to_string();
        let target = data.target_label_for(text_task);
        let rec = read_delimited_text(
            path,
            args.rate.expect("checked above"),
            &[data.ppg_label.as_str(), target.as_str()],
            &subject,
            text_task,
        )
        .with_context(|| format!("cannot read {}", path.display()))
        .code(EXIT_IO)?;
        loaded.push(rec);
    }

    create_dir(&args.out)?;
    for rec in &loaded {
        let out = process_record(rec, data)?;
        let path = args.out.join(format!("{}.{RECORD_EXT}", out.subject_id));
        write_record(&out, &path)
            .with_context(|| format!("cannot write {}", path.display()))
            .code(EXIT_IO)?;
        println!(
            "{}: {} samples at {} Hz -> {} samples at {} Hz, {}",
            rec.subject_id,
            rec.n_samples(),
            rec.sample_rate_hz,
            out.n_samples(),
            out.sample_rate_hz,
            path.display()
        );
    }
    echo_config(&args.out, &settings.flat)
}
