use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use vitalflow::checkpoint::save_checkpoint;
use vitalflow::dsp::TARGET_RATE_HZ;
use vitalflow::record::{window_pairs, Task, WaveformRecord, WindowPair};
use vitalflow::train::{history_csv, train_with, TrainError};

use crate::commands::echo_config;
use crate::dataset::{create_dir, load_dir, read_manifest, select, write_text};
use crate::failure::{fail, CmdResult, Failure, WithCode, EXIT_IO, EXIT_SCHEMA, EXIT_SHAPE, EXIT_TRAIN, EXIT_USAGE};
use crate::settings::{DataSettings, Settings};
use crate::ConfigArgs;

pub const CHECKPOINT_FILE: &str = "model.pgw";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of preprocessed records (sets `data.dir`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory holding train.txt and val.txt; defaults to the data directory.
    #[arg(long)]
    splits: Option<PathBuf>,
    /// Output directory for the checkpoint and training history.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

/// Checks that a record fits the configured task and cuts its windows.
pub fn record_windows(
    rec: &WaveformRecord,
    data: &DataSettings,
    window: usize,
    stride: usize,
) -> CmdResult<Vec<WindowPair>> {
    if let Some(task) = data.task.filter(|&t| t != rec.task) {
        return fail(
            EXIT_SCHEMA,
            format!("subject '{}' is a {} record but data.task is {task}", rec.subject_id, rec.task),
        );
    }
    if rec.sample_rate_hz != TARGET_RATE_HZ {
        return fail(
            EXIT_SCHEMA,
            format!(
                "subject '{}' is sampled at {} Hz; run preprocess first",
                rec.subject_id, rec.sample_rate_hz
            ),
        );
    }
    let target = data.target_label_for(rec.task);
    for label in [data.ppg_label.as_str(), target.as_str()] {
        if rec.channel(label).is_none() {
            return fail(EXIT_SCHEMA, format!("subject '{}' has no '{label}' channel", rec.subject_id));
        }
    }
    if rec.n_samples() < window {
        return fail(
            EXIT_SHAPE,
            format!(
                "subject '{}' has {} samples, fewer than the window of {window}",
                rec.subject_id,
                rec.n_samples()
            ),
        );
    }
    window_pairs(rec, &data.ppg_label, &target, window, stride).code(EXIT_SHAPE)
}

/// The single task shared by `records`.
pub fn common_task<'a>(records: impl IntoIterator<Item = &'a WaveformRecord>) -> CmdResult<Task> {
    let mut found: Option<Task> = None;
    for rec in records {
        match found {
            None => found = Some(rec.task),
            Some(t) if t != rec.task => {
                return fail(
                    EXIT_SCHEMA,
                    format!("records mix {t} and {} tasks; set data.task", rec.task),
                )
            }
            _ => {}
        }
    }
    found.ok_or_else(|| Failure::new(EXIT_IO, "no records found"))
}

fn train_failure(e: TrainError) -> Failure {
    let code = match e {
        TrainError::NonFinite { .. } | TrainError::NonFiniteVal { .. } => EXIT_TRAIN,
        TrainError::Window { .. } => EXIT_SHAPE,
        TrainError::EmptyTrain | TrainError::EmptyVal => EXIT_SCHEMA,
        TrainError::Config(_) | TrainError::Model(_) | TrainError::Parse(_) => EXIT_USAGE,
    };
    Failure { code, error: e.into() }
}

pub fn run(args: TrainArgs) -> CmdResult {
    let mut sets = args.config.sets.clone();
    if let Some(d) = &args.data {
        sets.push(format!("data.dir={}", d.display()));
    }
    let mut settings = Settings::load(args.config.config.as_deref(), &sets)?;
    if settings.data.dir.is_empty() {
        return fail(EXIT_USAGE, "no data directory: pass --data or set data.dir");
    }
    let data_dir = PathBuf::from(&settings.data.dir);
    let split_dir = args.splits.clone().unwrap_or_else(|| data_dir.clone());
    let records = load_dir(&data_dir)?;
    let k = settings.train.model.window;
    if settings.data.task.is_none() {
        let task = common_task(records.values())?;
        settings.data.task = Some(task);
        settings.flat.set("data.task", task);
    }

    let mut pairs = Vec::new();
    for (manifest, stride) in [
        ("train.txt", settings.data.train_stride(k)),
        ("val.txt", settings.data.eval_stride(k)),
    ] {
        let ids = read_manifest(&split_dir.join(manifest))?;
        let mut windows = Vec::new();
        for rec in select(&records, &ids, &data_dir)? {
            windows.extend(record_windows(rec, &settings.data, k, stride)?);
        }
        eprintln!("{manifest}: {} subject(s), {} window(s)", ids.len(), windows.len());
        pairs.push(windows);
    }

    create_dir(&args.out)?;
    echo_config(&args.out, &settings.flat)?;
    let outcome = train_with(&settings.train, &pairs[0], &pairs[1], |e| {
        eprintln!(
            "epoch {}: train {:.5} val {:.5} ({:.1} s)",
            e.epoch, e.train_loss, e.val_loss, e.seconds
        )
    })
    .map_err(train_failure)?;

    let ckpt = args.out.join(CHECKPOINT_FILE);
    save_checkpoint(&ckpt, &outcome.best.params, &settings.flat)
        .with_context(|| format!("cannot write {}", ckpt.display()))
        .code(EXIT_IO)?;
    write_text(&args.out.join(HISTORY_FILE), &history_csv(&outcome.history))?;
    println!(
        "best epoch {} (val loss {:.5}) of {}{} -> {}",
        outcome.best_epoch,
        outcome.best_val_loss,
        outcome.history.len(),
        if outcome.stopped_early { ", stopped early" } else { "" },
        ckpt.display()
    );
    Ok(())
}
