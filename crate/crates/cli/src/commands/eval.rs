use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use vitalflow::metrics::{bp_error, hr_error, rr_error, MetricKind, MetricReport, BP_WINDOW_S, HR_WINDOW_S, RR_WINDOW_S};
use vitalflow::record::{Task, WaveformRecord};

use crate::commands::echo_config;
use crate::commands::sample::RECON_LABEL;
use crate::dataset::{create_dir, load_dir, read_manifest, write_text};
use crate::failure::{fail, CmdResult, WithCode, EXIT_EVAL, EXIT_SCHEMA, EXIT_SHAPE};
use crate::settings::Settings;
use crate::ConfigArgs;

pub const REPORT_FILE: &str = "report.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const REPORT_HEADER: &str = "metric,subject,window,predicted,truth,abs_error";

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of reconstructions written by `sample`.
    #[arg(long)]
    recon: PathBuf,
    /// Directory of ground-truth (preprocessed) records.
    #[arg(long)]
    truth: PathBuf,
    /// Manifest of subjects that must be present on both sides.
    #[arg(long)]
    subjects: Option<PathBuf>,
    /// Report directory; defaults to `<recon>/eval`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Channel of the reconstruction records to score.
    #[arg(long, default_value = RECON_LABEL)]
    label: String,
    #[command(flatten)]
    config: ConfigArgs,
}

pub fn metric_kinds(task: Task) -> &'static [MetricKind] {
    match task {
        Task::Ecg => &[MetricKind::Hr],
        Task::Resp => &[MetricKind::Rr],
        Task::Abp => &[MetricKind::Sbp, MetricKind::Dbp],
    }
}

/// Scores one subject; the truth is cut to the reconstruction's length.
fn score(pred: &[f32], truth_rec: &WaveformRecord, truth_label: &str) -> CmdResult<Vec<MetricReport>> {
    let truth = truth_rec
        .samples(truth_label)
        .with_context(|| format!("truth for subject '{}'", truth_rec.subject_id))
        .code(EXIT_SCHEMA)?;
    if pred.len() > truth.len() {
        return fail(
            EXIT_SHAPE,
            format!(
                "reconstruction of '{}' has {} samples but the truth only {}",
                truth_rec.subject_id,
                pred.len(),
                truth.len()
            ),
        );
    }
    let truth = &truth[..pred.len()];
    let fs = truth_rec.sample_rate_hz;
    let ctx = || format!("scoring subject '{}'", truth_rec.subject_id);
    Ok(match truth_rec.task {
        Task::Ecg => vec![hr_error(pred, truth, fs, HR_WINDOW_S).with_context(ctx).code(EXIT_EVAL)?],
        Task::Resp => vec![rr_error(pred, truth, fs, RR_WINDOW_S).with_context(ctx).code(EXIT_EVAL)?],
        Task::Abp => {
            let (s, d) = bp_error(pred, truth, fs, BP_WINDOW_S).with_context(ctx).code(EXIT_EVAL)?;
            vec![s, d]
        }
    })
}

fn missing(ids: &[String], have: &BTreeMap<String, WaveformRecord>) -> Vec<String> {
    ids.iter().filter(|id| !have.contains_key(*id)).cloned().collect()
}

pub fn run(args: EvalArgs) -> CmdResult {
    let settings = Settings::load(args.config.config.as_deref(), &args.config.sets)?;
    let recon = load_dir(&args.recon)?;
    let truth = load_dir(&args.truth)?;
    let ids: Vec<String> = match &args.subjects {
        Some(m) => read_manifest(m)?,
        None => recon.keys().cloned().collect(),
    };
    let no_recon = missing(&ids, &recon);
    let no_truth = missing(&ids, &truth);
    if !no_recon.is_empty() || !no_truth.is_empty() {
        let mut msg = String::from("subject sets do not match");
        if !no_recon.is_empty() {
            write!(msg, "; missing reconstructions: {}", no_recon.join(", ")).expect("string write");
        }
        if !no_truth.is_empty() {
            write!(msg, "; missing ground truth: {}", no_truth.join(", ")).expect("string write");
        }
        return fail(EXIT_EVAL, msg);
    }
    if ids.is_empty() {
        return fail(EXIT_EVAL, format!("no reconstructions in {}", args.recon.display()));
    }

    let task = truth[&ids[0]].task;
    let kinds = metric_kinds(task);
    let mut per_kind: Vec<Vec<MetricReport>> = vec![Vec::new(); kinds.len()];
    let mut rows = String::from(REPORT_HEADER);
    rows.push('\n');
    for id in &ids {
        let (r, t) = (&recon[id], &truth[id]);
        if t.task != task || r.task != task {
            return fail(EXIT_SCHEMA, format!("subject '{id}' is not a {task} record on both sides"));
        }
        if r.sample_rate_hz != t.sample_rate_hz {
            return fail(
                EXIT_SHAPE,
                format!("subject '{id}': reconstruction at {} Hz, truth at {} Hz", r.sample_rate_hz, t.sample_rate_hz),
            );
        }
        let pred = r
            .samples(&args.label)
            .with_context(|| format!("reconstruction of '{id}'"))
            .code(EXIT_SCHEMA)?;
        let reports = score(pred, t, &settings.data.target_label_for(task))?;
        for (slot, report) in per_kind.iter_mut().zip(reports) {
            for w in &report.per_window {
                writeln!(
                    rows,
                    "{},{id},{},{},{},{}",
                    report.kind.label(),
                    w.index,
                    w.predicted,
                    w.truth,
                    w.abs_error
                )
                .expect("string write");
            }
            slot.push(report);
        }
    }

    let out = args.out.unwrap_or_else(|| args.recon.join("eval"));
    create_dir(&out)?;
    write_text(&out.join(REPORT_FILE), &rows)?;
    let mut summary = String::new();
    let mut empty = Vec::new();
    for (&kind, reports) in kinds.iter().zip(&per_kind) {
        let combined = MetricReport::combine(kind, reports);
        if combined.mae.is_none() {
            empty.push(kind.label());
        }
        println!("{combined}");
        writeln!(summary, "{combined}").expect("string write");
    }
    write_text(&out.join(SUMMARY_FILE), &summary)?;
    echo_config(&out, &settings.flat)?;
    if !empty.is_empty() {
        return fail(EXIT_EVAL, format!("no valid windows for {}", empty.join(", ")));
    }
    Ok(())
}
