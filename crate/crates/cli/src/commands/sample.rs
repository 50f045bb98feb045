use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use vitalflow::checkpoint::load_checkpoint;
use vitalflow::dsp::TARGET_RATE_HZ;
use vitalflow::flow::reconstruct_windows;
use vitalflow::record::{write_record, Channel, WaveformRecord};

use crate::commands::echo_config;
use crate::dataset::{create_dir, load_dir, read_manifest, select, write_text, RECORD_EXT};
use crate::failure::{fail, CmdResult, WithCode, EXIT_IO, EXIT_SCHEMA, EXIT_SHAPE, EXIT_TRAIN, EXIT_USAGE};
use crate::settings::{defaults, layer, Settings};
use crate::ConfigArgs;

pub const RECON_LABEL: &str = "recon";

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of preprocessed records providing the PPG.
    #[arg(long)]
    input: PathBuf,
    /// Output directory for the reconstructed records.
    #[arg(long)]
    out: PathBuf,
    /// Manifest restricting which subjects are reconstructed.
    #[arg(long)]
    subjects: Option<PathBuf>,
    /// Heun steps (sets `sample.steps`).
    #[arg(long)]
    steps: Option<usize>,
    /// Noise seed (sets `sample.seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Also write `<subject>_recon.csv` with columns time_s,value.
    #[arg(long)]
    series: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

fn series_csv(samples: &[f32], fs: f64) -> String {
    let mut s = String::from("time_s,value\n");
    for (i, v) in samples.iter().enumerate() {
        writeln!(s, "{},{v}", i as f64 / fs).expect("string write");
    }
    s
}

pub fn run(args: SampleArgs) -> CmdResult {
    let ckpt = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("cannot load checkpoint {}", args.checkpoint.display()))
        .code(EXIT_IO)?;
    let mut sets = args.config.sets.clone();
    if let Some(s) = args.steps {
        sets.push(format!("sample.steps={s}"));
    }
    if let Some(s) = args.seed {
        sets.push(format!("sample.seed={s}"));
    }
    let mut base = defaults();
    base.merge(&ckpt.config);
    let layered = layer(base, args.config.config.as_deref(), &sets)?;
    for (key, value) in ckpt.config.iter().filter(|(k, _)| k.starts_with("model.")) {
        let now = layered.get(key).unwrap_or_default();
        if now != value {
            let code = if key == "model.window" { EXIT_SHAPE } else { EXIT_USAGE };
            return fail(
                code,
                format!("{key} = {now} conflicts with the checkpoint's {value}"),
            );
        }
    }
    let settings = Settings::from_flat(layered)?;
    let model = ckpt.model().code(EXIT_SCHEMA)?;
    let k = model.config.window;

    let records = load_dir(&args.input)?;
    let ids: Vec<String> = match &args.subjects {
        Some(m) => read_manifest(m)?,
        None => records.keys().cloned().collect(),
    };
    let selected = select(&records, &ids, &args.input)?;
    if selected.is_empty() {
        return fail(EXIT_IO, format!("no records to reconstruct in {}", args.input.display()));
    }

    create_dir(&args.out)?;
    let sampler = settings.sampler;
    eprintln!(
        "sampling with {} Heun steps ({} network evaluations per window)",
        sampler.steps,
        2 * sampler.steps
    );
    for rec in selected {
        if rec.sample_rate_hz != TARGET_RATE_HZ {
            return fail(
                EXIT_SCHEMA,
                format!("subject '{}' is sampled at {} Hz; run preprocess first", rec.subject_id, rec.sample_rate_hz),
            );
        }
        let ppg = rec
            .samples(&settings.data.ppg_label)
            .with_context(|| format!("subject '{}'", rec.subject_id))
            .code(EXIT_SCHEMA)?;
        let n_windows = ppg.len() / k;
        if n_windows == 0 {
            return fail(
                EXIT_SHAPE,
                format!(
                    "subject '{}' has {} samples, fewer than the checkpoint window of {k}",
                    rec.subject_id,
                    ppg.len()
                ),
            );
        }
        let windows: Vec<Vec<f32>> = ppg.chunks_exact(k).map(<[f32]>::to_vec).collect();
        let recon = reconstruct_windows(&model, &windows, &sampler)
            .with_context(|| format!("sampling subject '{}'", rec.subject_id))
            .code(EXIT_TRAIN)?;
        let stitched: Vec<f32> = recon.into_iter().flatten().collect();
        eprintln!("{}: {n_windows} window(s) of {k} samples", rec.subject_id);

        if args.series {
            let path = args.out.join(format!("{}_recon.csv", rec.subject_id));
            write_text(&path, &series_csv(&stitched, rec.sample_rate_hz))?;
        }
        let out = WaveformRecord::new(
            rec.subject_id.clone(),
            rec.task,
            rec.sample_rate_hz,
            vec![Channel::new(RECON_LABEL, stitched)],
        )
        .code(EXIT_SCHEMA)?;
        let path = args.out.join(format!("{}.{RECORD_EXT}", rec.subject_id));
        write_record(&out, &path)
            .with_context(|| format!("cannot write {}", path.display()))
            .code(EXIT_IO)?;
        println!("{} -> {}", rec.subject_id, path.display());
    }
    echo_config(&args.out, &settings.flat)
}
