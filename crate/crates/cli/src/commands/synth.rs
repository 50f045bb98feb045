use std::path::PathBuf;

use clap::Args;
use vitalflow::config::FlatConfig;
use vitalflow::record::Task;
use vitalflow::synth::{subject_id, write_dataset, SynthConfig, SynthError};

use crate::commands::echo_config;
use crate::dataset::{create_dir, load_record};
use crate::failure::{CmdResult, Failure, WithCode, EXIT_IO, EXIT_USAGE};

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Target signal: ecg, resp or abp.
    #[arg(long)]
    task: Task,
    /// Number of subjects to generate.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    subjects: u64,
    /// Duration per subject in seconds.
    #[arg(long, default_value_t = 300.0)]
    seconds: f64,
    /// Base seed; each subject derives its own stream from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for the records.
    #[arg(long)]
    out: PathBuf,
    /// Constant heart rate in bpm.
    #[arg(long)]
    hr: Option<f64>,
    /// Constant respiratory rate in breaths per minute.
    #[arg(long)]
    rr: Option<f64>,
    /// Fixed systolic pressure in mmHg (requires --dbp).
    #[arg(long, requires = "dbp")]
    sbp: Option<f64>,
    /// Fixed diastolic pressure in mmHg (requires --sbp).
    #[arg(long, requires = "sbp")]
    dbp: Option<f64>,
    /// Keep blood pressure constant within a subject.
    #[arg(long)]
    no_bp_drift: bool,
    /// Depth of the respiratory modulation of the PPG.
    #[arg(long)]
    resp_modulation: Option<f64>,
}

impl SynthArgs {
    fn config(&self) -> SynthConfig {
        let mut cfg = SynthConfig::new(self.task, self.subjects as usize, self.seconds, self.seed);
        cfg.hr_override = self.hr;
        cfg.rr_override = self.rr;
        cfg.bp_override = self.sbp.zip(self.dbp);
        cfg.bp_drift = !self.no_bp_drift;
        if let Some(d) = self.resp_modulation {
            cfg.resp_modulation = d;
        }
        cfg
    }
}

fn echo(cfg: &SynthConfig) -> FlatConfig {
    let mut f = FlatConfig::new();
    f.set("synth.task", cfg.task);
    f.set("synth.subjects", cfg.n_subjects);
    f.set("synth.seconds", cfg.seconds_per_subject);
    f.set("synth.seed", cfg.seed);
    f.set("synth.sample_rate_hz", cfg.fs);
    let opt = |v: Option<f64>| v.map_or_else(|| "random".to_string(), |v| v.to_string());
    f.set("synth.hr", opt(cfg.hr_override));
    f.set("synth.rr", opt(cfg.rr_override));
    f.set("synth.sbp", opt(cfg.bp_override.map(|b| b.0)));
    f.set("synth.dbp", opt(cfg.bp_override.map(|b| b.1)));
    f.set("synth.bp_drift", cfg.bp_drift);
    f.set("synth.resp_modulation", cfg.resp_modulation);
    f
}

pub fn run(args: SynthArgs) -> CmdResult {
    let cfg = args.config();
    cfg.validate().code(EXIT_USAGE)?;
    create_dir(&args.out)?;
    let paths = write_dataset(&cfg, &args.out).map_err(|e| {
        let code = match e {
            SynthError::Config(_) => EXIT_USAGE,
            _ => EXIT_IO,
        };
        Failure { code, error: e.into() }
    })?;
    for (i, path) in paths.iter().enumerate() {
        let rec = load_record(path)?;
        let labels: Vec<&str> = rec.channels.iter().map(|c| c.label.as_str()).collect();
        println!(
            "{}: {} {:.1} s at {} Hz, channels {} -> {}",
            subject_id(i),
            rec.task,
            rec.duration_s(),
            rec.sample_rate_hz,
            labels.join(", "),
            path.display()
        );
    }
    echo_config(&args.out, &echo(&cfg))
}
