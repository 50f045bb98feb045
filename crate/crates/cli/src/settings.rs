//! Run configuration: built-in defaults, then a config file, then
//! `--set key=value` overrides.

use std::fs;
use std::path::Path;

use vitalflow::config::{parse_assignment, FlatConfig};
use vitalflow::flow::{SamplerConfig, DEFAULT_STEPS};
use vitalflow::record::Task;
use vitalflow::train::TrainConfig;

use crate::failure::{fail, CmdResult, WithCode, EXIT_IO, EXIT_USAGE};

/// Every key the tool accepts. `model.temb_dim` defaults to
/// `model.embed_dim` and therefore has no fixed default.
pub const KNOWN_KEYS: [&str; 25] = [
    "model.depth",
    "model.embed_dim",
    "model.state_dim",
    "model.window",
    "model.ffn_expansion",
    "model.temb_dim",
    "model.use_film",
    "model.use_scale",
    "model.use_ppg_cond",
    "train.lr",
    "train.batch_size",
    "train.max_epochs",
    "train.patience",
    "train.weight_decay",
    "train.grad_clip",
    "train.seed",
    "sample.steps",
    "sample.seed",
    "sample.target_affine_scale",
    "sample.target_affine_offset",
    "data.task",
    "data.dir",
    "data.ppg_label",
    "data.target_label",
    "data.stride",
];

pub fn defaults() -> FlatConfig {
    let mut cfg = FlatConfig::new();
    TrainConfig::default().write_to(&mut cfg);
    cfg.remove("model.temb_dim");
    cfg.set("sample.steps", DEFAULT_STEPS);
    cfg.set("sample.seed", 0);
    // auto: taken from the records, which must agree
    cfg.set("data.task", "auto");
    cfg.set("data.dir", "");
    cfg.set("data.ppg_label", "ppg");
    // empty: use the task's conventional label
    cfg.set("data.target_label", "");
    // 0: half a window for training, a full window for evaluation
    cfg.set("data.stride", 0);
    cfg
}

fn check_known(key: &str) -> CmdResult {
    if KNOWN_KEYS.contains(&key) {
        Ok(())
    } else {
        fail(EXIT_USAGE, format!("unknown configuration key '{key}'"))
    }
}

/// Layers `file` and then each `key=value` of `sets` over `base`.
pub fn layer(mut base: FlatConfig, file: Option<&Path>, sets: &[String]) -> CmdResult<FlatConfig> {
    if let Some(path) = file {
        let text = fs::read_to_string(path)
            .map_err(anyhow::Error::from)
            .map_err(|e| e.context(format!("cannot read config {}", path.display())))
            .code(EXIT_IO)?;
        let parsed = FlatConfig::parse(&text).code(EXIT_USAGE)?;
        for key in parsed.keys() {
            check_known(key)?;
        }
        base.merge(&parsed);
    }
    for s in sets {
        let Some((key, value)) = parse_assignment(s) else {
            return fail(EXIT_USAGE, format!("expected key=value, got '{s}'"));
        };
        check_known(key)?;
        base.set(key, value);
    }
    Ok(base)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSettings {
    /// `None` when inferred from the records.
    pub task: Option<Task>,
    pub dir: String,
    pub ppg_label: String,
    /// Empty means the task's conventional label.
    pub target_label: String,
    pub stride: usize,
}

impl DataSettings {
    pub fn target_label_for(&self, task: Task) -> String {
        if self.target_label.is_empty() {
            task.target_label().to_string()
        } else {
            self.target_label.clone()
        }
    }

    pub fn train_stride(&self, window: usize) -> usize {
        if self.stride == 0 {
            (window / 2).max(1)
        } else {
            self.stride
        }
    }

    pub fn eval_stride(&self, window: usize) -> usize {
        if self.stride == 0 {
            window
        } else {
            self.stride
        }
    }
}

/// Typed view of a fully layered configuration.
#[derive(Debug, Clone)]
pub struct Settings {
    pub flat: FlatConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub data: DataSettings,
}

impl Settings {
    pub fn from_flat(flat: FlatConfig) -> CmdResult<Self> {
        let train = TrainConfig::from_flat(&flat).code(EXIT_USAGE)?;
        let sampler = SamplerConfig {
            steps: flat.require("sample.steps").code(EXIT_USAGE)?,
            seed: flat.require("sample.seed").code(EXIT_USAGE)?,
            target_affine: train.target_affine,
        };
        if sampler.steps == 0 {
            return fail(EXIT_USAGE, "sample.steps must be at least 1");
        }
        let task: String = flat.require("data.task").code(EXIT_USAGE)?;
        let task = match task.as_str() {
            "auto" => None,
            t => Some(t.parse::<Task>().map_err(|e| anyhow::anyhow!("data.task: {e}")).code(EXIT_USAGE)?),
        };
        let data = DataSettings {
            task,
            dir: flat.get("data.dir").unwrap_or_default().to_string(),
            ppg_label: flat.get("data.ppg_label").unwrap_or("ppg").to_string(),
            target_label: flat.get("data.target_label").unwrap_or_default().to_string(),
            stride: flat.require("data.stride").code(EXIT_USAGE)?,
        };
        let mut flat = flat;
        train.write_to(&mut flat);
        Ok(Self {
            flat,
            train,
            sampler,
            data,
        })
    }

    pub fn load(file: Option<&Path>, sets: &[String]) -> CmdResult<Self> {
        Self::from_flat(layer(defaults(), file, sets)?)
    }
}
