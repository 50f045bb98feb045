//! Minibatch training of the flow model with AdamW, early stopping on a
//! validation loss with frozen noise, and the ablation variants.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{ConfigError, FlatConfig};
use crate::flow::{cfm_loss_on, make_flow_sample, FlowError, FlowSample};
use crate::network::{forward_on_tape, FlowModel, ModelConfig, ModelError};
use crate::optim::{clip_global_norm, AdamWConfig, AdamWState};
use crate::params::ParamStore;
use crate::record::WindowPair;
use crate::tape::{gradient, GradError};

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,lr,seconds";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrain,
    #[error("validation set is empty")]
    EmptyVal,
    #[error("window of subject {subject} at {start} has length {got}, model window is {expected}")]
    Window {
        subject: String,
        start: usize,
        expected: usize,
        got: usize,
    },
    #[error("non-finite values at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite { epoch: usize, batch: usize, detail: String },
    #[error("non-finite validation loss at epoch {epoch}: {detail}")]
    NonFiniteVal { epoch: usize, detail: String },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Parse(#[from] ConfigError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub weight_decay: f64,
    /// Global-norm clipping threshold; non-positive disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// `(scale, offset)`: the model is trained on `(target − offset) / scale`
    /// and samples are mapped back with `scale · x + offset`.
    pub target_affine: (f64, f64),
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lr: 1e-3,
            batch_size: 64,
            max_epochs: 300,
            patience: 10,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
            target_affine: (1.0, 0.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(TrainError::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        let (s, o) = self.target_affine;
        if !(s.is_finite() && s != 0.0 && o.is_finite()) {
            return Err(TrainError::Config(format!("target affine ({s}, {o}) is not invertible")));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn write_to(&self, cfg: &mut FlatConfig) {
        self.model.write_to(cfg);
        cfg.set("train.lr", self.lr);
        cfg.set("train.batch_size", self.batch_size);
        cfg.set("train.max_epochs", self.max_epochs);
        cfg.set("train.patience", self.patience);
        cfg.set("train.weight_decay", self.weight_decay);
        cfg.set("train.grad_clip", self.grad_clip);
        cfg.set("train.seed", self.seed);
        cfg.set("sample.target_affine_scale", self.target_affine.0);
        cfg.set("sample.target_affine_offset", self.target_affine.1);
    }

    pub fn from_flat(cfg: &FlatConfig) -> Result<Self, TrainError> {
        let d = Self::default();
        let c = Self {
            model: ModelConfig::from_flat(cfg)?,
            lr: cfg.get_or("train.lr", d.lr)?,
            batch_size: cfg.get_or("train.batch_size", d.batch_size)?,
            max_epochs: cfg.get_or("train.max_epochs", d.max_epochs)?,
            patience: cfg.get_or("train.patience", d.patience)?,
            weight_decay: cfg.get_or("train.weight_decay", d.weight_decay)?,
            grad_clip: cfg.get_or("train.grad_clip", d.grad_clip)?,
            seed: cfg.get_or("train.seed", d.seed)?,
            target_affine: (
                cfg.get_or("sample.target_affine_scale", d.target_affine.0)?,
                cfg.get_or("sample.target_affine_offset", d.target_affine.1)?,
            ),
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Full,
    NoFilm,
    NoScale,
    NoPpgCond,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Self::Full, Self::NoFilm, Self::NoScale, Self::NoPpgCond];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoFilm => "no_film",
            Self::NoScale => "no_scale",
            Self::NoPpgCond => "no_ppg_cond",
        }
    }

    pub fn apply(self, model: &mut ModelConfig) {
        match self {
            Self::Full => {
                model.use_film = true;
                model.use_scale = true;
                model.use_ppg_cond = true;
            }
            Self::NoFilm => model.use_film = false,
            Self::NoScale => model.use_scale = false,
            Self::NoPpgCond => model.use_ppg_cond = false,
        }
    }
}

/// The full configuration and the three single-flag ablations, in the order
/// full, without FiLM, without scaling, without PPG conditioning.
pub fn ablation_variants(cfg: &TrainConfig) -> Vec<(Ablation, TrainConfig)> {
    let mut full = cfg.clone();
    Ablation::Full.apply(&mut full.model);
    Ablation::ALL
        .iter()
        .map(|&a| {
            let mut c = full.clone();
            a.apply(&mut c.model);
            (a, c)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    NoImprovement,
    Stop,
}

/// Patience counter over validation losses; only a strictly lower loss
/// counts as an improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        match self.best {
            Some((_, b)) if val_loss >= b => {
                self.since_best += 1;
                if self.since_best >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::NoImprovement
                }
            }
            _ => {
                self.best = Some((epoch, val_loss));
                self.since_best = 0;
                StopDecision::Improved
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in history {
        writeln!(s, "{},{},{},{},{:.3}", r.epoch, r.train_loss, r.val_loss, r.lr, r.seconds).expect("string write");
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: FlowModel<f32>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Generator for epoch `epoch`: stream `epoch + 1` of the run seed. Stream 0
/// is left to parameter initialization.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn val_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

struct Prepared {
    x1: Vec<f32>,
    z: Vec<f32>,
}

fn prepare(pairs: &[WindowPair], cfg: &TrainConfig) -> Result<Vec<Prepared>, TrainError> {
    let (scale, offset) = cfg.target_affine;
    let k = cfg.model.window;
    pairs
        .iter()
        .map(|p| {
            for got in [p.target.len(), p.ppg.len()] {
                if got != k {
                    return Err(TrainError::Window {
                        subject: p.subject_id.clone(),
                        start: p.start_index,
                        expected: k,
                        got,
                    });
                }
            }
            Ok(Prepared {
                x1: p.target.iter().map(|&v| ((v as f64 - offset) / scale) as f32).collect(),
                z: p.ppg.clone(),
            })
        })
        .collect()
}

/// Mean loss and mean gradient over the batch. Per-sample results are
/// computed in parallel and summed in batch order, so the result does not
/// depend on the thread count.
pub fn batch_gradient(
    model_cfg: &ModelConfig,
    params: &ParamStore<f32>,
    samples: &[(FlowSample<f32>, &[f32])],
) -> Result<(f64, ParamStore<f32>), GradError> {
    let per_sample: Vec<(f32, ParamStore<f32>)> = samples
        .par_iter()
        .map(|(s, z)| {
            gradient(params, |tape| {
                let out = forward_on_tape(tape, model_cfg, &s.xt, z, s.t).expect("window lengths checked");
                tape.mse(out, &s.u_target)
            })
        })
        .collect::<Result<_, _>>()?;
    let mut total = params.zeros_like();
    let mut loss = 0.0f64;
    for (l, g) in &per_sample {
        loss += *l as f64;
        total.add_scaled(g, 1.0);
    }
    let inv = 1.0 / samples.len() as f64;
    total.scale(inv as f32);
    Ok((loss * inv, total))
}

pub fn train(cfg: &TrainConfig, train_pairs: &[WindowPair], val_pairs: &[WindowPair]) -> Result<TrainOutcome, TrainError> {
    train_with(cfg, train_pairs, val_pairs, |_| {})
}

/// Trains from a fresh initialization seeded by `cfg.seed`, calling
/// `on_epoch` after each epoch.
pub fn train_with(
    cfg: &TrainConfig,
    train_pairs: &[WindowPair],
    val_pairs: &[WindowPair],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_pairs.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    if val_pairs.is_empty() {
        return Err(TrainError::EmptyVal);
    }
    let train_data = prepare(train_pairs, cfg)?;
    let val_data = prepare(val_pairs, cfg)?;

    let mut model = FlowModel::<f32>::init(cfg.model.clone(), cfg.seed)?;
    let mut opt = AdamWState::new(&model.params, cfg.optimizer());

    let mut vrng = val_rng(cfg.seed);
    let val_samples: Vec<(FlowSample<f32>, &[f32])> = val_data
        .iter()
        .map(|p| (make_flow_sample(&p.x1, &mut vrng), p.z.as_slice()))
        .collect();

    let mut stopper = EarlyStopping::new(cfg.patience.max(1));
    let mut best = model.clone();
    let mut history = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_data.len()).collect();

    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        let mut rng = epoch_rng(cfg.seed, epoch);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<(FlowSample<f32>, &[f32])> = chunk
                .iter()
                .map(|&i| (make_flow_sample(&train_data[i].x1, &mut rng), train_data[i].z.as_slice()))
                .collect();
            let (loss, mut grads) = batch_gradient(&cfg.model, &model.params, &samples).map_err(|e| {
                TrainError::NonFinite {
                    epoch,
                    batch: batch_idx,
                    detail: e.to_string(),
                }
            })?;
            if cfg.grad_clip > 0.0 {
                clip_global_norm(&mut grads, cfg.grad_clip);
            }
            opt.step(&mut model.params, &grads).expect("optimizer layout matches model");
            if let Some(name) = model.params.first_non_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: batch_idx,
                    detail: format!("parameter '{name}' diverged"),
                });
            }
            loss_sum += loss * chunk.len() as f64;
        }
        let train_loss = loss_sum / train_data.len() as f64;

        let val_loss = cfm_loss_on(&model, &val_samples).map_err(|e: FlowError| TrainError::NonFiniteVal {
            epoch,
            detail: e.to_string(),
        })?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: cfg.lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.push(record);

        match stopper.observe(epoch, val_loss) {
            StopDecision::Improved => best = model.clone(),
            StopDecision::NoImprovement => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_epoch, best_val_loss) = stopper.best().unwrap_or((0, f64::INFINITY));
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_loss,
        history,
        stopped_early,
    })
}
