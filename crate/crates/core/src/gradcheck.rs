//! Central finite-difference check of the analytic gradient of the
//! flow-matching loss, run in 64-bit arithmetic on a tiny network.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::flow::{make_flow_sample, FlowSample};
use crate::network::{forward_on_tape, init_params, ModelConfig, ModelError};
use crate::params::ParamStore;
use crate::tape::{gradient, GradError, Tape};

/// Relative step: `h = STEP · max(1, |θ|)`.
pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;
/// Denominator floor of the relative error, so that vanishing gradients are
/// compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum GradcheckError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("unknown parameter family '{0}'")]
    UnknownFamily(String),
}

/// Coarse grouping of parameter names used to spread probes across the
/// network and to target sabotage.
pub fn family_of(name: &str) -> &'static str {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    if name.contains("_ssm.") {
        return match leaf {
            "log_neg_lambda_re" | "lambda_im" => "ssm_lambda",
            "log_delta" => "ssm_delta",
            "b_re" | "b_im" => "ssm_b",
            "c_re" | "c_im" => "ssm_c",
            _ => "ssm_d",
        };
    }
    if name.starts_with("x_embed") || name.starts_with("z_embed") {
        "conv"
    } else if name.starts_with("temb") {
        "time_mlp"
    } else if name.contains(".film_") {
        "film"
    } else if name.contains(".scale.") {
        "scale"
    } else if name.contains("_ffn.") {
        "ffn"
    } else if name.contains(".z_norm.") {
        "z_norm"
    } else if name.contains(".cond_proj.") {
        "cond_proj"
    } else if name.starts_with("head") {
        "head"
    } else {
        "other"
    }
}

pub const FAMILIES: [&str; 13] = [
    "conv",
    "time_mlp",
    "film",
    "scale",
    "ssm_lambda",
    "ssm_delta",
    "ssm_b",
    "ssm_c",
    "ssm_d",
    "ffn",
    "z_norm",
    "cond_proj",
    "head",
];

#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub probes: usize,
    pub batch: usize,
    pub seed: u64,
    /// Negates the analytic gradient of this family before comparing.
    pub sabotage: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::small(1, 8, 8, 32),
            probes: 64,
            batch: 2,
            seed: 0,
            sabotage: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub family: &'static str,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

impl Probe {
    pub fn passed(&self) -> bool {
        self.rel_error <= TOLERANCE
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub probes: Vec<Probe>,
    pub families: BTreeSet<&'static str>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.probes.iter().all(Probe::passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Probe> {
        self.probes.iter().filter(|p| !p.passed())
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Picks probe coordinates: one from every tensor first, then uniformly
/// random extra coordinates until `count` is reached.
fn choose_probes(params: &ParamStore<f64>, count: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut chosen: Vec<(usize, usize)> = (0..params.len())
        .map(|t| (t, rng.random_range(0..params.by_index(t).1.len())))
        .collect();
    let total = params.numel();
    let mut offsets = Vec::with_capacity(params.len());
    let mut acc = 0;
    for (_, t) in params.iter() {
        offsets.push(acc);
        acc += t.len();
    }
    let mut taken: BTreeSet<(usize, usize)> = chosen.iter().copied().collect();
    if chosen.len() < count {
        for flat in sample(rng, total, total.min(count * 4)).into_iter() {
            if chosen.len() >= count {
                break;
            }
            let t = offsets.partition_point(|&o| o <= flat) - 1;
            let coord = (t, flat - offsets[t]);
            if taken.insert(coord) {
                chosen.push(coord);
            }
        }
    }
    chosen
}

fn batch_loss(tape: &Tape<'_, f64>, cfg: &ModelConfig, batch: &[(FlowSample<f64>, Vec<f64>)]) -> crate::tape::Var {
    let mut total = None;
    for (s, z) in batch {
        let out = forward_on_tape(tape, cfg, &s.xt, z, s.t).expect("consistent lengths");
        let l = tape.mse(out, &s.u_target);
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l),
        });
    }
    tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64)
}

/// Checks the tape gradient of the flow-matching loss (frozen `t`, `x0`)
/// against central differences on randomly chosen coordinates.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport, GradcheckError> {
    if let Some(f) = &cfg.sabotage {
        if !FAMILIES.contains(&f.as_str()) {
            return Err(GradcheckError::UnknownFamily(f.clone()));
        }
    }
    let params = init_params::<f64>(&cfg.model, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let k = cfg.model.window;
    let batch: Vec<(FlowSample<f64>, Vec<f64>)> = (0..cfg.batch.max(1))
        .map(|b| {
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let x1: Vec<f64> = (0..k).map(|i| (0.35 * i as f64 + phase).sin()).collect();
            let z: Vec<f64> = (0..k).map(|i| (0.35 * i as f64 + phase + 0.5 * b as f64).cos()).collect();
            (make_flow_sample(&x1, &mut rng), z)
        })
        .collect();

    let (_, mut grads) = gradient(&params, |tape| batch_loss(tape, &cfg.model, &batch))?;
    if let Some(f) = &cfg.sabotage {
        for (name, t) in grads.iter_mut() {
            if family_of(name) == f {
                t.data.iter_mut().for_each(|v| *v = -*v);
            }
        }
    }

    let eval = |p: &ParamStore<f64>| {
        let tape = Tape::new(p);
        let l = batch_loss(&tape, &cfg.model, &batch);
        tape.scalar(l)
    };

    let mut probes = Vec::new();
    let mut families = BTreeSet::new();
    let mut work = params.clone();
    for (t, i) in choose_probes(&params, cfg.probes, &mut rng) {
        let (name, tensor) = params.by_index(t);
        let theta = tensor.data[i];
        let h = STEP * theta.abs().max(1.0);
        work.by_index_mut(t).data[i] = theta + h;
        let up = eval(&work);
        work.by_index_mut(t).data[i] = theta - h;
        let down = eval(&work);
        work.by_index_mut(t).data[i] = theta;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.by_index(t).1.data[i];
        let family = family_of(name);
        families.insert(family);
        probes.push(Probe {
            name: name.to_string(),
            index: i,
            family,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    Ok(GradcheckReport { probes, families })
}
