//! Velocity-field network: convolutional embeddings of the noisy target and
//! the PPG condition, a sinusoidal time embedding, `L` dual-stream blocks
//! and a linear head.
//!
//! Each block runs an x-stream (norm, FiLM, additive PPG conditioning, S5,
//! scaling, FFN) next to a z-stream (norm, S5, FFN) that carries the PPG
//! features into the next block. All tensors are `features × K` with one
//! column per timestep.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ConfigError, FlatConfig};
use crate::params::{ParamStore, Tensor};
use crate::scalar::Scalar;
use crate::ssm::{init_s5, SsmError};
use crate::tape::{s5_layer_into_store, S5Names, Tape, Var};

pub const CONV_KERNEL: usize = 7;
/// Multiplier applied to `t` inside the sinusoidal encoding.
pub const TIME_SCALE: f64 = 1000.0;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input length mismatch: x_t has {x} samples, z has {z}")]
    Length { x: usize, z: usize },
    #[error("empty input sequence")]
    Empty,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Ssm(#[from] SsmError),
    #[error(transparent)]
    Parse(#[from] ConfigError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub state_dim: usize,
    pub window: usize,
    pub ffn_expansion: usize,
    pub temb_dim: usize,
    pub use_film: bool,
    pub use_scale: bool,
    pub use_ppg_cond: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            embed_dim: 128,
            state_dim: 256,
            window: 1024,
            ffn_expansion: 2,
            temb_dim: 128,
            use_film: true,
            use_scale: true,
            use_ppg_cond: true,
        }
    }
}

impl ModelConfig {
    /// Small configuration with `temb_dim` tied to `embed_dim`.
    pub fn small(depth: usize, embed_dim: usize, state_dim: usize, window: usize) -> Self {
        Self {
            depth,
            embed_dim,
            state_dim,
            window,
            temb_dim: embed_dim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.depth == 0 {
            return err("depth must be positive".into());
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("state_dim", self.state_dim),
            ("window", self.window),
            ("temb_dim", self.temb_dim),
        ] {
            if v < 2 {
                return err(format!("{name} must be at least 2, got {v}"));
            }
        }
        if self.ffn_expansion == 0 {
            return err("ffn_expansion must be positive".into());
        }
        if self.state_dim % 2 != 0 {
            return err(format!("state_dim must be even, got {}", self.state_dim));
        }
        if self.temb_dim % 2 != 0 {
            return err(format!("temb_dim must be even, got {}", self.temb_dim));
        }
        Ok(())
    }

    pub fn write_to(&self, cfg: &mut FlatConfig) {
        cfg.set("model.depth", self.depth);
        cfg.set("model.embed_dim", self.embed_dim);
        cfg.set("model.state_dim", self.state_dim);
        cfg.set("model.window", self.window);
        cfg.set("model.ffn_expansion", self.ffn_expansion);
        cfg.set("model.temb_dim", self.temb_dim);
        cfg.set("model.use_film", self.use_film);
        cfg.set("model.use_scale", self.use_scale);
        cfg.set("model.use_ppg_cond", self.use_ppg_cond);
    }

    /// Reads `model.*` keys; absent keys keep their defaults and an absent
    /// `model.temb_dim` follows `model.embed_dim`.
    pub fn from_flat(cfg: &FlatConfig) -> Result<Self, ModelError> {
        let d = Self::default();
        let embed_dim = cfg.get_or("model.embed_dim", d.embed_dim)?;
        let c = Self {
            depth: cfg.get_or("model.depth", d.depth)?,
            embed_dim,
            state_dim: cfg.get_or("model.state_dim", d.state_dim)?,
            window: cfg.get_or("model.window", d.window)?,
            ffn_expansion: cfg.get_or("model.ffn_expansion", d.ffn_expansion)?,
            temb_dim: cfg.get_or("model.temb_dim", embed_dim)?,
            use_film: cfg.get_or("model.use_film", d.use_film)?,
            use_scale: cfg.get_or("model.use_scale", d.use_scale)?,
            use_ppg_cond: cfg.get_or("model.use_ppg_cond", d.use_ppg_cond)?,
        };
        c.validate()?;
        Ok(c)
    }
}

/// `[sin(t s ω_0), cos(t s ω_0), sin(t s ω_1), ...]` with
/// `ω_i = 10000^(-2i/dim)` and `s = 1000`.
pub fn sinusoidal_encode(t: f64, dim: usize) -> Result<Vec<f64>, ModelError> {
    if dim == 0 || dim % 2 != 0 {
        return Err(ModelError::Config(format!("encoding dimension must be even and positive, got {dim}")));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let arg = t * TIME_SCALE / 10000f64.powf(2.0 * i as f64 / dim as f64);
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}

/// `out[:, k] = γ ⊙ h[:, k] + β` for `h` stored row-major as `n × K`.
pub fn film_modulate<T: Scalar>(h: &[T], n: usize, gamma: &[T], beta: &[T]) -> Result<Vec<T>, ModelError> {
    if gamma.len() != n || beta.len() != n || n == 0 || h.len() % n != 0 {
        return Err(ModelError::Shape(format!(
            "h {} entries, n {n}, gamma {}, beta {}",
            h.len(),
            gamma.len(),
            beta.len()
        )));
    }
    let k = h.len() / n;
    Ok(h.iter()
        .enumerate()
        .map(|(idx, &v)| gamma[idx / k.max(1)] * v + beta[idx / k.max(1)])
        .collect())
}

fn block_prefix(i: usize) -> String {
    format!("blocks.{i}")
}

fn uniform_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::of(rng.random_range(-bound..=bound))).collect())
}

fn add_linear<T: Scalar>(p: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, out: usize, inp: usize) {
    let bound = 1.0 / (inp as f64).sqrt();
    p.insert(format!("{name}.w"), uniform_tensor(rng, vec![out, inp], bound));
    p.insert(format!("{name}.b"), uniform_tensor(rng, vec![out], bound));
}

fn add_norm<T: Scalar>(p: &mut ParamStore<T>, name: &str, n: usize) {
    p.insert(format!("{name}.g"), Tensor::filled(vec![n], T::one()));
    p.insert(format!("{name}.b"), Tensor::zeros(vec![n]));
}

fn add_ffn<T: Scalar>(p: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, n: usize, hidden: usize) {
    add_norm(p, &format!("{name}.norm"), n);
    add_linear(p, rng, &format!("{name}.fc1"), hidden, n);
    add_linear(p, rng, &format!("{name}.fc2"), n, hidden);
}

fn add_conv<T: Scalar>(p: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, n: usize) {
    let bound = 1.0 / (CONV_KERNEL as f64).sqrt();
    p.insert(format!("{name}.w"), uniform_tensor(rng, vec![n, CONV_KERNEL], bound));
    p.insert(format!("{name}.b"), uniform_tensor(rng, vec![n], bound));
}

/// Whether block `i` updates its z-stream. The last block's z output is
/// never read, so it carries no z-stream S5 or FFN.
pub fn block_has_z_update(cfg: &ModelConfig, i: usize) -> bool {
    i + 1 < cfg.depth
}

/// Registers every parameter of the network with seeded initial values.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>, ModelError> {
    cfg.validate()?;
    let n = cfg.embed_dim;
    let hidden = cfg.ffn_expansion * n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    add_conv(&mut p, &mut rng, "x_embed", n);
    add_conv(&mut p, &mut rng, "z_embed", n);
    add_linear(&mut p, &mut rng, "temb.fc1", n, cfg.temb_dim);
    add_linear(&mut p, &mut rng, "temb.fc2", n, n);
    for i in 0..cfg.depth {
        let b = block_prefix(i);
        add_linear(&mut p, &mut rng, &format!("{b}.film_gamma"), n, n);
        add_linear(&mut p, &mut rng, &format!("{b}.film_beta"), n, n);
        add_linear(&mut p, &mut rng, &format!("{b}.scale"), n, n);
        let x_ssm = init_s5::<T>(n, cfg.state_dim, rng.next_u64())?;
        s5_layer_into_store(&mut p, &S5Names::with_prefix(&format!("{b}.x_ssm")), &x_ssm);
        add_ffn(&mut p, &mut rng, &format!("{b}.x_ffn"), n, hidden);
        add_norm(&mut p, &format!("{b}.z_norm"), n);
        add_linear(&mut p, &mut rng, &format!("{b}.cond_proj"), n, n);
        if block_has_z_update(cfg, i) {
            let z_ssm = init_s5::<T>(n, cfg.state_dim, rng.next_u64())?;
            s5_layer_into_store(&mut p, &S5Names::with_prefix(&format!("{b}.z_ssm")), &z_ssm);
            add_ffn(&mut p, &mut rng, &format!("{b}.z_ffn"), n, hidden);
        }
    }
    add_norm(&mut p, "head.norm", n);
    add_linear(&mut p, &mut rng, "head.out", 1, n);
    Ok(p)
}

/// Checks that `params` has exactly the layout [`init_params`] produces.
pub fn check_layout<T: Scalar>(cfg: &ModelConfig, params: &ParamStore<T>) -> Result<(), ModelError> {
    let reference = init_params::<T>(cfg, 0)?;
    if reference.same_layout(params) {
        return Ok(());
    }
    for (name, t) in reference.iter() {
        match params.get(name) {
            None => return Err(ModelError::Shape(format!("missing parameter '{name}'"))),
            Some(p) if p.shape != t.shape => {
                return Err(ModelError::Shape(format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    p.shape, t.shape
                )))
            }
            _ => {}
        }
    }
    Err(ModelError::Shape(format!(
        "expected {} tensors, found {}",
        reference.len(),
        params.len()
    )))
}

fn linear<T: Scalar>(tape: &Tape<'_, T>, name: &str, x: Var) -> Var {
    tape.linear(tape.param(&format!("{name}.w")), tape.param(&format!("{name}.b")), x)
}

fn norm_affine<T: Scalar>(tape: &Tape<'_, T>, name: &str, x: Var) -> Var {
    let y = tape.layer_norm(x);
    let y = tape.mul_col(y, tape.param(&format!("{name}.g")));
    tape.add_col(y, tape.param(&format!("{name}.b")))
}

fn ffn<T: Scalar>(tape: &Tape<'_, T>, name: &str, h: Var) -> Var {
    let a = norm_affine(tape, &format!("{name}.norm"), h);
    let a = tape.gelu(linear(tape, &format!("{name}.fc1"), a));
    linear(tape, &format!("{name}.fc2"), a)
}

/// Timestep embedding `SiLU(fc2(SiLU(fc1(sinusoidal(t)))))`, shape `n × 1`.
pub fn time_embedding<T: Scalar>(tape: &Tape<'_, T>, cfg: &ModelConfig, t: T) -> Result<Var, ModelError> {
    let enc = sinusoidal_encode(t.as_f64(), cfg.temb_dim)?;
    let s = tape.constant(cfg.temb_dim, 1, enc.into_iter().map(T::of).collect());
    let h = tape.silu(linear(tape, "temb.fc1", s));
    Ok(tape.silu(linear(tape, "temb.fc2", h)))
}

/// One dual-stream block. `hz` is `None` once the z-stream is no longer
/// needed; the returned z-stream is `None` for the last block and whenever
/// PPG conditioning is disabled.
pub fn block_forward<T: Scalar>(
    tape: &Tape<'_, T>,
    cfg: &ModelConfig,
    index: usize,
    hx: Var,
    hz: Option<Var>,
    temb: Var,
) -> (Var, Option<Var>) {
    let b = block_prefix(index);
    let mut a = tape.layer_norm(hx);
    if cfg.use_film {
        let gamma = tape.add_scalar(linear(tape, &format!("{b}.film_gamma"), temb), T::one());
        let beta = linear(tape, &format!("{b}.film_beta"), temb);
        a = tape.add_col(tape.mul_col(a, gamma), beta);
    }
    let hz = if cfg.use_ppg_cond { hz } else { None };
    let zn = hz.map(|hz| norm_affine(tape, &format!("{b}.z_norm"), hz));
    if let Some(zn) = zn {
        a = tape.add(a, linear(tape, &format!("{b}.cond_proj"), zn));
    }
    let mut s = tape.s5(a, &S5Names::with_prefix(&format!("{b}.x_ssm")));
    if cfg.use_scale {
        let alpha = tape.add_scalar(linear(tape, &format!("{b}.scale"), temb), T::one());
        s = tape.mul_col(s, alpha);
    }
    let hx = tape.add(hx, s);
    let hx = tape.add(hx, ffn(tape, &format!("{b}.x_ffn"), hx));

    let hz_next = match (hz, zn) {
        (Some(hz), Some(zn)) if block_has_z_update(cfg, index) => {
            let s = tape.s5(zn, &S5Names::with_prefix(&format!("{b}.z_ssm")));
            let hz = tape.add(hz, s);
            Some(tape.add(hz, ffn(tape, &format!("{b}.z_ffn"), hz)))
        }
        _ => None,
    };
    (hx, hz_next)
}

/// Records the full network on `tape`; the result is the `1 × K` velocity.
pub fn forward_on_tape<T: Scalar>(
    tape: &Tape<'_, T>,
    cfg: &ModelConfig,
    x_t: &[T],
    z: &[T],
    t: T,
) -> Result<Var, ModelError> {
    if x_t.len() != z.len() {
        return Err(ModelError::Length { x: x_t.len(), z: z.len() });
    }
    if x_t.is_empty() {
        return Err(ModelError::Empty);
    }
    let k = x_t.len();
    let conv = |name: &str, input: &[T]| {
        let v = tape.constant(1, k, input.to_vec());
        tape.conv1d_same(v, tape.param(&format!("{name}.w")), tape.param(&format!("{name}.b")))
    };
    let mut hx = conv("x_embed", x_t);
    let mut hz = cfg.use_ppg_cond.then(|| conv("z_embed", z));
    let temb = time_embedding(tape, cfg, t)?;
    for i in 0..cfg.depth {
        (hx, hz) = block_forward(tape, cfg, i, hx, hz, temb);
    }
    let h = norm_affine(tape, "head.norm", hx);
    Ok(linear(tape, "head.out", h))
}

/// Network configuration together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> FlowModel<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self, ModelError> {
        config.validate()?;
        check_layout(&config, &params)?;
        Ok(Self { config, params })
    }

    /// Velocity `u_θ(x_t, t | z)`, same length as `x_t`.
    pub fn forward(&self, x_t: &[T], z: &[T], t: T) -> Result<Vec<T>, ModelError> {
        let tape = Tape::new(&self.params);
        let out = forward_on_tape(&tape, &self.config, x_t, z, t)?;
        Ok(tape.value(out))
    }

    pub fn cast<U: Scalar>(&self) -> FlowModel<U> {
        FlowModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(flags: (bool, bool, bool)) -> ModelConfig {
        ModelConfig {
            use_film: flags.0,
            use_scale: flags.1,
            use_ppg_cond: flags.2,
            ..ModelConfig::small(2, 8, 8, 32)
        }
    }

    fn signal(k: usize, phase: f64) -> Vec<f64> {
        (0..k).map(|i| (0.3 * i as f64 + phase).sin()).collect()
    }

    #[test]
    fn encoding_examples() {
        let e0 = sinusoidal_encode(0.0, 128).unwrap();
        for i in 0..64 {
            assert_eq!(e0[2 * i], 0.0);
            assert_eq!(e0[2 * i + 1], 1.0);
        }
        let e1 = sinusoidal_encode(1.0, 128).unwrap();
        let dist: f64 = e0.iter().zip(&e1).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(dist > 0.1);
        assert_eq!(sinusoidal_encode(0.37, 16).unwrap(), sinusoidal_encode(0.37, 16).unwrap());
        assert!(sinusoidal_encode(0.5, 7).is_err());
        // entry 2i+1 at i=1 for dim 4: cos(t·1000/100)
        let e = sinusoidal_encode(0.25, 4).unwrap();
        assert!((e[3] - (2.5f64).cos()).abs() < 1e-15);
    }

    #[test]
    fn film_examples() {
        let h: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        assert_eq!(film_modulate(&h, 3, &[1.0; 3], &[0.0; 3]).unwrap(), h);
        let c = film_modulate(&h, 3, &[0.0; 3], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(c, vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0, 3.0]);
        assert!(film_modulate(&h, 3, &[1.0; 2], &[0.0; 3]).is_err());
        assert!(film_modulate(&h, 5, &[1.0; 5], &[0.0; 5]).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut m = FlowModel::<f64>::init(tiny((true, true, true)), 1).unwrap();
        for (name, t) in m.params.iter_mut() {
            // keep eigenvalues stable, zero everything that carries signal
            if !name.ends_with("log_neg_lambda_re") {
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let y = m.forward(&signal(32, 0.0), &signal(32, 1.0), 0.3).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_length_matches_input() {
        let m = FlowModel::<f32>::init(ModelConfig::small(1, 8, 8, 256), 2).unwrap();
        for k in [256usize, 512, 1024] {
            let x = vec![0.1f32; k];
            assert_eq!(m.forward(&x, &x, 0.5).unwrap().len(), k);
        }
        assert!(matches!(m.forward(&[0.0; 4], &[0.0; 5], 0.5), Err(ModelError::Length { .. })));
    }

    #[test]
    fn conditioning_flag_controls_z_dependence() {
        let x = signal(32, 0.0);
        let (z1, z2) = (signal(32, 1.0), signal(32, 2.0));
        let on = FlowModel::<f64>::init(tiny((true, true, true)), 3).unwrap();
        assert_ne!(on.forward(&x, &z1, 0.4).unwrap(), on.forward(&x, &z2, 0.4).unwrap());
        let off = FlowModel::<f64>::init(tiny((true, true, false)), 3).unwrap();
        assert_eq!(off.forward(&x, &z1, 0.4).unwrap(), off.forward(&x, &z2, 0.4).unwrap());
    }

    #[test]
    fn time_changes_output() {
        let m = FlowModel::<f64>::init(tiny((true, true, true)), 4).unwrap();
        let (x, z) = (signal(32, 0.0), signal(32, 1.0));
        assert_ne!(m.forward(&x, &z, 0.1).unwrap(), m.forward(&x, &z, 0.9).unwrap());
    }

    #[test]
    fn film_flag_matches_neutral_heads() {
        // use_film=false must equal a full model whose FiLM heads emit γ=1, β=0
        let (x, z) = (signal(32, 0.0), signal(32, 1.0));
        let off = FlowModel::<f64>::init(tiny((false, true, true)), 5).unwrap();
        let mut neutral = FlowModel::<f64>::from_params(tiny((true, true, true)), off.params.clone()).unwrap();
        for (name, t) in neutral.params.iter_mut() {
            if name.contains("film_") {
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        assert_eq!(off.forward(&x, &z, 0.6).unwrap(), neutral.forward(&x, &z, 0.6).unwrap());
        let full = FlowModel::<f64>::from_params(tiny((true, true, true)), off.params.clone()).unwrap();
        assert_ne!(off.forward(&x, &z, 0.6).unwrap(), full.forward(&x, &z, 0.6).unwrap());
    }

    #[test]
    fn scale_flag_matches_neutral_head() {
        let (x, z) = (signal(32, 0.0), signal(32, 1.0));
        let off = FlowModel::<f64>::init(tiny((true, false, true)), 6).unwrap();
        let mut neutral = FlowModel::<f64>::from_params(tiny((true, true, true)), off.params.clone()).unwrap();
        for (name, t) in neutral.params.iter_mut() {
            if name.contains(".scale.") {
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        assert_eq!(off.forward(&x, &z, 0.2).unwrap(), neutral.forward(&x, &z, 0.2).unwrap());
    }

    #[test]
    fn layout_check_detects_mismatch() {
        let cfg = tiny((true, true, true));
        let p = init_params::<f32>(&cfg, 0).unwrap();
        assert!(check_layout(&cfg, &p).is_ok());
        let other = ModelConfig::small(1, 8, 8, 32);
        assert!(check_layout(&other, &p).is_err());
    }

    #[test]
    fn config_round_trip() {
        let cfg = ModelConfig {
            use_scale: false,
            ..ModelConfig::small(3, 16, 32, 64)
        };
        let mut flat = FlatConfig::new();
        cfg.write_to(&mut flat);
        assert_eq!(ModelConfig::from_flat(&flat).unwrap(), cfg);
        let d = ModelConfig::from_flat(&FlatConfig::new()).unwrap();
        assert_eq!((d.depth, d.embed_dim, d.state_dim), (4, 128, 256));
        flat.set("model.state_dim", 7);
        assert!(ModelConfig::from_flat(&flat).is_err());
    }
}
