//! Conditional flow matching on the straight path from Gaussian noise to
//! data, and a Heun integrator for the learned ODE.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::network::{FlowModel, ModelError};
use crate::scalar::Scalar;

pub const DEFAULT_STEPS: usize = 25;

#[derive(Debug, thiserror::Error)]
pub enum FlowError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite state at sampler step {step}")]
    NonFinite { step: usize },
    #[error("non-finite model output: {0}")]
    NonFiniteLoss(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("window length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error("sampler needs at least one step")]
    ZeroSteps,
}

/// A velocity field `u(x, t | z)`.
pub trait VelocityField<T: Scalar>: Sync {
    fn velocity(&self, x: &[T], z: &[T], t: T) -> Result<Vec<T>, FlowError>;
}

impl<T: Scalar> VelocityField<T> for FlowModel<T> {
    fn velocity(&self, x: &[T], z: &[T], t: T) -> Result<Vec<T>, FlowError> {
        Ok(self.forward(x, z, t)?)
    }
}

/// Field given by a closure of `(x, t)`; the condition is ignored.
pub struct FnField<F>(pub F);

impl<T: Scalar, F> VelocityField<T> for FnField<F>
where
    F: Fn(&[T], T) -> Vec<T> + Sync,
{
    fn velocity(&self, x: &[T], _z: &[T], t: T) -> Result<Vec<T>, FlowError> {
        Ok((self.0)(x, t))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample<T> {
    pub x0: Vec<T>,
    pub x1: Vec<T>,
    pub t: T,
    pub xt: Vec<T>,
    pub u_target: Vec<T>,
}

impl<T: Scalar> FlowSample<T> {
    /// Point on the path at `t` between the given endpoints.
    pub fn new(x0: Vec<T>, x1: Vec<T>, t: T) -> Self {
        assert_eq!(x0.len(), x1.len(), "endpoint lengths differ");
        let s = T::one() - t;
        let xt = x0.iter().zip(&x1).map(|(&a, &b)| s * a + t * b).collect();
        let u_target = x0.iter().zip(&x1).map(|(&a, &b)| b - a).collect();
        Self { x0, x1, t, xt, u_target }
    }
}

pub fn standard_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<T> {
    (0..len)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::of(v)
        })
        .collect()
}

/// Draws `t ~ U[0, 1)` and then `x0 ~ N(0, I)`.
pub fn make_flow_sample<T: Scalar, R: Rng + ?Sized>(x1: &[T], rng: &mut R) -> FlowSample<T> {
    let t = T::of(rng.random::<f64>());
    let x0 = standard_normal(rng, x1.len());
    FlowSample::new(x0, x1.to_vec(), t)
}

fn mean_sq_diff<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&p, &q)| {
            let d = (p - q).as_f64();
            d * d
        })
        .sum::<f64>()
        / a.len().max(1) as f64
}

/// Flow-matching loss of precomputed samples, mean over samples and
/// positions. Per-sample terms are summed in input order.
pub fn cfm_loss_on<T: Scalar, M: VelocityField<T>>(
    model: &M,
    samples: &[(FlowSample<T>, &[T])],
) -> Result<f64, FlowError> {
    if samples.is_empty() {
        return Err(FlowError::EmptyBatch);
    }
    let terms: Vec<f64> = samples
        .par_iter()
        .map(|(s, z)| {
            let u = model.velocity(&s.xt, z, s.t)?;
            Ok(mean_sq_diff(&u, &s.u_target))
        })
        .collect::<Result<_, FlowError>>()?;
    let loss = terms.iter().sum::<f64>() / terms.len() as f64;
    if !loss.is_finite() {
        return Err(FlowError::NonFiniteLoss(format!("loss {loss}")));
    }
    Ok(loss)
}

/// Flow-matching loss of a batch of `(x1, z)` pairs with fresh `(t, x0)`
/// drawn from `rng` in batch order.
pub fn cfm_loss<T: Scalar, M: VelocityField<T>, R: Rng + ?Sized>(
    model: &M,
    batch: &[(&[T], &[T])],
    rng: &mut R,
) -> Result<f64, FlowError> {
    if batch.is_empty() {
        return Err(FlowError::EmptyBatch);
    }
    let k = batch[0].0.len();
    for (x1, z) in batch {
        for got in [x1.len(), z.len()] {
            if got != k {
                return Err(FlowError::Length { expected: k, got });
            }
        }
    }
    let samples: Vec<(FlowSample<T>, &[T])> = batch
        .iter()
        .map(|(x1, z)| (make_flow_sample(x1, rng), *z))
        .collect();
    cfm_loss_on(model, &samples)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub seed: u64,
    /// `(scale, offset)` applied as `scale · x + offset` to the final state.
    pub target_affine: (f64, f64),
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            seed: 0,
            target_affine: (1.0, 0.0),
        }
    }
}

/// Integrates `dx/dt = u(x, t | z)` from `t = 0` to `t = 1` with `steps`
/// Heun steps on a uniform grid (two field evaluations per step).
pub fn heun_integrate<T: Scalar, M: VelocityField<T> + ?Sized>(
    model: &M,
    x0: &[T],
    z: &[T],
    steps: usize,
) -> Result<Vec<T>, FlowError> {
    if steps == 0 {
        return Err(FlowError::ZeroSteps);
    }
    let dt = T::of(1.0 / steps as f64);
    let half = dt * T::of(0.5);
    let mut x = x0.to_vec();
    for i in 0..steps {
        let t0 = T::of(i as f64 / steps as f64);
        let t1 = T::of((i + 1) as f64 / steps as f64);
        let u0 = model.velocity(&x, z, t0)?;
        let pred: Vec<T> = x.iter().zip(&u0).map(|(&a, &u)| a + dt * u).collect();
        let u1 = model.velocity(&pred, z, t1)?;
        for ((a, &p), &q) in x.iter_mut().zip(&u0).zip(&u1) {
            *a += half * (p + q);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFinite { step: i });
        }
    }
    Ok(x)
}

/// Draws `x0 ~ N(0, I)` from `rng`, integrates, then applies the affine map.
pub fn heun_sample<T: Scalar, M: VelocityField<T> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    z: &[T],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<T>, FlowError> {
    let x0 = standard_normal(rng, z.len());
    let x = heun_integrate(model, &x0, z, cfg.steps)?;
    let (scale, offset) = (T::of(cfg.target_affine.0), T::of(cfg.target_affine.1));
    Ok(x.into_iter().map(|v| scale * v + offset).collect())
}

/// Seed used for window `index`: `seed + index` (wrapping).
pub fn window_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(index as u64)
}

/// One sampled reconstruction per PPG window. Window `i` uses its own
/// generator seeded with [`window_seed`], so results do not depend on the
/// number of threads and only on a window's position, not its neighbours.
pub fn reconstruct_windows<T: Scalar, M: VelocityField<T>>(
    model: &M,
    windows: &[Vec<T>],
    cfg: &SamplerConfig,
) -> Result<Vec<Vec<T>>, FlowError> {
    windows
        .par_iter()
        .enumerate()
        .map(|(i, z)| {
            let mut rng = ChaCha8Rng::seed_from_u64(window_seed(cfg.seed, i));
            heun_sample(model, z, cfg, &mut rng)
        })
        .collect()
}
