//! AdamW with decoupled weight decay, and global-norm gradient clipping.

use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OptimError {
    #[error("gradient layout does not match the parameters")]
    LayoutMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One update: `θ ← θ − lr · (m̂ / (√v̂ + ε) + λ θ)`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>) -> Result<(), OptimError> {
        if !params.same_layout(grads) || !params.same_layout(&self.m) {
            return Err(OptimError::LayoutMismatch);
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powf(self.step as f64);
        let bc2 = 1.0 - c.beta2.powf(self.step as f64);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let (inv_bc1, inv_bc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));
        let (lr, eps, wd) = (T::of(c.lr), T::of(c.eps), T::of(c.weight_decay));
        for idx in 0..params.len() {
            let g = &grads.by_index(idx).1.data;
            let m = &mut self.m.by_index_mut(idx).data;
            let v = &mut self.v.by_index_mut(idx).data;
            let p = &mut params.by_index_mut(idx).data;
            for i in 0..p.len() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                let m_hat = m[i] * inv_bc1;
                let v_hat = v[i] * inv_bc2;
                p[i] = p[i] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * p[i]);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` to global norm `max_norm` when it is larger; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm().as_f64();
    if norm > max_norm && norm > 0.0 {
        grads.scale(T::of(max_norm / norm));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Tensor;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("theta", Tensor::new(vec![1], vec![v]));
        p
    }

    #[test]
    fn first_step_hand_value() {
        let mut p = scalar_store(1.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = AdamWState::new(&p, cfg);
        st.step(&mut p, &scalar_store(1.0)).unwrap();
        let expect = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p.get("theta").unwrap().data[0] - expect).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = scalar_store(2.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut st = AdamWState::new(&p, cfg);
        st.step(&mut p, &scalar_store(0.0)).unwrap();
        assert!((p.get("theta").unwrap().data[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(vec![4], vec![0.5f64, -1.0, 3.0, 0.0]));
        let before = p.clone();
        let mut g = ParamStore::new();
        g.insert("w", Tensor::new(vec![4], vec![2.0f64, -0.01, 1e3, -7.0]));
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = AdamWState::new(&p, cfg);
        st.step(&mut p, &g).unwrap();
        for i in 0..4 {
            let moved = p.get("w").unwrap().data[i] - before.get("w").unwrap().data[i];
            let sign = g.get("w").unwrap().data[i].signum();
            assert!((moved + 0.01 * sign).abs() < 1e-6, "{i}: {moved}");
        }
    }

    #[test]
    fn runs_are_bitwise_repeatable() {
        let run = || {
            let mut p = ParamStore::new();
            p.insert("w", Tensor::new(vec![3], vec![0.1f32, 0.2, -0.3]));
            let mut st = AdamWState::new(&p, AdamWConfig::default());
            for k in 0..10 {
                let mut g = p.clone();
                g.scale(1.0 + k as f32);
                st.step(&mut p, &g).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn layout_mismatch_rejected() {
        let mut p = scalar_store(1.0);
        let mut st = AdamWState::new(&p, AdamWConfig::default());
        let mut g = ParamStore::new();
        g.insert("other", Tensor::new(vec![1], vec![1.0]));
        assert_eq!(st.step(&mut p, &g), Err(OptimError::LayoutMismatch));
    }

    #[test]
    fn clipping() {
        let mut g = ParamStore::new();
        g.insert("w", Tensor::new(vec![2], vec![3.0f64, 4.0]));
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
        assert_eq!(clip_global_norm(&mut g, 2.0), g.global_norm());
    }
}
