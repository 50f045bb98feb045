//! Diagonal S5 layer: continuous-time parameters, zero-order-hold
//! discretization, sequential and work-efficient parallel scans, and the
//! adjoint used for training.
//!
//! Complex states come in conjugate pairs; only one member of each pair is
//! stored, so the readout is `y = 2 Re(C h) + D x`. A layer with `m` real
//! state dimensions holds `m / 2` complex states.

use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;

use crate::scalar::{row_major, transposed, Scalar};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SsmError {
    #[error("state dimension must be even and at least 2, got {0}")]
    OddStateDim(usize),
    #[error("feature dimension must be at least 1")]
    ZeroFeatures,
    #[error("eigenvalue {index} is zero")]
    ZeroEigenvalue { index: usize },
    #[error("eigenvalue {index} has non-negative real part")]
    Unstable { index: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct S5Layer<T> {
    /// Continuous-time diagonal state matrix, one entry per conjugate pair.
    pub lambda: Vec<Complex<T>>,
    /// `pairs × features`, row-major.
    pub b_in: Vec<Complex<T>>,
    /// `features × pairs`, row-major.
    pub c_out: Vec<Complex<T>>,
    pub d_skip: Vec<T>,
    pub log_delta: Vec<T>,
}

impl<T: Scalar> S5Layer<T> {
    pub fn pairs(&self) -> usize {
        self.lambda.len()
    }

    pub fn features(&self) -> usize {
        self.d_skip.len()
    }

    /// Real-equivalent state dimension `m`.
    pub fn state_dim(&self) -> usize {
        2 * self.pairs()
    }

    pub fn zeros(features: usize, pairs: usize) -> Self {
        let z = Complex::new(T::zero(), T::zero());
        Self {
            lambda: vec![Complex::new(-T::one(), T::zero()); pairs],
            b_in: vec![z; pairs * features],
            c_out: vec![z; features * pairs],
            d_skip: vec![T::zero(); features],
            log_delta: vec![T::zero(); pairs],
        }
    }

    pub fn check(&self) -> Result<(), SsmError> {
        let (p, n) = (self.pairs(), self.features());
        if n == 0 {
            return Err(SsmError::ZeroFeatures);
        }
        if self.b_in.len() != p * n || self.c_out.len() != n * p || self.log_delta.len() != p {
            return Err(SsmError::Shape(format!(
                "pairs {p}, features {n}: b_in {}, c_out {}, log_delta {}",
                self.b_in.len(),
                self.c_out.len(),
                self.log_delta.len()
            )));
        }
        for (index, l) in self.lambda.iter().enumerate() {
            if l.re == T::zero() && l.im == T::zero() {
                return Err(SsmError::ZeroEigenvalue { index });
            }
            if l.re >= T::zero() {
                return Err(SsmError::Unstable { index });
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> S5Layer<U> {
        let c = |z: &Complex<T>| Complex::new(U::of(z.re.as_f64()), U::of(z.im.as_f64()));
        let r = |v: &T| U::of(v.as_f64());
        S5Layer {
            lambda: self.lambda.iter().map(c).collect(),
            b_in: self.b_in.iter().map(c).collect(),
            c_out: self.c_out.iter().map(c).collect(),
            d_skip: self.d_skip.iter().map(r).collect(),
            log_delta: self.log_delta.iter().map(r).collect(),
        }
    }
}

/// S4D-Lin eigenvalues, normal input/output projections, unit skip and
/// log-uniform step sizes in [1e-3, 1e-1].
pub fn init_s5<T: Scalar>(features: usize, state_dim: usize, seed: u64) -> Result<S5Layer<T>, SsmError> {
    if state_dim < 2 || state_dim % 2 != 0 {
        return Err(SsmError::OddStateDim(state_dim));
    }
    if features == 0 {
        return Err(SsmError::ZeroFeatures);
    }
    let pairs = state_dim / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |scale: f64| -> Complex<T> {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        let s = scale * std::f64::consts::FRAC_1_SQRT_2;
        Complex::new(T::of(re * s), T::of(im * s))
    };
    let b_in = (0..pairs * features)
        .map(|_| normal(1.0 / (state_dim as f64).sqrt()))
        .collect();
    let c_out = (0..features * pairs)
        .map(|_| normal(1.0 / (features as f64).sqrt()))
        .collect();
    let log_step = Uniform::new(1e-3f64.ln(), 1e-1f64.ln()).expect("valid range");
    let log_delta = (0..pairs).map(|_| T::of(log_step.sample(&mut rng))).collect();
    let lambda = (0..pairs)
        .map(|j| Complex::new(T::of(-0.5), T::of(std::f64::consts::PI * j as f64)))
        .collect();
    Ok(S5Layer {
        lambda,
        b_in,
        c_out,
        d_skip: vec![T::one(); features],
        log_delta,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteS5<T> {
    /// Diagonal of the discrete transition matrix.
    pub a_bar: Vec<Complex<T>>,
    /// `pairs × features`, row-major.
    pub b_bar: Vec<Complex<T>>,
    /// Per-state input gain `(a_bar - 1) / lambda`.
    pub gain: Vec<Complex<T>>,
}

/// Zero-order hold: `a = exp(Δλ)`, `B̄ = (a - 1)/λ · B`.
pub fn discretize_zoh<T: Scalar>(layer: &S5Layer<T>) -> Result<DiscreteS5<T>, SsmError> {
    let n = layer.features();
    let mut a_bar = Vec::with_capacity(layer.pairs());
    let mut gain = Vec::with_capacity(layer.pairs());
    for (index, (&l, &ld)) in layer.lambda.iter().zip(&layer.log_delta).enumerate() {
        if l.re == T::zero() && l.im == T::zero() {
            return Err(SsmError::ZeroEigenvalue { index });
        }
        let a = (l * ld.exp()).exp();
        a_bar.push(a);
        gain.push((a - T::one()) / l);
    }
    let b_bar = layer
        .b_in
        .iter()
        .enumerate()
        .map(|(i, b)| gain[i / n] * b)
        .collect();
    Ok(DiscreteS5 { a_bar, b_bar, gain })
}

/// Per-state sequences stored state-major: entry `(j, k)` at `j * len + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSeq<T> {
    pub pairs: usize,
    pub len: usize,
    pub data: Vec<Complex<T>>,
}

impl<T: Scalar> StateSeq<T> {
    pub fn zeros(pairs: usize, len: usize) -> Self {
        Self {
            pairs,
            len,
            data: vec![Complex::new(T::zero(), T::zero()); pairs * len],
        }
    }

    pub fn at(&self, j: usize, k: usize) -> Complex<T> {
        self.data[j * self.len + k]
    }

    pub fn state(&self, j: usize) -> &[Complex<T>] {
        &self.data[j * self.len..(j + 1) * self.len]
    }
}

/// `h_k = a ⊙ h_{k-1} + u_k` with `h_0 = 0`, one step at a time.
pub fn scan_sequential<T: Scalar>(a_bar: &[Complex<T>], u: &StateSeq<T>) -> StateSeq<T> {
    assert_eq!(a_bar.len(), u.pairs, "a_bar length must equal state count");
    let mut out = u.clone();
    for (j, row) in out.data.chunks_mut(u.len.max(1)).enumerate().take(u.pairs) {
        scan_one_sequential(a_bar[j], row);
    }
    out
}

fn scan_one_sequential<T: Scalar>(a: Complex<T>, row: &mut [Complex<T>]) {
    let mut h = Complex::new(T::zero(), T::zero());
    for v in row.iter_mut() {
        h = a * h + *v;
        *v = h;
    }
}

/// Composition of affine maps `h ↦ a h + b`: applying `first` then `second`.
#[inline]
pub fn combine<T: Scalar>(
    first: (Complex<T>, Complex<T>),
    second: (Complex<T>, Complex<T>),
) -> (Complex<T>, Complex<T>) {
    (second.0 * first.0, second.0 * first.1 + second.1)
}

/// Work-efficient (Brent–Kung) inclusive scan with the associative operator
/// [`combine`]; states are processed in parallel.
pub fn scan_parallel<T: Scalar>(a_bar: &[Complex<T>], u: &StateSeq<T>) -> StateSeq<T> {
    assert_eq!(a_bar.len(), u.pairs, "a_bar length must equal state count");
    let mut out = u.clone();
    if u.len == 0 {
        return out;
    }
    out.data
        .par_chunks_mut(u.len)
        .zip(a_bar.par_iter())
        .for_each(|(row, &a)| scan_one_tree(a, row));
    out
}

fn scan_one_tree<T: Scalar>(a: Complex<T>, row: &mut [Complex<T>]) {
    let n = row.len();
    let mut mult = vec![a; n];
    // up-sweep: node i accumulates the span ending at i
    let mut d = 1;
    while d < n {
        let mut i = 2 * d - 1;
        while i < n {
            let (m, b) = combine((mult[i - d], row[i - d]), (mult[i], row[i]));
            mult[i] = m;
            row[i] = b;
            i += 2 * d;
        }
        d *= 2;
    }
    // down-sweep: fill in the prefixes that end between span boundaries
    d /= 2;
    while d >= 1 {
        let mut i = 3 * d - 1;
        while i < n {
            let (m, b) = combine((mult[i - d], row[i - d]), (mult[i], row[i]));
            mult[i] = m;
            row[i] = b;
            i += 2 * d;
        }
        d /= 2;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScanMode {
    #[default]
    Sequential,
    Parallel,
}

/// Intermediates of a forward pass needed by [`s5_backward`].
#[derive(Debug, Clone)]
pub struct S5Cache<T> {
    pub disc: DiscreteS5<T>,
    pub states: StateSeq<T>,
    b_bar_re: Vec<T>,
    b_bar_im: Vec<T>,
    c_re: Vec<T>,
    c_im: Vec<T>,
}

/// Layer output for `x` of shape `features × len` (row-major).
pub fn s5_forward<T: Scalar>(layer: &S5Layer<T>, x: &[T], len: usize) -> Result<Vec<T>, SsmError> {
    s5_forward_cached(layer, x, len, ScanMode::Sequential).map(|(y, _)| y)
}

pub fn s5_forward_cached<T: Scalar>(
    layer: &S5Layer<T>,
    x: &[T],
    len: usize,
    mode: ScanMode,
) -> Result<(Vec<T>, S5Cache<T>), SsmError> {
    let (p, n) = (layer.pairs(), layer.features());
    if x.len() != n * len {
        return Err(SsmError::Shape(format!(
            "input has {} values, expected {n} × {len}",
            x.len()
        )));
    }
    let disc = discretize_zoh(layer)?;
    let b_bar_re: Vec<T> = disc.b_bar.iter().map(|c| c.re).collect();
    let b_bar_im: Vec<T> = disc.b_bar.iter().map(|c| c.im).collect();
    let mut u_re = vec![T::zero(); p * len];
    let mut u_im = vec![T::zero(); p * len];
    T::gemm(p, n, len, T::one(), &b_bar_re, row_major(n), x, row_major(len), T::zero(), &mut u_re, row_major(len));
    T::gemm(p, n, len, T::one(), &b_bar_im, row_major(n), x, row_major(len), T::zero(), &mut u_im, row_major(len));
    let u = StateSeq {
        pairs: p,
        len,
        data: u_re.iter().zip(&u_im).map(|(&r, &i)| Complex::new(r, i)).collect(),
    };
    let states = match mode {
        ScanMode::Sequential => scan_sequential(&disc.a_bar, &u),
        ScanMode::Parallel => scan_parallel(&disc.a_bar, &u),
    };
    let h_re: Vec<T> = states.data.iter().map(|c| c.re).collect();
    let h_im: Vec<T> = states.data.iter().map(|c| c.im).collect();
    let c_re: Vec<T> = layer.c_out.iter().map(|c| c.re).collect();
    let c_im: Vec<T> = layer.c_out.iter().map(|c| c.im).collect();

    let mut y: Vec<T> = x
        .chunks(len.max(1))
        .zip(&layer.d_skip)
        .flat_map(|(row, &d)| row.iter().map(move |&v| d * v))
        .collect();
    y.resize(n * len, T::zero());
    let two = T::of(2.0);
    T::gemm(n, p, len, two, &c_re, row_major(p), &h_re, row_major(len), T::one(), &mut y, row_major(len));
    T::gemm(n, p, len, -two, &c_im, row_major(p), &h_im, row_major(len), T::one(), &mut y, row_major(len));
    Ok((
        y,
        S5Cache {
            disc,
            states,
            b_bar_re,
            b_bar_im,
            c_re,
            c_im,
        },
    ))
}

/// Gradients of a real loss. Complex entries hold `∂L/∂Re + i ∂L/∂Im`.
#[derive(Debug, Clone)]
pub struct S5Grads<T> {
    pub lambda: Vec<Complex<T>>,
    pub log_delta: Vec<T>,
    pub b_in: Vec<Complex<T>>,
    pub c_out: Vec<Complex<T>>,
    pub d_skip: Vec<T>,
    pub x: Vec<T>,
}

pub fn s5_backward<T: Scalar>(
    layer: &S5Layer<T>,
    cache: &S5Cache<T>,
    x: &[T],
    dy: &[T],
    len: usize,
) -> S5Grads<T> {
    let (p, n) = (layer.pairs(), layer.features());
    let zero = Complex::new(T::zero(), T::zero());
    let two = T::of(2.0);

    let d_skip: Vec<T> = x
        .chunks(len.max(1))
        .zip(dy.chunks(len.max(1)))
        .map(|(xr, gr)| xr.iter().zip(gr).map(|(&a, &b)| a * b).sum())
        .take(n)
        .collect();
    let mut dx: Vec<T> = dy
        .chunks(len.max(1))
        .zip(&layer.d_skip)
        .flat_map(|(row, &d)| row.iter().map(move |&v| d * v))
        .collect();
    dx.resize(n * len, T::zero());

    let h_re: Vec<T> = cache.states.data.iter().map(|c| c.re).collect();
    let h_im: Vec<T> = cache.states.data.iter().map(|c| c.im).collect();

    // readout y = 2 C_re h_re - 2 C_im h_im
    let mut dc_re = vec![T::zero(); n * p];
    let mut dc_im = vec![T::zero(); n * p];
    T::gemm(n, len, p, two, dy, row_major(len), &h_re, transposed(len), T::zero(), &mut dc_re, row_major(p));
    T::gemm(n, len, p, -two, dy, row_major(len), &h_im, transposed(len), T::zero(), &mut dc_im, row_major(p));
    let mut dh_re = vec![T::zero(); p * len];
    let mut dh_im = vec![T::zero(); p * len];
    T::gemm(p, n, len, two, &cache.c_re, transposed(p), dy, row_major(len), T::zero(), &mut dh_re, row_major(len));
    T::gemm(p, n, len, -two, &cache.c_im, transposed(p), dy, row_major(len), T::zero(), &mut dh_im, row_major(len));

    // reversed scan: δ_k = dh_k + conj(a) δ_{k+1}
    let mut du_re = vec![T::zero(); p * len];
    let mut du_im = vec![T::zero(); p * len];
    let mut da = vec![zero; p];
    for j in 0..p {
        let a_conj = cache.disc.a_bar[j].conj();
        let mut delta = zero;
        let mut acc = zero;
        for k in (0..len).rev() {
            let idx = j * len + k;
            delta = Complex::new(dh_re[idx], dh_im[idx]) + a_conj * delta;
            du_re[idx] = delta.re;
            du_im[idx] = delta.im;
            if k > 0 {
                acc = acc + delta * cache.states.data[idx - 1].conj();
            }
        }
        da[j] = acc;
    }

    // input projection u = B̄ x
    let mut dbb_re = vec![T::zero(); p * n];
    let mut dbb_im = vec![T::zero(); p * n];
    T::gemm(p, len, n, T::one(), &du_re, row_major(len), x, transposed(len), T::zero(), &mut dbb_re, row_major(n));
    T::gemm(p, len, n, T::one(), &du_im, row_major(len), x, transposed(len), T::zero(), &mut dbb_im, row_major(n));
    T::gemm(n, p, len, T::one(), &cache.b_bar_re, transposed(n), &du_re, row_major(len), T::one(), &mut dx, row_major(len));
    T::gemm(n, p, len, T::one(), &cache.b_bar_im, transposed(n), &du_im, row_major(len), T::one(), &mut dx, row_major(len));

    // B̄ = g ⊙ B, g = (a - 1)/λ, a = exp(Δλ)
    let mut b_in = vec![zero; p * n];
    let mut lambda = vec![zero; p];
    let mut log_delta = vec![T::zero(); p];
    for j in 0..p {
        let g = cache.disc.gain[j];
        let a = cache.disc.a_bar[j];
        let l = layer.lambda[j];
        let step = layer.log_delta[j].exp();
        let mut dg = zero;
        for i in 0..n {
            let idx = j * n + i;
            let dbb = Complex::new(dbb_re[idx], dbb_im[idx]);
            b_in[idx] = g.conj() * dbb;
            dg = dg + layer.b_in[idx].conj() * dbb;
        }
        let da_total = da[j] + l.inv().conj() * dg;
        let dmu = a.conj() * da_total;
        let dg_dl = -(a - T::one()) / (l * l);
        lambda[j] = dmu * step + dg_dl.conj() * dg;
        let d_step = (dmu.conj() * l).re;
        log_delta[j] = d_step * step;
    }

    let c_out = dc_re
        .iter()
        .zip(&dc_im)
        .map(|(&r, &i)| Complex::new(r, i))
        .collect();
    S5Grads {
        lambda,
        log_delta,
        b_in,
        c_out,
        d_skip,
        x: dx,
    }
}
