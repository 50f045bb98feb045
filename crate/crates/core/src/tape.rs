//! Minimal reverse-mode differentiation over matrix-valued nodes.
//!
//! Every node is a row-major `rows × cols` matrix. Parameters are read in
//! place from a borrowed [`ParamStore`]; backward accumulates into a store
//! of the same layout. Operations are coarse (matmul, layer norm, a fused S5
//! layer, ...) and each carries its own adjoint.

use std::cell::RefCell;

use num_complex::Complex;

use crate::params::{ParamStore, Tensor};
use crate::scalar::{row_major, transposed, Scalar};
use crate::ssm::{s5_backward, s5_forward_cached, S5Cache, S5Layer, ScanMode};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, thiserror::Error)]
pub enum GradError {
    #[error("loss is not finite: {0}")]
    NonFiniteLoss(f64),
    #[error("non-finite gradient for parameter '{0}'")]
    NonFiniteGradient(String),
    #[error("loss node must be 1 × 1, got {0} × {1}")]
    NotScalar(usize, usize),
}

/// Parameter names of one S5 layer inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct S5Names {
    pub log_neg_lambda_re: String,
    pub lambda_im: String,
    pub log_delta: String,
    pub b_re: String,
    pub b_im: String,
    pub c_re: String,
    pub c_im: String,
    pub d: String,
}

impl S5Names {
    pub fn with_prefix(prefix: &str) -> Self {
        let n = |s: &str| format!("{prefix}.{s}");
        Self {
            log_neg_lambda_re: n("log_neg_lambda_re"),
            lambda_im: n("lambda_im"),
            log_delta: n("log_delta"),
            b_re: n("b_re"),
            b_im: n("b_im"),
            c_re: n("c_re"),
            c_im: n("c_im"),
            d: n("d"),
        }
    }

    pub fn all(&self) -> [&str; 8] {
        [
            &self.log_neg_lambda_re,
            &self.lambda_im,
            &self.log_delta,
            &self.b_re,
            &self.b_im,
            &self.c_re,
            &self.c_im,
            &self.d,
        ]
    }
}

/// Builds the complex layer from its real-valued stored tensors. The real
/// part of each eigenvalue is stored as `log(-Re λ)`, which keeps it negative.
pub fn s5_layer_from_store<T: Scalar>(store: &ParamStore<T>, names: &S5Names) -> S5Layer<T> {
    let get = |n: &str| -> &Tensor<T> {
        store
            .get(n)
            .unwrap_or_else(|| panic!("missing S5 parameter '{n}'"))
    };
    let zip = |re: &Tensor<T>, im: &Tensor<T>| -> Vec<Complex<T>> {
        re.data
            .iter()
            .zip(&im.data)
            .map(|(&r, &i)| Complex::new(r, i))
            .collect()
    };
    let lre = get(&names.log_neg_lambda_re);
    let lim = get(&names.lambda_im);
    S5Layer {
        lambda: lre
            .data
            .iter()
            .zip(&lim.data)
            .map(|(&r, &i)| Complex::new(-r.exp(), i))
            .collect(),
        b_in: zip(get(&names.b_re), get(&names.b_im)),
        c_out: zip(get(&names.c_re), get(&names.c_im)),
        d_skip: get(&names.d).data.clone(),
        log_delta: get(&names.log_delta).data.clone(),
    }
}

/// Stores `layer` under `names` (inverse of [`s5_layer_from_store`]).
pub fn s5_layer_into_store<T: Scalar>(store: &mut ParamStore<T>, names: &S5Names, layer: &S5Layer<T>) {
    let (p, n) = (layer.pairs(), layer.features());
    let re = |v: &[Complex<T>]| v.iter().map(|c| c.re).collect::<Vec<_>>();
    let im = |v: &[Complex<T>]| v.iter().map(|c| c.im).collect::<Vec<_>>();
    store.insert(
        names.log_neg_lambda_re.clone(),
        Tensor::new(vec![p], layer.lambda.iter().map(|l| (-l.re).ln()).collect()),
    );
    store.insert(names.lambda_im.clone(), Tensor::new(vec![p], im(&layer.lambda)));
    store.insert(names.log_delta.clone(), Tensor::new(vec![p], layer.log_delta.clone()));
    store.insert(names.b_re.clone(), Tensor::new(vec![p, n], re(&layer.b_in)));
    store.insert(names.b_im.clone(), Tensor::new(vec![p, n], im(&layer.b_in)));
    store.insert(names.c_re.clone(), Tensor::new(vec![n, p], re(&layer.c_out)));
    store.insert(names.c_im.clone(), Tensor::new(vec![n, p], im(&layer.c_out)));
    store.insert(names.d.clone(), Tensor::new(vec![n], layer.d_skip.clone()));
}

struct S5Node<T> {
    param_idx: [usize; 8],
    layer: S5Layer<T>,
    cache: S5Cache<T>,
}

enum Op<T> {
    Param(usize),
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    /// `a (r×c) + v (r)` broadcast across columns
    AddCol(Var, Var),
    /// `a (r×c) ⊙ v (r)` broadcast across columns
    MulCol(Var, Var),
    /// normalization of each column over rows; keeps `1/σ` per column
    LayerNorm(Var, Vec<T>),
    Gelu(Var),
    Silu(Var),
    /// input (1×K), weight (out×k), bias (out)
    Conv1d(Var, Var, Var),
    S5(Var, Box<S5Node<T>>),
    /// mean squared difference to a constant target
    Mse(Var, Vec<T>),
    Mean(Var),
}

struct Node<T> {
    rows: usize,
    cols: usize,
    value: Option<Vec<T>>,
    op: Op<T>,
}

pub struct Tape<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: RefCell<Vec<Node<T>>>,
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let x3 = x * x * x;
    let inner = c * (x + k * x3);
    let th = inner.tanh();
    let value = half * x * (T::one() + th);
    let d_inner = c * (T::one() + T::of(3.0) * k * x * x);
    let deriv = half * (T::one() + th) + half * x * (T::one() - th * th) * d_inner;
    (value, deriv)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            rows,
            cols,
            value: Some(value),
            op,
        });
        Var(nodes.len() - 1)
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        (nodes[v.0].rows, nodes[v.0].cols)
    }

    /// Copy of a node's value.
    pub fn value(&self, v: Var) -> Vec<T> {
        self.with_value(v, |x| x.to_vec())
    }

    pub fn scalar(&self, v: Var) -> T {
        self.with_value(v, |x| x[0])
    }

    fn with_value<R>(&self, v: Var, f: impl FnOnce(&[T]) -> R) -> R {
        let nodes = self.nodes.borrow();
        match (&nodes[v.0].op, &nodes[v.0].value) {
            (Op::Param(idx), _) => f(&self.params.by_index(*idx).1.data),
            (_, Some(val)) => f(val),
            (_, None) => unreachable!("node value released"),
        }
    }

    pub fn param(&self, name: &str) -> Var {
        let idx = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"));
        let (rows, cols) = self.params.by_index(idx).1.matrix_dims();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            rows,
            cols,
            value: None,
            op: Op::Param(idx),
        });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, rows: usize, cols: usize, value: Vec<T>) -> Var {
        assert_eq!(value.len(), rows * cols, "constant shape mismatch");
        self.push(rows, cols, value, Op::Constant)
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (r, c) = self.dims(a);
        assert_eq!((r, c), self.dims(b), "elementwise shape mismatch");
        let out = self.with_value(a, |x| self.with_value(b, |y| x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect()));
        self.push(r, c, out, op)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn scale(&self, a: Var, s: T) -> Var {
        let (r, c) = self.dims(a);
        let out = self.with_value(a, |x| x.iter().map(|&v| v * s).collect());
        self.push(r, c, out, Op::Scale(a, s))
    }

    pub fn add_scalar(&self, a: Var, s: T) -> Var {
        let (r, c) = self.dims(a);
        let out = self.with_value(a, |x| x.iter().map(|&v| v + s).collect());
        self.push(r, c, out, Op::AddScalar(a))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul inner dimensions differ");
        let mut out = vec![T::zero(); m * n];
        self.with_value(a, |x| {
            self.with_value(b, |y| {
                T::gemm(m, k, n, T::one(), x, row_major(k), y, row_major(n), T::zero(), &mut out, row_major(n))
            })
        });
        self.push(m, n, out, Op::MatMul(a, b))
    }

    fn col_broadcast(&self, a: Var, v: Var, f: impl Fn(T, T) -> T + Copy, op: Op<T>) -> Var {
        let (r, c) = self.dims(a);
        let (vr, vc) = self.dims(v);
        assert_eq!(vr * vc, r, "column vector length must equal rows");
        let out = self.with_value(a, |x| {
            self.with_value(v, |w| {
                x.chunks(c.max(1))
                    .zip(w)
                    .flat_map(|(row, &s)| row.iter().map(move |&e| f(e, s)))
                    .collect()
            })
        });
        self.push(r, c, out, op)
    }

    pub fn add_col(&self, a: Var, v: Var) -> Var {
        self.col_broadcast(a, v, |e, s| e + s, Op::AddCol(a, v))
    }

    pub fn mul_col(&self, a: Var, v: Var) -> Var {
        self.col_broadcast(a, v, |e, s| e * s, Op::MulCol(a, v))
    }

    /// `w · x + b` with `w: out×in`, `x: in×K`, `b: out`.
    pub fn linear(&self, w: Var, b: Var, x: Var) -> Var {
        let y = self.matmul(w, x);
        self.add_col(y, b)
    }

    /// Normalizes every column to zero mean and unit variance across rows.
    pub fn layer_norm(&self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let eps = T::of(LAYER_NORM_EPS);
        let inv_n = T::one() / T::of(r as f64);
        let (out, rstd) = self.with_value(a, |x| {
            let mut out = vec![T::zero(); r * c];
            let mut rstd = vec![T::zero(); c];
            for k in 0..c {
                let mut mean = T::zero();
                for i in 0..r {
                    mean += x[i * c + k];
                }
                mean = mean * inv_n;
                let mut var = T::zero();
                for i in 0..r {
                    let d = x[i * c + k] - mean;
                    var += d * d;
                }
                let s = T::one() / (var * inv_n + eps).sqrt();
                rstd[k] = s;
                for i in 0..r {
                    out[i * c + k] = (x[i * c + k] - mean) * s;
                }
            }
            (out, rstd)
        });
        self.push(r, c, out, Op::LayerNorm(a, rstd))
    }

    pub fn gelu(&self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.with_value(a, |x| x.iter().map(|&v| gelu_parts(v).0).collect());
        self.push(r, c, out, Op::Gelu(a))
    }

    pub fn silu(&self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.with_value(a, |x| x.iter().map(|&v| v * sigmoid(v)).collect());
        self.push(r, c, out, Op::Silu(a))
    }

    /// Same-padded 1-D convolution of a single-channel sequence.
    pub fn conv1d_same(&self, x: Var, w: Var, b: Var) -> Var {
        let (xr, len) = self.dims(x);
        assert_eq!(xr, 1, "conv input must be a single channel");
        let (out_ch, ks) = self.dims(w);
        assert_eq!(ks % 2, 1, "kernel size must be odd");
        let half = ks / 2;
        let out = self.with_value(x, |xs| {
            self.with_value(w, |ws| {
                self.with_value(b, |bs| {
                    let mut out = vec![T::zero(); out_ch * len];
                    for o in 0..out_ch {
                        let row = &mut out[o * len..(o + 1) * len];
                        row.iter_mut().for_each(|v| *v = bs[o]);
                        for j in 0..ks {
                            let wv = ws[o * ks + j];
                            // out[k] += w[j] * x[k + j - half]
                            let lo = half.saturating_sub(j);
                            let hi = (len + half).saturating_sub(j).min(len);
                            for k in lo..hi {
                                row[k] += wv * xs[k + j - half];
                            }
                        }
                    }
                    out
                })
            })
        });
        self.push(out_ch, len, out, Op::Conv1d(x, w, b))
    }

    /// Fused S5 layer reading its parameters from the store under `names`.
    pub fn s5(&self, x: Var, names: &S5Names) -> Var {
        let (n, len) = self.dims(x);
        let layer = s5_layer_from_store(self.params, names);
        assert_eq!(layer.features(), n, "S5 feature dimension mismatch");
        let param_idx = names.all().map(|name| {
            self.params
                .index_of(name)
                .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
        });
        let (y, cache) = self.with_value(x, |xs| {
            s5_forward_cached(&layer, xs, len, ScanMode::Sequential).expect("valid S5 layer")
        });
        self.push(
            n,
            len,
            y,
            Op::S5(
                x,
                Box::new(S5Node {
                    param_idx,
                    layer,
                    cache,
                }),
            ),
        )
    }

    pub fn mse(&self, a: Var, target: &[T]) -> Var {
        let out = self.with_value(a, |x| {
            assert_eq!(x.len(), target.len(), "mse target length mismatch");
            let s: T = x.iter().zip(target).map(|(&p, &q)| (p - q) * (p - q)).sum();
            s / T::of(x.len() as f64)
        });
        self.push(1, 1, vec![out], Op::Mse(a, target.to_vec()))
    }

    pub fn mean(&self, a: Var) -> Var {
        let out = self.with_value(a, |x| x.iter().copied().sum::<T>() / T::of(x.len() as f64));
        self.push(1, 1, vec![out], Op::Mean(a))
    }

    /// Reverse sweep from the scalar `loss`; returns gradients for every
    /// parameter of the store (zeros where the loss does not depend on it).
    pub fn backward(&self, loss: Var) -> Result<ParamStore<T>, GradError> {
        let (r, c) = self.dims(loss);
        if (r, c) != (1, 1) {
            return Err(GradError::NotScalar(r, c));
        }
        let mut param_grads = self.params.zeros_like();
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        let value = |v: Var| -> &[T] {
            match (&nodes[v.0].op, &nodes[v.0].value) {
                (Op::Param(idx), _) => &self.params.by_index(*idx).1.data,
                (_, Some(val)) => val,
                _ => unreachable!(),
            }
        };
        fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize, f: impl FnOnce(&mut [T])) {
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
            f(slot);
        }
        let size = |v: Var| nodes[v.0].rows * nodes[v.0].cols;

        for id in (0..nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let (rows, cols) = (node.rows, node.cols);
            match &node.op {
                Op::Param(idx) => {
                    let t = param_grads.by_index_mut(*idx);
                    for (d, s) in t.data.iter_mut().zip(&g) {
                        *d += *s;
                    }
                }
                Op::Constant => {}
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.len(), |d| d.iter_mut().zip(&g).for_each(|(x, y)| *x += *y));
                    acc(&mut grads, *b, g.len(), |d| d.iter_mut().zip(&g).for_each(|(x, y)| *x += *y));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.len(), |d| d.iter_mut().zip(&g).for_each(|(x, y)| *x += *y));
                    acc(&mut grads, *b, g.len(), |d| d.iter_mut().zip(&g).for_each(|(x, y)| *x -= *y));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (value(*a), value(*b));
                    acc(&mut grads, *a, g.len(), |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * vb[i];
                        }
                    });
                    acc(&mut grads, *b, g.len(), |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * va[i];
                        }
                    });
                }
                Op::Scale(a, s) => {
                    acc(&mut grads, *a, g.len(), |d| d.iter_mut().zip(&g).for_each(|(x, y)| *x += *y * *s));
                }
                Op::AddScalar(a) => {
                    acc(&mut grads, *a, g.len(), |d| d.iter_mut().zip(&g).for_each(|(x, y)| *x += *y));
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[a.0].rows, nodes[a.0].cols);
                    let n = cols;
                    let (va, vb) = (value(*a), value(*b));
                    acc(&mut grads, *a, m * k, |d| {
                        T::gemm(m, n, k, T::one(), &g, row_major(n), vb, transposed(n), T::one(), d, row_major(k))
                    });
                    acc(&mut grads, *b, k * n, |d| {
                        T::gemm(k, m, n, T::one(), va, transposed(k), &g, row_major(n), T::one(), d, row_major(n))
                    });
                }
                Op::AddCol(a, v) => {
                    acc(&mut grads, *a, g.len(), |d| d.iter_mut().zip(&g).for_each(|(x, y)| *x += *y));
                    acc(&mut grads, *v, rows, |d| {
                        for (i, row) in g.chunks(cols.max(1)).enumerate().take(rows) {
                            d[i] += row.iter().copied().sum::<T>();
                        }
                    });
                }
                Op::MulCol(a, v) => {
                    let (va, vv) = (value(*a), value(*v));
                    acc(&mut grads, *a, g.len(), |d| {
                        for i in 0..rows {
                            for k in 0..cols {
                                d[i * cols + k] += g[i * cols + k] * vv[i];
                            }
                        }
                    });
                    acc(&mut grads, *v, rows, |d| {
                        for i in 0..rows {
                            let mut s = T::zero();
                            for k in 0..cols {
                                s += g[i * cols + k] * va[i * cols + k];
                            }
                            d[i] += s;
                        }
                    });
                }
                Op::LayerNorm(a, rstd) => {
                    let y = node.value.as_deref().expect("layer norm output");
                    let inv_n = T::one() / T::of(rows as f64);
                    acc(&mut grads, *a, g.len(), |d| {
                        for k in 0..cols {
                            let mut mg = T::zero();
                            let mut mgy = T::zero();
                            for i in 0..rows {
                                mg += g[i * cols + k];
                                mgy += g[i * cols + k] * y[i * cols + k];
                            }
                            mg = mg * inv_n;
                            mgy = mgy * inv_n;
                            for i in 0..rows {
                                let idx = i * cols + k;
                                d[idx] += rstd[k] * (g[idx] - mg - y[idx] * mgy);
                            }
                        }
                    });
                }
                Op::Gelu(a) => {
                    let va = value(*a);
                    acc(&mut grads, *a, g.len(), |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * gelu_parts(va[i]).1;
                        }
                    });
                }
                Op::Silu(a) => {
                    let va = value(*a);
                    acc(&mut grads, *a, g.len(), |d| {
                        for i in 0..d.len() {
                            let s = sigmoid(va[i]);
                            d[i] += g[i] * s * (T::one() + va[i] * (T::one() - s));
                        }
                    });
                }
                Op::Conv1d(x, w, b) => {
                    let len = cols;
                    let out_ch = rows;
                    let ks = nodes[w.0].cols;
                    let half = ks / 2;
                    let (xs, ws) = (value(*x), value(*w));
                    acc(&mut grads, *b, out_ch, |d| {
                        for o in 0..out_ch {
                            d[o] += g[o * len..(o + 1) * len].iter().copied().sum::<T>();
                        }
                    });
                    acc(&mut grads, *w, out_ch * ks, |d| {
                        for o in 0..out_ch {
                            let go = &g[o * len..(o + 1) * len];
                            for j in 0..ks {
                                let lo = half.saturating_sub(j);
                                let hi = (len + half).saturating_sub(j).min(len);
                                let mut s = T::zero();
                                for k in lo..hi {
                                    s += go[k] * xs[k + j - half];
                                }
                                d[o * ks + j] += s;
                            }
                        }
                    });
                    acc(&mut grads, *x, len, |d| {
                        for o in 0..out_ch {
                            let go = &g[o * len..(o + 1) * len];
                            for j in 0..ks {
                                let wv = ws[o * ks + j];
                                let lo = half.saturating_sub(j);
                                let hi = (len + half).saturating_sub(j).min(len);
                                for k in lo..hi {
                                    d[k + j - half] += go[k] * wv;
                                }
                            }
                        }
                    });
                }
                Op::S5(x, s5) => {
                    let xs = value(*x);
                    let sg = s5_backward(&s5.layer, &s5.cache, xs, &g, cols);
                    acc(&mut grads, *x, size(*x), |d| d.iter_mut().zip(&sg.x).for_each(|(p, q)| *p += *q));
                    let [i_lre, i_lim, i_ld, i_bre, i_bim, i_cre, i_cim, i_d] = s5.param_idx;
                    let add = |store: &mut ParamStore<T>, idx: usize, vals: &mut dyn Iterator<Item = T>| {
                        for (d, v) in store.by_index_mut(idx).data.iter_mut().zip(vals) {
                            *d += v;
                        }
                    };
                    // Re λ = -exp(w): ∂L/∂w = ∂L/∂Re λ · Re λ
                    add(
                        &mut param_grads,
                        i_lre,
                        &mut sg.lambda.iter().zip(&s5.layer.lambda).map(|(g, l)| g.re * l.re),
                    );
                    add(&mut param_grads, i_lim, &mut sg.lambda.iter().map(|g| g.im));
                    add(&mut param_grads, i_ld, &mut sg.log_delta.iter().copied());
                    add(&mut param_grads, i_bre, &mut sg.b_in.iter().map(|g| g.re));
                    add(&mut param_grads, i_bim, &mut sg.b_in.iter().map(|g| g.im));
                    add(&mut param_grads, i_cre, &mut sg.c_out.iter().map(|g| g.re));
                    add(&mut param_grads, i_cim, &mut sg.c_out.iter().map(|g| g.im));
                    add(&mut param_grads, i_d, &mut sg.d_skip.iter().copied());
                }
                Op::Mse(a, target) => {
                    let va = value(*a);
                    let s = g[0] * T::of(2.0) / T::of(va.len() as f64);
                    acc(&mut grads, *a, va.len(), |d| {
                        for i in 0..d.len() {
                            d[i] += s * (va[i] - target[i]);
                        }
                    });
                }
                Op::Mean(a) => {
                    let n = size(*a);
                    let s = g[0] / T::of(n as f64);
                    acc(&mut grads, *a, n, |d| d.iter_mut().for_each(|x| *x += s));
                }
            }
        }
        Ok(param_grads)
    }
}

/// Evaluates `loss_fn` on a fresh tape over `params` and returns the loss and
/// its gradient with respect to every parameter.
pub fn gradient<T, F>(params: &ParamStore<T>, loss_fn: F) -> Result<(T, ParamStore<T>), GradError>
where
    T: Scalar,
    F: FnOnce(&Tape<'_, T>) -> Var,
{
    let tape = Tape::new(params);
    let loss = loss_fn(&tape);
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(GradError::NonFiniteLoss(value.as_f64()));
    }
    let grads = tape.backward(loss)?;
    if let Some(name) = grads.first_non_finite() {
        return Err(GradError::NonFiniteGradient(name.to_string()));
    }
    Ok((value, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::init_s5;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store(entries: &[(&str, Vec<usize>, Vec<f64>)]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (n, shape, data) in entries {
            s.insert(*n, Tensor::new(shape.clone(), data.clone()));
        }
        s
    }

    #[test]
    fn quadratic_gradient_is_identity() {
        let theta = vec![0.5, -2.0, 3.0];
        let p = store(&[("theta", vec![3], theta.clone())]);
        let (loss, g) = gradient(&p, |t| {
            let th = t.param("theta");
            let sq = t.mul(th, th);
            let m = t.mean(sq);
            t.scale(m, 0.5 * 3.0)
        })
        .unwrap();
        assert!((loss - 0.5 * (0.25 + 4.0 + 9.0)).abs() < 1e-12);
        assert_eq!(g.get("theta").unwrap().data, theta);
    }

    #[test]
    fn detached_loss_has_zero_gradient() {
        let p = store(&[("w", vec![2], vec![1.0, 2.0])]);
        let (_, g) = gradient(&p, |t| {
            let _w = t.param("w");
            let c = t.constant(1, 1, vec![4.0]);
            t.mean(c)
        })
        .unwrap();
        assert_eq!(g.get("w").unwrap().data, vec![0.0, 0.0]);
    }

    #[test]
    fn non_finite_loss_reported() {
        let p = store(&[("w", vec![1], vec![f64::INFINITY])]);
        let r = gradient(&p, |t| {
            let w = t.param("w");
            t.mean(w)
        });
        assert!(matches!(r, Err(GradError::NonFiniteLoss(_))));
    }

    /// Central-difference check of every entry in `p`.
    fn check_all(p: &ParamStore<f64>, f: &dyn Fn(&Tape<'_, f64>) -> Var) {
        let (_, g) = gradient(p, f).unwrap();
        let eval = |q: &ParamStore<f64>| {
            let t = Tape::new(q);
            let l = f(&t);
            t.scalar(l)
        };
        for (name, tensor) in p.iter() {
            for i in 0..tensor.len() {
                let h = 1e-6;
                let mut a = p.clone();
                a.get_mut(name).unwrap().data[i] += h;
                let mut b = p.clone();
                b.get_mut(name).unwrap().data[i] -= h;
                let num = (eval(&a) - eval(&b)) / (2.0 * h);
                let ana = g.get(name).unwrap().data[i];
                assert!(
                    (num - ana).abs() <= 1e-6 * (1.0 + num.abs()),
                    "{name}[{i}]: {ana} vs {num}"
                );
            }
        }
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn elementwise_and_broadcast_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = store(&[
            ("w", vec![3, 4], rand_vec(&mut rng, 12)),
            ("x", vec![4, 5], rand_vec(&mut rng, 20)),
            ("b", vec![3], rand_vec(&mut rng, 3)),
            ("s", vec![3], rand_vec(&mut rng, 3)),
        ]);
        let target = rand_vec(&mut rng, 15);
        check_all(&p, &|t| {
            let y = t.linear(t.param("w"), t.param("b"), t.param("x"));
            let y = t.mul_col(y, t.param("s"));
            let g = t.gelu(y);
            let s = t.silu(y);
            let z = t.add(t.mul(g, s), t.sub(y, g));
            let z = t.add_scalar(t.scale(z, 1.5), 0.25);
            let n = t.layer_norm(z);
            t.mse(n, &target)
        });
    }

    #[test]
    fn conv_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = store(&[
            ("x", vec![1, 9], rand_vec(&mut rng, 9)),
            ("w", vec![2, 7], rand_vec(&mut rng, 14)),
            ("b", vec![2], rand_vec(&mut rng, 2)),
        ]);
        let target = rand_vec(&mut rng, 18);
        check_all(&p, &|t| {
            let y = t.conv1d_same(t.param("x"), t.param("w"), t.param("b"));
            t.mse(y, &target)
        });
    }

    #[test]
    fn conv_same_padding_values() {
        let p = store(&[
            ("x", vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]),
            ("w", vec![1, 3], vec![1.0, 10.0, 100.0]),
            ("b", vec![1], vec![0.5]),
        ]);
        let t = Tape::new(&p);
        let y = t.conv1d_same(t.param("x"), t.param("w"), t.param("b"));
        // y[k] = x[k-1] + 10 x[k] + 100 x[k+1] + 0.5
        assert_eq!(t.value(y), vec![210.5, 321.5, 432.5, 43.5]);
    }

    #[test]
    fn s5_gradient_through_store() {
        let layer = init_s5::<f64>(3, 4, 5).unwrap();
        let names = S5Names::with_prefix("ssm");
        let mut p = ParamStore::new();
        s5_layer_into_store(&mut p, &names, &layer);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        p.insert("x", Tensor::new(vec![3, 6], rand_vec(&mut rng, 18)));
        let back = s5_layer_from_store(&p, &names);
        for (a, b) in back.lambda.iter().zip(&layer.lambda) {
            assert!((a - b).norm() < 1e-12);
        }
        let target = rand_vec(&mut rng, 18);
        check_all(&p, &|t| {
            let y = t.s5(t.param("x"), &names);
            t.mse(y, &target)
        });
    }
}
