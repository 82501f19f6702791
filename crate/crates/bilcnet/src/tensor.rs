//! Dense row-major tensors with reverse-mode differentiation.
//!
//! Every operation records its parents and a backward closure on the output
//! node; [`Tensor::backward`] walks the graph in reverse topological order
//! and accumulates gradients. The operator set is closed: exactly what the
//! network needs, each primitive with a hand-derived backward that is held
//! to the finite-difference oracle in [`grad_check`].

use crate::num::Scalar;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch too small: batch normalization needs n >= 2 in training mode, got {0}")]
    BatchTooSmall(usize),
    #[error("invalid probability {0}: dropout rate must lie in [0, 1)")]
    InvalidProbability(f64),
    #[error("even kernel length {0}: depthwise convolution requires an odd kernel")]
    EvenKernel(usize),
}

pub type TensorResult<T> = Result<T, TensorError>;

fn shape_err(msg: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch(msg.into())
}

// --- gemm kernels -----------------------------------------------------------
//
// All kernels accumulate into `out`. Loop orders keep the innermost walk
// contiguous in both the streamed input and the output row.

/// out[m×p] += a[m×k] · b[k×p]
pub(crate) fn gemm_nn<S: Scalar>(m: usize, k: usize, p: usize, a: &[S], b: &[S], out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(out.len(), m * p);
    for i in 0..m {
        let out_row = &mut out[i * p..(i + 1) * p];
        for l in 0..k {
            let av = a[i * k + l];
            if av == S::zero() {
                continue;
            }
            let b_row = &b[l * p..(l + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// out[m×p] += a[m×k] · b[p×k]ᵀ
pub(crate) fn gemm_nt<S: Scalar>(m: usize, k: usize, p: usize, a: &[S], b: &[S], out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), p * k);
    debug_assert_eq!(out.len(), m * p);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * p..(i + 1) * p];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = acc + av * bv;
            }
            *o = *o + acc;
        }
    }
}

/// out[m×p] += a[k×m]ᵀ · b[k×p]
pub(crate) fn gemm_tn<S: Scalar>(m: usize, k: usize, p: usize, a: &[S], b: &[S], out: &mut [S]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(out.len(), m * p);
    for l in 0..k {
        let b_row = &b[l * p..(l + 1) * p];
        for i in 0..m {
            let av = a[l * m + i];
            if av == S::zero() {
                continue;
            }
            let out_row = &mut out[i * p..(i + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

// --- tensor core ------------------------------------------------------------

type BackwardFn<S> = Box<dyn Fn(&[S])>;

struct Inner<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
    parents: Vec<Tensor<S>>,
    backward: Option<BackwardFn<S>>,
}

/// Shared handle to a node of the computation graph.
pub struct Tensor<S: Scalar>(Rc<RefCell<Inner<S>>>);

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.0.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("data", &inner.data)
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    fn leaf(shape: Vec<usize>, data: Vec<S>) -> Tensor<S> {
        Tensor(Rc::new(RefCell::new(Inner {
            shape,
            data,
            grad: None,
            parents: Vec::new(),
            backward: None,
        })))
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<S>,
        parents: Vec<Tensor<S>>,
        backward: impl Fn(&[S]) + 'static,
    ) -> Tensor<S> {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor(Rc::new(RefCell::new(Inner {
            shape,
            data,
            grad: None,
            parents,
            backward: Some(Box::new(backward)),
        })))
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> TensorResult<Tensor<S>> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor::leaf(shape.to_vec(), data))
    }

    pub fn zeros(shape: &[usize]) -> Tensor<S> {
        Tensor::leaf(shape.to_vec(), vec![S::zero(); shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: S) -> Tensor<S> {
        Tensor::leaf(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: S) -> Tensor<S> {
        Tensor::leaf(vec![1], vec![value])
    }

    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<S> {
        let data = (0..shape.iter().product())
            .map(|_| S::from_f64(rng.gen_range(lo..hi)))
            .collect();
        Tensor::leaf(shape.to_vec(), data)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn ndim(&self) -> usize {
        self.0.borrow().shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().data.len()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.0.borrow().data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        let inner = self.0.borrow();
        assert_eq!(inner.data.len(), 1, "item() requires exactly one element");
        inner.data[0]
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Scale the stored gradient in place; no-op when no gradient is set.
    /// Used for global-norm clipping.
    pub fn scale_grad(&self, factor: S) {
        if let Some(grad) = self.0.borrow_mut().grad.as_mut() {
            for g in grad.iter_mut() {
                *g = *g * factor;
            }
        }
    }

    /// Replace the stored values (same length). Used by the optimizer and
    /// the gradient checker; does not touch the graph.
    pub fn set_data(&self, data: Vec<S>) {
        let mut inner = self.0.borrow_mut();
        assert_eq!(inner.data.len(), data.len(), "set_data length mismatch");
        inner.data = data;
    }

    /// Run `f` with mutable values and the current gradient (optimizer hook).
    pub fn with_data_and_grad<R>(&self, f: impl FnOnce(&mut [S], Option<&[S]>) -> R) -> R {
        let inner = &mut *self.0.borrow_mut();
        f(&mut inner.data, inner.grad.as_deref())
    }

    pub(crate) fn with_data<R>(&self, f: impl FnOnce(&[S]) -> R) -> R {
        f(&self.0.borrow().data)
    }

    /// Copy of the values as a graph leaf.
    pub fn detach(&self) -> Tensor<S> {
        let inner = self.0.borrow();
        Tensor::leaf(inner.shape.clone(), inner.data.clone())
    }

    pub(crate) fn accumulate_grad(&self, contrib: &[S]) {
        let mut inner = self.0.borrow_mut();
        let grad = inner
            .grad
            .get_or_insert_with(|| vec![S::zero(); contrib.len()]);
        debug_assert_eq!(grad.len(), contrib.len());
        for (g, &c) in grad.iter_mut().zip(contrib) {
            *g = *g + c;
        }
    }

    /// Reverse-mode sweep from a single-element output.
    pub fn backward(&self) {
        assert_eq!(
            self.numel(),
            1,
            "backward() starts from a single-element tensor"
        );
        let order = self.topo_order();
        self.accumulate_grad(&[S::one()]);
        for node in order.iter().rev() {
            let inner = node.0.borrow();
            let Some(backward) = inner.backward.as_ref() else {
                continue;
            };
            let Some(grad) = inner.grad.clone() else {
                continue;
            };
            backward(&grad);
        }
    }

    fn topo_order(&self) -> Vec<Tensor<S>> {
        let mut visited: HashSet<usize> = HashSet::new();
        let mut order = Vec::new();
        let mut stack: Vec<(Tensor<S>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            let key = Rc::as_ptr(&node.0) as usize;
            if !visited.insert(key) {
                continue;
            }
            stack.push((node.clone(), true));
            for parent in node.0.borrow().parents.iter() {
                stack.push((parent.clone(), false));
            }
        }
        order
    }
}

// --- elementwise and broadcast ops ------------------------------------------

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    // a single element broadcasts everywhere
    small.iter().product::<usize>() == 1
        || (small.len() <= big.len() && big[big.len() - small.len()..] == *small)
}

impl<S: Scalar> Tensor<S> {
    /// Elementwise sum; `other` may be a trailing-shape broadcast (e.g. a
    /// bias of shape [d] added to [n×d]).
    pub fn add(&self, other: &Tensor<S>) -> TensorResult<Tensor<S>> {
        let (ls, rs) = (self.shape(), other.shape());
        if !is_suffix(&rs, &ls) {
            return Err(shape_err(format!("add: {rs:?} does not broadcast onto {ls:?}")));
        }
        let rlen = other.numel();
        let data = self.with_data(|a| {
            other.with_data(|b| {
                a.iter()
                    .enumerate()
                    .map(|(i, &v)| v + b[i % rlen])
                    .collect::<Vec<S>>()
            })
        });
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            ls,
            data,
            vec![self.clone(), other.clone()],
            move |g| {
                pa.accumulate_grad(g);
                if rlen == g.len() {
                    pb.accumulate_grad(g);
                } else {
                    let mut acc = vec![S::zero(); rlen];
                    for (i, &gv) in g.iter().enumerate() {
                        acc[i % rlen] = acc[i % rlen] + gv;
                    }
                    pb.accumulate_grad(&acc);
                }
            },
        ))
    }

    /// Elementwise product with the same broadcast rule as [`Tensor::add`].
    pub fn mul(&self, other: &Tensor<S>) -> TensorResult<Tensor<S>> {
        let (ls, rs) = (self.shape(), other.shape());
        if !is_suffix(&rs, &ls) {
            return Err(shape_err(format!("mul: {rs:?} does not broadcast onto {ls:?}")));
        }
        let rlen = other.numel();
        let data = self.with_data(|a| {
            other.with_data(|b| {
                a.iter()
                    .enumerate()
                    .map(|(i, &v)| v * b[i % rlen])
                    .collect::<Vec<S>>()
            })
        });
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            ls,
            data,
            vec![self.clone(), other.clone()],
            move |g| {
                let da = pb.with_data(|b| {
                    g.iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * b[i % rlen])
                        .collect::<Vec<S>>()
                });
                let db = pa.with_data(|a| {
                    let mut acc = vec![S::zero(); rlen];
                    for (i, &gv) in g.iter().enumerate() {
                        acc[i % rlen] = acc[i % rlen] + gv * a[i];
                    }
                    acc
                });
                pa.accumulate_grad(&da);
                pb.accumulate_grad(&db);
            },
        ))
    }

    pub fn scale(&self, c: S) -> Tensor<S> {
        let data = self.with_data(|a| a.iter().map(|&v| v * c).collect::<Vec<S>>());
        let pa = self.clone();
        Tensor::from_op(self.shape(), data, vec![self.clone()], move |g| {
            let da: Vec<S> = g.iter().map(|&gv| gv * c).collect();
            pa.accumulate_grad(&da);
        })
    }

    fn unary_elementwise(
        &self,
        fwd: impl Fn(S) -> S,
        // (input value, output value) -> local derivative
        bwd: impl Fn(S, S) -> S + 'static,
    ) -> Tensor<S> {
        let data = self.with_data(|a| a.iter().map(|&v| fwd(v)).collect::<Vec<S>>());
        let saved_out = data.clone();
        let pa = self.clone();
        Tensor::from_op(self.shape(), data, vec![self.clone()], move |g| {
            let da = pa.with_data(|a| {
                g.iter()
                    .zip(a.iter().zip(&saved_out))
                    .map(|(&gv, (&x, &y))| gv * bwd(x, y))
                    .collect::<Vec<S>>()
            });
            pa.accumulate_grad(&da);
        })
    }

    /// Exact GELU: x·Φ(x) with the erf-based normal CDF.
    pub fn gelu(&self) -> Tensor<S> {
        let half = S::from_f64(0.5);
        let inv_sqrt2 = S::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let inv_sqrt_2pi = S::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
        let phi = move |x: S| half * (S::one() + (x * inv_sqrt2).erf());
        self.unary_elementwise(
            move |x| x * phi(x),
            move |x, _| phi(x) + x * inv_sqrt_2pi * (-(x * x) * half).exp(),
        )
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        self.unary_elementwise(
            |x| S::one() / (S::one() + (-x).exp()),
            |_, y| y * (S::one() - y),
        )
    }

    pub fn tanh(&self) -> Tensor<S> {
        self.unary_elementwise(|x| x.tanh(), |_, y| S::one() - y * y)
    }

    /// Swish / SiLU: x·σ(x).
    pub fn swish(&self) -> Tensor<S> {
        self.unary_elementwise(
            |x| x / (S::one() + (-x).exp()),
            |x, _| {
                let s = S::one() / (S::one() + (-x).exp());
                s * (S::one() + x * (S::one() - s))
            },
        )
    }
}

// --- matrix products --------------------------------------------------------

impl<S: Scalar> Tensor<S> {
    /// [m×k]·[k×p] → [m×p].
    pub fn matmul(&self, other: &Tensor<S>) -> TensorResult<Tensor<S>> {
        let (ls, rs) = (self.shape(), other.shape());
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(shape_err(format!("matmul: {ls:?} × {rs:?}")));
        }
        let (m, k, p) = (ls[0], ls[1], rs[1]);
        let mut data = vec![S::zero(); m * p];
        self.with_data(|a| other.with_data(|b| gemm_nn(m, k, p, a, b, &mut data)));
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            vec![m, p],
            data,
            vec![self.clone(), other.clone()],
            move |g| {
                let mut da = vec![S::zero(); m * k];
                pb.with_data(|b| gemm_nt(m, p, k, g, b, &mut da));
                let mut db = vec![S::zero(); k * p];
                pa.with_data(|a| gemm_tn(k, m, p, a, g, &mut db));
                pa.accumulate_grad(&da);
                pb.accumulate_grad(&db);
            },
        ))
    }

    /// Affine map x·wᵀ + bias with x:[n×in], w:[out×in], bias:[out].
    pub fn linear(&self, weight: &Tensor<S>, bias: Option<&Tensor<S>>) -> TensorResult<Tensor<S>> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err(format!("linear: x {xs:?} with w {ws:?}")));
        }
        let (n, d_in, d_out) = (xs[0], xs[1], ws[0]);
        if let Some(b) = bias {
            if b.shape() != [d_out] {
                return Err(shape_err(format!(
                    "linear: bias {:?} must be [{d_out}]",
                    b.shape()
                )));
            }
        }
        let mut data = vec![S::zero(); n * d_out];
        self.with_data(|x| weight.with_data(|w| gemm_nt(n, d_in, d_out, x, w, &mut data)));
        if let Some(b) = bias {
            b.with_data(|bv| {
                for row in data.chunks_mut(d_out) {
                    for (o, &v) in row.iter_mut().zip(bv) {
                        *o = *o + v;
                    }
                }
            });
        }
        let (px, pw) = (self.clone(), weight.clone());
        let pb = bias.cloned();
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(vec![n, d_out], data, parents, move |g| {
            let mut dx = vec![S::zero(); n * d_in];
            pw.with_data(|w| gemm_nn(n, d_out, d_in, g, w, &mut dx));
            let mut dw = vec![S::zero(); d_out * d_in];
            px.with_data(|x| gemm_tn(d_out, n, d_in, g, x, &mut dw));
            px.accumulate_grad(&dx);
            pw.accumulate_grad(&dw);
            if let Some(b) = &pb {
                let mut db = vec![S::zero(); d_out];
                for row in g.chunks(d_out) {
                    for (acc, &gv) in db.iter_mut().zip(row) {
                        *acc = *acc + gv;
                    }
                }
                b.accumulate_grad(&db);
            }
        }))
    }

    /// Batched product [B×m×k]·[B×k×p] → [B×m×p].
    pub fn bmm(&self, other: &Tensor<S>) -> TensorResult<Tensor<S>> {
        let (ls, rs) = (self.shape(), other.shape());
        if ls.len() != 3 || rs.len() != 3 || ls[0] != rs[0] || ls[2] != rs[1] {
            return Err(shape_err(format!("bmm: {ls:?} × {rs:?}")));
        }
        let (bn, m, k, p) = (ls[0], ls[1], ls[2], rs[2]);
        let mut data = vec![S::zero(); bn * m * p];
        self.with_data(|a| {
            other.with_data(|b| {
                for i in 0..bn {
                    gemm_nn(
                        m,
                        k,
                        p,
                        &a[i * m * k..(i + 1) * m * k],
                        &b[i * k * p..(i + 1) * k * p],
                        &mut data[i * m * p..(i + 1) * m * p],
                    );
                }
            })
        });
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            vec![bn, m, p],
            data,
            vec![self.clone(), other.clone()],
            move |g| {
                let mut da = vec![S::zero(); bn * m * k];
                let mut db = vec![S::zero(); bn * k * p];
                pa.with_data(|a| {
                    pb.with_data(|b| {
                        for i in 0..bn {
                            let gi = &g[i * m * p..(i + 1) * m * p];
                            gemm_nt(m, p, k, gi, &b[i * k * p..(i + 1) * k * p], &mut da[i * m * k..(i + 1) * m * k]);
                            gemm_tn(k, m, p, &a[i * m * k..(i + 1) * m * k], gi, &mut db[i * k * p..(i + 1) * k * p]);
                        }
                    })
                });
                pa.accumulate_grad(&da);
                pb.accumulate_grad(&db);
            },
        ))
    }

    /// Batched product against transposed right factor:
    /// [B×m×k]·[B×p×k]ᵀ → [B×m×p].
    pub fn bmm_nt(&self, other: &Tensor<S>) -> TensorResult<Tensor<S>> {
        let (ls, rs) = (self.shape(), other.shape());
        if ls.len() != 3 || rs.len() != 3 || ls[0] != rs[0] || ls[2] != rs[2] {
            return Err(shape_err(format!("bmm_nt: {ls:?} × {rs:?}")));
        }
        let (bn, m, k, p) = (ls[0], ls[1], ls[2], rs[1]);
        let mut data = vec![S::zero(); bn * m * p];
        self.with_data(|a| {
            other.with_data(|b| {
                for i in 0..bn {
                    gemm_nt(
                        m,
                        k,
                        p,
                        &a[i * m * k..(i + 1) * m * k],
                        &b[i * p * k..(i + 1) * p * k],
                        &mut data[i * m * p..(i + 1) * m * p],
                    );
                }
            })
        });
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            vec![bn, m, p],
            data,
            vec![self.clone(), other.clone()],
            move |g| {
                let mut da = vec![S::zero(); bn * m * k];
                let mut db = vec![S::zero(); bn * p * k];
                pa.with_data(|a| {
                    pb.with_data(|b| {
                        for i in 0..bn {
                            let gi = &g[i * m * p..(i + 1) * m * p];
                            gemm_nn(m, p, k, gi, &b[i * p * k..(i + 1) * p * k], &mut da[i * m * k..(i + 1) * m * k]);
                            gemm_tn(p, m, k, gi, &a[i * m * k..(i + 1) * m * k], &mut db[i * p * k..(i + 1) * p * k]);
                        }
                    })
                });
                pa.accumulate_grad(&da);
                pb.accumulate_grad(&db);
            },
        ))
    }
}

// --- normalization, softmax, dropout ----------------------------------------

impl<S: Scalar> Tensor<S> {
    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> TensorResult<Tensor<S>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(shape_err(format!(
                "softmax: axis {axis} out of range for {shape:?}"
            )));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut data = self.to_vec();
        for o in 0..outer {
            for r in 0..inner {
                let base = o * len * inner + r;
                let mut max = S::neg_infinity();
                for i in 0..len {
                    max = max.max(data[base + i * inner]);
                }
                let mut sum = S::zero();
                for i in 0..len {
                    let e = (data[base + i * inner] - max).exp();
                    data[base + i * inner] = e;
                    sum = sum + e;
                }
                for i in 0..len {
                    data[base + i * inner] = data[base + i * inner] / sum;
                }
            }
        }
        let saved_y = data.clone();
        let pa = self.clone();
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone()],
            move |g| {
                // dx = y ⊙ (g − ⟨g, y⟩) per fiber
                let mut dx = vec![S::zero(); g.len()];
                for o in 0..outer {
                    for r in 0..inner {
                        let base = o * len * inner + r;
                        let mut dot = S::zero();
                        for i in 0..len {
                            let idx = base + i * inner;
                            dot = dot + g[idx] * saved_y[idx];
                        }
                        for i in 0..len {
                            let idx = base + i * inner;
                            dx[idx] = saved_y[idx] * (g[idx] - dot);
                        }
                    }
                }
                pa.accumulate_grad(&dx);
            },
        ))
    }

    /// Standardize the last axis, then scale/shift: γ·x̂ + β.
    pub fn layer_norm(
        &self,
        gamma: &Tensor<S>,
        beta: &Tensor<S>,
        eps: f64,
    ) -> TensorResult<Tensor<S>> {
        let shape = self.shape();
        let d = *shape.last().ok_or_else(|| shape_err("layer_norm: rank 0"))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(shape_err(format!(
                "layer_norm: gamma {:?} / beta {:?} must be [{d}]",
                gamma.shape(),
                beta.shape()
            )));
        }
        let rows = self.numel() / d;
        let eps = S::from_f64(eps);
        let inv_d = S::one() / S::from_f64(d as f64);
        let mut xhat = vec![S::zero(); rows * d];
        let mut rstd = vec![S::zero(); rows];
        let mut data = vec![S::zero(); rows * d];
        self.with_data(|x| {
            gamma.with_data(|gm| {
                beta.with_data(|bt| {
                    for r in 0..rows {
                        let row = &x[r * d..(r + 1) * d];
                        let mean = row.iter().copied().sum::<S>() * inv_d;
                        let var = row
                            .iter()
                            .map(|&v| (v - mean) * (v - mean))
                            .sum::<S>()
                            * inv_d;
                        let rs = S::one() / (var + eps).sqrt();
                        rstd[r] = rs;
                        for j in 0..d {
                            let xh = (row[j] - mean) * rs;
                            xhat[r * d + j] = xh;
                            data[r * d + j] = gm[j] * xh + bt[j];
                        }
                    }
                })
            })
        });
        let (px, pg, pb) = (self.clone(), gamma.clone(), beta.clone());
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g| {
                let mut dgamma = vec![S::zero(); d];
                let mut dbeta = vec![S::zero(); d];
                let mut dx = vec![S::zero(); rows * d];
                pg.with_data(|gm| {
                    for r in 0..rows {
                        let grow = &g[r * d..(r + 1) * d];
                        let xrow = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxhat = S::zero();
                        let mut mean_dxhat_xhat = S::zero();
                        for j in 0..d {
                            dgamma[j] = dgamma[j] + grow[j] * xrow[j];
                            dbeta[j] = dbeta[j] + grow[j];
                            let dxh = grow[j] * gm[j];
                            mean_dxhat = mean_dxhat + dxh;
                            mean_dxhat_xhat = mean_dxhat_xhat + dxh * xrow[j];
                        }
                        mean_dxhat = mean_dxhat * inv_d;
                        mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
                        for j in 0..d {
                            let dxh = grow[j] * gm[j];
                            dx[r * d + j] =
                                rstd[r] * (dxh - mean_dxhat - xrow[j] * mean_dxhat_xhat);
                        }
                    }
                });
                px.accumulate_grad(&dx);
                pg.accumulate_grad(&dgamma);
                pb.accumulate_grad(&dbeta);
            },
        ))
    }

    /// Batch normalization over the first axis of an [n×d] tensor.
    ///
    /// Training mode normalizes by batch moments (biased variance) and
    /// updates `running_mean`/`running_var` in place with momentum 0.1
    /// (running variance stored unbiased); eval mode normalizes by the
    /// running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &self,
        gamma: &Tensor<S>,
        beta: &Tensor<S>,
        running_mean: &Tensor<S>,
        running_var: &Tensor<S>,
        training: bool,
        momentum: f64,
        eps: f64,
    ) -> TensorResult<Tensor<S>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(shape_err(format!("batch_norm: expected [n×d], got {shape:?}")));
        }
        let (n, d) = (shape[0], shape[1]);
        for (name, t) in [
            ("gamma", gamma),
            ("beta", beta),
            ("running_mean", running_mean),
            ("running_var", running_var),
        ] {
            if t.shape() != [d] {
                return Err(shape_err(format!(
                    "batch_norm: {name} {:?} must be [{d}]",
                    t.shape()
                )));
            }
        }
        let eps_s = S::from_f64(eps);
        if training {
            if n < 2 {
                return Err(TensorError::BatchTooSmall(n));
            }
            let inv_n = S::one() / S::from_f64(n as f64);
            let mut mean = vec![S::zero(); d];
            let mut var = vec![S::zero(); d];
            let mut xhat = vec![S::zero(); n * d];
            let mut rstd = vec![S::zero(); d];
            let mut data = vec![S::zero(); n * d];
            self.with_data(|x| {
                for row in x.chunks(d) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m = *m + v;
                    }
                }
                for m in mean.iter_mut() {
                    *m = *m * inv_n;
                }
                for row in x.chunks(d) {
                    for j in 0..d {
                        let c = row[j] - mean[j];
                        var[j] = var[j] + c * c;
                    }
                }
                for v in var.iter_mut() {
                    *v = *v * inv_n;
                }
                for j in 0..d {
                    rstd[j] = S::one() / (var[j] + eps_s).sqrt();
                }
                gamma.with_data(|gm| {
                    beta.with_data(|bt| {
                        for (i, row) in x.chunks(d).enumerate() {
                            for j in 0..d {
                                let xh = (row[j] - mean[j]) * rstd[j];
                                xhat[i * d + j] = xh;
                                data[i * d + j] = gm[j] * xh + bt[j];
                            }
                        }
                    })
                });
            });
            // running-stat update lives outside the graph
            let mom = S::from_f64(momentum);
            let keep = S::one() - mom;
            let unbias = S::from_f64(n as f64 / (n as f64 - 1.0));
            running_mean.with_data_and_grad(|rm, _| {
                for (r, &m) in rm.iter_mut().zip(&mean) {
                    *r = keep * *r + mom * m;
                }
            });
            running_var.with_data_and_grad(|rv, _| {
                for (r, &v) in rv.iter_mut().zip(&var) {
                    *r = keep * *r + mom * v * unbias;
                }
            });
            let (px, pg, pb) = (self.clone(), gamma.clone(), beta.clone());
            Ok(Tensor::from_op(
                shape,
                data,
                vec![self.clone(), gamma.clone(), beta.clone()],
                move |g| {
                    let mut dgamma = vec![S::zero(); d];
                    let mut dbeta = vec![S::zero(); d];
                    let mut sum_dxhat = vec![S::zero(); d];
                    let mut sum_dxhat_xhat = vec![S::zero(); d];
                    let mut dx = vec![S::zero(); n * d];
                    pg.with_data(|gm| {
                        for i in 0..n {
                            for j in 0..d {
                                let gv = g[i * d + j];
                                let xh = xhat[i * d + j];
                                dgamma[j] = dgamma[j] + gv * xh;
                                dbeta[j] = dbeta[j] + gv;
                                let dxh = gv * gm[j];
                                sum_dxhat[j] = sum_dxhat[j] + dxh;
                                sum_dxhat_xhat[j] = sum_dxhat_xhat[j] + dxh * xh;
                            }
                        }
                        for i in 0..n {
                            for j in 0..d {
                                let dxh = g[i * d + j] * gm[j];
                                dx[i * d + j] = rstd[j]
                                    * inv_n
                                    * (S::from_f64(n as f64) * dxh
                                        - sum_dxhat[j]
                                        - xhat[i * d + j] * sum_dxhat_xhat[j]);
                            }
                        }
                    });
                    px.accumulate_grad(&dx);
                    pg.accumulate_grad(&dgamma);
                    pb.accumulate_grad(&dbeta);
                },
            ))
        } else {
            // y = γ·(x − rm)·rstd + β with the running statistics frozen
            let mut scale = vec![S::zero(); d];
            let mut shift = vec![S::zero(); d];
            let mut rstd = vec![S::zero(); d];
            let mut rmean = vec![S::zero(); d];
            gamma.with_data(|gm| {
                beta.with_data(|bt| {
                    running_mean.with_data(|rm| {
                        running_var.with_data(|rv| {
                            for j in 0..d {
                                let rs = S::one() / (rv[j] + eps_s).sqrt();
                                rstd[j] = rs;
                                rmean[j] = rm[j];
                                scale[j] = gm[j] * rs;
                                shift[j] = bt[j] - gm[j] * rm[j] * rs;
                            }
                        })
                    })
                })
            });
            let mut data = vec![S::zero(); n * d];
            let mut xhat = vec![S::zero(); n * d];
            self.with_data(|x| {
                for (i, row) in x.chunks(d).enumerate() {
                    for j in 0..d {
                        xhat[i * d + j] = (row[j] - rmean[j]) * rstd[j];
                        data[i * d + j] = scale[j] * row[j] + shift[j];
                    }
                }
            });
            let (px, pg, pb) = (self.clone(), gamma.clone(), beta.clone());
            let saved_scale = scale;
            Ok(Tensor::from_op(
                shape,
                data,
                vec![self.clone(), gamma.clone(), beta.clone()],
                move |g| {
                    let mut dgamma = vec![S::zero(); d];
                    let mut dbeta = vec![S::zero(); d];
                    let mut dx = vec![S::zero(); n * d];
                    for i in 0..n {
                        for j in 0..d {
                            let gv = g[i * d + j];
                            dgamma[j] = dgamma[j] + gv * xhat[i * d + j];
                            dbeta[j] = dbeta[j] + gv;
                            dx[i * d + j] = gv * saved_scale[j];
                        }
                    }
                    px.accumulate_grad(&dx);
                    pg.accumulate_grad(&dgamma);
                    pb.accumulate_grad(&dbeta);
                },
            ))
        }
    }

    /// Inverted dropout: eval mode is the identity; train mode zeroes with
    /// probability `p` and scales survivors by 1/(1−p).
    pub fn dropout(&self, p: f64, training: bool, rng: &mut ChaCha8Rng) -> TensorResult<Tensor<S>> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidProbability(p));
        }
        if !training || p == 0.0 {
            let pa = self.clone();
            let data = self.to_vec();
            return Ok(Tensor::from_op(
                self.shape(),
                data,
                vec![self.clone()],
                move |g| pa.accumulate_grad(g),
            ));
        }
        let keep = S::from_f64(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..self.numel())
            .map(|_| if rng.gen::<f64>() < p { S::zero() } else { keep })
            .collect();
        let data = self.with_data(|a| {
            a.iter()
                .zip(&mask)
                .map(|(&v, &m)| v * m)
                .collect::<Vec<S>>()
        });
        let pa = self.clone();
        Ok(Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone()],
            move |g| {
                let dx: Vec<S> = g.iter().zip(&mask).map(|(&gv, &m)| gv * m).collect();
                pa.accumulate_grad(&dx);
            },
        ))
    }

    /// Per-channel 1-D convolution along the time axis with zero padding.
    /// `self` is [T×c] or [n×T×c]; `kernel` is [k×c] with odd k.
    pub fn depthwise_conv1d(&self, kernel: &Tensor<S>) -> TensorResult<Tensor<S>> {
        let shape = self.shape();
        let ks = kernel.shape();
        let (n, t, c) = match shape.len() {
            2 => (1, shape[0], shape[1]),
            3 => (shape[0], shape[1], shape[2]),
            _ => return Err(shape_err(format!("depthwise_conv1d: rank {} input", shape.len()))),
        };
        if ks.len() != 2 || ks[1] != c {
            return Err(shape_err(format!(
                "depthwise_conv1d: kernel {ks:?} must be [k×{c}]"
            )));
        }
        let k = ks[0];
        if k % 2 == 0 {
            return Err(TensorError::EvenKernel(k));
        }
        let off = (k / 2) as isize;
        let mut data = vec![S::zero(); n * t * c];
        self.with_data(|x| {
            kernel.with_data(|kn| {
                for b in 0..n {
                    let xb = &x[b * t * c..(b + 1) * t * c];
                    let ob = &mut data[b * t * c..(b + 1) * t * c];
                    for ti in 0..t as isize {
                        for j in 0..k as isize {
                            let src = ti + j - off;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            for ch in 0..c {
                                ob[ti as usize * c + ch] = ob[ti as usize * c + ch]
                                    + kn[j as usize * c + ch] * xb[src as usize * c + ch];
                            }
                        }
                    }
                }
            })
        });
        let (px, pk) = (self.clone(), kernel.clone());
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone(), kernel.clone()],
            move |g| {
                let mut dx = vec![S::zero(); n * t * c];
                let mut dk = vec![S::zero(); k * c];
                px.with_data(|x| {
                    pk.with_data(|kn| {
                        for b in 0..n {
                            let gb = &g[b * t * c..(b + 1) * t * c];
                            let xb = &x[b * t * c..(b + 1) * t * c];
                            let dxb = &mut dx[b * t * c..(b + 1) * t * c];
                            for ti in 0..t as isize {
                                for j in 0..k as isize {
                                    let src = ti + j - off;
                                    if src < 0 || src >= t as isize {
                                        continue;
                                    }
                                    for ch in 0..c {
                                        let gv = gb[ti as usize * c + ch];
                                        dxb[src as usize * c + ch] = dxb[src as usize * c + ch]
                                            + kn[j as usize * c + ch] * gv;
                                        dk[j as usize * c + ch] = dk[j as usize * c + ch]
                                            + xb[src as usize * c + ch] * gv;
                                    }
                                }
                            }
                        }
                    })
                });
                px.accumulate_grad(&dx);
                pk.accumulate_grad(&dk);
            },
        ))
    }
}

// --- shape surgery ----------------------------------------------------------

impl<S: Scalar> Tensor<S> {
    pub fn reshape(&self, shape: &[usize]) -> TensorResult<Tensor<S>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(shape_err(format!(
                "reshape: {:?} ({} values) to {shape:?} ({numel})",
                self.shape(),
                self.numel()
            )));
        }
        let pa = self.clone();
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            move |g| pa.accumulate_grad(g),
        ))
    }

    /// Row t of the time axis: [n×T×d] → [n×d].
    pub fn slice_time(&self, t: usize) -> TensorResult<Tensor<S>> {
        let shape = self.shape();
        if shape.len() != 3 || t >= shape[1] {
            return Err(shape_err(format!("slice_time: t={t} on {shape:?}")));
        }
        let (n, tt, d) = (shape[0], shape[1], shape[2]);
        let data = self.with_data(|x| {
            let mut out = Vec::with_capacity(n * d);
            for b in 0..n {
                out.extend_from_slice(&x[(b * tt + t) * d..(b * tt + t + 1) * d]);
            }
            out
        });
        let pa = self.clone();
        Ok(Tensor::from_op(
            vec![n, d],
            data,
            vec![self.clone()],
            move |g| {
                let mut dx = vec![S::zero(); n * tt * d];
                for b in 0..n {
                    dx[(b * tt + t) * d..(b * tt + t + 1) * d].copy_from_slice(&g[b * d..(b + 1) * d]);
                }
                pa.accumulate_grad(&dx);
            },
        ))
    }

    /// Assemble per-step [n×d] tensors into [n×T×d].
    pub fn stack_time(steps: &[Tensor<S>]) -> TensorResult<Tensor<S>> {
        if steps.is_empty() {
            return Err(shape_err("stack_time: no steps"));
        }
        let first = steps[0].shape();
        if first.len() != 2 {
            return Err(shape_err(format!("stack_time: steps must be [n×d], got {first:?}")));
        }
        let (n, d) = (first[0], first[1]);
        for s in steps {
            if s.shape() != first {
                return Err(shape_err(format!(
                    "stack_time: inconsistent step shapes {:?} vs {first:?}",
                    s.shape()
                )));
            }
        }
        let tt = steps.len();
        let mut data = vec![S::zero(); n * tt * d];
        for (t, s) in steps.iter().enumerate() {
            s.with_data(|sd| {
                for b in 0..n {
                    data[(b * tt + t) * d..(b * tt + t + 1) * d]
                        .copy_from_slice(&sd[b * d..(b + 1) * d]);
                }
            });
        }
        let parents: Vec<Tensor<S>> = steps.to_vec();
        let handles: Vec<Tensor<S>> = steps.to_vec();
        Ok(Tensor::from_op(
            vec![n, tt, d],
            data,
            parents,
            move |g| {
                for (t, s) in handles.iter().enumerate() {
                    let mut ds = vec![S::zero(); n * d];
                    for b in 0..n {
                        ds[b * d..(b + 1) * d]
                            .copy_from_slice(&g[(b * tt + t) * d..(b * tt + t + 1) * d]);
                    }
                    s.accumulate_grad(&ds);
                }
            },
        ))
    }

    /// Concatenate along the last axis; all leading axes must match.
    pub fn concat_last(&self, other: &Tensor<S>) -> TensorResult<Tensor<S>> {
        let (ls, rs) = (self.shape(), other.shape());
        if ls.len() != rs.len()
            || ls.is_empty()
            || ls[..ls.len() - 1] != rs[..rs.len() - 1]
        {
            return Err(shape_err(format!("concat_last: {ls:?} with {rs:?}")));
        }
        let (d1, d2) = (ls[ls.len() - 1], rs[rs.len() - 1]);
        let rows = self.numel() / d1;
        let mut shape = ls.clone();
        *shape.last_mut().unwrap() = d1 + d2;
        let mut data = vec![S::zero(); rows * (d1 + d2)];
        self.with_data(|a| {
            other.with_data(|b| {
                for r in 0..rows {
                    data[r * (d1 + d2)..r * (d1 + d2) + d1]
                        .copy_from_slice(&a[r * d1..(r + 1) * d1]);
                    data[r * (d1 + d2) + d1..(r + 1) * (d1 + d2)]
                        .copy_from_slice(&b[r * d2..(r + 1) * d2]);
                }
            })
        });
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone(), other.clone()],
            move |g| {
                let mut da = vec![S::zero(); rows * d1];
                let mut db = vec![S::zero(); rows * d2];
                for r in 0..rows {
                    da[r * d1..(r + 1) * d1]
                        .copy_from_slice(&g[r * (d1 + d2)..r * (d1 + d2) + d1]);
                    db[r * d2..(r + 1) * d2]
                        .copy_from_slice(&g[r * (d1 + d2) + d1..(r + 1) * (d1 + d2)]);
                }
                pa.accumulate_grad(&da);
                pb.accumulate_grad(&db);
            },
        ))
    }

    /// Columns [start, start+len) of the last axis.
    pub fn slice_last(&self, start: usize, len: usize) -> TensorResult<Tensor<S>> {
        let shape = self.shape();
        let d = *shape.last().ok_or_else(|| shape_err("slice_last: rank 0"))?;
        if start + len > d {
            return Err(shape_err(format!(
                "slice_last: [{start}, {}) out of last axis {d}",
                start + len
            )));
        }
        let rows = self.numel() / d;
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = len;
        let data = self.with_data(|x| {
            let mut out = Vec::with_capacity(rows * len);
            for r in 0..rows {
                out.extend_from_slice(&x[r * d + start..r * d + start + len]);
            }
            out
        });
        let pa = self.clone();
        let total = self.numel();
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone()],
            move |g| {
                let mut dx = vec![S::zero(); total];
                for r in 0..rows {
                    dx[r * d + start..r * d + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                pa.accumulate_grad(&dx);
            },
        ))
    }

    /// [n×T×d] → [n·h×T×(d/h)]: expose attention heads as the batch axis.
    pub fn split_heads(&self, heads: usize) -> TensorResult<Tensor<S>> {
        let shape = self.shape();
        if shape.len() != 3 || shape[2] % heads != 0 {
            return Err(shape_err(format!("split_heads: {shape:?} into {heads} heads")));
        }
        let (n, t, d) = (shape[0], shape[1], shape[2]);
        let dh = d / heads;
        let data = self.with_data(|x| {
            let mut out = vec![S::zero(); n * t * d];
            for b in 0..n {
                for h in 0..heads {
                    for ti in 0..t {
                        let src = (b * t + ti) * d + h * dh;
                        let dst = (((b * heads + h) * t) + ti) * dh;
                        out[dst..dst + dh].copy_from_slice(&x[src..src + dh]);
                    }
                }
            }
            out
        });
        let pa = self.clone();
        Ok(Tensor::from_op(
            vec![n * heads, t, dh],
            data,
            vec![self.clone()],
            move |g| {
                let mut dx = vec![S::zero(); n * t * d];
                for b in 0..n {
                    for h in 0..heads {
                        for ti in 0..t {
                            let dst = (b * t + ti) * d + h * dh;
                            let src = (((b * heads + h) * t) + ti) * dh;
                            dx[dst..dst + dh].copy_from_slice(&g[src..src + dh]);
                        }
                    }
                }
                pa.accumulate_grad(&dx);
            },
        ))
    }

    /// Inverse of [`Tensor::split_heads`]: [n·h×T×dh] → [n×T×(h·dh)].
    pub fn merge_heads(&self, heads: usize) -> TensorResult<Tensor<S>> {
        let shape = self.shape();
        if shape.len() != 3 || shape[0] % heads != 0 {
            return Err(shape_err(format!("merge_heads: {shape:?} from {heads} heads")));
        }
        let (nh, t, dh) = (shape[0], shape[1], shape[2]);
        let n = nh / heads;
        let d = heads * dh;
        let data = self.with_data(|x| {
            let mut out = vec![S::zero(); n * t * d];
            for b in 0..n {
                for h in 0..heads {
                    for ti in 0..t {
                        let src = (((b * heads + h) * t) + ti) * dh;
                        let dst = (b * t + ti) * d + h * dh;
                        out[dst..dst + dh].copy_from_slice(&x[src..src + dh]);
                    }
                }
            }
            out
        });
        let pa = self.clone();
        Ok(Tensor::from_op(
            vec![n, t, d],
            data,
            vec![self.clone()],
            move |g| {
                let mut dx = vec![S::zero(); nh * t * dh];
                for b in 0..n {
                    for h in 0..heads {
                        for ti in 0..t {
                            let dst = (((b * heads + h) * t) + ti) * dh;
                            let src = (b * t + ti) * d + h * dh;
                            dx[dst..dst + dh].copy_from_slice(&g[src..src + dh]);
                        }
                    }
                }
                pa.accumulate_grad(&dx);
            },
        ))
    }

    /// Scalar Σᵢ selfᵢ·wᵢ over all elements (shapes must match).
    pub fn weighted_sum(&self, weights: &Tensor<S>) -> TensorResult<Tensor<S>> {
        if self.shape() != weights.shape() {
            return Err(shape_err(format!(
                "weighted_sum: {:?} vs {:?}",
                self.shape(),
                weights.shape()
            )));
        }
        let value = self.with_data(|a| {
            weights.with_data(|w| {
                a.iter()
                    .zip(w)
                    .map(|(&x, &wv)| x * wv)
                    .sum::<S>()
            })
        });
        let (pa, pw) = (self.clone(), weights.clone());
        Ok(Tensor::from_op(
            vec![1],
            vec![value],
            vec![self.clone(), weights.clone()],
            move |g| {
                let g0 = g[0];
                let da = pw.with_data(|w| w.iter().map(|&wv| wv * g0).collect::<Vec<S>>());
                let dw = pa.with_data(|a| a.iter().map(|&x| x * g0).collect::<Vec<S>>());
                pa.accumulate_grad(&da);
                pw.accumulate_grad(&dw);
            },
        ))
    }
}

// --- named parameters -------------------------------------------------------

/// How a named tensor participates in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer, carries gradients.
    Trainable,
    /// Persisted with the model but never differentiated
    /// (running statistics and the like).
    State,
}

/// A named tensor inside a model; names are hierarchical and unique.
#[derive(Debug, Clone)]
pub struct Parameter<S: Scalar> {
    pub name: String,
    pub tensor: Tensor<S>,
    pub kind: ParamKind,
}

impl<S: Scalar> Parameter<S> {
    pub fn trainable(name: impl Into<String>, tensor: &Tensor<S>) -> Self {
        Parameter {
            name: name.into(),
            tensor: tensor.clone(),
            kind: ParamKind::Trainable,
        }
    }

    pub fn state(name: impl Into<String>, tensor: &Tensor<S>) -> Self {
        Parameter {
            name: name.into(),
            tensor: tensor.clone(),
            kind: ParamKind::State,
        }
    }
}

// --- gradient checking ------------------------------------------------------

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all probed coordinates.
    pub max_rel_err: f64,
    /// Largest |analytic − numeric| over all probed coordinates.
    pub max_abs_err: f64,
    pub pass: bool,
    /// Coordinates actually probed.
    pub evaluated: usize,
}

/// Compare analytic gradients of a scalar-valued closure against central
/// finite differences for every tensor in `inputs`.
///
/// The step is precision-dependent ([`Scalar::fd_step`]); relative error per
/// coordinate is |a−n| / max(|a|, |n|, 1e−8). A coordinate passes when its
/// relative error is below `tol` or its absolute error is below `abs_tol`:
/// the difference quotient carries roundoff of order ε/h, so coordinates
/// whose true gradient sits near zero can never meet a relative bound, while
/// a wrong backward produces disagreement proportional to the gradient
/// itself. Pass `abs_tol = 0.0` for the strict relative criterion.
/// `max_coords_per_tensor`, when set, probes a seeded random subset of
/// coordinates of large tensors.
pub fn grad_check<S: Scalar>(
    f: &dyn Fn(&[Tensor<S>]) -> TensorResult<Tensor<S>>,
    inputs: &[Tensor<S>],
    tol: f64,
    abs_tol: f64,
    max_coords_per_tensor: Option<usize>,
    seed: u64,
) -> TensorResult<GradCheckReport> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    for t in inputs {
        t.zero_grad();
    }
    let out = f(inputs)?;
    assert_eq!(out.numel(), 1, "grad_check requires a scalar-valued closure");
    out.backward();
    let analytic: Vec<Vec<S>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![S::zero(); t.numel()]))
        .collect();

    let h = S::fd_step();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel_err = 0.0f64;
    let mut max_abs_err = 0.0f64;
    let mut pass = true;
    let mut evaluated = 0usize;
    for (ti, tensor) in inputs.iter().enumerate() {
        let n = tensor.numel();
        let coords: Vec<usize> = match max_coords_per_tensor {
            Some(cap) if n > cap => {
                let mut all: Vec<usize> = (0..n).collect();
                all.shuffle(&mut rng);
                all.truncate(cap);
                all
            }
            _ => (0..n).collect(),
        };
        let base = tensor.to_vec();
        for &ci in &coords {
            let x0 = base[ci].as_f64();
            let mut bumped = base.clone();
            bumped[ci] = S::from_f64(x0 + h);
            tensor.set_data(bumped.clone());
            let f_plus = f(inputs)?.item().as_f64();
            bumped[ci] = S::from_f64(x0 - h);
            tensor.set_data(bumped);
            let f_minus = f(inputs)?.item().as_f64();
            tensor.set_data(base.clone());

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[ti][ci].as_f64();
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
            max_rel_err = max_rel_err.max(rel);
            max_abs_err = max_abs_err.max(abs);
            if rel >= tol && abs >= abs_tol {
                pass = false;
            }
            evaluated += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        max_abs_err,
        pass,
        evaluated,
    })
}
