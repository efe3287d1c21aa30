//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! The engine supplies exactly the operations the attribution network needs.
//! Values are computed eagerly; each operation is recorded on a
//! [`Tape`] in topological order, and a single [`Tape::backward`] pass
//! accumulates chain-rule gradients into every tensor that requires them.
//!
//! Graph construction and backward are single-threaded per tape. Tensors
//! whose gradients are complete are read-only afterwards, so a finished tape
//! can be inspected from anywhere.

mod gradcheck;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckParam, GradCheckReport};

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Self-normalizing exponential-linear activation constants.
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

/// Norms at or below this are treated as degenerate by [`Tape::l2_normalize`].
pub const L2_NORM_EPSILON: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`]. Cheap to clone; the data lives
/// in the tape.
#[derive(Clone, Debug)]
pub struct DiffTensor {
    id: usize,
    shape: Vec<usize>,
}

impl DiffTensor {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }
}

/// One Bernoulli mask over the feature axis, shared by every tensor in a
/// dropout call. Survivors are scaled by `1/(1-rate)` so inference needs no
/// correction.
#[derive(Clone, Debug)]
pub struct FeatureMask<T> {
    scale: Arc<Vec<T>>,
    rate: f64,
}

impl<T: Scalar> FeatureMask<T> {
    pub fn sample<R: Rng>(features: usize, rate: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        let keep = 1.0 - rate;
        let boost = T::from_f64(1.0 / keep);
        let scale = (0..features)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    boost
                } else {
                    T::zero()
                }
            })
            .collect();
        Ok(Self {
            scale: Arc::new(scale),
            rate,
        })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Per-column multipliers (0 for dropped columns, `1/(1-rate)` otherwise).
    pub fn scale(&self) -> &[T] {
        &self.scale
    }
}

enum Op<T> {
    Leaf,
    EmbeddingLookup { table: usize, ids: Vec<usize> },
    Conv1d { input: usize, kernels: usize, bias: usize },
    Selu { x: usize },
    Relu { x: usize },
    GlobalMaxPool { x: usize, argmax: Vec<usize> },
    Dense { x: usize, w: usize, b: usize },
    L2Normalize { x: usize, norm: T, degenerate: bool },
    ScaleColumns { x: usize, scale: Arc<Vec<T>> },
    Concat { parts: Vec<usize> },
    Flatten { x: usize },
    Dot { a: usize, b: usize },
    Sum { x: usize },
    Mean { x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddScalar { x: usize },
    MulScalar { x: usize, c: T },
    AddN { xs: Vec<usize> },
    LogSumExp { x: usize },
    IndexScalar { x: usize, index: usize },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records executed operations in topological order; every operation appears
/// after the producers of all its inputs. Supports one backward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    backward_done: Cell<bool>,
    degenerate_normalizations: Cell<usize>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            backward_done: Cell::new(false),
            degenerate_normalizations: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of near-zero-norm inputs seen by [`Tape::l2_normalize`], which
    /// passes them through unchanged instead of dividing.
    pub fn degenerate_normalizations(&self) -> usize {
        self.degenerate_normalizations.get()
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> DiffTensor {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            shape: shape.clone(),
            value,
            grad: None,
            requires_grad,
            op,
        });
        DiffTensor { id, shape }
    }

    fn requires(&self, t: &DiffTensor) -> bool {
        self.nodes.borrow()[t.id].requires_grad
    }

    /// Constant input: participates in forward computation only.
    pub fn leaf(&self, shape: &[usize], data: Vec<T>) -> Result<DiffTensor> {
        check_shape(shape, data.len())?;
        Ok(self.push(shape.to_vec(), data, false, Op::Leaf))
    }

    /// Trainable input: receives a gradient on backward.
    pub fn param(&self, shape: &[usize], data: Vec<T>) -> Result<DiffTensor> {
        check_shape(shape, data.len())?;
        Ok(self.push(shape.to_vec(), data, true, Op::Leaf))
    }

    pub fn scalar(&self, v: T) -> DiffTensor {
        self.push(vec![1], vec![v], false, Op::Leaf)
    }

    pub fn value(&self, t: &DiffTensor) -> Vec<T> {
        self.nodes.borrow()[t.id].value.clone()
    }

    pub fn scalar_value(&self, t: &DiffTensor) -> T {
        let nodes = self.nodes.borrow();
        debug_assert_eq!(nodes[t.id].value.len(), 1);
        nodes[t.id].value[0]
    }

    /// Gradient of `t` after [`Tape::backward`]. For tensors that require a
    /// gradient but were never reached from the loss this is all zeros; for
    /// non-gradient tensors it is `None`.
    pub fn grad(&self, t: &DiffTensor) -> Option<Vec<T>> {
        let nodes = self.nodes.borrow();
        let node = &nodes[t.id];
        if !node.requires_grad {
            return None;
        }
        Some(match &node.grad {
            Some(g) => g.clone(),
            None => vec![T::zero(); node.value.len()],
        })
    }

    // ---- operations ------------------------------------------------------

    /// Gathers rows of `table` ([V, E]) at `ids`, producing [len(ids), E].
    /// Backward scatters into the looked-up rows, accumulating repeats.
    pub fn embedding_lookup(&self, table: &DiffTensor, ids: &[usize]) -> Result<DiffTensor> {
        let [v, e] = dims2(table, "embedding table")?;
        for (pos, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(Error::InvalidInput(format!(
                    "token id {id} at position {pos} out of range for vocab {v}"
                )));
            }
        }
        let mut out = Vec::with_capacity(ids.len() * e);
        {
            let nodes = self.nodes.borrow();
            let tab = &nodes[table.id].value;
            for &id in ids {
                out.extend_from_slice(&tab[id * e..(id + 1) * e]);
            }
        }
        let req = self.requires(table);
        Ok(self.push(
            vec![ids.len(), e],
            out,
            req,
            Op::EmbeddingLookup {
                table: table.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Valid (no padding) cross-correlation over the time axis.
    /// `input` is [T, E], `kernels` [F, K, E], `bias` [F]; output [T-K+1, F]
    /// with `out[t,f] = bias[f] + sum_{k,e} input[t+k,e] * kernels[f,k,e]`.
    pub fn conv1d(
        &self,
        input: &DiffTensor,
        kernels: &DiffTensor,
        bias: &DiffTensor,
    ) -> Result<DiffTensor> {
        let [t_in, e] = dims2(input, "conv input")?;
        let [f, k, ke] = dims3(kernels, "conv kernels")?;
        let [bf] = dims1(bias, "conv bias")?;
        if ke != e {
            return Err(Error::Shape(format!(
                "conv kernels expect {ke} input features, input has {e}"
            )));
        }
        if bf != f {
            return Err(Error::Shape(format!(
                "conv bias has {bf} entries for {f} filters"
            )));
        }
        if t_in < k {
            return Err(Error::Shape(format!(
                "conv input length {t_in} shorter than kernel size {k}; pad upstream"
            )));
        }
        let t_out = t_in - k + 1;
        let mut out = vec![T::zero(); t_out * f];
        {
            let nodes = self.nodes.borrow();
            let inp = &nodes[input.id].value;
            let ker = &nodes[kernels.id].value;
            let b = &nodes[bias.id].value;
            let window = k * e;
            for t in 0..t_out {
                let in_win = &inp[t * e..t * e + window];
                let row = &mut out[t * f..(t + 1) * f];
                for (fi, slot) in row.iter_mut().enumerate() {
                    *slot = b[fi] + dot(in_win, &ker[fi * window..(fi + 1) * window]);
                }
            }
        }
        let req = self.requires(input) || self.requires(kernels) || self.requires(bias);
        Ok(self.push(
            vec![t_out, f],
            out,
            req,
            Op::Conv1d {
                input: input.id,
                kernels: kernels.id,
                bias: bias.id,
            },
        ))
    }

    /// Elementwise scaled exponential-linear unit.
    pub fn selu(&self, x: &DiffTensor) -> DiffTensor {
        let lambda = T::from_f64(SELU_LAMBDA);
        let alpha = T::from_f64(SELU_ALPHA);
        let value = {
            let nodes = self.nodes.borrow();
            nodes[x.id]
                .value
                .iter()
                .map(|&v| {
                    if v > T::zero() {
                        lambda * v
                    } else {
                        lambda * alpha * (v.exp() - T::one())
                    }
                })
                .collect()
        };
        let req = self.requires(x);
        self.push(x.shape.clone(), value, req, Op::Selu { x: x.id })
    }

    pub fn relu(&self, x: &DiffTensor) -> DiffTensor {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[x.id].value.iter().map(|&v| v.max(T::zero())).collect()
        };
        let req = self.requires(x);
        self.push(x.shape.clone(), value, req, Op::Relu { x: x.id })
    }

    /// Max over the time axis of [T, F] -> [F]. Backward routes each
    /// channel's gradient to the first maximizing time index.
    pub fn global_max_pool(&self, x: &DiffTensor) -> Result<DiffTensor> {
        let [t, f] = dims2(x, "max pool input")?;
        if t == 0 {
            return Err(Error::Shape("max pool over an empty time axis".into()));
        }
        let mut out = vec![T::zero(); f];
        let mut argmax = vec![0usize; f];
        {
            let nodes = self.nodes.borrow();
            let v = &nodes[x.id].value;
            for fi in 0..f {
                let mut best = v[fi];
                let mut best_t = 0usize;
                for ti in 1..t {
                    let cand = v[ti * f + fi];
                    if cand > best {
                        best = cand;
                        best_t = ti;
                    }
                }
                out[fi] = best;
                argmax[fi] = best_t;
            }
        }
        let req = self.requires(x);
        Ok(self.push(vec![f], out, req, Op::GlobalMaxPool { x: x.id, argmax }))
    }

    /// `W·x + b` for `x` [N], `W` [M, N], `b` [M].
    pub fn dense(&self, x: &DiffTensor, w: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
        let [n] = dims1(x, "dense input")?;
        let [m, wn] = dims2(w, "dense weight")?;
        let [bm] = dims1(b, "dense bias")?;
        if wn != n || bm != m {
            return Err(Error::Shape(format!(
                "dense shapes do not conform: x[{n}], W[{m},{wn}], b[{bm}]"
            )));
        }
        let mut out = vec![T::zero(); m];
        {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.id].value;
            let wv = &nodes[w.id].value;
            let bv = &nodes[b.id].value;
            for mi in 0..m {
                out[mi] = bv[mi] + dot(&wv[mi * n..(mi + 1) * n], xv);
            }
        }
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(
            vec![m],
            out,
            req,
            Op::Dense {
                x: x.id,
                w: w.id,
                b: b.id,
            },
        ))
    }

    /// `x / ||x||₂` for a 1-D tensor. Inputs with norm at or below
    /// [`L2_NORM_EPSILON`] pass through unchanged and bump the tape's
    /// degenerate counter instead of raising an error.
    pub fn l2_normalize(&self, x: &DiffTensor) -> Result<DiffTensor> {
        let [_n] = dims1(x, "l2_normalize input")?;
        let (value, norm, degenerate) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[x.id].value;
            let norm = dot(v, v).sqrt();
            if norm.as_f64() <= L2_NORM_EPSILON {
                (v.clone(), T::one(), true)
            } else {
                (v.iter().map(|&e| e / norm).collect(), norm, false)
            }
        };
        if degenerate {
            self.degenerate_normalizations
                .set(self.degenerate_normalizations.get() + 1);
        }
        let req = self.requires(x);
        Ok(self.push(
            x.shape.clone(),
            value,
            req,
            Op::L2Normalize {
                x: x.id,
                norm,
                degenerate,
            },
        ))
    }

    /// Applies one shared feature mask to every tensor in `xs` (each shaped
    /// [*, E] or [E] with the same E). Sampling and application are split so
    /// a caller can reuse one mask across a whole batch.
    pub fn shared_mask_dropout<R: Rng>(
        &self,
        xs: &[DiffTensor],
        rate: f64,
        rng: &mut R,
    ) -> Result<Vec<DiffTensor>> {
        if rate == 0.0 {
            return Ok(xs.to_vec());
        }
        let features = match xs.first() {
            Some(t) => *t.shape().last().ok_or_else(|| {
                Error::Shape("dropout input needs at least one axis".into())
            })?,
            None => return Ok(Vec::new()),
        };
        let mask = FeatureMask::sample(features, rate, rng)?;
        xs.iter().map(|x| self.apply_feature_mask(x, &mask)).collect()
    }

    /// Multiplies every row of `x` by the mask's per-column scale.
    pub fn apply_feature_mask(&self, x: &DiffTensor, mask: &FeatureMask<T>) -> Result<DiffTensor> {
        let e = *x
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("dropout input needs at least one axis".into()))?;
        if e != mask.scale.len() {
            return Err(Error::Shape(format!(
                "feature mask has {} columns, tensor has {e}",
                mask.scale.len()
            )));
        }
        let value = {
            let nodes = self.nodes.borrow();
            scale_columns(&nodes[x.id].value, &mask.scale)
        };
        let req = self.requires(x);
        Ok(self.push(
            x.shape.clone(),
            value,
            req,
            Op::ScaleColumns {
                x: x.id,
                scale: Arc::clone(&mask.scale),
            },
        ))
    }

    /// Concatenates 1-D tensors.
    pub fn concat(&self, parts: &[DiffTensor]) -> Result<DiffTensor> {
        let mut total = 0usize;
        for p in parts {
            let [n] = dims1(p, "concat part")?;
            total += n;
        }
        let mut value = Vec::with_capacity(total);
        {
            let nodes = self.nodes.borrow();
            for p in parts {
                value.extend_from_slice(&nodes[p.id].value);
            }
        }
        let req = parts.iter().any(|p| self.requires(p));
        Ok(self.push(
            vec![total],
            value,
            req,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
            },
        ))
    }

    /// Reshapes to 1-D without copying semantics (gradient passes through).
    pub fn flatten(&self, x: &DiffTensor) -> DiffTensor {
        let value = self.value(x);
        let req = self.requires(x);
        self.push(vec![value.len()], value, req, Op::Flatten { x: x.id })
    }

    pub fn dot(&self, a: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
        let [na] = dims1(a, "dot lhs")?;
        let [nb] = dims1(b, "dot rhs")?;
        if na != nb {
            return Err(Error::Shape(format!("dot of lengths {na} and {nb}")));
        }
        let value = {
            let nodes = self.nodes.borrow();
            dot(&nodes[a.id].value, &nodes[b.id].value)
        };
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(vec![1], vec![value], req, Op::Dot { a: a.id, b: b.id }))
    }

    pub fn sum(&self, x: &DiffTensor) -> DiffTensor {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[x.id].value.iter().copied().sum()
        };
        let req = self.requires(x);
        self.push(vec![1], vec![value], req, Op::Sum { x: x.id })
    }

    pub fn mean(&self, x: &DiffTensor) -> Result<DiffTensor> {
        if x.len() == 0 {
            return Err(Error::Shape("mean of an empty tensor".into()));
        }
        let value = {
            let nodes = self.nodes.borrow();
            nodes[x.id].value.iter().copied().sum::<T>() / T::from_f64(x.len() as f64)
        };
        let req = self.requires(x);
        Ok(self.push(vec![1], vec![value], req, Op::Mean { x: x.id }))
    }

    pub fn add(&self, a: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
        self.zip_elementwise(a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&self, a: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
        self.zip_elementwise(a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&self, a: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
        self.zip_elementwise(a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn zip_elementwise(
        &self,
        a: &DiffTensor,
        b: &DiffTensor,
        f: impl Fn(T, T) -> T,
        op: impl FnOnce(usize, usize) -> Op<T>,
    ) -> Result<DiffTensor> {
        if a.shape != b.shape {
            return Err(Error::Shape(format!(
                "elementwise op on shapes {:?} and {:?}",
                a.shape, b.shape
            )));
        }
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.id]
                .value
                .iter()
                .zip(&nodes[b.id].value)
                .map(|(&x, &y)| f(x, y))
                .collect()
        };
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(a.shape.clone(), value, req, op(a.id, b.id)))
    }

    pub fn add_scalar(&self, x: &DiffTensor, c: T) -> DiffTensor {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[x.id].value.iter().map(|&v| v + c).collect()
        };
        let req = self.requires(x);
        self.push(x.shape.clone(), value, req, Op::AddScalar { x: x.id })
    }

    pub fn mul_scalar(&self, x: &DiffTensor, c: T) -> DiffTensor {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[x.id].value.iter().map(|&v| v * c).collect()
        };
        let req = self.requires(x);
        self.push(x.shape.clone(), value, req, Op::MulScalar { x: x.id, c })
    }

    /// Elementwise sum of same-shaped tensors.
    pub fn add_n(&self, xs: &[DiffTensor]) -> Result<DiffTensor> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Shape("add_n of zero tensors".into()))?;
        for x in xs {
            if x.shape != first.shape {
                return Err(Error::Shape("add_n on mismatched shapes".into()));
            }
        }
        let mut value = vec![T::zero(); first.len()];
        {
            let nodes = self.nodes.borrow();
            for x in xs {
                for (acc, &v) in value.iter_mut().zip(&nodes[x.id].value) {
                    *acc += v;
                }
            }
        }
        let req = xs.iter().any(|x| self.requires(x));
        Ok(self.push(
            first.shape.clone(),
            value,
            req,
            Op::AddN {
                xs: xs.iter().map(|x| x.id).collect(),
            },
        ))
    }

    /// Numerically stable `log(sum(exp(x)))` of a non-empty 1-D tensor.
    pub fn log_sum_exp(&self, x: &DiffTensor) -> Result<DiffTensor> {
        let [n] = dims1(x, "log_sum_exp input")?;
        if n == 0 {
            return Err(Error::Shape("log_sum_exp of an empty tensor".into()));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let v = &nodes[x.id].value;
            let m = v.iter().copied().fold(v[0], T::max);
            let s: T = v.iter().map(|&e| (e - m).exp()).sum();
            m + s.ln()
        };
        let req = self.requires(x);
        Ok(self.push(vec![1], vec![value], req, Op::LogSumExp { x: x.id }))
    }

    /// Selects one element of a 1-D tensor as a scalar.
    pub fn index(&self, x: &DiffTensor, index: usize) -> Result<DiffTensor> {
        let [n] = dims1(x, "index input")?;
        if index >= n {
            return Err(Error::InvalidInput(format!(
                "index {index} out of range for length {n}"
            )));
        }
        let value = self.nodes.borrow()[x.id].value[index];
        let req = self.requires(x);
        Ok(self.push(
            vec![1],
            vec![value],
            req,
            Op::IndexScalar { x: x.id, index },
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse-topological gradient accumulation from a scalar loss.
    pub fn backward(&self, loss: &DiffTensor) -> Result<()> {
        if !loss.is_scalar() {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape
            )));
        }
        if self.backward_done.replace(true) {
            return Err(Error::InvalidInput(
                "backward already ran on this tape".into(),
            ));
        }
        let mut nodes = self.nodes.borrow_mut();
        if !nodes[loss.id].requires_grad {
            // Loss does not depend on any parameter; all grads stay zero.
            return Ok(());
        }
        nodes[loss.id].grad = Some(vec![T::one()]);
        for i in (0..=loss.id).rev() {
            if nodes[i].grad.is_none() {
                continue;
            }
            let (parents, rest) = nodes.split_at_mut(i);
            let node = &rest[0];
            let grad = node.grad.as_ref().expect("checked above");
            backprop_one(node, grad, parents);
        }
        Ok(())
    }
}

/// Gradient contribution of a single node into its parents.
fn backprop_one<T: Scalar>(node: &Node<T>, g: &[T], parents: &mut [Node<T>]) {
    match &node.op {
        Op::Leaf => {}
        Op::EmbeddingLookup { table, ids } => {
            if parents[*table].requires_grad {
                let e = parents[*table].shape[1];
                let tg = grad_buf(&mut parents[*table]);
                for (pos, &id) in ids.iter().enumerate() {
                    axpy(T::one(), &g[pos * e..(pos + 1) * e], &mut tg[id * e..(id + 1) * e]);
                }
            }
        }
        Op::Conv1d {
            input,
            kernels,
            bias,
        } => {
            let e = parents[*input].shape[1];
            let f = parents[*kernels].shape[0];
            let k = parents[*kernels].shape[1];
            let t_out = node.shape[0];
            let window = k * e;
            if parents[*bias].requires_grad {
                let bg = grad_buf(&mut parents[*bias]);
                for t in 0..t_out {
                    axpy(T::one(), &g[t * f..(t + 1) * f], bg);
                }
            }
            if parents[*kernels].requires_grad {
                // dK[f,k,e] = sum_t g[t,f] * in[t+k,e]; contiguous axpy per (t,f).
                let input_val = parents[*input].value.clone();
                let kg = grad_buf(&mut parents[*kernels]);
                for t in 0..t_out {
                    let in_win = &input_val[t * e..t * e + window];
                    let grow = &g[t * f..(t + 1) * f];
                    for (fi, &gv) in grow.iter().enumerate() {
                        if gv != T::zero() {
                            axpy(gv, in_win, &mut kg[fi * window..(fi + 1) * window]);
                        }
                    }
                }
            }
            if parents[*input].requires_grad {
                let kernel_val = parents[*kernels].value.clone();
                let ig = grad_buf(&mut parents[*input]);
                for t in 0..t_out {
                    let grow = &g[t * f..(t + 1) * f];
                    let out_win = &mut ig[t * e..t * e + window];
                    for (fi, &gv) in grow.iter().enumerate() {
                        if gv != T::zero() {
                            axpy(gv, &kernel_val[fi * window..(fi + 1) * window], out_win);
                        }
                    }
                }
            }
        }
        Op::Selu { x } => {
            if parents[*x].requires_grad {
                let lambda = T::from_f64(SELU_LAMBDA);
                let alpha = T::from_f64(SELU_ALPHA);
                let xv = parents[*x].value.clone();
                let xg = grad_buf(&mut parents[*x]);
                for ((dst, &v), &gv) in xg.iter_mut().zip(&xv).zip(g) {
                    let d = if v > T::zero() {
                        lambda
                    } else {
                        lambda * alpha * v.exp()
                    };
                    *dst += d * gv;
                }
            }
        }
        Op::Relu { x } => {
            if parents[*x].requires_grad {
                let xv = parents[*x].value.clone();
                let xg = grad_buf(&mut parents[*x]);
                for ((dst, &v), &gv) in xg.iter_mut().zip(&xv).zip(g) {
                    if v > T::zero() {
                        *dst += gv;
                    }
                }
            }
        }
        Op::GlobalMaxPool { x, argmax } => {
            if parents[*x].requires_grad {
                let f = node.shape[0];
                let xg = grad_buf(&mut parents[*x]);
                for fi in 0..f {
                    xg[argmax[fi] * f + fi] += g[fi];
                }
            }
        }
        Op::Dense { x, w, b } => {
            let n = parents[*x].shape[0];
            let m = node.shape[0];
            if parents[*b].requires_grad {
                axpy(T::one(), g, grad_buf(&mut parents[*b]));
            }
            if parents[*w].requires_grad {
                let xv = parents[*x].value.clone();
                let wg = grad_buf(&mut parents[*w]);
                for mi in 0..m {
                    axpy(g[mi], &xv, &mut wg[mi * n..(mi + 1) * n]);
                }
            }
            if parents[*x].requires_grad {
                let wv = parents[*w].value.clone();
                let xg = grad_buf(&mut parents[*x]);
                for mi in 0..m {
                    axpy(g[mi], &wv[mi * n..(mi + 1) * n], xg);
                }
            }
        }
        Op::L2Normalize { x, norm, degenerate } => {
            if parents[*x].requires_grad {
                if *degenerate {
                    axpy(T::one(), g, grad_buf(&mut parents[*x]));
                } else {
                    // dx = (g - y (g·y)) / norm, with y the normalized output.
                    let y = &node.value;
                    let gy = dot(g, y);
                    let inv = T::one() / *norm;
                    let xg = grad_buf(&mut parents[*x]);
                    for ((dst, &yi), &gi) in xg.iter_mut().zip(y).zip(g) {
                        *dst += (gi - yi * gy) * inv;
                    }
                }
            }
        }
        Op::ScaleColumns { x, scale } => {
            if parents[*x].requires_grad {
                let xg = grad_buf(&mut parents[*x]);
                let e = scale.len();
                for (row_g, row_dst) in g.chunks(e).zip(xg.chunks_mut(e)) {
                    for ((dst, &gv), &s) in row_dst.iter_mut().zip(row_g).zip(scale.iter()) {
                        *dst += gv * s;
                    }
                }
            }
        }
        Op::Concat { parts } => {
            let mut offset = 0usize;
            for &p in parts {
                let len = parents[p].value.len();
                if parents[p].requires_grad {
                    axpy(T::one(), &g[offset..offset + len], grad_buf(&mut parents[p]));
                }
                offset += len;
            }
        }
        Op::Flatten { x } => {
            if parents[*x].requires_grad {
                axpy(T::one(), g, grad_buf(&mut parents[*x]));
            }
        }
        Op::Dot { a, b } => {
            let gv = g[0];
            if parents[*a].requires_grad {
                let bv = parents[*b].value.clone();
                axpy(gv, &bv, grad_buf(&mut parents[*a]));
            }
            if parents[*b].requires_grad {
                let av = parents[*a].value.clone();
                axpy(gv, &av, grad_buf(&mut parents[*b]));
            }
        }
        Op::Sum { x } => {
            if parents[*x].requires_grad {
                let gv = g[0];
                for dst in grad_buf(&mut parents[*x]).iter_mut() {
                    *dst += gv;
                }
            }
        }
        Op::Mean { x } => {
            if parents[*x].requires_grad {
                let n = parents[*x].value.len();
                let gv = g[0] / T::from_f64(n as f64);
                for dst in grad_buf(&mut parents[*x]).iter_mut() {
                    *dst += gv;
                }
            }
        }
        Op::Add { a, b } => {
            if parents[*a].requires_grad {
                axpy(T::one(), g, grad_buf(&mut parents[*a]));
            }
            if parents[*b].requires_grad {
                axpy(T::one(), g, grad_buf(&mut parents[*b]));
            }
        }
        Op::Sub { a, b } => {
            if parents[*a].requires_grad {
                axpy(T::one(), g, grad_buf(&mut parents[*a]));
            }
            if parents[*b].requires_grad {
                axpy(-T::one(), g, grad_buf(&mut parents[*b]));
            }
        }
        Op::Mul { a, b } => {
            if parents[*a].requires_grad {
                let bv = parents[*b].value.clone();
                let ag = grad_buf(&mut parents[*a]);
                for ((dst, &gv), &bvv) in ag.iter_mut().zip(g).zip(&bv) {
                    *dst += gv * bvv;
                }
            }
            if parents[*b].requires_grad {
                let av = parents[*a].value.clone();
                let bg = grad_buf(&mut parents[*b]);
                for ((dst, &gv), &avv) in bg.iter_mut().zip(g).zip(&av) {
                    *dst += gv * avv;
                }
            }
        }
        Op::AddScalar { x } => {
            if parents[*x].requires_grad {
                axpy(T::one(), g, grad_buf(&mut parents[*x]));
            }
        }
        Op::MulScalar { x, c } => {
            if parents[*x].requires_grad {
                axpy(*c, g, grad_buf(&mut parents[*x]));
            }
        }
        Op::AddN { xs } => {
            for &x in xs {
                if parents[x].requires_grad {
                    axpy(T::one(), g, grad_buf(&mut parents[x]));
                }
            }
        }
        Op::LogSumExp { x } => {
            if parents[*x].requires_grad {
                // d/dx log sum exp = softmax(x)
                let out = node.value[0];
                let gv = g[0];
                let xv = parents[*x].value.clone();
                let xg = grad_buf(&mut parents[*x]);
                for (dst, &v) in xg.iter_mut().zip(&xv) {
                    *dst += gv * (v - out).exp();
                }
            }
        }
        Op::IndexScalar { x, index } => {
            if parents[*x].requires_grad {
                grad_buf(&mut parents[*x])[*index] += g[0];
            }
        }
    }
}

fn grad_buf<T: Scalar>(node: &mut Node<T>) -> &mut Vec<T> {
    let len = node.value.len();
    node.grad.get_or_insert_with(|| vec![T::zero(); len])
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (dst, &v) in y.iter_mut().zip(x) {
        *dst += a * v;
    }
}

fn scale_columns<T: Scalar>(x: &[T], scale: &[T]) -> Vec<T> {
    let e = scale.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(e) {
        for (&v, &s) in row.iter().zip(scale) {
            out.push(v * s);
        }
    }
    out
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != len {
        return Err(Error::Shape(format!(
            "shape {shape:?} expects {expected} values, got {len}"
        )));
    }
    Ok(())
}

fn dims1(t: &DiffTensor, what: &str) -> Result<[usize; 1]> {
    match t.shape() {
        [a] => Ok([*a]),
        s => Err(Error::Shape(format!("{what} must be 1-D, got {s:?}"))),
    }
}

fn dims2(t: &DiffTensor, what: &str) -> Result<[usize; 2]> {
    match t.shape() {
        [a, b] => Ok([*a, *b]),
        s => Err(Error::Shape(format!("{what} must be 2-D, got {s:?}"))),
    }
}

fn dims3(t: &DiffTensor, what: &str) -> Result<[usize; 3]> {
    match t.shape() {
        [a, b, c] => Ok([*a, *b, *c]),
        s => Err(Error::Shape(format!("{what} must be 3-D, got {s:?}"))),
    }
}

#[cfg(test)]
mod tests;
