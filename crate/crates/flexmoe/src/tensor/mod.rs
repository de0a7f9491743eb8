//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Design decisions, fixed here and relied on everywhere else:
//!
//! * All arithmetic is 64-bit. Desk scale makes precision cheap and lets the
//!   finite-difference gradient checker run at tight tolerances.
//! * Storage is a flat row-major `Vec<f64>`; no strides, no views. Operations
//!   that need sub-structure (row gather/scatter, column slices) copy.
//! * Differentiation is tape-based: a [`Tape`] records every operation of a
//!   forward pass; [`Tape::backward`] walks it once in reverse, accumulating
//!   into each recorded node. Model parameters live outside the tape in a
//!   [`ParamStore`] and are leased onto it per forward pass, so one set of
//!   weights can serve any number of tapes.
//! * Every completed operation validates that its output is finite; a NaN or
//!   infinity surfaces as [`Error::Numeric`](crate::Error) at the op that
//!   produced it rather than poisoning downstream math.
//! * Top-k selection keeps the k largest entries per row, ties broken by
//!   lowest column index, and is used both for masking (here) and routing
//!   (the smoe module) through one shared kernel so the two can never
//!   disagree.

mod gradcheck;
mod tape;

pub(crate) mod kernels;

pub use gradcheck::{grad_check, GradCheckReport, WorstCoord};
pub use tape::{NodeId, Tape};

use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Dense multi-dimensional array of f64 in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor, validating the shape/data length contract and that
    /// every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {} elements, got {}",
                numel(&shape),
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite value in tensor data".into()));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = numel(&shape);
        Tensor { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Tensor> {
        let n = numel(&shape);
        Tensor::new(shape, vec![value; n])
    }

    /// i.i.d. normal(0, std²) entries drawn from `rng`.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Tensor {
        let n = numel(&shape);
        let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for optimizers; the caller is responsible for keeping
    /// values finite (the tape re-validates on lease).
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Marks the tensor trainable and allocates its gradient buffer.
    pub fn with_grad(mut self) -> Tensor {
        self.requires_grad = true;
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let g = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }
}

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named collection of trainable tensors with a stable iteration order.
///
/// The order is the insertion order, which model constructors fix, so
/// optimizer state, checkpoints, and gradient checks all agree on parameter
/// identity without string lookups on the hot path.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    /// Registers a tensor as trainable; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|(n, _)| *n != name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, tensor.with_grad()));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries.iter().enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in &mut self.entries {
            t.zero_grad();
        }
    }

    /// Total scalar parameter count.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

/// Row-stochastic softmax of each row; forward-only convenience mirroring the
/// tape operation (both share one kernel).
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (n, m) = as_2d(logits.shape())?;
    let mut out = logits.data().to_vec();
    for r in 0..n {
        kernels::softmax_row(&mut out[r * m..(r + 1) * m]);
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Keeps the k largest entries of each row (ties to the lowest column index)
/// and zeroes the rest; survivors are NOT renormalized, so a row of the
/// result generally sums to less than one. Forward-only convenience
/// mirroring the tape operation.
pub fn topk_mask(values: &Tensor, k: usize) -> Result<Tensor> {
    let (n, m) = as_2d(values.shape())?;
    if k == 0 || k > m {
        return Err(Error::Argument(format!("top-k k={k} out of range 1..={m}")));
    }
    let mut out = vec![0.0; values.len()];
    for r in 0..n {
        let row = &values.data()[r * m..(r + 1) * m];
        for &j in &kernels::topk_indices(row, k) {
            out[r * m + j] = row[j];
        }
    }
    Tensor::new(values.shape().to_vec(), out)
}

/// Mean over rows of −log softmax(logits)[target]; forward-only convenience
/// mirroring the tape operation.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let (n, c) = as_2d(logits.shape())?;
    if targets.len() != n {
        return Err(Error::Argument(format!("{} targets for {n} rows", targets.len())));
    }
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(Error::Argument(format!("target {t} out of range for {c} classes")));
        }
        let row = &logits.data()[r * c..(r + 1) * c];
        total += kernels::log_sum_exp(row) - row[t];
    }
    Ok(total / n as f64)
}

pub(crate) fn as_2d(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [n, m] => Ok((*n, *m)),
        other => Err(Error::Shape(format!("expected a 2-d tensor, got shape {other:?}"))),
    }
}

#[cfg(test)]
mod tests;
