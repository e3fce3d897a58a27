//! Dense N-d tensors (canonical layout N×C×H×W) with reverse-mode
//! automatic differentiation. Values are stored contiguously; f32 is used
//! for training and f64 for gradient checking.

mod autograd;
mod conv;
pub mod fft;
#[cfg(test)]
mod gradtests;
pub mod ops;
pub mod spatial;

pub use autograd::{backward, gradcheck, GradCheckReport, Graph};
pub use conv::{conv2d, filter_apply, Padding};
pub use spatial::{
    adaptive_avg_pool, channel_mean, layer_norm, pool_stats, resample, PoolKind, Resample,
};

use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use crate::error::{Error, Result};

/// Element type of a tensor: f32 for training, f64 for gradient checks.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }
    pub fn from_tag(tag: u8) -> Option<Dtype> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

struct Buffers<T> {
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

/// Backward rule of one recorded op: given the op inputs, the output data
/// and the incoming output gradient, produce one optional gradient buffer
/// per input (None for inputs that do not need one).
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&[Tensor<T>], &[T], &[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

pub(crate) struct Node<T: Scalar> {
    pub(crate) name: &'static str,
    pub(crate) inputs: Vec<Tensor<T>>,
    pub(crate) backward: BackwardFn<T>,
}

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static FINITE_CHECK: Cell<bool> = const { Cell::new(false) };
}

/// Run `f` without recording any autodiff graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

/// Run `f` with per-op finiteness checks enabled; the first op producing a
/// NaN/Inf output fails with its name. Used to diagnose non-finite losses.
pub fn with_finite_checks<R>(f: impl FnOnce() -> R) -> R {
    let prev = FINITE_CHECK.with(|g| g.replace(true));
    let out = f();
    FINITE_CHECK.with(|g| g.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Dense tensor handle. Cloning is cheap and aliases the same storage.
pub struct Tensor<T: Scalar> {
    id: u64,
    shape: Arc<[usize]>,
    inner: Arc<RwLock<Buffers<T>>>,
    node: Option<Arc<Node<T>>>,
    requires_grad: bool,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            id: self.id,
            shape: Arc::clone(&self.shape),
            inner: Arc::clone(&self.inner),
            node: self.node.clone(),
            requires_grad: self.requires_grad,
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={}, op={:?})",
            self.id,
            &self.shape[..],
            self.requires_grad,
            self.node.as_ref().map(|n| n.name)
        )
    }
}

impl<T: Scalar> Tensor<T> {
    fn alloc(data: Vec<T>, shape: Arc<[usize]>, node: Option<Node<T>>) -> Self {
        Tensor {
            id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            inner: Arc::new(RwLock::new(Buffers { data, grad: None })),
            node: node.map(Arc::new),
            requires_grad: false,
        }
    }

    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "buffer of {} values cannot fill shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self::alloc(data, shape.into(), None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::alloc(vec![T::zero(); numel], shape.into(), None)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel: usize = shape.iter().product();
        Self::alloc(vec![value; numel], shape.into(), None)
    }

    pub fn scalar(value: T) -> Self {
        Self::alloc(vec![value], Arc::from(vec![1]), None)
    }

    /// Mark this tensor as a trainable leaf.
    pub fn requires_grad(mut self, yes: bool) -> Self {
        self.requires_grad = yes;
        self
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_leaf(&self) -> bool {
        self.node.is_none()
    }

    pub fn requires_grad_flag(&self) -> bool {
        self.requires_grad
    }

    /// True when gradients must flow through this tensor.
    pub(crate) fn connected(&self) -> bool {
        self.requires_grad || self.node.is_some()
    }

    pub(crate) fn node(&self) -> Option<&Arc<Node<T>>> {
        self.node.as_ref()
    }

    /// Read the data without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        let guard = self.inner.read().expect("tensor lock poisoned");
        f(&guard.data)
    }

    /// Copy the data out.
    pub fn data(&self) -> Vec<T> {
        self.with_data(|d| d.to_vec())
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() requires a scalar tensor");
        self.with_data(|d| d[0])
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        let guard = self.inner.read().expect("tensor lock poisoned");
        guard.grad.clone()
    }

    pub fn zero_grad(&self) {
        let mut guard = self.inner.write().expect("tensor lock poisoned");
        guard.grad = None;
    }

    /// Mutate the raw data in place (optimizer updates, checkpoint load).
    pub fn update_data(&self, f: impl FnOnce(&mut [T])) {
        let mut guard = self.inner.write().expect("tensor lock poisoned");
        f(&mut guard.data);
    }

    /// Replace the data buffer; the length must match.
    pub fn set_data(&self, data: &[T]) {
        self.update_data(|d| {
            assert_eq!(d.len(), data.len(), "set_data length mismatch");
            d.copy_from_slice(data);
        });
    }

    pub fn all_finite(&self) -> bool {
        self.with_data(|d| d.iter().all(|v| v.is_finite()))
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        let mut guard = self.inner.write().expect("tensor lock poisoned");
        match &mut guard.grad {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(g) {
                    *a = *a + *b;
                }
            }
            None => guard.grad = Some(g.to_vec()),
        }
    }

    pub(crate) fn seed_grad_ones(&self) {
        let numel = self.numel();
        let mut guard = self.inner.write().expect("tensor lock poisoned");
        guard.grad = Some(vec![T::one(); numel]);
    }

    pub(crate) fn grad_or_zeros(&self) -> Vec<T> {
        let numel = self.numel();
        let guard = self.inner.read().expect("tensor lock poisoned");
        guard.grad.clone().unwrap_or_else(|| vec![T::zero(); numel])
    }
}

/// Record the output of an op, attaching a backward rule when any input
/// participates in the graph and recording is enabled.
pub(crate) fn record_op<T: Scalar>(
    name: &'static str,
    inputs: Vec<Tensor<T>>,
    out_shape: Vec<usize>,
    out_data: Vec<T>,
    backward: impl Fn(&[Tensor<T>], &[T], &[T]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
) -> Result<Tensor<T>> {
    debug_assert_eq!(out_shape.iter().product::<usize>(), out_data.len());
    if FINITE_CHECK.with(|g| g.get()) && !out_data.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { op: name });
    }
    let track = grad_enabled() && inputs.iter().any(|t| t.connected());
    let node = track.then(|| Node {
        name,
        inputs,
        backward: Box::new(backward) as BackwardFn<T>,
    });
    Ok(Tensor::alloc(out_data, out_shape.into(), node))
}

/// Uniform values in [lo, hi) from the given RNG.
pub fn rand_uniform<T: Scalar, R: rand::Rng>(
    rng: &mut R,
    shape: &[usize],
    lo: f64,
    hi: f64,
) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let data: Vec<T> = (0..numel)
        .map(|_| T::from_f64(lo + (hi - lo) * rng.gen::<f64>()))
        .collect();
    Tensor::from_vec(data, shape).expect("shape/product consistent")
}

/// Standard normal values (Box-Muller) from the given RNG.
pub fn rand_normal<T: Scalar, R: rand::Rng>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let data: Vec<T> = (0..numel).map(|_| T::from_f64(normal_sample(rng))).collect();
    Tensor::from_vec(data, shape).expect("shape/product consistent")
}

pub fn normal_sample<R: rand::Rng>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen::<f64>().max(1e-12);
    let v: f64 = rng.gen::<f64>();
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

pub(crate) fn check_4d<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::dim(format!("{what} must be 4-d (NCHW), got {s:?}")));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::<f32>::from_vec(vec![1.0, 2.0, 3.0], &[2, 2]).is_err());
    }

    #[test]
    fn clone_aliases_storage() {
        let t = Tensor::<f32>::zeros(&[2, 2]);
        let u = t.clone();
        t.update_data(|d| d[3] = 7.0);
        assert_eq!(u.data()[3], 7.0);
        assert_eq!(t.id(), u.id());
    }

    #[test]
    fn grad_accumulates_additively() {
        let t = Tensor::<f64>::zeros(&[3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad().unwrap(), vec![2.0, 3.0, 4.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }
}
