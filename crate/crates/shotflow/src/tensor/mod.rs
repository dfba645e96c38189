//! Dense row-major tensors and the reverse-mode tape built on them.
//!
//! [`Tensor`] is a plain value type: a shape and a flat `Vec` of elements,
//! generic over [`Scalar`] (`f32` for training, `f64` for gradient
//! verification). All differentiable computation goes through [`tape::Tape`],
//! which records operations into a flat arena and replays them in reverse for
//! [`tape::Tape::backward`].
//!
//! Scalars are represented as shape `[1]` tensors. Broadcasting is restricted
//! to size-1 dimensions of equal-rank operands; anything fancier must be
//! spelled out with explicit reshapes, which keeps shape bugs loud.

pub mod gradcheck;
pub mod io;
pub mod tape;

pub use tape::{Tape, Var};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Element dtype tag, also the on-disk code in the tensor file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Dtype> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    /// Bytes per element.
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Element types the engine is generic over: `f32` and `f64`.
pub trait Scalar:
    num_traits::Float + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    const DTYPE: Dtype;
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(x: f64) -> f32 {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes per f32"))
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(x: f64) -> f64 {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes per f64"))
    }
}

/// Dense row-major tensor. Immutable in spirit: tape operations never mutate
/// their inputs, and the few mutating helpers exist for construction code.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Build from a shape and row-major data. The shape must be non-empty
    /// with all dims ≥ 1 and its product must equal `data.len()`.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                shape,
                reason: "dimensions must be non-empty and ≥ 1 (scalars are shape [1])".into(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("shape product {} != data length {}", numel, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        assert!(!shape.is_empty() && numel > 0, "zeros: bad shape {shape:?}");
        Tensor {
            shape,
            data: vec![S::zero(); numel],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: S) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(v);
        t
    }

    /// Shape-`[1]` scalar.
    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// I.i.d. standard normal entries drawn from `rng` in row-major order.
    pub fn randn(shape: impl Into<Vec<usize>>, rng: &mut Rng) -> Self {
        let mut t = Tensor::zeros(shape);
        for v in t.data.iter_mut() {
            *v = S::from_f64(rng.next_normal());
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// The single element of a shape-`[1]` tensor.
    pub fn item(&self) -> Result<S> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on non-scalar tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Row-major strides (in elements).
    pub fn strides(&self) -> Vec<usize> {
        let mut st = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            st[i] = st[i + 1] * self.shape[i + 1];
        }
        st
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let st = self.strides();
        idx.iter().zip(&st).map(|(i, s)| i * s).sum()
    }

    pub fn at(&self, idx: &[usize]) -> S {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: S) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    /// Same data, new shape (must preserve element count).
    pub fn reshaped(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Convert elements to another scalar type (used to lift f32 fixtures
    /// into the f64 gradient-check harness).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
        }
    }

    /// Max over elements of |a − b|; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<S>) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }
}

/// Visit every "lane" along `axis`: calls `f(base, stride)` once per lane,
/// where element `k` of the lane lives at flat index `base + k * stride`,
/// `k < shape[axis]`. Lanes are visited in row-major order of the remaining
/// axes, which keeps reductions deterministic.
pub(crate) fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize)) {
    let stride: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let inner = stride;
    let axis_len = shape[axis];
    for o in 0..outer {
        for i in 0..inner {
            f(o * axis_len * stride + i, stride);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_shape_product() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn strides_are_row_major() {
        let t = Tensor::<f32>::zeros([2, 3, 4]);
        assert_eq!(t.strides(), vec![12, 4, 1]);
        assert_eq!(t.offset(&[1, 2, 3]), 12 + 8 + 3);
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let a = Tensor::<f32>::randn([3, 5], &mut Rng::seed_from_u64(7));
        let b = Tensor::<f32>::randn([3, 5], &mut Rng::seed_from_u64(7));
        // Bit-identical, not merely close.
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn lane_iteration_covers_axis() {
        // Shape [2,3]: lanes along axis 1 are the two rows.
        let mut bases = vec![];
        for_each_lane(&[2, 3], 1, |base, stride| {
            assert_eq!(stride, 1);
            bases.push(base);
        });
        assert_eq!(bases, vec![0, 3]);

        // Lanes along axis 0 are the three columns, stride 3.
        let mut cols = vec![];
        for_each_lane(&[2, 3], 0, |base, stride| {
            assert_eq!(stride, 3);
            cols.push(base);
        });
        assert_eq!(cols, vec![0, 1, 2]);
    }

    #[test]
    fn cast_roundtrip() {
        let t = Tensor::<f64>::randn([4], &mut Rng::seed_from_u64(1));
        let back: Tensor<f64> = t.cast::<f32>().cast();
        assert!(t.max_abs_diff(&back).unwrap() < 1e-6);
    }
}
