//! Dense row-major arrays and a recorded computation graph for
//! reverse-mode differentiation.
//!
//! [`Value`] is the plain array type. [`Tape`] records every operation
//! applied to values placed on it and replays the record backwards in
//! [`Tape::backward`]. Everything is generic over [`Real`] so gradient
//! checks can run in `f64` while training uses `f32`.

mod conv;
mod kernels;
pub mod gradcheck;
mod real;
mod tape;

pub use conv::{conv_output_len, Conv2dSpec};
pub use gradcheck::finite_diff_check;
pub use real::Real;
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward: tape is empty")]
    EmptyTape,
    #[error("gradient check: objective is not finite at coordinate {0}")]
    NonFinite(usize),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Sets flush-to-zero and denormals-are-zero for SSE arithmetic on the
/// calling thread. Saturated softmax and sigmoid outputs otherwise produce
/// subnormal floats, which are an order of magnitude slower to process.
pub fn flush_denormals() {
    #[cfg(target_arch = "x86_64")]
    // SAFETY: only the FTZ and DAZ bits of MXCSR change; no exception masks
    // or rounding modes are touched.
    #[allow(deprecated)]
    unsafe {
        use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
        _mm_setcsr(_mm_getcsr() | 0x8040);
    }
}

/// A dense multi-axis array.
#[derive(Debug, Clone, PartialEq)]
pub struct Value<R> {
    shape: Vec<usize>,
    data: Vec<R>,
    pub requires_grad: bool,
}

impl<R: Real> Value<R> {
    pub fn new(shape: &[usize], data: Vec<R>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::Invalid {
                op: "value",
                msg: format!("zero-length axis in shape {shape:?}"),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Invalid {
                op: "value",
                msg: format!("shape {shape:?} holds {n} elements, buffer has {}", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, R::zero())
    }

    pub fn full(shape: &[usize], v: R) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
            requires_grad: false,
        }
    }

    pub fn scalar(v: R) -> Self {
        Self::full(&[1], v)
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| R::of(x)).collect())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    /// Converts between precisions.
    pub fn cast<S: Real>(&self) -> Value<S> {
        Value {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| S::of(x.as_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> R {
        self.data.iter().copied().fold(R::zero(), |a, b| a + b)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Splits along `axis` at the given boundary.
    pub fn split_at(&self, axis: usize, at: usize) -> Result<(Self, Self)> {
        let len = *self.shape.get(axis).ok_or_else(|| TensorError::Invalid {
            op: "split",
            msg: format!("axis {axis} out of range for {:?}", self.shape),
        })?;
        if at == 0 || at >= len {
            return Err(TensorError::Invalid {
                op: "split",
                msg: format!("boundary {at} outside 1..{len}"),
            });
        }
        Ok((self.slice_axis(axis, 0, at), self.slice_axis(axis, at, len - at)))
    }

    pub(crate) fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Self {
        let (outer, n, inner) = axis_split(&self.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Self {
            shape,
            data,
            requires_grad: false,
        }
    }

    /// Concatenates values along `axis`; all other axes must agree.
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat",
            msg: "no operands".into(),
        })?;
        if axis >= first.shape.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for {:?}", first.shape),
            });
        }
        for p in &parts[1..] {
            let ok = p.shape.len() == first.shape.len()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let (outer, _, inner) = axis_split(&first.shape, axis);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }
}

/// (product of axes before `axis`, length of `axis`, product of axes after).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_inconsistent_buffer() {
        assert!(Value::<f64>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Value::<f64>::new(&[2, 0], vec![]).is_err());
    }

    proptest! {
        #[test]
        fn concat_then_split_is_exact(
            a in proptest::collection::vec(-1e3f64..1e3, 2 * 3 * 4),
            b in proptest::collection::vec(-1e3f64..1e3, 2 * 5 * 4),
        ) {
            let a = Value::new(&[2, 3, 4], a).unwrap();
            let b = Value::new(&[2, 5, 4], b).unwrap();
            let c = Value::concat(&[&a, &b], 1).unwrap();
            let (a2, b2) = c.split_at(1, 3).unwrap();
            prop_assert_eq!(a2.data(), a.data());
            prop_assert_eq!(b2.data(), b.data());
        }
    }
}
