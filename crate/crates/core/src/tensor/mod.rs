//! Dense row-major tensors and a reverse-mode differentiation tape.
//!
//! Values live in [`Tensor`]; differentiable computation is recorded on a
//! [`Tape`] and addressed through lightweight [`Var`] handles. Training runs in
//! `f32`; the same code paths run in `f64` for finite-difference checking.

mod element;
pub mod gradcheck;
mod kernels;
mod tape;

pub use element::Element;
pub use gradcheck::{grad_check, CoordinateCheck, GradCheckOptions, GradCheckReport};
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument to {op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward called on a variable that is not a scalar on this tape: {0}")]
    Usage(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// An N-dimensional array stored in row-major order (last axis fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Shape {
                op: "Tensor::new",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a tensor whose element at each multi-index is `f(index)`.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut index = vec![0usize; shape.len()];
        for _ in 0..numel {
            data.push(f(&index));
            for axis in (0..shape.len()).rev() {
                index[axis] += 1;
                if index[axis] < shape[axis] {
                    break;
                }
                index[axis] = 0;
            }
        }
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row-major strides: `strides[k-1] == 1`.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index.iter().zip(self.strides()).map(|(i, s)| i * s).sum()
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        element::vectorized(
            #[inline(always)]
            || self.data.iter().fold(true, |ok, x| ok & x.is_finite()),
        )
    }

    /// Reorders axes; `axes[i]` names the source axis placed at output axis `i`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        check_permutation(&self.shape, axes)?;
        let shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let data = kernels::permute(&self.data, &self.shape, axes);
        Ok(Self { shape, data })
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for axis in (0..shape.len().saturating_sub(1)).rev() {
        strides[axis] = strides[axis + 1] * shape[axis + 1];
    }
    strides
}

pub(crate) fn check_permutation(shape: &[usize], axes: &[usize]) -> Result<()> {
    let mut seen = vec![false; shape.len()];
    if axes.len() != shape.len() {
        return Err(TensorError::Shape {
            op: "permute",
            lhs: shape.to_vec(),
            rhs: axes.to_vec(),
        });
    }
    for &a in axes {
        if a >= shape.len() || seen[a] {
            return Err(TensorError::Invalid {
                op: "permute",
                reason: format!("{axes:?} is not a permutation of 0..{}", shape.len()),
            });
        }
        seen[a] = true;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_major_offsets_enumerate_buffer() {
        let shape = [2, 3, 4, 5];
        let t = Tensor::<f32>::from_fn(&shape, |_| 0.0);
        let mut expected = 0;
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    for d in 0..5 {
                        assert_eq!(t.offset(&[a, b, c, d]), expected);
                        expected += 1;
                    }
                }
            }
        }
        assert_eq!(t.strides(), vec![60, 20, 5, 1]);
    }

    #[test]
    fn from_fn_visits_last_axis_fastest() {
        let t = Tensor::<f64>::from_fn(&[2, 3], |i| (i[0] * 10 + i[1]) as f64);
        assert_eq!(t.data(), &[0.0, 1.0, 2.0, 10.0, 11.0, 12.0]);
    }

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn permute_matches_index_mapping() {
        let t = Tensor::<f32>::from_fn(&[2, 3, 4], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f32);
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        for a in 0..4 {
            for b in 0..2 {
                for c in 0..3 {
                    assert_eq!(p.get(&[a, b, c]), t.get(&[b, c, a]));
                }
            }
        }
        assert!(t.permute(&[0, 0, 1]).is_err());
    }
}
