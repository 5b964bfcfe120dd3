//! Dense n-dimensional tensors: contiguous row-major scalar buffers with a shape.

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};

pub mod gemm;

/// Dense tensor. Invariants: `data.len() == product(shape)`, every extent >= 1.
/// A rank-0 tensor (empty shape) is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        assert!(shape.iter().all(|&e| e >= 1), "extents must be >= 1");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&e| e < 1) {
            return Err(Error::Contract(format!(
                "tensor extents must be >= 1, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} implies {n} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
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

    pub fn dtype(&self) -> Dtype {
        T::DTYPE
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

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() requires exactly one element");
        self.data[0]
    }

    pub fn at(&self, idx: &[usize]) -> T {
        assert_eq!(idx.len(), self.rank());
        let mut flat = 0;
        for (i, (&ix, &ext)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of range for axis {i} ({ext})");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Same data, new shape; element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.iter().any(|&e| e < 1) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Splits the shape into (leading element count, rows, cols) over the last
    /// two axes. Requires rank >= 2.
    pub(crate) fn leading_rows_cols(&self) -> Result<(usize, usize, usize)> {
        if self.rank() < 2 {
            return Err(Error::Contract(format!(
                "operation needs rank >= 2, got shape {:?}",
                self.shape
            )));
        }
        let r = self.shape[self.rank() - 2];
        let c = self.shape[self.rank() - 1];
        Ok((self.numel() / (r * c), r, c))
    }

    /// Swap the last two axes (batched 2-D transpose).
    pub fn transpose2(&self) -> Result<Self> {
        let (lead, r, c) = self.leading_rows_cols()?;
        let mut shape = self.shape.clone();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let mut data = vec![T::zero(); self.numel()];
        for l in 0..lead {
            let src = &self.data[l * r * c..(l + 1) * r * c];
            let dst = &mut data[l * r * c..(l + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Matrix product with a rank-2 right-hand side. The left side may carry
    /// leading batch axes, which are flattened into rows.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Self> {
        let (_, _, k) = self.leading_rows_cols()?;
        if rhs.rank() != 2 || rhs.shape[0] != k {
            return Err(Error::shape("matmul", &self.shape, &rhs.shape));
        }
        let n = rhs.shape[1];
        let m = self.numel() / k;
        let mut out = vec![T::zero(); m * n];
        gemm::gemm(m, k, n, &self.data, &rhs.data, &mut out);
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = n;
        Ok(Tensor { shape, data: out })
    }

    /// Elementwise sum with a same-shape tensor.
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Self> {
        if self.shape != rhs.shape {
            return Err(Error::shape("add", &self.shape, &rhs.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        })
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    /// Gathers elements within each trailing slab: the last `in_slab_rank`
    /// axes form the slab, `out[l, i] = self[l, index[i]]` for every leading
    /// position `l`. `index` values address flattened input-slab positions.
    pub fn remap_slab(
        &self,
        in_slab_rank: usize,
        index: &[usize],
        out_slab_shape: &[usize],
    ) -> Result<Self> {
        if in_slab_rank > self.rank() {
            return Err(Error::Contract(format!(
                "slab rank {in_slab_rank} exceeds tensor rank {}",
                self.rank()
            )));
        }
        let split = self.rank() - in_slab_rank;
        let slab_in: usize = self.shape[split..].iter().product();
        let out_slab: usize = out_slab_shape.iter().product();
        if out_slab != index.len() {
            return Err(Error::shape("remap", out_slab_shape, &[index.len()]));
        }
        let lead = self.numel() / slab_in;
        let mut data = Vec::with_capacity(lead * out_slab);
        for l in 0..lead {
            let src = &self.data[l * slab_in..(l + 1) * slab_in];
            data.extend(index.iter().map(|&i| src[i]));
        }
        let mut shape = self.shape[..split].to_vec();
        shape.extend_from_slice(out_slab_shape);
        Ok(Tensor { shape, data })
    }

    /// Bitwise equality, used by determinism tests.
    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}
