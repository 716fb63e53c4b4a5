use std::fmt::{self, Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Scalar element type. `f32` is the storage type everywhere; `f64` is the
/// wide mode used by gradient checks.
pub trait Real:
    Float + FromPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn of(x: f64) -> Self;

    fn wide(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn wide(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn wide(self) -> f64 {
        self
    }
}

/// Row-major dense tensor (last index fastest).
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::dim(
                "Tensor::new",
                format!("shape {shape:?} must be non-empty with positive extents"),
            ));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "Tensor::new",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor whose values are already known to match the shape.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> std::slice::ChunksExact<'_, T> {
        let cols = *self.shape.last().unwrap_or(&1);
        self.data.chunks_exact(cols.max(1))
    }

    pub fn row(&self, i: usize) -> &[T] {
        let cols = self.shape[self.rank() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn zip_with(
        &self,
        other: &Tensor<T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|x| x.wide()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.wide().abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.wide())).collect(),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("stack", "no tensors to stack"))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::dim(
                    "stack",
                    format!("{:?} vs {:?}", p.shape, first.shape),
                ));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    /// Concatenates rank-2 tensors along the row axis.
    pub fn concat_rows(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows", "no tensors"))?;
        if first.rank() != 2 {
            return Err(Error::dim("concat_rows", "expected rank-2 tensors"));
        }
        let cols = first.shape[1];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.rank() != 2 || p.shape[1] != cols {
                return Err(Error::dim(
                    "concat_rows",
                    format!("{:?} vs {:?}", p.shape, first.shape),
                ));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: vec![rows, cols],
            data,
        })
    }

    /// SHA-256 over the shape and the exact bit patterns of the values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        self.feed(&mut h);
        hex(&h.finalize())
    }

    pub(crate) fn feed(&self, h: &mut Sha256) {
        h.update((self.shape.len() as u64).to_le_bytes());
        for &d in &self.shape {
            h.update((d as u64).to_le_bytes());
        }
        for x in &self.data {
            h.update(x.wide().to_bits().to_le_bytes());
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    hex(&h.finalize())
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOW: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, x) in self.data.iter().take(SHOW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{x:?}")?;
        }
        if self.data.len() > SHOW {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}
