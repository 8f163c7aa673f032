use rand_distr::{Distribution, StandardNormal};

use super::real::{gemm, Real};
use super::rng::RngStream;
use crate::error::{Error, Result};

/// Dense row-major tensor with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, rejecting extent/length mismatches and non-finite data.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape, data.len())?;
        let t = Self {
            shape,
            data,
            grad: None,
        };
        t.check_finite("tensor")?;
        Ok(t)
    }

    /// Unchecked for finiteness; used by ops that validate separately.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            grad: None,
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::from_parts(shape, vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::from_parts(shape, (0..n).map(&mut f).collect())
    }

    /// Normal(0, std²) entries drawn from `rng` in row-major order.
    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut RngStream) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
    }

    /// Uniform(lo, hi) entries drawn from `rng` in row-major order.
    pub fn uniform(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut RngStream) -> Self {
        Self::from_fn(shape, |_| T::lit(lo + (hi - lo) * rng.uniform()))
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::dim(
                "set_grad",
                format!("gradient length {} for shape {:?}", grad.len(), self.shape),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape, self.data.len())?;
        self.shape = shape;
        Ok(self)
    }

    /// Last extent and the product of the leading ones.
    pub(crate) fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap_or(&1);
        (self.data.len() / cols.max(1), cols)
    }

    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of bounds for axis {i} of extent {ext}");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|&x| U::lit(x.as_f64())).collect()),
        }
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            None => Ok(()),
            Some(index) => Err(Error::NonFinite {
                op,
                index,
                value: self.data[index].as_f64(),
            }),
        }
    }

    /// Eager 2-D product without gradient tracking.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = as_matrix("matmul", self)?;
        let (k2, n) = as_matrix("matmul", other)?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner extents differ: {:?} x {:?}", self.shape, other.shape),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, T::one(), &self.data, false, &other.data, false, &mut out, false);
        let t = Tensor::from_parts(vec![m, n], out);
        t.check_finite("matmul")?;
        Ok(t)
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64() * x.as_f64()).sum()
    }
}

pub(crate) fn as_matrix<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::dim(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::dim(
            "tensor",
            format!("extents must be positive, got {shape:?}"),
        ));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::dim(
            "tensor",
            format!("shape {shape:?} holds {n} values but data has {len}"),
        ));
    }
    Ok(())
}
