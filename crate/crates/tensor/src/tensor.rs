use crate::error::{mismatch, Result, TensorError};
use crate::scalar::Scalar;

/// Dense row-major array with shape metadata.
///
/// Every extent is positive and `shape.iter().product() == data.len()`.
/// A shape of `[]` is a scalar holding one element.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) || shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::InvalidShape { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        let n = shape.iter().product();
        Self { shape, data: (0..n).map(&mut f).collect() }
    }

    /// Builds an `f64`-valued tensor and converts it, used for literals in tests.
    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(mismatch("item", [1], &self.shape));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) || shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::InvalidShape { shape, len: self.data.len() });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(mismatch("zip_map", &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64()).expect("cast")).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(mismatch("dot", &self.shape, &other.shape));
        }
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(mismatch("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| (a - b).abs()).fold(T::zero(), T::max))
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().map(|v| v.abs()).fold(T::zero(), T::max)
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            debug_assert!(i < d);
            acc * d + i
        })
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    /// Permutes axes; `axes[i]` names the source axis of output axis `i`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let src = permute_indices(&self.shape, axes)?;
        let shape = axes.iter().map(|&a| self.shape[a]).collect::<Vec<_>>();
        Ok(Self { shape, data: src.iter().map(|&i| self.data[i]).collect() })
    }
}

/// Row-major strides of a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output element of the permutation, the flat source index.
pub fn permute_indices(shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    let mut seen = vec![false; shape.len()];
    if axes.len() != shape.len() {
        return Err(mismatch("permute", shape.len(), axes.len()));
    }
    for &a in axes {
        if a >= shape.len() || seen[a] {
            return Err(TensorError::Invalid(format!(
                "permute: {axes:?} is not a permutation of {} axes",
                shape.len()
            )));
        }
        seen[a] = true;
    }
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let perm_strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            off += perm_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= perm_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Ok(out)
}
