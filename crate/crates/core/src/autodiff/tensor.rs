//! Dense row-major float64 tensors.
//!
//! Buffers are reference counted, so cloning a tensor is cheap and
//! copy-on-write kicks in only when a shared buffer is mutated.

use std::sync::Arc;

use rand::Rng;

/// A dense n-dimensional float64 value.
///
/// Shapes always have at least one dimension and every dimension is at
/// least 1; scalars are represented as shape `[1]`.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data() == other.data()
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Self {
        let shape = shape.into();
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d >= 1),
            "tensor dims must all be >= 1, got {shape:?}"
        );
        let expect: usize = shape.iter().product();
        assert_eq!(
            expect,
            data.len(),
            "shape {:?} holds {} elements but buffer has {}",
            shape,
            expect,
            data.len()
        );
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value])
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::new(shape, (0..n).map(|i| f(i)).collect())
    }

    /// Uniform samples in `[lo, hi)`, drawn in row-major order.
    pub fn rand_uniform(
        shape: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self::from_fn(shape, |_| rng.random::<f64>() * (hi - lo) + lo)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Total number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // dims are >= 1, so a tensor always has at least one element
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the buffer; copies first if the buffer is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Same buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let expect: usize = shape.iter().product();
        assert_eq!(
            expect,
            self.len(),
            "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
            self.shape,
            self.len(),
            shape,
            expect
        );
        Self {
            shape,
            data: Arc::clone(&self.data),
        }
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert!(
            self.is_scalar(),
            "item() on non-scalar tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    /// Size of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    /// Product of every dimension except the last.
    pub fn rows(&self) -> usize {
        self.len() / self.last_dim()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }
}
