use crate::scalar::Real;

/// Dense row-major n-d array.
///
/// Group tensors use the layout `[members, channels, depth, height, width]`;
/// convolution kernels use `[out, in, kd, kh, kw]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::from_vec(&[1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Product of all axes after the first.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Contiguous slice for index `i` along axis 0.
    pub fn row(&self, i: usize) -> &[T] {
        let r = self.row_len();
        &self.data[i * r..(i + 1) * r]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let r = self.row_len();
        &mut self.data[i * r..(i + 1) * r]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| U::lit(x.to_f64_lossy()))
                .collect(),
        }
    }

    /// Concatenate tensors of shape `[1, ...]` along axis 0.
    pub fn stack_rows(rows: &[&Tensor<T>]) -> Self {
        assert!(!rows.is_empty());
        let inner = &rows[0].shape;
        assert_eq!(inner[0], 1, "stack_rows expects a unit leading axis");
        let mut shape = inner.clone();
        shape[0] = rows.len();
        let mut data = Vec::with_capacity(rows.len() * rows[0].len());
        for r in rows {
            assert_eq!(&r.shape, inner, "stack_rows shape mismatch");
            data.extend_from_slice(&r.data);
        }
        Self::from_vec(&shape, data)
    }
}
