//! Dense row-major tensors and the linear-algebra kernels built on them.
//!
//! Every reduction sums in ascending index order so results are reproducible
//! bit-for-bit across runs and across sharded layouts that respect the same order.

use crate::error::{dim_err, CoreError, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional array with an explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) || numel(shape) != data.len() {
            return Err(CoreError::Shape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor dimensions must be positive: {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    /// Builds a tensor from a function of the flat row-major index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let data: Vec<T> = (0..numel(shape)).map(f).collect();
        Self::new(shape, data).expect("from_fn shape")
    }

    pub fn scalar(x: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        let n = data.len();
        Self::new(&[n], data).expect("non-empty vector")
    }

    /// `n×n` identity.
    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
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

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn into_shape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Copies the contiguous block of `numel(shape)` elements starting at flat `offset`.
    pub fn block(&self, offset: usize, shape: &[usize]) -> Self {
        let n = numel(shape);
        Self::new(shape, self.data[offset..offset + n].to_vec()).expect("block shape")
    }

    /// Overwrites the contiguous block starting at flat `offset`.
    pub fn write_block(&mut self, offset: usize, src: &Self) {
        self.data[offset..offset + src.len()].copy_from_slice(&src.data);
    }

    /// Elementwise conversion into another scalar type.
    pub fn map_to<U: Scalar>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(dim_err(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_err("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x * x)
    }

    pub fn frobenius_norm(&self) -> T {
        self.sum_sq().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn rows(&self) -> usize {
        self.expect_rank2("rows").0
    }

    pub fn cols(&self) -> usize {
        self.expect_rank2("cols").1
    }

    fn expect_rank2(&self, op: &'static str) -> (usize, usize) {
        assert_eq!(self.rank(), 2, "{op}: expected a matrix, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn transpose(&self) -> Self {
        let (m, n) = self.expect_rank2("transpose");
        let mut out = Self::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        out
    }

    /// Flattens all leading axes: `[a, b, ..., c] -> [a*b*..., c]`.
    pub fn as_matrix(&self) -> Self {
        let c = *self.shape.last().expect("non-scalar");
        self.reshape(&[self.len() / c, c]).expect("matrix view")
    }

    /// Columns `[start, start+len)` of a matrix.
    pub fn select_cols(&self, start: usize, len: usize) -> Self {
        let (m, n) = self.expect_rank2("select_cols");
        assert!(start + len <= n, "column range out of bounds");
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&self.data[i * n + start..i * n + start + len]);
        }
        Self::new(&[m, len], out).expect("select_cols")
    }

    /// Rows `[start, start+len)` along the leading axis (any rank).
    pub fn select_rows(&self, start: usize, len: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        self.block(start * inner, &shape)
    }

    /// Concatenates matrices side by side.
    pub fn concat_cols(parts: &[Self]) -> Result<Self> {
        let m = parts[0].rows();
        if let Some(bad) = parts.iter().find(|p| p.rank() != 2 || p.rows() != m) {
            return Err(dim_err("concat_cols", parts[0].shape(), bad.shape()));
        }
        let n: usize = parts.iter().map(|p| p.cols()).sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for p in parts {
                let c = p.cols();
                out.extend_from_slice(&p.data[i * c..(i + 1) * c]);
            }
        }
        Self::new(&[m, n], out)
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(parts: &[Self]) -> Result<Self> {
        let tail = parts[0].shape[1..].to_vec();
        if let Some(bad) = parts.iter().find(|p| p.shape[1..] != tail[..]) {
            return Err(dim_err("concat_rows", parts[0].shape(), bad.shape()));
        }
        let mut shape = parts[0].shape.clone();
        shape[0] = parts.iter().map(|p| p.shape[0]).sum();
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Self::new(&shape, data)
    }

    /// Adds a length-`C` vector to every row of an `R×C` matrix.
    pub fn add_row_vector(&self, v: &Self) -> Result<Self> {
        let (_, c) = self.expect_rank2("add_row_vector");
        if v.len() != c {
            return Err(dim_err("add_row_vector", &self.shape, &v.shape));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(c) {
            for (x, &b) in row.iter_mut().zip(&v.data) {
                *x += b;
            }
        }
        Ok(out)
    }

    /// Column sums of an `R×C` matrix, accumulated over rows in ascending order.
    pub fn sum_rows(&self) -> Self {
        let (_, c) = self.expect_rank2("sum_rows");
        let mut out = Self::zeros(&[c]);
        for row in self.data.chunks(c) {
            for (o, &x) in out.data.iter_mut().zip(row) {
                *o += x;
            }
        }
        out
    }
}

/// `c[i][j] = Σ_k a[i][k]·b[k][j]`, summed in ascending `k`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(dim_err("matmul", &a.shape, &b.shape));
    }
    let (m, kk, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for k in 0..kk {
            let aik = a.data[i * kk + k];
            let brow = &b.data[k * n..(k + 1) * n];
            for (cij, &bkj) in crow.iter_mut().zip(brow) {
                *cij += aik * bkj;
            }
        }
    }
    Tensor::new(&[m, n], c)
}

/// `aᵀ·b` without materialising the transpose.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[0] != b.shape[0] {
        return Err(dim_err("matmul_tn", &a.shape, &b.shape));
    }
    let (kk, m, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut c = vec![T::zero(); m * n];
    for k in 0..kk {
        let arow = &a.data[k * m..(k + 1) * m];
        let brow = &b.data[k * n..(k + 1) * n];
        for (i, &aki) in arow.iter().enumerate() {
            for (cij, &bkj) in c[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *cij += aki * bkj;
            }
        }
    }
    Tensor::new(&[m, n], c)
}

/// `a·bᵀ` without materialising the transpose.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[1] {
        return Err(dim_err("matmul_nt", &a.shape, &b.shape));
    }
    // Same ascending-k sums as a row dot product, but with a contiguous inner loop.
    matmul(a, &b.transpose())
}

/// `out[i][j] = u[i]·v[j]`.
pub fn outer<T: Scalar>(u: &Tensor<T>, v: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (u.len(), v.len());
    let mut out = Vec::with_capacity(m * n);
    for &ui in &u.data {
        out.extend(v.data.iter().map(|&vj| ui * vj));
    }
    Tensor::new(&[m, n], out).expect("outer shape")
}
