//! Dense row-major tensors and the value-level kernels used by the tape.
//!
//! Most kernels treat a tensor as a matrix: the last axis is the column
//! axis, every leading axis is folded into rows.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_err, Error, Result};
use crate::scalar::{sc, Scalar};

/// Epsilon added to the variance inside [`layer_norm_rows`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const MAX: usize = 16;
        write!(f, "Tensor<{}>{:?} ", T::NAME, self.shape)?;
        let shown: Vec<_> = self.data.iter().take(MAX).collect();
        write!(f, "{shown:?}")?;
        if self.data.len() > MAX {
            write!(f, " ... ({} more)", self.data.len() - MAX)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(dim_err(
                "Tensor::new",
                format!("shape {shape:?} needs {expected} elements, got {}", data.len()),
            ));
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
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Builds a matrix from equally long rows given as `f64`.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(dim_err("Tensor::from_rows", "ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().map(|&x| sc::<T>(x))).collect();
        Self::new(&[rows.len(), cols], data)
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| sc::<T>(x)).collect())
    }

    /// Entries drawn i.i.d. from `N(0, std^2)`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                sc::<T>(z * std)
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Entries drawn i.i.d. from `U(-limit, limit)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], limit: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| sc::<T>(rng.random_range(-limit..=limit)))
            .collect();
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix (product of leading axes).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            d => self.shape[..d - 1].iter().product(),
        }
    }

    /// Length of the last axis.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(dim_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_err(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|x| x * k)
    }

    /// In-place `self += k * other`.
    pub fn axpy(&mut self, k: T, other: &Self) -> Result<()> {
        self.same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / sc::<T>(self.data.len().max(1) as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Vec::with_capacity(self.data.len());
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Self {
            shape: vec![c, r],
            data: out,
        }
    }

    /// Matrix product `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul_ex(self, false, other, false)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64_lossy()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| sc::<U>(x.to_f64_lossy())).collect(),
        }
    }
}

/// General product with optional transposes: `op(a) · op(b)`.
///
/// Operands are viewed as matrices (`rows() × cols()`).
pub fn matmul_ex<T: Scalar>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Result<Tensor<T>> {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(dim_err(
            "matmul",
            format!(
                "inner dims differ: {:?}{} · {:?}{}",
                a.shape(),
                if ta { "ᵀ" } else { "" },
                b.shape(),
                if tb { "ᵀ" } else { "" }
            ),
        ));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm_into(a, ta, b, tb, T::one(), T::zero(), &mut out);
    Ok(out)
}

/// `c = alpha · op(a)·op(b) + beta · c`; shapes must already be validated.
pub(crate) fn gemm_into<T: Scalar>(
    a: &Tensor<T>,
    ta: bool,
    b: &Tensor<T>,
    tb: bool,
    alpha: T,
    beta: T,
    c: &mut Tensor<T>,
) {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    assert_eq!(c.rows() * c.cols(), m * n, "gemm output shape");
    assert_eq!(if tb { bc } else { br }, k, "gemm inner dim");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    // SAFETY: a is ar×ac and b is br×bc row-major with the strides above;
    // the asserts check that op(a) is m×k, op(b) is k×n and c holds m×n.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.data(),
            rsa,
            csa,
            b.data(),
            rsb,
            csb,
            beta,
            c.data_mut(),
            n as isize,
            1,
        )
    }
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for i in 0..x.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Row-wise `log softmax`.
pub fn log_softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Exponential linear unit with unit scale.
pub fn elu<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        x
    } else {
        x.exp_m1()
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn relu<T: Scalar>(x: T) -> T {
    x.max(T::zero())
}

pub fn tanh<T: Scalar>(x: T) -> T {
    x.tanh()
}

/// Intermediates of a row-wise layer normalization, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T: Scalar> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Normalizes each row to zero mean and unit variance (epsilon
/// [`LAYER_NORM_EPS`]) and applies the per-column affine `gain`, `bias`.
pub fn layer_norm_rows<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let c = x.cols();
    if gain.len() != c || bias.len() != c {
        return Err(dim_err(
            "layer_norm",
            format!("row width {c}, gain {}, bias {}", gain.len(), bias.len()),
        ));
    }
    let eps = sc::<T>(LAYER_NORM_EPS);
    let n = sc::<T>(c as f64);
    let mut xhat = x.clone();
    let mut y = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(i);
        for (j, v) in xh.iter_mut().enumerate() {
            *v = (row[j] - mean) * is;
        }
        let yr = y.row_mut(i);
        for j in 0..c {
            yr[j] = xhat.data()[i * c + j] * gain.data()[j] + bias.data()[j];
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

/// Horizontal concatenation of matrices with equal row counts.
pub fn concat_cols<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let rows = parts.first().map_or(0, |p| p.rows());
    if parts.iter().any(|p| p.rows() != rows) {
        return Err(dim_err("concat_cols", "row counts differ"));
    }
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows * total);
    for i in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Tensor::new(&[rows, total], data)
}

/// Vertical concatenation of matrices with equal column counts.
pub fn concat_rows<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let cols = parts.first().map_or(0, |p| p.cols());
    if parts.iter().any(|p| p.cols() != cols) {
        return Err(dim_err("concat_rows", "column counts differ"));
    }
    let rows: usize = parts.iter().map(|p| p.rows()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(&[rows, cols], data)
}

/// Columns `start..end` of a matrix.
pub fn slice_cols<T: Scalar>(x: &Tensor<T>, start: usize, end: usize) -> Result<Tensor<T>> {
    if start > end || end > x.cols() {
        return Err(dim_err(
            "slice_cols",
            format!("{start}..{end} of {} columns", x.cols()),
        ));
    }
    let mut data = Vec::with_capacity(x.rows() * (end - start));
    for i in 0..x.rows() {
        data.extend_from_slice(&x.row(i)[start..end]);
    }
    Tensor::new(&[x.rows(), end - start], data)
}

/// Rows `start..end` of a matrix.
pub fn slice_rows<T: Scalar>(x: &Tensor<T>, start: usize, end: usize) -> Result<Tensor<T>> {
    if start > end || end > x.rows() {
        return Err(dim_err(
            "slice_rows",
            format!("{start}..{end} of {} rows", x.rows()),
        ));
    }
    let c = x.cols();
    Tensor::new(&[end - start, c], x.data()[start * c..end * c].to_vec())
}

impl<T: Scalar> From<Tensor<T>> for Vec<T> {
    fn from(t: Tensor<T>) -> Self {
        t.data
    }
}

impl<T: Scalar> TryFrom<(Vec<usize>, Vec<T>)> for Tensor<T> {
    type Error = Error;

    fn try_from((shape, data): (Vec<usize>, Vec<T>)) -> Result<Self> {
        Tensor::new(&shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.at(i, p) * b.at(p, j);
                }
            }
        }
        out
    }

    #[test]
    fn identity_product() {
        let i2 = Tensor::<f32>::eye(2);
        assert_eq!(i2.matmul(&i2).unwrap(), i2);
    }

    #[test]
    fn unit_column_selects_second_column() {
        let a = Tensor::<f32>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let e = Tensor::<f32>::from_rows(&[&[0.0], &[1.0]]).unwrap();
        assert_eq!(a.matmul(&e).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn random_product_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::<f64>::randn(&[5, 7], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[7, 3], 1.0, &mut rng);
        let fast = a.matmul(&b).unwrap();
        for (x, y) in fast.data().iter().zip(triple_loop(&a, &b)) {
            assert!((x - y).abs() < 1e-6);
        }
        // transposed variants route through the same kernel with swapped strides
        let at = a.transpose();
        let bt = b.transpose();
        let via_t = matmul_ex(&at, true, &bt, true).unwrap();
        assert_eq!(via_t.shape(), &[5, 3]);
        for (x, y) in via_t.data().iter().zip(fast.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn identity_is_exact_on_small_integers() {
        let a = Tensor::<f32>::from_rows(&[&[1.0, -2.0, 3.0], &[4.0, 5.0, -6.0]]).unwrap();
        assert_eq!(a.matmul(&Tensor::eye(3)).unwrap(), a);
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::<f64>::from_rows(&[
            &[0.0, 0.0],
            &[1000.0, 1000.0],
        ])
        .unwrap();
        let s = softmax_rows(&x);
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);

        let x = Tensor::<f64>::from_rows(&[&[1f64.ln(), 2f64.ln(), 3f64.ln()]]).unwrap();
        let s = softmax_rows(&x);
        for (got, want) in s.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn activation_fixed_points() {
        assert_eq!(elu(0.0f32), 0.0);
        assert_eq!(sigmoid(0.0f32), 0.5);
        assert_eq!(tanh(0.0f32), 0.0);
        assert_eq!(relu(-3.0f32), 0.0);
        assert!((elu(-50.0f64) + 1.0).abs() < 1e-12);
        assert_eq!(elu(2.5f64), 2.5);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let x = Tensor::<f32>::full(&[2, 6], 3.25);
        let (y, _) = layer_norm_rows(&x, &Tensor::ones(&[6]), &Tensor::zeros(&[6])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f32>::randn(&[3, 2], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(&[3, 4], 1.0, &mut rng);
        let ab = concat_cols(&[&a, &b]).unwrap();
        assert_eq!(slice_cols(&ab, 0, 2).unwrap(), a);
        assert_eq!(slice_cols(&ab, 2, 6).unwrap(), b);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(vals in prop::collection::vec(-50.0f32..50.0, 1..40), cols in 1usize..8) {
                let rows = vals.len() / cols;
                prop_assume!(rows > 0);
                let x = Tensor::new(&[rows, cols], vals[..rows * cols].to_vec()).unwrap();
                let s = softmax_rows(&x);
                for i in 0..rows {
                    let total: f32 = s.row(i).iter().sum();
                    prop_assert!((total - 1.0).abs() <= 1e-6);
                    prop_assert!(s.row(i).iter().all(|&p| p >= 0.0));
                }
            }
        }
    }
}
