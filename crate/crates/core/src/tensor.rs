//! Dense row-major tensors over `f32`/`f64` and the GEMM kernel used by every
//! matrix product in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{shape_err, Result};

/// Element type code shared with the checkpoint format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

impl DType {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Scalar type usable in tensors: `f32` for training, `f64` for oracles.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// `C = alpha * A B + beta * C` with arbitrary strides.
    ///
    /// # Safety
    /// Pointers with the given dims and strides must address valid memory,
    /// and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }

    fn to_le_bytes_vec(data: &[Self]) -> Vec<u8>;
    fn from_le_chunk(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn to_le_bytes_vec(data: &[f32]) -> Vec<u8> {
        data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn from_le_chunk(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes.try_into().expect("4-byte chunk"))
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn to_le_bytes_vec(data: &[f64]) -> Vec<u8> {
        data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn from_le_chunk(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes.try_into().expect("8-byte chunk"))
    }
}

/// `C (m×n) = alpha * op(A) op(B) + beta * C` on contiguous row-major buffers,
/// where `op` optionally transposes. `a` is stored as `[m,k]` (or `[k,m]` when
/// `ta`), `b` as `[k,n]` (or `[n,k]` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: out length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths asserted above; `c` is a distinct &mut borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return shape_err(
                "Tensor::from_vec",
                format!("dims {dims:?} need {expected} values, got {}", data.len()),
            );
        }
        Ok(Tensor { dims: dims.to_vec(), data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Tensor { dims: dims.to_vec(), data: vec![T::zero(); dims.iter().product()] }
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        Tensor { dims: dims.to_vec(), data: vec![value; dims.iter().product()] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { dims: vec![1], data: vec![value] }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    /// Size of the trailing dimension.
    pub fn last_dim(&self) -> usize {
        *self.dims.last().unwrap_or(&1)
    }

    /// Number of rows when viewed as `[len / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.last_dim()).unwrap_or(0)
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != self.data.len() {
            return shape_err(
                "Tensor::reshape",
                format!("{:?} -> {dims:?} changes element count", self.dims),
            );
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { dims: self.dims.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.dims == other.dims
    }

    pub fn check_same_dims(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.dims != other.dims {
            return shape_err(op, format!("{:?} vs {:?}", self.dims, other.dims));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        self.sum() / T::from_usize(self.data.len()).unwrap()
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    /// `self + alpha * other`, elementwise.
    pub fn axpy(&self, alpha: T, other: &Self) -> Result<Self> {
        self.check_same_dims(other, "axpy")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + alpha * b).collect();
        Ok(Tensor { dims: self.dims.clone(), data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.axpy(T::one(), other)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.axpy(-T::one(), other)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// Row-major matrix product of `[m,k] x [k,n]` views (leading dims folded).
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let k = self.last_dim();
        let m = self.rows();
        if other.dims.len() != 2 || other.dims[0] != k {
            return shape_err("matmul", format!("{:?} x {:?}", self.dims, other.dims));
        }
        let n = other.dims[1];
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, T::one(), &self.data, false, &other.data, false, T::zero(), &mut out);
        let mut dims = self.dims.clone();
        *dims.last_mut().unwrap() = n;
        Ok(Tensor { dims, data: out })
    }

    /// Rows `[start, start+count)` of the `[rows, last_dim]` view, keeping trailing dims.
    pub fn slice_rows(&self, start: usize, count: usize) -> Result<Self> {
        self.slice_outer(start, count)
    }

    /// Entries `[start, start+count)` along the leading dimension.
    pub fn slice_outer(&self, start: usize, count: usize) -> Result<Self> {
        let outer = *self.dims.first().unwrap_or(&0);
        if start + count > outer {
            return shape_err("slice_outer", format!("{start}+{count} > {outer}"));
        }
        let inner = self.data.len().checked_div(outer).unwrap_or(0);
        let mut dims = self.dims.clone();
        dims[0] = count;
        Ok(Tensor { dims, data: self.data[start * inner..(start + count) * inner].to_vec() })
    }

    /// Gathers entries along the leading dimension.
    pub fn select_outer(&self, idx: &[usize]) -> Result<Self> {
        let outer = *self.dims.first().unwrap_or(&0);
        let inner = self.data.len().checked_div(outer).unwrap_or(0);
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            if i >= outer {
                return shape_err("select_outer", format!("index {i} >= {outer}"));
            }
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut dims = self.dims.clone();
        dims[0] = idx.len();
        Ok(Tensor { dims, data })
    }

    /// Concatenates along the leading dimension.
    pub fn cat_outer(parts: &[&Self]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return shape_err("cat_outer", "no parts");
        };
        let tail = &first.dims[1..];
        let mut data = Vec::new();
        let mut outer = 0;
        for p in parts {
            if &p.dims[1..] != tail {
                return shape_err("cat_outer", format!("{:?} vs {:?}", p.dims, first.dims));
            }
            outer += p.dims[0];
            data.extend_from_slice(&p.data);
        }
        let mut dims = first.dims.clone();
        dims[0] = outer;
        Ok(Tensor { dims, data })
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn gemm_transposes_agree_with_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // [2,3]
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // [3,4]
        let mut naive = vec![0.0; 8];
        for i in 0..2 {
            for j in 0..4 {
                for p in 0..3 {
                    naive[i * 4 + j] += a[i * 3 + p] * b[p * 4 + j];
                }
            }
        }
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, 1.0, &a, false, &b, false, 0.0, &mut c);
        for (x, y) in c.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }
        // transpose both inputs explicitly and ask gemm to undo it
        let at: Vec<f64> = (0..6).map(|i| a[(i % 2) * 3 + i / 2]).collect();
        let bt: Vec<f64> = (0..12).map(|i| b[(i % 3) * 4 + i / 3]).collect();
        let mut c2 = vec![0.0; 8];
        gemm(2, 3, 4, 1.0, &at, true, &bt, true, 0.0, &mut c2);
        for (x, y) in c2.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn select_and_cat_outer() {
        let t = Tensor::<f32>::from_vec(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let s = t.select_outer(&[2, 0]).unwrap();
        assert_eq!(s.data(), &[5., 6., 1., 2.]);
        let c = Tensor::cat_outer(&[&s, &t]).unwrap();
        assert_eq!(c.dims(), &[5, 2]);
        assert!(t.select_outer(&[3]).is_err());
    }
}
