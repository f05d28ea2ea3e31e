//! Dense row-major tensors over `f32` or `f64`.

use std::fmt::{self, Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => f.write_str("f32"),
            DType::F64 => f.write_str("f64"),
        }
    }
}

/// Scalar element type. Implemented for `f32` (training, inference) and
/// `f64` (finite-difference gradient checks).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a * b + beta * c` with arbitrary element strides.
    ///
    /// # Safety
    /// Every index reachable through the dimensions and strides must lie inside
    /// the corresponding buffer. Use [`MatRef`]/[`MatMut`] for the checked path.
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

    #[inline]
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every Real type")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub struct MatRef<'a, F> {
    pub data: &'a [F],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, F> MatRef<'a, F> {
    pub fn row_major(data: &'a [F], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// Strided mutable matrix view.
pub struct MatMut<'a, F> {
    pub data: &'a mut [F],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, F> MatMut<'a, F> {
    pub fn row_major(data: &'a mut [F], rows: usize, cols: usize) -> Self {
        MatMut {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatMut {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = a * b + beta * c`, bounds-checked.
pub fn gemm<F: Real>(a: MatRef<'_, F>, b: MatRef<'_, F>, beta: F, c: MatMut<'_, F>) {
    assert_eq!(a.cols, b.rows, "gemm inner extent");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "gemm output extent");
    assert!(a.span() <= a.data.len() && b.span() <= b.data.len());
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    assert!((c.rows - 1) * c.rs + (c.cols - 1) * c.cs < c.data.len());
    if a.cols == 0 {
        for i in 0..c.rows {
            for j in 0..c.cols {
                let x = &mut c.data[i * c.rs + j * c.cs];
                *x = beta * *x;
            }
        }
        return;
    }
    // SAFETY: spans checked above.
    unsafe {
        F::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            F::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Dense n-dimensional array, row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Debug> Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} elements]", self.shape, self.data.len())
        }
    }
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err!(
                "shape {shape:?} holds {n} elements, buffer has {}",
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::zero(); n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: F) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| F::c(x)).collect())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| G::c(x.f64())).collect(),
        }
    }

    /// Element at a multi-index.
    pub fn at(&self, idx: &[usize]) -> F {
        self.data[flat_index(&self.shape, idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: F) {
        let i = flat_index(&self.shape, idx);
        self.data[i] = value;
    }

    pub fn max_abs_diff(&self, other: &Tensor<F>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().f64())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Returns a copy with axes reordered so that output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let (shape, data) = permute_raw(&self.shape, &self.data, axes)?;
        Ok(Tensor { shape, data })
    }
}

pub(crate) fn flat_index(shape: &[usize], idx: &[usize]) -> usize {
    assert_eq!(shape.len(), idx.len(), "index rank");
    let mut flat = 0;
    for (&n, &i) in shape.iter().zip(idx) {
        assert!(i < n, "index {idx:?} out of bounds for {shape:?}");
        flat = flat * n + i;
    }
    flat
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn check_perm(axes: &[usize], ndim: usize) -> Result<()> {
    let mut seen = vec![false; ndim];
    if axes.len() != ndim {
        return Err(dim_err!("permutation {axes:?} for rank {ndim}"));
    }
    for &a in axes {
        if a >= ndim || seen[a] {
            return Err(dim_err!("invalid permutation {axes:?}"));
        }
        seen[a] = true;
    }
    Ok(())
}

/// Gathers `data` (shape `shape`) into the permuted layout.
pub(crate) fn permute_raw<F: Copy + Default>(
    shape: &[usize],
    data: &[F],
    axes: &[usize],
) -> Result<(Vec<usize>, Vec<F>)> {
    check_perm(axes, shape.len())?;
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = vec![F::default(); data.len()];
    permute_copy(&out_shape, &src_strides, data, &mut out);
    Ok((out_shape, out))
}

/// Walks `out_shape` in row-major order; `src_strides[i]` is the source stride of
/// output axis `i`.
fn permute_copy<F: Copy>(out_shape: &[usize], src_strides: &[usize], src: &[F], out: &mut [F]) {
    let nd = out_shape.len();
    if out.is_empty() {
        return;
    }
    if nd == 0 {
        out[0] = src[0];
        return;
    }
    let last = nd - 1;
    let inner = out_shape[last];
    let inner_stride = src_strides[last];
    let mut idx = vec![0usize; nd];
    let mut o = 0;
    loop {
        let base: usize = (0..last).map(|d| idx[d] * src_strides[d]).sum();
        if inner_stride == 1 {
            out[o..o + inner].copy_from_slice(&src[base..base + inner]);
        } else {
            for j in 0..inner {
                out[o + j] = src[base + j * inner_stride];
            }
        }
        o += inner;
        // advance the outer multi-index
        let mut d = last;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Inverse of a permutation.
pub(crate) fn inverse_perm(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_buffer_must_agree() {
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::new([2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn permute_transposes() {
        let t = Tensor::<f64>::from_f64([2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let p = t.permute(&[1, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[1., 4., 2., 5., 3., 6.]);
        let back = p.permute(&inverse_perm(&[1, 0])).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn permute_rank3_round_trip() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let t = Tensor::new([2, 3, 4], data).unwrap();
        let axes = [2, 0, 1];
        let p = t.permute(&axes).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.at(&[3, 1, 2]), t.at(&[1, 2, 3]));
        assert_eq!(p.permute(&inverse_perm(&axes)).unwrap(), t);
    }

    #[test]
    fn gemm_with_transposed_views() {
        let a = [1.0f64, 2., 3., 4., 5., 6.]; // 2x3
        let b = [1.0f64, 0., 0., 1., 1., 1.]; // 3x2
        let mut c = [0.0f64; 4];
        gemm(
            MatRef::row_major(&a, 2, 3),
            MatRef::row_major(&b, 3, 2),
            0.0,
            MatMut::row_major(&mut c, 2, 2),
        );
        assert_eq!(c, [4., 5., 10., 11.]);
        // (a^T)^T b through a stored transpose
        let at = [1.0f64, 4., 2., 5., 3., 6.]; // 3x2 = a^T
        let mut c2 = [0.0f64; 4];
        gemm(
            MatRef::row_major(&at, 3, 2).t(),
            MatRef::row_major(&b, 3, 2),
            0.0,
            MatMut::row_major(&mut c2, 2, 2),
        );
        assert_eq!(c, c2);
    }
}
