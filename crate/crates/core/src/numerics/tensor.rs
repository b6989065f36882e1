use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::Real;

/// Dense row-major array.
///
/// Values are immutable once a tape op has produced them; gradients live in
/// [`Gradients`](super::Gradients) rather than on the tensor itself.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {:?} holds {} values, data has {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    /// Panics if `shape` does not match `data.len()`; for internal construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: vec![T::zero(); n] }
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: vec![v; n] }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    /// 1-D tensor.
    pub fn vector(data: Vec<T>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        let c = self.last_dim();
        if c == 0 {
            0
        } else {
            self.numel() / c
        }
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.last_dim();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.last_dim();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn at2(&self, r: usize, c: usize) -> T {
        self.data[r * self.last_dim() + c]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::of(v.as_f64())).collect() }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Largest absolute elementwise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
                .fold(0.0, f64::max),
        )
    }

    /// Transposed copy of a 2-D tensor.
    pub fn transpose2(&self) -> Self {
        let (r, c) = (self.rows(), self.last_dim());
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self { shape: vec![c, r], data: out }
    }
}

/// `out[m,n] += a[m,k] · b[k,n]`, row-major, no bounds checks in the inner loop.
pub(crate) fn gemm_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`.
pub(crate) fn gemm_nt_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · b[m,n]`.
pub(crate) fn gemm_tn_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.rows(), 2);
        assert_eq!(t.last_dim(), 3);
    }

    #[test]
    fn gemm_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3x2
        let mut c = [0.0; 4];
        gemm_acc(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [1.0 - 2.0 + 1.5, 0.0 + 4.0 + 3.0, 4.0 - 5.0 + 3.0, 10.0 + 6.0]);
        // b transposed is 2x3
        let bt = Tensor::<f64>::new(vec![3, 2], b.to_vec()).unwrap().transpose2();
        let mut c2 = [0.0; 4];
        gemm_nt_acc(&a, bt.data(), &mut c2, 2, 3, 2);
        assert_eq!(c, c2);
        let at = Tensor::<f64>::new(vec![2, 3], a.to_vec()).unwrap().transpose2();
        let mut c3 = [0.0; 4];
        gemm_tn_acc(at.data(), &b, &mut c3, 3, 2, 2);
        assert_eq!(c, c3);
    }
}
