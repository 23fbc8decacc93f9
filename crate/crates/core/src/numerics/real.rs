use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type tag used in checkpoint manifests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
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

/// Scalar type of every tensor. Implemented for `f32` (training) and `f64`
/// (gradient checking).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// Tolerance for inverse-pair identities (FFT round trip, RevIN round trip).
    const ROUND_TRIP_TOL: f64;

    fn from_f64_lossy(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    /// `c += a * b` where `a` is `m x k`, `b` is `k x n` and `c` is `m x n`,
    /// each addressed through `(row_stride, col_stride)`.
    ///
    /// Panics if any operand's extent exceeds its slice.
    fn gemm_acc(m: usize, k: usize, n: usize, a: Strided<Self>, b: Strided<Self>, c: StridedMut<Self>);
}

/// Read-only matrix view: slice plus row and column strides.
pub type Strided<'a, T> = (&'a [T], usize, usize);

/// Mutable matrix view: slice plus row and column strides.
pub type StridedMut<'a, T> = (&'a mut [T], usize, usize);

fn extent(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

fn check_views<T>(m: usize, k: usize, n: usize, a: &Strided<T>, b: &Strided<T>, c: &StridedMut<T>) {
    assert!(extent(m, k, a.1, a.2) <= a.0.len(), "gemm: lhs out of bounds");
    assert!(extent(k, n, b.1, b.2) <= b.0.len(), "gemm: rhs out of bounds");
    assert!(extent(m, n, c.1, c.2) <= c.0.len(), "gemm: output out of bounds");
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;
    const ROUND_TRIP_TOL: f64 = 1e-5;

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }

    fn gemm_acc(m: usize, k: usize, n: usize, a: Strided<Self>, b: Strided<Self>, c: StridedMut<Self>) {
        check_views(m, k, n, &a, &b, &c);
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: check_views keeps every addressed element inside its slice,
        // and `c` is an exclusive borrow so it cannot alias `a` or `b`.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.0.as_ptr(),
                a.1 as isize,
                a.2 as isize,
                b.0.as_ptr(),
                b.1 as isize,
                b.2 as isize,
                1.0,
                c.0.as_mut_ptr(),
                c.1 as isize,
                c.2 as isize,
            );
        }
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;
    const ROUND_TRIP_TOL: f64 = 1e-10;

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }

    fn gemm_acc(m: usize, k: usize, n: usize, a: Strided<Self>, b: Strided<Self>, c: StridedMut<Self>) {
        check_views(m, k, n, &a, &b, &c);
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: check_views keeps every addressed element inside its slice,
        // and `c` is an exclusive borrow so it cannot alias `a` or `b`.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.0.as_ptr(),
                a.1 as isize,
                a.2 as isize,
                b.0.as_ptr(),
                b.1 as isize,
                b.2 as isize,
                1.0,
                c.0.as_mut_ptr(),
                c.1 as isize,
                c.2 as isize,
            );
        }
    }
}

/// Shorthand for converting an `f64` literal into `T`.
#[inline]
pub fn lit<T: Real>(v: f64) -> T {
    T::from_f64_lossy(v)
}
