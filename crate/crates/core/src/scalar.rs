//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar type the differentiable stack is generic over.
///
/// Implemented for `f32` and `f64`. Training and gradient checks run in
/// `f64`; `f32` is supported for inference-only use.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal, rounding to the nearest representable value.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every Scalar")
    }

    #[inline]
    fn from_sample(v: f32) -> Self {
        Self::from_f32(v).expect("f32 is representable in every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }

    /// Bit-level encoding used by persistence (always widened to `f64`).
    #[inline]
    fn to_le_f64_bytes(self) -> [u8; 8] {
        self.as_f64().to_le_bytes()
    }

    /// `C += A·B` on strided row/column layouts.
    ///
    /// # Safety
    /// Every index `i·rs + j·cs` addressed by the three operands must be in
    /// bounds of the corresponding slice.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], a_st: [isize; 2], b: &[Self], b_st: [isize; 2], c: &mut [Self], c_st: [isize; 2]);
}

impl Scalar for f32 {
    unsafe fn gemm_acc(m: usize, k: usize, n: usize, a: &[f32], a_st: [isize; 2], b: &[f32], b_st: [isize; 2], c: &mut [f32], c_st: [isize; 2]) {
        matrixmultiply::sgemm(
            m, k, n, 1.0, a.as_ptr(), a_st[0], a_st[1], b.as_ptr(), b_st[0], b_st[1], 1.0, c.as_mut_ptr(), c_st[0], c_st[1],
        );
    }
}

impl Scalar for f64 {
    unsafe fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], a_st: [isize; 2], b: &[f64], b_st: [isize; 2], c: &mut [f64], c_st: [isize; 2]) {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), a_st[0], a_st[1], b.as_ptr(), b_st[0], b_st[1], 1.0, c.as_mut_ptr(), c_st[0], c_st[1],
        );
    }
}
