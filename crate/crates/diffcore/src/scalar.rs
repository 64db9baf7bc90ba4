//! Floating point element types supported by the engine.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type of an [`Array`](crate::Array). Implemented for `f32` (training)
/// and `f64` (gradient checking).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Name written into checkpoint headers.
    const DTYPE: &'static str;
    /// Size in bytes of one element.
    const BYTES: usize;

    /// `c = alpha * a @ b + beta * c` on raw row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Logistic function used by the graph ops.
    #[inline]
    fn sigmoid(self) -> Self {
        if self >= Self::zero() {
            Self::one() / (Self::one() + (-self).exp())
        } else {
            let e = self.exp();
            e / (Self::one() + e)
        }
    }

    /// Hyperbolic tangent used by the graph ops.
    #[inline]
    fn tanh_op(self) -> Self {
        self.tanh()
    }

    /// `true` when no element is NaN or infinite.
    fn all_finite(xs: &[Self]) -> bool {
        xs.iter().all(|v| v.is_finite())
    }

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
    assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm operand out of bounds");
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
    ) {
        check_extent(a.len(), m, k, rsa, csa);
        check_extent(b.len(), k, n, rsb, csb);
        check_extent(c.len(), m, n, rsc, 1);
        // SAFETY: every operand extent was bounds-checked above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                1,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }

    #[inline]
    fn sigmoid(self) -> f32 {
        1.0 / (1.0 + exp_f32(-self))
    }

    #[inline]
    fn tanh_op(self) -> f32 {
        1.0 - 2.0 / (exp_f32(2.0 * self) + 1.0)
    }

    fn all_finite(xs: &[f32]) -> bool {
        const EXP: u32 = 0x7f80_0000;
        let mut bad = 0u32;
        for v in xs {
            bad |= ((v.to_bits() & EXP) == EXP) as u32;
        }
        bad == 0
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
    ) {
        check_extent(a.len(), m, k, rsa, csa);
        check_extent(b.len(), k, n, rsb, csb);
        check_extent(c.len(), m, n, rsc, 1);
        // SAFETY: every operand extent was bounds-checked above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                1,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }

    fn all_finite(xs: &[f64]) -> bool {
        const EXP: u64 = 0x7ff0_0000_0000_0000;
        let mut bad = 0u64;
        for v in xs {
            bad |= ((v.to_bits() & EXP) == EXP) as u64;
        }
        bad == 0
    }
}

/// Branch-free `exp` for `f32` (range reduction plus a degree-6 polynomial,
/// relative error below 2e-7). Inputs are clamped so the result stays finite.
#[inline]
pub fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    const ROUND: f32 = 12_582_912.0; // 1.5 * 2^23
    let x = x.max(-87.0).min(88.0);
    let n = (x * LOG2E + ROUND) - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.0
        + r * (1.0 + r * (0.5 + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    f32::from_bits(((n as i32 + 127) as u32) << 23) * p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_exp_accuracy() {
        let mut worst = 0.0f64;
        for i in -8000..8000 {
            let x = i as f32 / 100.0;
            let e = (x as f64).exp();
            worst = worst.max(((exp_f32(x) as f64) - e).abs() / e);
        }
        assert!(worst < 5e-7, "{worst}");
        assert!(exp_f32(-1000.0) > 0.0 && exp_f32(1000.0).is_finite());
    }

    #[test]
    fn fast_sigmoid_tanh() {
        for i in -200..200 {
            let x = i as f32 / 10.0;
            assert!((x.sigmoid() as f64 - (x as f64).sigmoid()).abs() < 1e-6);
            assert!((x.tanh_op() as f64 - (x as f64).tanh()).abs() < 1e-6);
        }
        assert!(f32::all_finite(&[1.0, -2.0]) && !f32::all_finite(&[1.0, f32::NAN]));
        assert!(!f64::all_finite(&[f64::INFINITY]));
    }
}
