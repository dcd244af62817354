//! Scalar precision switch.
//!
//! Every numeric type in the engine is generic over [`Scalar`]; gradient
//! checks and bit-exact comparisons run at `f64`, training runs at `f32`.

use core::fmt::Debug;
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

pub trait Scalar:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    #[inline]
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }

    /// `c = alpha * a * b + beta * c` for an `m x k` by `k x n` product with
    /// arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );
}

#[inline]
fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                assert!(a.len() >= span(m, k, rsa, csa), "gemm: lhs too short");
                assert!(b.len() >= span(k, n, rsb, csb), "gemm: rhs too short");
                assert!(c.len() >= span(m, n, rsc, csc), "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above bound every strided access the
                // kernel performs; `c` is uniquely borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);
