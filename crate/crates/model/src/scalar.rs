use std::fmt::Debug;

use num_traits::Float;

/// Floating-point element type of the network: `f32` for training and
/// inference, `f64` for gradient checks.
pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;

    /// `C = alpha * A·B + beta * C` on strided row/column layouts.
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
    );
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn of(x: f64) -> Self {
                x as $t
            }

            fn f64(self) -> f64 {
                self as f64
            }

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
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(c.len() >= m * n, "gemm output too small");
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
                    }
                };
                assert!(a.len() >= span(m, k, rsa, csa), "gemm lhs too small");
                assert!(b.len() >= span(k, n, rsb, csb), "gemm rhs too small");
                // SAFETY: the extents of A, B and C were checked above.
                unsafe {
                    $f(
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
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut c = vec![1.0; m * n];
        f64::gemm(m, k, n, &a, k as isize, 1, &b, n as isize, 1, 1.0, &mut c);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = 1.0 + (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum::<f64>();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_transposed_operand() {
        // A stored as k×m, read transposed
        let (m, k, n) = (2, 3, 2);
        let at: Vec<f32> = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b: Vec<f32> = vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = vec![0.0; m * n];
        f32::gemm(m, k, n, &at, 1, m as isize, &b, n as isize, 1, 0.0, &mut c);
        assert_eq!(c, vec![1.0 + 5.0, 3.0 + 5.0, 2.0 + 6.0, 4.0 + 6.0]);
    }
}
