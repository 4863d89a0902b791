/// `c = alpha * a·b + beta * c` for an `m×k` by `k×n` product with explicit
/// row/column strides, so transposed operands need no copies.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(extent(m, k, rsa, csa) <= a.len(), "gemm: lhs out of bounds");
    assert!(extent(k, n, rsb, csb) <= b.len(), "gemm: rhs out of bounds");
    assert!(extent(m, n, rsc, csc) <= c.len(), "gemm: output out of bounds");
    // SAFETY: the asserts above bound every element the kernel touches, and
    // `c` is a unique borrow that cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_product_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.5).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, 1.0, &a, (3, 1), &b, (4, 1), 0.0, &mut c, (4, 1));
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert!((c[i * 4 + j] - want).abs() < 1e-12);
            }
        }
        // a^T (3x2) times c (2x4), reading a with swapped strides.
        let mut d = vec![1.0; 12];
        gemm(3, 2, 4, 1.0, &a, (1, 3), &c, (4, 1), 1.0, &mut d, (4, 1));
        for i in 0..3 {
            for j in 0..4 {
                let want: f64 = 1.0 + (0..2).map(|p| a[p * 3 + i] * c[p * 4 + j]).sum::<f64>();
                assert!((d[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }
}
