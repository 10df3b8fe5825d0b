//! Small numeric helpers shared across modules.

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> MatRef<'a> {
    pub(crate) fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix view out of bounds");
        MatRef {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Sub-block of columns `[start, start + width)` of a row-major matrix with
    /// `ld` columns in total.
    pub(crate) fn cols_of(data: &'a [f64], rows: usize, ld: usize, start: usize, width: usize) -> Self {
        assert!(start + width <= ld && data.len() >= rows * ld);
        MatRef {
            data: &data[start..],
            rows,
            cols: width,
            rs: ld,
            cs: 1,
        }
    }

    pub(crate) fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = alpha * a * b + beta * c` where `c` is row-major `m x n` with row
/// stride `ldc`.
pub(crate) fn gemm_into(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64], ldc: usize) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(n <= ldc && c.len() >= (m - 1) * ldc + n, "gemm output out of bounds");
    if k > 0 {
        let last = |v: &MatRef<'_>| (v.rows - 1) * v.rs + (v.cols - 1) * v.cs;
        assert!(last(&a) < a.data.len() && last(&b) < b.data.len());
    }
    // SAFETY: all strides are non-negative and the bounds checks above cover
    // the largest index touched in each operand.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

pub(crate) fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    let n = b.cols;
    gemm_into(alpha, a, b, beta, c, n)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Norms below this are treated as zero vectors when normalizing.
pub const NORM_EPS: f64 = 1e-12;

/// FNV-1a, used to derive per-key RNG seeds that do not depend on the
/// platform hasher.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Mixes a base seed with a key into a new seed.
pub fn derive_seed(seed: u64, key: &[u8]) -> u64 {
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&seed.to_le_bytes());
    fnv1a64(&bytes) ^ fnv1a64(key).rotate_left(17)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: alloc::vec::Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: alloc::vec::Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3x4
        let mut c = [0.0; 8];
        gemm(1.0, MatRef::new(&a, 2, 3), MatRef::new(&b, 3, 4), 0.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // a^T a is 3x3
        let mut d = [0.0; 9];
        gemm(1.0, MatRef::new(&a, 2, 3).t(), MatRef::new(&a, 2, 3), 0.0, &mut d);
        assert_eq!(d[0], 9.0);
        assert_eq!(d[4], 1.0 + 16.0);
    }

    #[test]
    fn derived_seeds_differ_by_key() {
        assert_ne!(derive_seed(0, b"dog"), derive_seed(0, b"cat"));
        assert_eq!(derive_seed(3, b"dog"), derive_seed(3, b"dog"));
    }
}
