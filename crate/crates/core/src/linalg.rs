//! Numerical kernels: matrix products, Gram accumulation, symmetric
//! eigendecomposition, shifted SPD solves and pairwise squared distances.
//!
//! Products go through `matrixmultiply` over fixed row blocks so results do not
//! depend on the rayon thread count. Eigen and Cholesky factorizations call
//! LAPACK (`dsyevd`, `dpotrf`, `dpotrs`) from the system BLAS library; the
//! library is pinned to one internal thread so factorizations are reproducible.

use std::cell::Cell;
use std::os::raw::c_char;
use std::sync::Once;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mat::Mat;

/// Output rows per parallel work item. Fixed so that per-row accumulation
/// order never depends on scheduling.
const ROW_BLOCK: usize = 64;

/// Relative asymmetry accepted by [`sym_eig`].
pub const SYMMETRY_TOL: f64 = 1e-10;

mod ffi {
    use std::os::raw::c_char;

    extern "C" {
        pub fn dsyevd_(
            jobz: *const c_char,
            uplo: *const c_char,
            n: *const i32,
            a: *mut f64,
            lda: *const i32,
            w: *mut f64,
            work: *mut f64,
            lwork: *const i32,
            iwork: *mut i32,
            liwork: *const i32,
            info: *mut i32,
        );
        pub fn dpotrf_(uplo: *const c_char, n: *const i32, a: *mut f64, lda: *const i32, info: *mut i32);
        pub fn dpotrs_(
            uplo: *const c_char,
            n: *const i32,
            nrhs: *const i32,
            a: *const f64,
            lda: *const i32,
            b: *mut f64,
            ldb: *const i32,
            info: *mut i32,
        );
        #[cfg(rlslab_openblas)]
        pub fn openblas_set_num_threads(n: i32);
    }
}

fn lapack_init() {
    static INIT: Once = Once::new();
    INIT.call_once(|| {
        #[cfg(rlslab_openblas)]
        unsafe {
            ffi::openblas_set_num_threads(1)
        };
    });
}

fn lapack_dim(n: usize, op: &'static str) -> Result<i32> {
    i32::try_from(n).map_err(|_| Error::shape(op, format!("dimension {n} exceeds LAPACK index range")))
}

#[derive(Clone, Copy)]
struct StridedPtr {
    ptr: *const f64,
    row_stride: isize,
    col_stride: isize,
}

// Read-only view into a matrix that outlives the parallel section.
unsafe impl Send for StridedPtr {}
unsafe impl Sync for StridedPtr {}

/// `c = op(a) * op(b) + beta * c` with `c` row-major `m x n`.
fn gemm_rows(m: usize, k: usize, n: usize, a: StridedPtr, b: StridedPtr, beta: f64, c: &mut [f64]) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    c.par_chunks_mut(ROW_BLOCK * n)
        .enumerate()
        .for_each(|(block, c_block)| {
            let (a, b) = (&a, &b);
            let i0 = block * ROW_BLOCK;
            let rows = c_block.len() / n;
            // SAFETY: `a` covers rows i0..i0+rows of op(a) with the given strides,
            // `b` covers k x n, and `c_block` is exactly rows x n row-major.
            unsafe {
                matrixmultiply::dgemm(
                    rows,
                    k,
                    n,
                    1.0,
                    a.ptr.offset(i0 as isize * a.row_stride),
                    a.row_stride,
                    a.col_stride,
                    b.ptr,
                    b.row_stride,
                    b.col_stride,
                    beta,
                    c_block.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        });
}

fn plain(m: &Mat) -> StridedPtr {
    StridedPtr {
        ptr: m.as_slice().as_ptr(),
        row_stride: m.cols() as isize,
        col_stride: 1,
    }
}

fn transposed(m: &Mat) -> StridedPtr {
    StridedPtr {
        ptr: m.as_slice().as_ptr(),
        row_stride: 1,
        col_stride: m.cols() as isize,
    }
}

/// Dense product `a * b`.
pub fn matmul(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols() != b.rows() {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} times {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
        ));
    }
    let mut c = Mat::zeros(a.rows(), b.cols());
    gemm_rows(a.rows(), a.cols(), b.cols(), plain(a), plain(b), 0.0, c.as_mut_slice());
    Ok(c)
}

/// `aᵀ * b` without materializing the transpose.
pub fn matmul_tn(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.rows() != b.rows() {
        return Err(Error::shape(
            "matmul_tn",
            format!("({}x{})ᵀ times {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
        ));
    }
    let mut c = Mat::zeros(a.cols(), b.cols());
    gemm_rows(
        a.cols(),
        a.rows(),
        b.cols(),
        transposed(a),
        plain(b),
        0.0,
        c.as_mut_slice(),
    );
    Ok(c)
}

/// `a * bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols() != b.cols() {
        return Err(Error::shape(
            "matmul_nt",
            format!("{}x{} times ({}x{})ᵀ", a.rows(), a.cols(), b.rows(), b.cols()),
        ));
    }
    let mut c = Mat::zeros(a.rows(), b.rows());
    gemm_rows(
        a.rows(),
        a.cols(),
        b.rows(),
        plain(a),
        transposed(b),
        0.0,
        c.as_mut_slice(),
    );
    Ok(c)
}

/// Adds `xᵀx` into the symmetric accumulator `acc` (`d x d`).
///
/// Each entry receives its per-row products in ascending row order, so
/// accumulating a matrix in consecutive row chunks gives bitwise the same
/// result as one call on the whole matrix.
pub fn gram_accumulate(acc: &mut Mat, x: &Mat) -> Result<()> {
    let d = x.cols();
    if acc.shape() != (d, d) {
        return Err(Error::shape(
            "gram_accumulate",
            format!("accumulator {:?} for {d} columns", acc.shape()),
        ));
    }
    if d == 0 {
        return Ok(());
    }
    acc.as_mut_slice()
        .par_chunks_mut(d)
        .enumerate()
        .for_each(|(j, acc_row)| {
            for row in x.row_iter() {
                let xj = row[j];
                for (a, &xk) in acc_row[j..].iter_mut().zip(&row[j..]) {
                    *a += xj * xk;
                }
            }
        });
    // mirror the upper triangle
    let data = acc.as_mut_slice();
    for j in 0..d {
        for k in (j + 1)..d {
            data[k * d + j] = data[j * d + k];
        }
    }
    Ok(())
}

/// Adds `xᵀy` into `acc` (`d x t`), ascending row order per entry.
pub fn xty_accumulate(acc: &mut Mat, x: &Mat, y: &Mat) -> Result<()> {
    if x.rows() != y.rows() || acc.shape() != (x.cols(), y.cols()) {
        return Err(Error::shape(
            "xty_accumulate",
            format!("x {:?}, y {:?}, accumulator {:?}", x.shape(), y.shape(), acc.shape()),
        ));
    }
    let t = y.cols();
    if t == 0 {
        return Ok(());
    }
    acc.as_mut_slice()
        .par_chunks_mut(t)
        .enumerate()
        .for_each(|(j, acc_row)| {
            for (xr, yr) in x.row_iter().zip(y.row_iter()) {
                let xj = xr[j];
                for (a, &yv) in acc_row.iter_mut().zip(yr) {
                    *a += xj * yv;
                }
            }
        });
    Ok(())
}

/// `xᵀx` computed with the same accumulation order as the out-of-core path.
pub fn gram(x: &Mat) -> Mat {
    let mut acc = Mat::zeros(x.cols(), x.cols());
    gram_accumulate(&mut acc, x).expect("accumulator shape is derived from x");
    acc
}

/// `xᵀy` computed with the same accumulation order as the out-of-core path.
pub fn xty(x: &Mat, y: &Mat) -> Result<Mat> {
    let mut acc = Mat::zeros(x.cols(), y.cols());
    xty_accumulate(&mut acc, x, y)?;
    Ok(acc)
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct EigPair {
    /// Orthonormal eigenvectors, one per column.
    pub vectors: Mat,
    /// Eigenvalues, descending. Column `j` of `vectors` belongs to `values[j]`.
    pub values: Vec<f64>,
}

impl EigPair {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn max_value(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }

    /// `Q diag(f(λ)) Qᵀ`.
    pub fn spectral_map(&self, f: impl Fn(f64) -> f64) -> Mat {
        let n = self.dim();
        let mut scaled = self.vectors.clone();
        for i in 0..n {
            for (v, &lam) in scaled.row_mut(i).iter_mut().zip(&self.values) {
                *v *= f(lam);
            }
        }
        matmul_nt(&scaled, &self.vectors).expect("square factors")
    }

    /// `Q diag(λ) Qᵀ`.
    pub fn reconstruct(&self) -> Mat {
        self.spectral_map(|l| l)
    }
}

thread_local! {
    static EIG_CALLS: Cell<usize> = const { Cell::new(0) };
}

/// Number of [`sym_eig`] calls made on the current thread.
pub fn eig_call_count() -> usize {
    EIG_CALLS.with(|c| c.get())
}

/// Symmetric eigendecomposition with eigenvalues sorted descending.
///
/// Equal eigenvalues keep the order LAPACK produced them in (stable sort).
pub fn sym_eig(a: &Mat) -> Result<EigPair> {
    EIG_CALLS.with(|c| c.set(c.get() + 1));
    let Some(asym) = a.asymmetry() else {
        return Err(Error::shape(
            "sym_eig",
            format!("non-square {}x{} input", a.rows(), a.cols()),
        ));
    };
    if !a.all_finite() {
        return Err(Error::Numeric("sym_eig: non-finite input".into()));
    }
    if asym > SYMMETRY_TOL * a.max_abs().max(1.0) {
        return Err(Error::shape(
            "sym_eig",
            format!("input is not symmetric (max |a_ij - a_ji| = {asym:e})"),
        ));
    }
    let n = a.rows();
    if n == 0 {
        return Ok(EigPair {
            vectors: Mat::zeros(0, 0),
            values: Vec::new(),
        });
    }
    lapack_init();
    let n_i = lapack_dim(n, "sym_eig")?;
    // Symmetric: the row-major buffer is also a valid column-major input.
    let mut z = a.as_slice().to_vec();
    let mut w = vec![0.0; n];
    let jobz = b'V' as c_char;
    let uplo = b'U' as c_char;
    let mut info = 0i32;
    let mut work_q = 0.0f64;
    let mut iwork_q = 0i32;
    let query = -1i32;
    // SAFETY: workspace query, all pointers valid for the declared sizes.
    unsafe {
        ffi::dsyevd_(
            &jobz,
            &uplo,
            &n_i,
            z.as_mut_ptr(),
            &n_i,
            w.as_mut_ptr(),
            &mut work_q,
            &query,
            &mut iwork_q,
            &query,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::Numeric(format!("dsyevd workspace query failed (info = {info})")));
    }
    let lwork = work_q as i32;
    let liwork = iwork_q;
    let mut work = vec![0.0f64; lwork.max(1) as usize];
    let mut iwork = vec![0i32; liwork.max(1) as usize];
    // SAFETY: buffers sized from the workspace query.
    unsafe {
        ffi::dsyevd_(
            &jobz,
            &uplo,
            &n_i,
            z.as_mut_ptr(),
            &n_i,
            w.as_mut_ptr(),
            work.as_mut_ptr(),
            &lwork,
            iwork.as_mut_ptr(),
            &liwork,
            &mut info,
        );
    }
    drop(work);
    drop(iwork);
    if info > 0 {
        return Err(Error::Numeric(format!(
            "eigendecomposition failed to converge (info = {info})"
        )));
    } else if info < 0 {
        return Err(Error::Numeric(format!("dsyevd: illegal argument {}", -info)));
    }
    // LAPACK returns ascending order; stable descending sort keeps ties in place.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| w[j].total_cmp(&w[i]));
    let values: Vec<f64> = order.iter().map(|&k| w[k]).collect();
    // z is column-major: eigenvector k occupies z[k*n .. (k+1)*n].
    let mut q = vec![0.0; n * n];
    for (j, &k) in order.iter().enumerate() {
        let col = &z[k * n..(k + 1) * n];
        for (i, &v) in col.iter().enumerate() {
            q[i * n + j] = v;
        }
    }
    Ok(EigPair {
        vectors: Mat::from_vec(n, n, q)?,
        values,
    })
}

/// Solves `(a + shift·I) z = b` through a Cholesky factorization.
///
/// With `shift == 0` the matrix must be numerically nonsingular; a pivot ratio
/// below machine resolution is reported as a numeric error.
pub fn shifted_solve(a: &Mat, b: &Mat, shift: f64) -> Result<Mat> {
    if !a.is_square() || a.rows() != b.rows() {
        return Err(Error::shape(
            "shifted_solve",
            format!("a {:?}, b {:?}", a.shape(), b.shape()),
        ));
    }
    if !shift.is_finite() || shift < 0.0 {
        return Err(Error::Parameter(format!("shift must be finite and >= 0, got {shift}")));
    }
    if !a.all_finite() || !b.all_finite() {
        return Err(Error::Numeric("shifted_solve: non-finite input".into()));
    }
    let n = a.rows();
    let t = b.cols();
    if n == 0 || t == 0 {
        return Ok(Mat::zeros(n, t));
    }
    lapack_init();
    let n_i = lapack_dim(n, "shifted_solve")?;
    let t_i = lapack_dim(t, "shifted_solve")?;
    let mut m = a.as_slice().to_vec();
    for i in 0..n {
        m[i * n + i] += shift;
    }
    let uplo = b'L' as c_char;
    let mut info = 0i32;
    // SAFETY: m is n x n.
    unsafe { ffi::dpotrf_(&uplo, &n_i, m.as_mut_ptr(), &n_i, &mut info) };
    if info > 0 {
        return Err(Error::NotPositiveDefinite {
            pivot: (info - 1) as usize,
        });
    } else if info < 0 {
        return Err(Error::Numeric(format!("dpotrf: illegal argument {}", -info)));
    }
    if shift == 0.0 {
        let (lo, hi) = (0..n).fold((f64::INFINITY, 0.0f64), |(lo, hi), i| {
            let p = m[i * n + i];
            (lo.min(p), hi.max(p))
        });
        if (lo / hi).powi(2) < n as f64 * f64::EPSILON {
            return Err(Error::Numeric(format!(
                "matrix is numerically singular (pivot ratio {:e}); use a positive shift",
                lo / hi
            )));
        }
    }
    // column-major right-hand side
    let mut rhs = vec![0.0; n * t];
    for i in 0..n {
        for j in 0..t {
            rhs[j * n + i] = b[(i, j)];
        }
    }
    // SAFETY: factor m is n x n, rhs is n x t column-major.
    unsafe {
        ffi::dpotrs_(&uplo, &n_i, &t_i, m.as_ptr(), &n_i, rhs.as_mut_ptr(), &n_i, &mut info);
    }
    if info != 0 {
        return Err(Error::Numeric(format!("dpotrs failed (info = {info})")));
    }
    Ok(Mat::from_fn(n, t, |i, j| rhs[j * n + i]))
}

fn row_sq_norms(x: &Mat) -> Vec<f64> {
    x.row_iter().map(|r| r.iter().map(|v| v * v).sum()).collect()
}

/// Squared Euclidean distances between the rows of `x1` and `x2`, through
/// `‖a‖² + ‖b‖² − 2aᵀb` with negative results clamped to zero. When both
/// arguments hold the same matrix the result is exactly symmetric with a
/// zero diagonal.
pub fn pairwise_sq_dists(x1: &Mat, x2: &Mat) -> Result<Mat> {
    if x1.cols() != x2.cols() {
        return Err(Error::shape(
            "pairwise_sq_dists",
            format!("{} vs {} columns", x1.cols(), x2.cols()),
        ));
    }
    let same = std::ptr::eq(x1, x2) || x1 == x2;
    let n1 = row_sq_norms(x1);
    let n2 = if same { n1.clone() } else { row_sq_norms(x2) };
    let mut d = matmul_nt(x1, x2)?;
    let cols = d.cols();
    d.as_mut_slice()
        .par_chunks_mut(cols.max(1))
        .zip(n1.par_iter())
        .for_each(|(row, &a)| {
            for (v, &b) in row.iter_mut().zip(&n2) {
                *v = (a + b - 2.0 * *v).max(0.0);
            }
        });
    if same {
        let n = d.rows();
        let data = d.as_mut_slice();
        for i in 0..n {
            data[i * n + i] = 0.0;
            for j in (i + 1)..n {
                data[j * n + i] = data[i * n + j];
            }
        }
    }
    Ok(d)
}
