//! Dense linear algebra and chi-square tail utilities.
//!
//! Matrices are `ndarray::Array2<f64>` in standard (row-major) layout and
//! vectors are `ndarray::Array1<f64>`. Every public operation validates that
//! its inputs are finite and non-empty before doing any work. Decompositions
//! are backed by LAPACK routines from the system OpenBLAS, which is pinned to
//! a single thread on first use so that results are reproducible bit for bit
//! no matter how callers schedule work.
//!
//! All functions here are pure: no interior mutability, no global state other
//! than the one-time BLAS thread pinning, so they are safe to call from many
//! threads at once.

use std::ffi::c_char;
use std::sync::Once;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Relative threshold under which a singular value is treated as zero when
/// determining the rank of a projection basis.
pub const RANK_TOLERANCE: f64 = 1e-10;

mod ffi {
    use std::ffi::c_char;

    extern "C" {
        pub fn openblas_set_num_threads(n: i32);
        #[allow(clippy::too_many_arguments)]
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
        #[allow(clippy::too_many_arguments)]
        pub fn dsyevr_(
            jobz: *const c_char,
            range: *const c_char,
            uplo: *const c_char,
            n: *const i32,
            a: *mut f64,
            lda: *const i32,
            vl: *const f64,
            vu: *const f64,
            il: *const i32,
            iu: *const i32,
            abstol: *const f64,
            m: *mut i32,
            w: *mut f64,
            z: *mut f64,
            ldz: *const i32,
            isuppz: *mut i32,
            work: *mut f64,
            lwork: *const i32,
            iwork: *mut i32,
            liwork: *const i32,
            info: *mut i32,
        );
        #[allow(clippy::too_many_arguments)]
        pub fn dsyrk_(
            uplo: *const c_char,
            trans: *const c_char,
            n: *const i32,
            k: *const i32,
            alpha: *const f64,
            a: *const f64,
            lda: *const i32,
            beta: *const f64,
            c: *mut f64,
            ldc: *const i32,
        );
        #[allow(clippy::too_many_arguments)]
        pub fn dgesdd_(
            jobz: *const c_char,
            m: *const i32,
            n: *const i32,
            a: *mut f64,
            lda: *const i32,
            s: *mut f64,
            u: *mut f64,
            ldu: *const i32,
            vt: *mut f64,
            ldvt: *const i32,
            work: *mut f64,
            lwork: *const i32,
            iwork: *mut i32,
            info: *mut i32,
        );
        #[allow(clippy::too_many_arguments)]
        pub fn dgemm_(
            transa: *const c_char,
            transb: *const c_char,
            m: *const i32,
            n: *const i32,
            k: *const i32,
            alpha: *const f64,
            a: *const f64,
            lda: *const i32,
            b: *const f64,
            ldb: *const i32,
            beta: *const f64,
            c: *mut f64,
            ldc: *const i32,
        );
        #[allow(clippy::too_many_arguments)]
        pub fn dgemv_(
            trans: *const c_char,
            m: *const i32,
            n: *const i32,
            alpha: *const f64,
            a: *const f64,
            lda: *const i32,
            x: *const f64,
            incx: *const i32,
            beta: *const f64,
            y: *mut f64,
            incy: *const i32,
        );
    }
}

/// Pins the BLAS thread pool to one thread. Outer parallelism is handled by
/// the caller (one task per Monte Carlo replicate), and single-threaded BLAS
/// keeps floating-point reduction orders, and therefore output bytes, fixed.
fn ensure_blas_single_thread() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| unsafe { ffi::openblas_set_num_threads(1) });
}

fn ensure_finite_2d(name: &str, m: &ArrayView2<'_, f64>) -> Result<()> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(Error::InvalidInput(format!(
            "{name}: dimensions must be at least 1x1, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "{name}: matrix contains non-finite entries"
        )));
    }
    Ok(())
}

fn ensure_finite_1d(name: &str, v: &ArrayView1<'_, f64>) -> Result<()> {
    if v.is_empty() {
        return Err(Error::InvalidInput(format!("{name}: vector is empty")));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "{name}: vector contains non-finite entries"
        )));
    }
    Ok(())
}

fn as_i32(name: &str, v: usize) -> Result<i32> {
    i32::try_from(v).map_err(|_| Error::InvalidInput(format!("{name}: dimension {v} too large")))
}

/// Computes `op(a) * op(b)` where `op` is the identity or the transpose,
/// for row-major inputs, via LAPACK's dgemm on the column-major views.
pub(crate) fn matmul(
    a: &ArrayView2<'_, f64>,
    ta: bool,
    b: &ArrayView2<'_, f64>,
    tb: bool,
) -> Array2<f64> {
    ensure_blas_single_thread();
    let a_std = a.as_standard_layout();
    let b_std = b.as_standard_layout();
    let (m, ka) = if ta {
        (a.ncols(), a.nrows())
    } else {
        (a.nrows(), a.ncols())
    };
    let (kb, n) = if tb {
        (b.ncols(), b.nrows())
    } else {
        (b.nrows(), b.ncols())
    };
    assert_eq!(ka, kb, "matmul: inner dimensions disagree");
    let mut c = vec![0.0f64; m * n];
    // Row-major C = op(A) op(B) is computed as column-major C^T = op(B)^T op(A)^T,
    // where the column-major view of a row-major buffer is its transpose.
    let transa = if tb { b'T' } else { b'N' } as c_char;
    let transb = if ta { b'T' } else { b'N' } as c_char;
    let m_f = n as i32;
    let n_f = m as i32;
    let k_f = ka as i32;
    let lda = b.ncols() as i32;
    let ldb = a.ncols() as i32;
    let ldc = n as i32;
    let one = 1.0f64;
    let zero = 0.0f64;
    unsafe {
        ffi::dgemm_(
            &transa,
            &transb,
            &m_f,
            &n_f,
            &k_f,
            &one,
            b_std.as_ptr(),
            &lda,
            a_std.as_ptr(),
            &ldb,
            &zero,
            c.as_mut_ptr(),
            &ldc,
        );
    }
    Array2::from_shape_vec((m, n), c).expect("matmul: shape mismatch")
}

/// Computes `op(a) * x` for a row-major matrix via dgemv.
pub(crate) fn matvec(a: &ArrayView2<'_, f64>, ta: bool, x: &ArrayView1<'_, f64>) -> Array1<f64> {
    ensure_blas_single_thread();
    let a_std = a.as_standard_layout();
    let x_std = x.as_standard_layout();
    let out_len = if ta { a.ncols() } else { a.nrows() };
    let in_len = if ta { a.nrows() } else { a.ncols() };
    assert_eq!(in_len, x.len(), "matvec: dimensions disagree");
    let mut y = vec![0.0f64; out_len];
    // The column-major view of the row-major buffer is A^T, so the transpose
    // flags are swapped.
    let trans = if ta { b'N' } else { b'T' } as c_char;
    let m_f = a.ncols() as i32;
    let n_f = a.nrows() as i32;
    let lda = a.ncols() as i32;
    let inc = 1i32;
    let one = 1.0f64;
    let zero = 0.0f64;
    unsafe {
        ffi::dgemv_(
            &trans,
            &m_f,
            &n_f,
            &one,
            a_std.as_ptr(),
            &lda,
            x_std.as_ptr(),
            &inc,
            &zero,
            y.as_mut_ptr(),
            &inc,
        );
    }
    Array1::from_vec(y)
}

/// Eigendecomposition of a symmetric matrix, eigenvalues in descending order.
///
/// `vecs_rows` holds the eigenvectors as rows, aligned with `vals`.
pub(crate) struct EighDesc {
    pub vals: Array1<f64>,
    pub vecs_rows: Array2<f64>,
}

/// Full symmetric eigendecomposition via LAPACK dsyevd.
pub(crate) fn sym_eigh_desc(a: &ArrayView2<'_, f64>) -> Result<EighDesc> {
    ensure_blas_single_thread();
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::InvalidInput(format!(
            "sym_eigh_desc: matrix must be square, got {}x{}",
            n,
            a.ncols()
        )));
    }
    let n_f = as_i32("sym_eigh_desc", n)?;
    let mut buf: Vec<f64> = a.as_standard_layout().iter().copied().collect();
    let mut vals = vec![0.0f64; n];
    let jobz = b'V' as c_char;
    let uplo = b'L' as c_char;
    let mut info = 0i32;
    // Workspace query.
    let mut work_query = [0.0f64; 1];
    let mut iwork_query = [0i32; 1];
    let neg_one = -1i32;
    unsafe {
        ffi::dsyevd_(
            &jobz,
            &uplo,
            &n_f,
            buf.as_mut_ptr(),
            &n_f,
            vals.as_mut_ptr(),
            work_query.as_mut_ptr(),
            &neg_one,
            iwork_query.as_mut_ptr(),
            &neg_one,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::Numerical(format!(
            "dsyevd workspace query failed with info={info}"
        )));
    }
    let lwork = work_query[0] as i32;
    let liwork = iwork_query[0];
    let mut work = vec![0.0f64; lwork.max(1) as usize];
    let mut iwork = vec![0i32; liwork.max(1) as usize];
    unsafe {
        ffi::dsyevd_(
            &jobz,
            &uplo,
            &n_f,
            buf.as_mut_ptr(),
            &n_f,
            vals.as_mut_ptr(),
            work.as_mut_ptr(),
            &lwork,
            iwork.as_mut_ptr(),
            &liwork,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::Numerical(format!("dsyevd failed with info={info}")));
    }
    // The column-major eigenvector matrix reads back row-major as one
    // eigenvector per row, in ascending eigenvalue order; flip to descending.
    let vecs_asc = Array2::from_shape_vec((n, n), buf).expect("sym_eigh_desc: shape");
    let mut vecs_rows = Array2::zeros((n, n));
    let mut vals_desc = Array1::zeros(n);
    for j in 0..n {
        vals_desc[j] = vals[n - 1 - j];
        vecs_rows.row_mut(j).assign(&vecs_asc.row(n - 1 - j));
    }
    Ok(EighDesc {
        vals: vals_desc,
        vecs_rows,
    })
}

/// Top-`k` eigenpairs of a symmetric matrix via LAPACK dsyevr with an
/// index range, eigenvalues descending, eigenvectors as rows. Computes
/// only the requested pairs, which is much cheaper than the full
/// decomposition when `k` is small.
pub(crate) fn sym_top_eigenpairs(a: &ArrayView2<'_, f64>, k: usize) -> Result<EighDesc> {
    ensure_blas_single_thread();
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::InvalidInput(format!(
            "sym_top_eigenpairs: matrix must be square, got {}x{}",
            n,
            a.ncols()
        )));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!(
            "sym_top_eigenpairs: k must satisfy 1 <= k <= {n}, got {k}"
        )));
    }
    let n_f = as_i32("sym_top_eigenpairs", n)?;
    let k_f = as_i32("sym_top_eigenpairs", k)?;
    let mut buf: Vec<f64> = a.as_standard_layout().iter().copied().collect();
    let jobz = b'V' as c_char;
    let range = b'I' as c_char;
    let uplo = b'L' as c_char;
    let vl = 0.0f64;
    let vu = 0.0f64;
    let il = n_f - k_f + 1;
    let iu = n_f;
    // Non-positive tolerance selects the backend's default accuracy.
    let abstol = 0.0f64;
    let mut m_out = 0i32;
    let mut vals = vec![0.0f64; n];
    let mut z = vec![0.0f64; n * k];
    let ldz = n_f;
    let mut isuppz = vec![0i32; 2 * n];
    let mut info = 0i32;
    let neg_one = -1i32;
    let mut work_query = [0.0f64; 1];
    let mut iwork_query = [0i32; 1];
    unsafe {
        ffi::dsyevr_(
            &jobz,
            &range,
            &uplo,
            &n_f,
            buf.as_mut_ptr(),
            &n_f,
            &vl,
            &vu,
            &il,
            &iu,
            &abstol,
            &mut m_out,
            vals.as_mut_ptr(),
            z.as_mut_ptr(),
            &ldz,
            isuppz.as_mut_ptr(),
            work_query.as_mut_ptr(),
            &neg_one,
            iwork_query.as_mut_ptr(),
            &neg_one,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::Numerical(format!(
            "dsyevr workspace query failed with info={info}"
        )));
    }
    let lwork = work_query[0] as i32;
    let liwork = iwork_query[0];
    let mut work = vec![0.0f64; lwork.max(1) as usize];
    let mut iwork = vec![0i32; liwork.max(1) as usize];
    unsafe {
        ffi::dsyevr_(
            &jobz,
            &range,
            &uplo,
            &n_f,
            buf.as_mut_ptr(),
            &n_f,
            &vl,
            &vu,
            &il,
            &iu,
            &abstol,
            &mut m_out,
            vals.as_mut_ptr(),
            z.as_mut_ptr(),
            &ldz,
            isuppz.as_mut_ptr(),
            work.as_mut_ptr(),
            &lwork,
            iwork.as_mut_ptr(),
            &liwork,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::Numerical(format!("dsyevr failed with info={info}")));
    }
    if m_out != k_f {
        return Err(Error::Numerical(format!(
            "dsyevr returned {m_out} of {k} requested eigenpairs"
        )));
    }
    // The column-major n x k eigenvector block reads back row-major as one
    // eigenvector per row, in ascending eigenvalue order; flip to descending.
    let vecs_asc = Array2::from_shape_vec((k, n), z).expect("sym_top_eigenpairs: shape");
    let mut vecs_rows = Array2::zeros((k, n));
    let mut vals_desc = Array1::zeros(k);
    for j in 0..k {
        vals_desc[j] = vals[k - 1 - j];
        vecs_rows.row_mut(j).assign(&vecs_asc.row(k - 1 - j));
    }
    Ok(EighDesc {
        vals: vals_desc,
        vecs_rows,
    })
}

/// Gram matrix via the symmetric rank-k update: `w w^T` (`left`) or
/// `w^T w`, at half the cost of a general product.
pub(crate) fn gram_matrix(w: &ArrayView2<'_, f64>, left: bool) -> Array2<f64> {
    ensure_blas_single_thread();
    let w_std = w.as_standard_layout();
    let (out_dim, inner) = if left {
        (w.nrows(), w.ncols())
    } else {
        (w.ncols(), w.nrows())
    };
    let n_f = out_dim as i32;
    let k_f = inner as i32;
    let lda = w.ncols() as i32;
    // The column-major view of the row-major buffer is w^T, so the
    // transpose flag is swapped: w^T w uses 'N', w w^T uses 'T'.
    let trans = if left { b'T' } else { b'N' } as c_char;
    let uplo = b'L' as c_char;
    let one = 1.0f64;
    let zero = 0.0f64;
    let mut c = vec![0.0f64; out_dim * out_dim];
    let ldc = n_f;
    unsafe {
        ffi::dsyrk_(
            &uplo,
            &trans,
            &n_f,
            &k_f,
            &one,
            w_std.as_ptr(),
            &lda,
            &zero,
            c.as_mut_ptr(),
            &ldc,
        );
    }
    // Column-major lower triangle equals the row-major upper triangle;
    // mirror it into the other half.
    let mut gram = Array2::from_shape_vec((out_dim, out_dim), c).expect("gram_matrix: shape");
    for i in 0..out_dim {
        for j in 0..i {
            gram[[i, j]] = gram[[j, i]];
        }
    }
    gram
}

/// A thin singular value decomposition `m = u * diag(s) * vt`.
///
/// With `m` of shape `n x p` and `r = min(n, p)`: `u` is `n x r` with
/// orthonormal columns, `s` holds the singular values in non-increasing
/// order, and `vt` is `r x p` with orthonormal rows (the right singular
/// vectors). Each right singular vector is normalized so that its entry of
/// largest magnitude is positive, ties resolved toward the lowest index; the
/// matching column of `u` is flipped along with it.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    /// Left singular vectors, one per column.
    pub u: Array2<f64>,
    /// Singular values, non-increasing.
    pub s: Array1<f64>,
    /// Right singular vectors, one per row.
    pub vt: Array2<f64>,
}

impl ThinSvd {
    /// Multiplies the factors back together; used by tests and self-checks.
    pub fn reconstruct(&self) -> Array2<f64> {
        let r = self.s.len();
        let mut us = self.u.clone();
        for j in 0..r {
            us.column_mut(j).mapv_inplace(|x| x * self.s[j]);
        }
        matmul(&us.view(), false, &self.vt.view(), false)
    }
}

/// Computes the thin SVD of a dense matrix via LAPACK dgesdd.
///
/// Returns [`Error::InvalidInput`] if the matrix is empty or contains
/// non-finite entries.
pub fn thin_svd(m: &Array2<f64>) -> Result<ThinSvd> {
    ensure_blas_single_thread();
    ensure_finite_2d("thin_svd", &m.view())?;
    let n = m.nrows();
    let p = m.ncols();
    let r = n.min(p);
    // The row-major buffer of m reads column-major as m^T (p x n), whose SVD
    // swaps the roles of the singular vector factors: the LAPACK "u" output
    // holds the right singular vectors of m and "vt" holds the left ones.
    let m_f = as_i32("thin_svd", p)?;
    let n_f = as_i32("thin_svd", n)?;
    let r_f = r as i32;
    let mut a: Vec<f64> = m.as_standard_layout().iter().copied().collect();
    let mut s = vec![0.0f64; r];
    let mut u_arg = vec![0.0f64; p * r];
    let mut vt_arg = vec![0.0f64; r * n];
    let mut iwork = vec![0i32; 8 * r];
    let jobz = b'S' as c_char;
    let mut info = 0i32;
    let mut work_query = [0.0f64; 1];
    let neg_one = -1i32;
    unsafe {
        ffi::dgesdd_(
            &jobz,
            &m_f,
            &n_f,
            a.as_mut_ptr(),
            &m_f,
            s.as_mut_ptr(),
            u_arg.as_mut_ptr(),
            &m_f,
            vt_arg.as_mut_ptr(),
            &r_f,
            work_query.as_mut_ptr(),
            &neg_one,
            iwork.as_mut_ptr(),
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::Numerical(format!(
            "dgesdd workspace query failed with info={info}"
        )));
    }
    let lwork = work_query[0] as i32;
    let mut work = vec![0.0f64; lwork.max(1) as usize];
    unsafe {
        ffi::dgesdd_(
            &jobz,
            &m_f,
            &n_f,
            a.as_mut_ptr(),
            &m_f,
            s.as_mut_ptr(),
            u_arg.as_mut_ptr(),
            &m_f,
            vt_arg.as_mut_ptr(),
            &r_f,
            work.as_mut_ptr(),
            &lwork,
            iwork.as_mut_ptr(),
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::Numerical(format!(
            "dgesdd did not converge (info={info})"
        )));
    }
    // Column-major (p x r) reads back row-major as (r x p): right vectors as rows.
    let mut vt = Array2::from_shape_vec((r, p), u_arg).expect("thin_svd: vt shape");
    // Column-major (r x n) reads back row-major as (n x r): left vectors as columns.
    let mut u = Array2::from_shape_vec((n, r), vt_arg).expect("thin_svd: u shape");
    apply_sign_convention(&mut u, &mut vt);
    Ok(ThinSvd {
        u,
        s: Array1::from_vec(s),
        vt,
    })
}

/// Makes each right singular vector's largest-magnitude entry positive
/// (ties broken toward the lowest index), flipping the paired left vector.
fn apply_sign_convention(u: &mut Array2<f64>, vt: &mut Array2<f64>) {
    for j in 0..vt.nrows() {
        let row = vt.row(j);
        let mut arg = 0usize;
        let mut best = f64::NEG_INFINITY;
        for (i, &x) in row.iter().enumerate() {
            let a = x.abs();
            if a > best {
                best = a;
                arg = i;
            }
        }
        if vt[[j, arg]] < 0.0 {
            vt.row_mut(j).mapv_inplace(|x| -x);
            u.column_mut(j).mapv_inplace(|x| -x);
        }
    }
}

/// Returns the top `k` right singular vectors of `m` as the columns of a
/// `p x k` matrix, using the deterministic sign convention of [`thin_svd`].
///
/// Requires `1 <= k < min(n, p)`; otherwise returns [`Error::RankError`].
pub fn top_right_vectors(m: &Array2<f64>, k: usize) -> Result<Array2<f64>> {
    let r = m.nrows().min(m.ncols());
    if k == 0 || k >= r {
        return Err(Error::RankError(format!(
            "top_right_vectors: k must satisfy 1 <= k < min(n, p) = {r}, got {k}"
        )));
    }
    let svd = thin_svd(m)?;
    let p = m.ncols();
    let mut v = Array2::zeros((p, k));
    for j in 0..k {
        v.column_mut(j).assign(&svd.vt.row(j));
    }
    Ok(v)
}

/// Projects `target` onto the orthogonal complement of the column space of
/// `basis`, i.e. computes `(I - P) target` for `P` the orthogonal projector
/// onto `span(basis)`.
///
/// The basis may be rank deficient; its numerical rank is the number of
/// singular values above [`RANK_TOLERANCE`] times the largest. A basis with
/// zero columns leaves the target unchanged.
pub fn residualize(target: &Array1<f64>, basis: &Array2<f64>) -> Result<Array1<f64>> {
    ensure_finite_1d("residualize", &target.view())?;
    if basis.ncols() == 0 {
        return Ok(target.clone());
    }
    ensure_finite_2d("residualize", &basis.view())?;
    if basis.nrows() != target.len() {
        return Err(Error::InvalidInput(format!(
            "residualize: basis has {} rows but target has length {}",
            basis.nrows(),
            target.len()
        )));
    }
    let svd = thin_svd(basis)?;
    let smax = svd.s[0];
    if smax <= 0.0 {
        return Ok(target.clone());
    }
    let rank = svd
        .s
        .iter()
        .take_while(|&&s| s > RANK_TOLERANCE * smax)
        .count();
    if rank == 0 {
        return Ok(target.clone());
    }
    let u_r = svd.u.slice(ndarray::s![.., ..rank]);
    let coeffs = matvec(&u_r, true, &target.view());
    let proj = matvec(&u_r, false, &coeffs.view());
    Ok(target - &proj)
}

/// Removes from `target` its projection onto the columns of `u`, which are
/// assumed orthonormal. Fast path used by the experiment loops.
pub(crate) fn residualize_orthonormal(
    target: &ArrayView1<'_, f64>,
    u: &ArrayView2<'_, f64>,
) -> Array1<f64> {
    if u.ncols() == 0 {
        return target.to_owned();
    }
    let coeffs = matvec(u, true, target);
    let proj = matvec(u, false, &coeffs.view());
    target - &proj
}

/// Strategy for extracting a top-`k` left singular basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BasisMethod {
    /// Full eigendecomposition of the smaller Gram matrix.
    Exact,
    /// Subspace iteration with a deterministic start, falling back to
    /// [`BasisMethod::Exact`] when it cannot certify convergence.
    Adaptive,
}

/// Smallest Gram dimension at which the adaptive path attempts subspace
/// iteration before falling back to the exact decomposition.
const ADAPTIVE_MIN_DIM: usize = 384;
const SUBSPACE_MAX_ITER: usize = 512;
const SUBSPACE_TOL: f64 = 1e-9;

/// Returns an `n x k` matrix with orthonormal columns spanning the top-`k`
/// left singular subspace of `w` (`n x p`), with `1 <= k < min(n, p)`.
///
/// The span equals that of the columns of `w * v_k` for `v_k` the top-`k`
/// right singular vectors, which is the only property downstream projections
/// depend on; individual column signs and rotations are not specified.
pub(crate) fn top_left_basis(
    w: &ArrayView2<'_, f64>,
    k: usize,
    method: BasisMethod,
) -> Result<Array2<f64>> {
    let (n, p) = (w.nrows(), w.ncols());
    let r = n.min(p);
    if k == 0 || k >= r {
        return Err(Error::RankError(format!(
            "top_left_basis: k must satisfy 1 <= k < min(n, p) = {r}, got {k}"
        )));
    }
    if method == BasisMethod::Adaptive && r >= ADAPTIVE_MIN_DIM {
        if let Some(basis) = top_left_basis_subspace(w, k) {
            return Ok(basis);
        }
    }
    top_left_basis_exact(w, k)
}

fn top_left_basis_exact(w: &ArrayView2<'_, f64>, k: usize) -> Result<Array2<f64>> {
    let (n, p) = (w.nrows(), w.ncols());
    if n <= p {
        // Eigenvectors of W W^T are the left singular vectors directly.
        let gram = gram_matrix(w, true);
        let eig = sym_top_eigenpairs(&gram.view(), k)?;
        let mut basis = Array2::zeros((n, k));
        for j in 0..k {
            basis.column_mut(j).assign(&eig.vecs_rows.row(j));
        }
        Ok(basis)
    } else {
        // Map the top right singular vectors through W and normalize.
        let gram = gram_matrix(w, false);
        let eig = sym_top_eigenpairs(&gram.view(), k)?;
        let mut basis = Array2::zeros((n, k));
        let top = eig.vals[0].max(0.0);
        for j in 0..k {
            let img = matvec(w, false, &eig.vecs_rows.row(j));
            let norm = img.dot(&img).sqrt();
            if !(norm * norm > RANK_TOLERANCE * RANK_TOLERANCE * top) || norm == 0.0 {
                return Err(Error::RankError(format!(
                    "top_left_basis: singular value {j} is numerically zero"
                )));
            }
            basis.column_mut(j).assign(&(img / norm));
        }
        // One orthonormalization pass absorbs rounding in the mapped images.
        let mut basis = basis;
        if !orthonormalize_columns(&mut basis) {
            return Err(Error::RankError(
                "top_left_basis: mapped basis lost rank".to_string(),
            ));
        }
        Ok(basis)
    }
}

/// Deterministic block subspace iteration on the smaller Gram operator.
/// Returns `None` when convergence cannot be certified, in which case the
/// caller uses the exact decomposition instead.
fn top_left_basis_subspace(w: &ArrayView2<'_, f64>, k: usize) -> Option<Array2<f64>> {
    let (n, p) = (w.nrows(), w.ncols());
    let small_is_n = n <= p;
    let q = if small_is_n { n } else { p };
    // S b = W W^T b (n side) or W^T W b (p side), applied via two products.
    let apply = |b: &Array2<f64>| -> Array2<f64> {
        if small_is_n {
            let tmp = matmul(w, true, &b.view(), false);
            matmul(w, false, &tmp.view(), false)
        } else {
            let tmp = matmul(w, false, &b.view(), false);
            matmul(w, true, &tmp.view(), false)
        }
    };
    // Start from the images of the first k coordinate directions.
    let mut b = Array2::zeros((q, k));
    for j in 0..k {
        b[[j, j]] = 1.0;
    }
    let mut b = apply(&b);
    if !orthonormalize_columns(&mut b) {
        return None;
    }
    let mut last_resid = f64::INFINITY;
    for iter in 0..SUBSPACE_MAX_ITER {
        let sb = apply(&b);
        // Projection defect of S b onto span(b), relative to the dominant
        // Ritz value, bounds the sine of the largest principal angle between
        // span(b) and the true invariant subspace up to the spectral gap.
        let r_small = matmul(&b.view(), true, &sb.view(), false);
        let proj = matmul(&b.view(), false, &r_small.view(), false);
        let defect = &sb - &proj;
        let theta_max = (0..k)
            .map(|j| r_small[[j, j]].abs())
            .fold(0.0f64, f64::max)
            .max(f64::MIN_POSITIVE);
        let resid = defect.iter().map(|x| x * x).sum::<f64>().sqrt() / theta_max;
        if resid <= SUBSPACE_TOL {
            let mut converged = sb;
            if !orthonormalize_columns(&mut converged) {
                return None;
            }
            let basis = if small_is_n {
                converged
            } else {
                let mut img = matmul(w, false, &converged.view(), false);
                if !orthonormalize_columns(&mut img) {
                    return None;
                }
                img
            };
            return Some(basis);
        }
        // Stagnation guard: without a spectral gap the defect plateaus.
        if iter >= 64 && iter % 16 == 0 {
            if resid > 0.8 * last_resid {
                return None;
            }
            last_resid = resid;
        }
        let mut next = sb;
        if !orthonormalize_columns(&mut next) {
            return None;
        }
        b = next;
    }
    None
}

/// Modified Gram-Schmidt with one re-orthogonalization pass. Returns false
/// if a column collapses, signalling rank deficiency.
fn orthonormalize_columns(b: &mut Array2<f64>) -> bool {
    let k = b.ncols();
    for _pass in 0..2 {
        for j in 0..k {
            for i in 0..j {
                let c = b.column(i).dot(&b.column(j));
                let bi = b.column(i).to_owned();
                b.column_mut(j).zip_mut_with(&bi, |x, &y| *x -= c * y);
            }
            let norm = b.column(j).dot(&b.column(j)).sqrt();
            if norm < 1e-150 {
                return false;
            }
            b.column_mut(j).mapv_inplace(|x| x / norm);
        }
    }
    true
}

/// Sample eigenvalues `d_j^2 / n` of the covariance `w^T w / n`, descending,
/// for the full spectrum of the smaller Gram side. Used by spectral
/// diagnostics; `w` is `n x p`.
pub fn sample_covariance_eigenvalues(w: &ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    let n = w.nrows() as f64;
    let gram = gram_matrix(w, w.nrows() <= w.ncols());
    let eig = sym_eigh_desc(&gram.view())?;
    Ok(eig.vals.mapv(|v| v.max(0.0) / n))
}

// ---------------------------------------------------------------------------
// Chi-square tail utilities.
// ---------------------------------------------------------------------------

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Upper tail probability of the standard normal distribution.
///
/// Computed as `erfc(x / sqrt(2)) / 2`, accurate to better than 1e-12
/// relative error throughout the upper tail.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x / SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-(x * x) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Lower-tail standard normal quantile, Acklam's rational approximation.
/// Relative error below 1.2e-9 over (0, 1); callers polish with Newton steps.
fn acklam_inv_cdf(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -((((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0))
    }
}

/// Upper-tail standard normal quantile: the `z` with `normal_sf(z) = q`.
fn normal_upper_quantile(q: f64) -> f64 {
    let mut z = -acklam_inv_cdf(q);
    // Two Newton steps against the erfc-based tail; quadratic convergence
    // takes the 1e-9 seed to full double precision.
    for _ in 0..2 {
        let pdf = normal_pdf(z);
        if pdf < 1e-300 {
            break;
        }
        z += (normal_sf(z) - q) / pdf;
    }
    z
}

/// Upper-tail quantile of the central chi-square distribution with one
/// degree of freedom: the `t` with `P(chi^2_1 > t) = alpha`.
///
/// Valid for `alpha` strictly inside (0, 1); anything else, including NaN,
/// returns [`Error::InvalidInput`]. Absolute error is below 1e-10.
pub fn chi1_upper_quantile(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!(
            "chi1_upper_quantile: alpha must lie strictly in (0, 1), got {alpha}"
        )));
    }
    let z = normal_upper_quantile(alpha / 2.0);
    Ok(z * z)
}

/// Survival function of the noncentral chi-square distribution with one
/// degree of freedom and noncentrality `ncp`, evaluated at `t`:
///
/// `P(chi^2_1(ncp) > t) = Q(sqrt(t) - sqrt(ncp)) + Q(sqrt(t) + sqrt(ncp))`
///
/// where `Q` is the standard normal upper tail. Negative or non-finite
/// arguments return [`Error::InvalidInput`]. Absolute error is below 1e-12.
pub fn noncentral_chi1_sf(t: f64, ncp: f64) -> Result<f64> {
    if !t.is_finite() || !ncp.is_finite() || t < 0.0 || ncp < 0.0 {
        return Err(Error::InvalidInput(format!(
            "noncentral_chi1_sf: t and ncp must be finite and nonnegative, got t={t}, ncp={ncp}"
        )));
    }
    let st = t.sqrt();
    let sn = ncp.sqrt();
    let v = normal_sf(st - sn) + normal_sf(st + sn);
    Ok(v.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn max_abs(m: &Array2<f64>) -> f64 {
        m.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
    }

    #[test]
    fn thin_svd_reconstructs_rectangular() {
        let m = array![
            [1.0, 2.0, 3.0, 4.0],
            [0.5, -1.0, 2.5, 0.0],
            [3.0, 0.0, -2.0, 1.0]
        ];
        let svd = thin_svd(&m).unwrap();
        let err = max_abs(&(&svd.reconstruct() - &m));
        assert!(
            err <= 1e-8 * max_abs(&m) * 3.0,
            "reconstruction error {err}"
        );
        for j in 1..svd.s.len() {
            assert!(svd.s[j - 1] >= svd.s[j]);
        }
        let gram = matmul(&svd.vt.view(), false, &svd.vt.view(), true);
        for i in 0..gram.nrows() {
            for j in 0..gram.ncols() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - want).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn thin_svd_sign_convention_positive_peak() {
        let m = array![[0.0, -5.0], [0.0, -3.0], [1e-3, 0.0]];
        let svd = thin_svd(&m).unwrap();
        for j in 0..svd.vt.nrows() {
            let row = svd.vt.row(j);
            let peak = row
                .iter()
                .cloned()
                .fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(peak > 0.0, "row {j} peak {peak}");
        }
    }

    #[test]
    fn thin_svd_rejects_non_finite() {
        let m = array![[1.0, f64::NAN], [0.0, 1.0]];
        assert!(matches!(thin_svd(&m), Err(Error::InvalidInput(_))));
        let m = array![[1.0, f64::INFINITY], [0.0, 1.0]];
        assert!(matches!(thin_svd(&m), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn top_right_vectors_bounds() {
        let m = Array2::<f64>::eye(4);
        assert!(matches!(top_right_vectors(&m, 0), Err(Error::RankError(_))));
        assert!(matches!(top_right_vectors(&m, 4), Err(Error::RankError(_))));
        assert!(top_right_vectors(&m, 2).is_ok());
    }

    #[test]
    fn residualize_identities() {
        let t = array![1.0, 2.0, 3.0, 4.0];
        let empty = Array2::<f64>::zeros((4, 0));
        assert_eq!(residualize(&t, &empty).unwrap(), t);

        let basis = array![[1.0, 1.0], [1.0, 1.0], [0.0, 0.0], [0.0, 0.0]];
        let r = residualize(&t, &basis).unwrap();
        // Duplicate columns: numerical rank one, projection onto (1,1,0,0)/sqrt(2).
        let expected = array![-0.5, 0.5, 3.0, 4.0];
        for i in 0..4 {
            assert!((r[i] - expected[i]).abs() < 1e-10);
        }
        // Idempotence.
        let r2 = residualize(&r, &basis).unwrap();
        for i in 0..4 {
            assert!((r2[i] - r[i]).abs() < 1e-10);
        }
        // Pythagoras.
        let proj = &t - &r;
        let lhs = t.dot(&t);
        let rhs = r.dot(&r) + proj.dot(&proj);
        assert!((lhs - rhs).abs() <= 1e-8 * lhs);
    }

    #[test]
    fn quantile_reference_values() {
        // Reference values computed with 40-digit arithmetic.
        let cases = [
            (1e-6, 23.928126976934829),
            (0.001, 10.827566170662732),
            (0.01, 6.6348966010212151),
            (0.025, 5.023886187314889),
            (0.05, 3.841458820694126),
            (0.1, 2.7055434540954146),
            (0.2, 1.6423744151498164),
            (0.5, 0.45493642311957275),
            (0.8, 0.06418475466730158),
            (0.9, 0.015790774093431225),
            (0.99, 0.00015708785790970198),
            (0.999, 1.5707971492624899e-6),
        ];
        for (alpha, want) in cases {
            let got = chi1_upper_quantile(alpha).unwrap();
            assert!(
                (got - want).abs() <= 1e-10,
                "alpha={alpha}: got {got}, want {want}"
            );
        }
        assert!(chi1_upper_quantile(0.0).is_err());
        assert!(chi1_upper_quantile(1.0).is_err());
        assert!(chi1_upper_quantile(-0.3).is_err());
        assert!(chi1_upper_quantile(f64::NAN).is_err());
    }

    #[test]
    fn noncentral_sf_reference_values() {
        // Reference values computed with 40-digit arithmetic.
        let cases = [
            (3.8414588206941254, 0.0, 0.050000000000000018),
            (1.0, 0.0, 0.3173105078629141),
            (1.0, 1.0, 0.52275013194817921),
            (3.0, 2.0, 0.37613105072179027),
            (5.0, 10.0, 0.8228315228505541),
            (0.5, 4.0, 0.90536962453327352),
            (10.0, 0.5, 0.0070954368879531282),
            (25.0, 24.0, 0.45976708765871077),
            (0.0, 3.0, 1.0),
            (0.001, 0.001, 0.97478548557555254),
            (40.0, 2.0, 4.5458899946752624e-7),
            (2.0, 50.0, 0.99999999229137106),
        ];
        for (t, ncp, want) in cases {
            let got = noncentral_chi1_sf(t, ncp).unwrap();
            assert!(
                (got - want).abs() <= 1e-12,
                "t={t}, ncp={ncp}: got {got}, want {want}"
            );
        }
        assert!(noncentral_chi1_sf(-1.0, 0.0).is_err());
        assert!(noncentral_chi1_sf(1.0, -0.5).is_err());
        assert!(noncentral_chi1_sf(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn sf_and_quantile_are_mutual_inverses_at_zero_ncp() {
        for &alpha in &[
            1e-5, 1e-3, 0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99, 0.999,
        ] {
            let t = chi1_upper_quantile(alpha).unwrap();
            let back = noncentral_chi1_sf(t, 0.0).unwrap();
            assert!(
                (back - alpha).abs() <= 1e-9,
                "alpha={alpha}: round trip {back}"
            );
        }
    }

    #[test]
    fn sf_monotone_in_t_and_ncp() {
        let ts = [0.0, 0.2, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0];
        for pair in ts.windows(2) {
            let a = noncentral_chi1_sf(pair[0], 2.0).unwrap();
            let b = noncentral_chi1_sf(pair[1], 2.0).unwrap();
            assert!(a >= b);
        }
        let ncps = [0.0, 0.5, 1.0, 2.0, 4.0, 9.0, 25.0];
        for pair in ncps.windows(2) {
            let a = noncentral_chi1_sf(3.84, pair[0]).unwrap();
            let b = noncentral_chi1_sf(3.84, pair[1]).unwrap();
            assert!(b >= a);
        }
    }

    #[test]
    fn normal_sf_reference_values() {
        // Reference values computed with 40-digit arithmetic.
        let cases = [
            (-5.0, 0.99999971334842812),
            (-1.0, 0.84134474606854295),
            (0.0, 0.5),
            (0.5, 0.3085375387259869),
            (1.0, 0.15865525393145705),
            (1.96, 0.024997895148220436),
            (3.0, 0.0013498980316300945),
            (5.0, 2.8665157187919391e-7),
            (8.0, 6.2209605742717841e-16),
            (12.0, 1.776482112077679e-33),
            (20.0, 2.7536241186062337e-89),
        ];
        for (x, want) in cases {
            let got = normal_sf(x);
            let rel = ((got - want) / want).abs();
            assert!(rel <= 1e-12, "x={x}: got {got}, want {want}, rel {rel}");
        }
    }

    #[test]
    fn gram_basis_matches_svd_span() {
        // Deterministic non-random matrix with distinct singular values
        // (row scaling and a graded diagonal break all spectral ties).
        let n = 7;
        let p = 11;
        let m = Array2::from_shape_fn((n, p), |(i, j)| {
            ((i * p + j) as f64 * 0.37).sin() * (1.0 + 0.25 * i as f64)
                + if i == j { 2.0 + 0.7 * i as f64 } else { 0.0 }
        });
        for k in 1..4 {
            let svd = thin_svd(&m).unwrap();
            let exact = top_left_basis(&m.view(), k, BasisMethod::Exact).unwrap();
            // Compare projectors: both should project u_k onto itself.
            for j in 0..k {
                let col = svd.u.column(j).to_owned();
                let r = residualize_orthonormal(&col.view(), &exact.view());
                let norm = r.dot(&r).sqrt();
                assert!(norm <= 1e-8, "k={k}, col {j}: residual {norm}");
            }
        }
    }

    #[test]
    fn decompositions_are_deterministic() {
        let m = Array2::from_shape_fn((20, 12), |(i, j)| ((i * 31 + j * 17) as f64).cos());
        let a = thin_svd(&m).unwrap();
        let b = thin_svd(&m).unwrap();
        assert_eq!(a.s.as_slice().unwrap(), b.s.as_slice().unwrap());
        assert_eq!(a.u.as_slice().unwrap(), b.u.as_slice().unwrap());
        assert_eq!(a.vt.as_slice().unwrap(), b.vt.as_slice().unwrap());
    }
}
