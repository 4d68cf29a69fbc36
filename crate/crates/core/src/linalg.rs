//! Dense matrix kernels: thin QR via modified Gram-Schmidt (with a
//! rank-deficient zero-column convention), the skew-symmetric projector used
//! by the orthonormal tangent flow, and the discrete-Laplacian observation
//! operator.

use crate::error::{Error, Result};

pub type DenseMatrix = nalgebra::DMatrix<f64>;
pub type DenseVector = nalgebra::DVector<f64>;

/// Relative rank tolerance used when no explicit tolerance is supplied:
/// a column whose residual after projection is below `1e-12` times its
/// pre-projection norm is treated as linearly dependent.
pub const DEFAULT_RANK_TOL: f64 = 1e-12;

/// When a single Gram-Schmidt sweep leaves `max |q'q - I|` above this bound
/// the sweep is applied a second time.
const REORTH_TRIGGER: f64 = 1e-8;

pub(crate) fn ensure_matrix_finite(m: &DenseMatrix, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

pub(crate) fn ensure_vector_finite(v: &DenseVector, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Thin QR factorization `y = q r` of a `d x k` matrix, `k <= d`.
///
/// `q` is `d x k` with orthonormal columns, except that columns found
/// linearly dependent (residual norm `<= rank_tol` times the column's
/// original norm) are identically zero with a matching zero on the diagonal
/// of `r`. `r` is `k x k` upper-triangular with nonnegative diagonal, so the
/// factorization is unique for full-rank input.
#[derive(Debug, Clone)]
pub struct ThinQrResult {
    pub q: DenseMatrix,
    pub r: DenseMatrix,
    /// Number of strictly positive diagonal entries of `r`.
    pub rank: usize,
}

impl ThinQrResult {
    /// Indices of zero columns (rank-deficient directions).
    pub fn zero_columns(&self) -> Vec<usize> {
        (0..self.r.ncols()).filter(|&i| self.r[(i, i)] == 0.0).collect()
    }
}

fn mgs_sweep(y: &DenseMatrix, rank_tol: f64) -> (DenseMatrix, DenseMatrix) {
    let (d, k) = y.shape();
    let mut q = DenseMatrix::zeros(d, k);
    let mut r = DenseMatrix::zeros(k, k);
    let mut v = DenseVector::zeros(d);
    for j in 0..k {
        v.copy_from(&y.column(j));
        let original_norm = v.norm();
        for i in 0..j {
            let qi = q.column(i);
            let rij = qi.dot(&v);
            r[(i, j)] = rij;
            v.axpy(-rij, &qi, 1.0);
        }
        let residual = v.norm();
        if residual > rank_tol * original_norm && residual > 0.0 {
            r[(j, j)] = residual;
            q.column_mut(j).copy_from(&(&v / residual));
        }
        // otherwise the column of q stays zero and r[(j, j)] = 0
    }
    (q, r)
}

/// Largest deviation of `q'q` from the 0/1 diagonal pattern implied by the
/// zero-column convention.
fn orthonormality_defect(q: &DenseMatrix) -> f64 {
    let g = q.transpose() * q;
    let k = g.nrows();
    let mut worst = 0.0f64;
    for i in 0..k {
        let active = g[(i, i)] > 0.5;
        for j in 0..k {
            let expected = if i == j && active { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - expected).abs());
        }
    }
    worst
}

/// Thin QR decomposition by modified Gram-Schmidt.
///
/// Uniqueness convention: `r_ii > 0` for independent columns. A dependent
/// column produces a zero column in `q` and `r_ii = 0`, keeping the column
/// indexing of the input (no shrinking). The sweep is applied twice when the
/// first pass leaves a noticeable orthonormality defect.
pub fn thin_qr(y: &DenseMatrix, rank_tol: f64) -> Result<ThinQrResult> {
    let (d, k) = y.shape();
    if k > d {
        return Err(Error::Dimension(format!(
            "thin_qr requires k <= d, got {d}x{k}"
        )));
    }
    if !(rank_tol >= 0.0) {
        return Err(Error::Invalid(format!(
            "rank_tol must be nonnegative, got {rank_tol}"
        )));
    }
    ensure_matrix_finite(y, "thin_qr input")?;

    let (q, r) = mgs_sweep(y, rank_tol);
    let (q, r) = if orthonormality_defect(&q) > REORTH_TRIGGER {
        let (q2, r2) = mgs_sweep(&q, rank_tol);
        let r = r2 * r;
        (q2, r)
    } else {
        (q, r)
    };
    let rank = (0..k).filter(|&i| r[(i, i)] > 0.0).count();
    Ok(ThinQrResult { q, r, rank })
}

/// Thin QR with the default rank tolerance.
pub fn thin_qr_default(y: &DenseMatrix) -> Result<ThinQrResult> {
    thin_qr(y, DEFAULT_RANK_TOL)
}

/// Skew-symmetric projector of a square matrix: `s_ij = m_ij` for `i > j`,
/// zero diagonal, `s_ij = -m_ji` above the diagonal. By construction
/// `m - s` is upper-triangular.
pub fn skew_projector(m: &DenseMatrix) -> Result<DenseMatrix> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "skew_projector requires a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let k = m.nrows();
    let mut s = DenseMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..i {
            s[(i, j)] = m[(i, j)];
            s[(j, i)] = -m[(i, j)];
        }
    }
    Ok(s)
}

/// Observation operator whose rows are the `k` leading orthonormal
/// eigenvectors of the `d x d` circulant second-difference matrix
/// (stencil `[1, -2, 1]`), ordered by descending eigenvalue
/// `-2 + 2 cos(2 pi f / d)`, i.e. lowest spatial frequency first. Within a
/// degenerate frequency pair the cosine mode precedes the sine mode.
pub fn laplacian_observation(d: usize, k: usize) -> Result<DenseMatrix> {
    if d == 0 || k == 0 || k > d {
        return Err(Error::Dimension(format!(
            "laplacian_observation requires 1 <= k <= d, got d = {d}, k = {k}"
        )));
    }
    let mut h = DenseMatrix::zeros(k, d);
    for row in 0..k {
        let freq = row.div_ceil(2);
        let is_cosine = row == 0 || row % 2 == 1;
        let nyquist = d.is_multiple_of(2) && freq == d / 2;
        let scale = if freq == 0 || nyquist {
            1.0 / (d as f64).sqrt()
        } else {
            (2.0 / d as f64).sqrt()
        };
        for i in 0..d {
            let phase = 2.0 * std::f64::consts::PI * (freq as f64) * (i as f64) / d as f64;
            h[(row, i)] = scale * if is_cosine { phase.cos() } else { phase.sin() };
        }
    }
    Ok(h)
}

/// Eigenvalue of the circulant second-difference matrix attached to row
/// `row` of [`laplacian_observation`].
pub fn laplacian_eigenvalue(d: usize, row: usize) -> f64 {
    let freq = row.div_ceil(2);
    -2.0 + 2.0 * (2.0 * std::f64::consts::PI * freq as f64 / d as f64).cos()
}

/// Principal angles (radians) between the subspaces spanned by the columns
/// of two orthonormal bases with the same shape.
pub fn principal_angles(a: &DenseMatrix, b: &DenseMatrix) -> Result<Vec<f64>> {
    if a.nrows() != b.nrows() || a.ncols() != b.ncols() {
        return Err(Error::Dimension(format!(
            "principal_angles requires equal shapes, got {}x{} vs {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let m = a.transpose() * b;
    let svd = m.svd(false, false);
    Ok(svd
        .singular_values
        .iter()
        .map(|&s| s.clamp(-1.0, 1.0).acos())
        .collect())
}
