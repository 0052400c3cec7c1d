//! Shared dense/sparse linear algebra: generalized symmetric eigensolvers,
//! complex frequency-response solves, and Matrix Market export.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix, CsrMatrix};
use num_complex::Complex64;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is not symmetric positive definite ({context})")]
    NotSpd { context: String },
    #[error("dimension mismatch: {context}")]
    Dimension { context: String },
    #[error(
        "eigensolver did not converge after {iterations} iterations \
         (worst relative residual {residual:e})"
    )]
    EigenNonConvergence { iterations: usize, residual: f64 },
    #[error("sparse factorization failed: {context}")]
    Factorization { context: String },
    #[error("linear system is singular or numerically unstable ({context})")]
    Singular { context: String },
}

/// Builds `ck`, `cm` with `A = ck·K + cm·M` representing
/// `K + iωD − ω²M` under Rayleigh damping `D = αK + βM`.
pub fn response_coefficients(omega: f64, alpha: f64, beta: f64) -> (Complex64, Complex64) {
    (
        Complex64::new(1.0, omega * alpha),
        Complex64::new(-omega * omega, omega * beta),
    )
}

pub fn dense_from_csr(a: &CsrMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols());
    for (i, j, v) in a.triplet_iter() {
        out[(i, j)] = *v;
    }
    out
}

/// Extracts the dense submatrix `a[rows, cols]` as sparse CSR.
pub fn csr_submatrix(a: &CsrMatrix<f64>, rows: &[usize], cols: &[usize]) -> CsrMatrix<f64> {
    let mut col_of = vec![usize::MAX; a.ncols()];
    for (new, &old) in cols.iter().enumerate() {
        col_of[old] = new;
    }
    let mut coo = CooMatrix::new(rows.len(), cols.len());
    for (new_row, &old_row) in rows.iter().enumerate() {
        let row = a.row(old_row);
        for (&j, &v) in row.col_indices().iter().zip(row.values()) {
            if col_of[j] != usize::MAX {
                coo.push(new_row, col_of[j], v);
            }
        }
    }
    CsrMatrix::from(&coo)
}

/// Flips eigenvector columns so the first entry of significant magnitude is
/// positive; makes mode signs deterministic.
pub fn fix_column_signs(v: &mut DMatrix<f64>) {
    for mut col in v.column_iter_mut() {
        let amax = col.amax();
        if amax == 0.0 {
            continue;
        }
        let lead = col.iter().find(|e| e.abs() > 1e-12 * amax);
        if let Some(&lead) = lead {
            if lead < 0.0 {
                col.neg_mut();
            }
        }
    }
}

/// Solves the generalized symmetric eigenproblem `A z = λ B z` (B SPD) for
/// the `k` smallest eigenvalues via a Cholesky reduction to standard form.
/// Eigenvalues ascend; eigenvectors are B-orthonormal with deterministic
/// signs.
pub fn dense_gen_eigs(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    k: usize,
) -> Result<(Vec<f64>, DMatrix<f64>), LinalgError> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || b.ncols() != n {
        return Err(LinalgError::Dimension {
            context: format!("gen-eig on {}x{} / {}x{}", a.nrows(), a.ncols(), b.nrows(), b.ncols()),
        });
    }
    if k > n {
        return Err(LinalgError::Dimension {
            context: format!("requested {k} eigenpairs from dimension {n}"),
        });
    }
    let chol = Cholesky::new(b.clone()).ok_or_else(|| LinalgError::NotSpd {
        context: "right-hand matrix of generalized eigenproblem".into(),
    })?;
    let l = chol.l();
    let tmp = l
        .solve_lower_triangular(a)
        .ok_or_else(|| LinalgError::Singular {
            context: "triangular solve in eigenreduction".into(),
        })?;
    let mut c = l
        .solve_lower_triangular(&tmp.transpose())
        .ok_or_else(|| LinalgError::Singular {
            context: "triangular solve in eigenreduction".into(),
        })?;
    // Symmetrize; the two triangular solves leave rounding asymmetry.
    c = (&c + c.transpose()) * 0.5;

    let eig = SymmetricEigen::new(c);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));

    let mut values = Vec::with_capacity(k);
    let mut vectors = DMatrix::zeros(n, k);
    let lt = l.transpose();
    for (col, &idx) in order.iter().take(k).enumerate() {
        values.push(eig.eigenvalues[idx]);
        let y = eig.eigenvectors.column(idx).into_owned();
        let z = lt
            .solve_upper_triangular(&y)
            .ok_or_else(|| LinalgError::Singular {
                context: "back-substitution in eigenreduction".into(),
            })?;
        vectors.set_column(col, &z);
    }
    fix_column_signs(&mut vectors);
    Ok((values, vectors))
}

#[derive(Clone, Copy, Debug)]
pub struct ShiftInvertOpts {
    pub max_iter: usize,
    pub tol: f64,
    /// Extra trial vectors beyond the requested count; improves convergence
    /// when the spectrum is flat near the cutoff.
    pub extra: usize,
}

impl Default for ShiftInvertOpts {
    fn default() -> Self {
        Self {
            max_iter: 300,
            tol: 1e-10,
            extra: 8,
        }
    }
}

/// Smallest `k` eigenpairs of `K z = λ M z` with sparse SPD `K` via block
/// inverse iteration with Rayleigh–Ritz extraction; used for subspaces too
/// large for the dense path.
pub fn shift_invert_gen_eigs(
    k_mat: &CsrMatrix<f64>,
    m_mat: &CsrMatrix<f64>,
    k: usize,
    opts: &ShiftInvertOpts,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, DMatrix<f64>), LinalgError> {
    let n = k_mat.nrows();
    if k > n {
        return Err(LinalgError::Dimension {
            context: format!("requested {k} eigenpairs from dimension {n}"),
        });
    }
    let block = (k + opts.extra.max(k / 4)).min(n);
    let chol = CscCholesky::factor(&CscMatrix::from(k_mat)).map_err(|e| LinalgError::NotSpd {
        context: format!("stiffness block in shift-invert ({e})"),
    })?;

    let mut x = DMatrix::from_fn(n, block, |_, _| rng.random_range(-1.0..1.0));
    let mut worst = f64::INFINITY;
    for _ in 0..opts.max_iter {
        let y = chol.solve(&(m_mat * &x));
        let q = y.qr().q();
        let kq = k_mat * &q;
        let mq = m_mat * &q;
        let ar = q.transpose() * &kq;
        let br = q.transpose() * &mq;
        let (theta, s) = dense_gen_eigs(&ar, &br, block)?;
        let z = &q * &s;

        // Relative residuals of the k wanted Ritz pairs.
        let kz = k_mat * &z;
        let mz = m_mat * &z;
        worst = 0.0f64;
        for j in 0..k {
            let r = kz.column(j) - mz.column(j) * theta[j];
            let denom = kz.column(j).norm().max(f64::MIN_POSITIVE);
            worst = worst.max(r.norm() / denom);
        }
        if worst <= opts.tol {
            let mut vectors = z.columns(0, k).into_owned();
            fix_column_signs(&mut vectors);
            return Ok((theta[..k].to_vec(), vectors));
        }
        x = z;
    }
    Err(LinalgError::EigenNonConvergence {
        iterations: opts.max_iter,
        residual: worst,
    })
}

/// `A·x` for real sparse `A` and complex `x`, via two real products.
pub fn real_spmv_complex(a: &CsrMatrix<f64>, x: &DVector<Complex64>) -> DVector<Complex64> {
    let re = a * &x.map(|z| z.re);
    let im = a * &x.map(|z| z.im);
    DVector::from_fn(x.len(), |i, _| Complex64::new(re[i], im[i]))
}

/// `(ck·K + cm·M)·x` for complex `x`, evaluated with four real
/// sparse matrix-vector products.
pub fn complex_matvec(
    k_mat: &CsrMatrix<f64>,
    m_mat: &CsrMatrix<f64>,
    ck: Complex64,
    cm: Complex64,
    x: &DVector<Complex64>,
) -> DVector<Complex64> {
    let xr = x.map(|z| z.re);
    let xi = x.map(|z| z.im);
    let (kxr, kxi) = (k_mat * &xr, k_mat * &xi);
    let (mxr, mxi) = (m_mat * &xr, m_mat * &xi);
    DVector::from_fn(x.len(), |i, _| {
        ck * Complex64::new(kxr[i], kxi[i]) + cm * Complex64::new(mxr[i], mxi[i])
    })
}

/// Sparse LU factorization of `ck·K + cm·M`; reusable across right-hand
/// sides at a fixed frequency.
pub struct ComplexLu {
    lu: faer::sparse::linalg::solvers::Lu<usize, faer::c64>,
    n: usize,
}

impl ComplexLu {
    pub fn factor(
        k_mat: &CsrMatrix<f64>,
        m_mat: &CsrMatrix<f64>,
        ck: Complex64,
        cm: Complex64,
    ) -> Result<Self, LinalgError> {
        use faer::sparse::{SparseColMat, Triplet};
        let n = k_mat.nrows();
        let mut trips: Vec<Triplet<usize, usize, faer::c64>> =
            Vec::with_capacity(k_mat.nnz() + m_mat.nnz());
        for (i, j, v) in k_mat.triplet_iter() {
            trips.push(Triplet::new(i, j, ck * v));
        }
        for (i, j, v) in m_mat.triplet_iter() {
            trips.push(Triplet::new(i, j, cm * v));
        }
        let a = SparseColMat::<usize, faer::c64>::try_new_from_triplets(n, n, &trips)
            .map_err(|e| LinalgError::Factorization {
                context: format!("building response matrix: {e:?}"),
            })?;
        let lu = a.sp_lu().map_err(|e| LinalgError::Factorization {
            context: format!("sparse LU: {e:?}"),
        })?;
        Ok(Self { lu, n })
    }

    pub fn solve(&self, rhs: &DVector<Complex64>) -> DVector<Complex64> {
        use faer::prelude::Solve;
        let b = faer::Mat::from_fn(self.n, 1, |i, _| rhs[i]);
        let x = self.lu.solve(&b);
        DVector::from_fn(self.n, |i, _| x[(i, 0)])
    }
}

/// Solves `(ck·K + cm·M) x = rhs` by sparse LU with one step of iterative
/// refinement, then enforces `‖rhs − Ax‖ ≤ tol_rel·‖rhs‖`. A factorization
/// that slips through as numerically singular surfaces here as NaNs or a
/// residual failure.
pub fn solve_complex_system(
    k_mat: &CsrMatrix<f64>,
    m_mat: &CsrMatrix<f64>,
    ck: Complex64,
    cm: Complex64,
    rhs: &DVector<Complex64>,
    tol_rel: f64,
) -> Result<(DVector<Complex64>, f64), LinalgError> {
    let lu = ComplexLu::factor(k_mat, m_mat, ck, cm)?;
    let mut x = lu.solve(rhs);
    let mut r = rhs - complex_matvec(k_mat, m_mat, ck, cm, &x);
    x += lu.solve(&r);
    r = rhs - complex_matvec(k_mat, m_mat, ck, cm, &x);

    if x.iter().any(|z| !z.is_finite()) {
        return Err(LinalgError::Singular {
            context: "non-finite solution from sparse LU".into(),
        });
    }
    let rhs_norm = rhs.norm();
    let rel = if rhs_norm > 0.0 {
        r.norm() / rhs_norm
    } else {
        r.norm()
    };
    // `!(rel <= tol)` rather than `rel > tol`: NaN must fail too.
    if !(rel <= tol_rel) {
        return Err(LinalgError::Singular {
            context: format!("relative residual {rel:e} exceeds {tol_rel:e}"),
        });
    }
    Ok((x, rel))
}

/// Dense complex solve with one refinement step. Returns the solution and
/// its normwise backward error `‖b − Ax‖ / (‖A‖_F‖x‖ + ‖b‖)`.
pub fn solve_dense_complex(
    a: &DMatrix<Complex64>,
    b: &DVector<Complex64>,
) -> Result<(DVector<Complex64>, f64), LinalgError> {
    let lu = a.clone().lu();
    let mut x = lu.solve(b).ok_or_else(|| LinalgError::Singular {
        context: "dense LU solve failed".into(),
    })?;
    let r = b - a * &x;
    if let Some(dx) = lu.solve(&r) {
        x += dx;
    }
    let r = b - a * &x;
    if x.iter().any(|z| !z.is_finite()) {
        return Err(LinalgError::Singular {
            context: "non-finite solution from dense LU".into(),
        });
    }
    let backward = r.norm() / (a.norm() * x.norm() + b.norm()).max(f64::MIN_POSITIVE);
    Ok((x, backward))
}

/// Writes a symmetric sparse matrix in Matrix Market coordinate format
/// (lower triangle, 1-based indices).
pub fn write_matrix_market_sym<W: std::io::Write>(
    mut w: W,
    a: &CsrMatrix<f64>,
) -> std::io::Result<()> {
    writeln!(w, "%%MatrixMarket matrix coordinate real symmetric")?;
    let entries: Vec<(usize, usize, f64)> = a
        .triplet_iter()
        .filter(|(i, j, _)| i >= j)
        .map(|(i, j, v)| (i, j, *v))
        .collect();
    writeln!(w, "{} {} {}", a.nrows(), a.ncols(), entries.len())?;
    for (i, j, v) in entries {
        writeln!(w, "{} {} {:.16e}", i + 1, j + 1, v)?;
    }
    Ok(())
}

/// Writes a dense vector in Matrix Market array format.
pub fn write_matrix_market_vector<W: std::io::Write>(
    mut w: W,
    v: &DVector<f64>,
) -> std::io::Result<()> {
    writeln!(w, "%%MatrixMarket matrix array real general")?;
    writeln!(w, "{} 1", v.len())?;
    for x in v.iter() {
        writeln!(w, "{x:.16e}")?;
    }
    Ok(())
}

/// Writes a dense real matrix in Matrix Market array format
/// (column-major).
pub fn write_matrix_market_dense<W: std::io::Write>(
    mut w: W,
    a: &DMatrix<f64>,
) -> std::io::Result<()> {
    writeln!(w, "%%MatrixMarket matrix array real general")?;
    writeln!(w, "{} {}", a.nrows(), a.ncols())?;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            writeln!(w, "{:.16e}", a[(i, j)])?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let r = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &r * r.transpose() + DMatrix::identity(n, n) * n as f64
    }

    #[test]
    fn dense_gen_eigs_diagonal_case() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0, 2.0]));
        let b = DMatrix::identity(3, 3);
        let (vals, vecs) = dense_gen_eigs(&a, &b, 3).unwrap();
        assert_relative_eq!(vals[0], 1.0, max_relative = 1e-13);
        assert_relative_eq!(vals[1], 2.0, max_relative = 1e-13);
        assert_relative_eq!(vals[2], 3.0, max_relative = 1e-13);
        // Ascending order picks out e2, e3, e1, with positive leading signs.
        assert_relative_eq!(vecs[(1, 0)], 1.0, max_relative = 1e-13);
        assert_relative_eq!(vecs[(2, 1)], 1.0, max_relative = 1e-13);
        assert_relative_eq!(vecs[(0, 2)], 1.0, max_relative = 1e-13);
    }

    #[test]
    fn dense_gen_eigs_scaled_mass() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 8.0]));
        let b = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 4.0]));
        let (vals, vecs) = dense_gen_eigs(&a, &b, 2).unwrap();
        assert_relative_eq!(vals[0], 1.0, max_relative = 1e-13);
        assert_relative_eq!(vals[1], 2.0, max_relative = 1e-13);
        // B-orthonormal: z1ᵀ B z1 = 1 with B = diag(2,4).
        assert_relative_eq!(vecs[(0, 0)], 1.0 / 2.0f64.sqrt(), max_relative = 1e-12);
        assert_relative_eq!(vecs[(1, 1)], 0.5, max_relative = 1e-12);
    }

    #[test]
    fn dense_gen_eigs_random_pair_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 40;
        let a = random_spd(n, &mut rng);
        let b = random_spd(n, &mut rng);
        let (vals, vecs) = dense_gen_eigs(&a, &b, n).unwrap();
        for w in vals.windows(2) {
            assert!(w[0] <= w[1], "eigenvalues not ascending: {w:?}");
        }
        let gram = vecs.transpose() * &b * &vecs;
        assert!((gram - DMatrix::identity(n, n)).amax() < 1e-9);
        let proj = vecs.transpose() * &a * &vecs;
        for i in 0..n {
            for j in 0..n {
                let expect = if i == j { vals[i] } else { 0.0 };
                assert!((proj[(i, j)] - expect).abs() < 1e-8 * vals[n - 1]);
            }
        }
    }

    #[test]
    fn dense_gen_eigs_rejects_indefinite_b() {
        let a = DMatrix::identity(2, 2);
        let b = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        assert!(matches!(
            dense_gen_eigs(&a, &b, 1),
            Err(LinalgError::NotSpd { .. })
        ));
    }

    fn sparse_laplacian_pair(n: usize) -> (CsrMatrix<f64>, CsrMatrix<f64>) {
        // 1D stiffness/mass pencil: tridiagonal, SPD, well separated.
        let mut k = CooMatrix::new(n, n);
        let mut m = CooMatrix::new(n, n);
        for i in 0..n {
            k.push(i, i, 2.0);
            m.push(i, i, 4.0 / 6.0);
            if i + 1 < n {
                k.push(i, i + 1, -1.0);
                k.push(i + 1, i, -1.0);
                m.push(i, i + 1, 1.0 / 6.0);
                m.push(i + 1, i, 1.0 / 6.0);
            }
        }
        (CsrMatrix::from(&k), CsrMatrix::from(&m))
    }

    #[test]
    fn shift_invert_matches_dense() {
        let (k_mat, m_mat) = sparse_laplacian_pair(80);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (vals, vecs) =
            shift_invert_gen_eigs(&k_mat, &m_mat, 6, &ShiftInvertOpts::default(), &mut rng)
                .unwrap();
        let (dense_vals, _) =
            dense_gen_eigs(&dense_from_csr(&k_mat), &dense_from_csr(&m_mat), 6).unwrap();
        for j in 0..6 {
            assert_relative_eq!(vals[j], dense_vals[j], max_relative = 1e-8);
        }
        let gram = vecs.transpose() * dense_from_csr(&m_mat) * &vecs;
        assert!((gram - DMatrix::identity(6, 6)).amax() < 1e-8);
    }

    #[test]
    fn csr_submatrix_extracts_block() {
        let (k_mat, _) = sparse_laplacian_pair(6);
        let sub = csr_submatrix(&k_mat, &[1, 2, 4], &[1, 2, 4]);
        let d = dense_from_csr(&sub);
        assert_eq!(d[(0, 0)], 2.0);
        assert_eq!(d[(0, 1)], -1.0);
        assert_eq!(d[(1, 2)], 0.0); // rows 2 and 4 are not adjacent
        assert_eq!(d[(2, 2)], 2.0);
    }

    #[test]
    fn complex_matvec_matches_dense() {
        let (k_mat, m_mat) = sparse_laplacian_pair(12);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = DVector::from_fn(12, |_, _| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        let (ck, cm) = response_coefficients(1.3, 0.025, 0.05);
        let got = complex_matvec(&k_mat, &m_mat, ck, cm, &x);
        let kd = dense_from_csr(&k_mat).map(|v| Complex64::new(v, 0.0));
        let md = dense_from_csr(&m_mat).map(|v| Complex64::new(v, 0.0));
        let expect = (kd * ck + md * cm) * &x;
        assert!((got - expect).norm() < 1e-13);
    }

    #[test]
    fn complex_solve_agrees_with_dense() {
        let (k_mat, m_mat) = sparse_laplacian_pair(30);
        let (ck, cm) = response_coefficients(0.9, 0.025, 0.025);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rhs = DVector::from_fn(30, |_, _| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        let (x, rel) = solve_complex_system(&k_mat, &m_mat, ck, cm, &rhs, 1e-10).unwrap();
        assert!(rel <= 1e-12, "residual {rel}");
        let ad = dense_from_csr(&k_mat).map(|v| Complex64::new(v, 0.0)) * ck
            + dense_from_csr(&m_mat).map(|v| Complex64::new(v, 0.0)) * cm;
        let (xd, _) = solve_dense_complex(&ad, &rhs).unwrap();
        assert!((x - xd).norm() < 1e-10);
    }

    #[test]
    fn complex_solve_detects_singularity() {
        // ck·K + cm·M = K − K = 0: maximally singular.
        let (k_mat, _) = sparse_laplacian_pair(10);
        let rhs = DVector::from_element(10, Complex64::new(1.0, 0.0));
        let out = solve_complex_system(
            &k_mat,
            &k_mat,
            Complex64::new(1.0, 0.0),
            Complex64::new(-1.0, 0.0),
            &rhs,
            1e-10,
        );
        assert!(out.is_err());
    }

    #[test]
    fn dense_complex_backward_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = DMatrix::from_fn(50, 50, |_, _| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        let b = DVector::from_fn(50, |_, _| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        let (_, backward) = solve_dense_complex(&a, &b).unwrap();
        assert!(backward < 1e-13, "backward error {backward}");
    }

    #[test]
    fn matrix_market_sym_golden() {
        let mut coo = CooMatrix::new(2, 2);
        coo.push(0, 0, 1.0);
        coo.push(0, 1, 2.0);
        coo.push(1, 0, 2.0);
        coo.push(1, 1, 3.0);
        let mut buf = Vec::new();
        write_matrix_market_sym(&mut buf, &CsrMatrix::from(&coo)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "%%MatrixMarket matrix coordinate real symmetric"
        );
        assert_eq!(lines.next().unwrap(), "2 2 3");
        // Lower triangle only.
        assert!(text.contains("2 1 2.0000000000000000e0"));
        assert!(!text.contains("1 2 "));
    }

    #[test]
    fn matrix_market_vector_golden() {
        let mut buf = Vec::new();
        write_matrix_market_vector(&mut buf, &DVector::from_vec(vec![1.0, -0.5])).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("%%MatrixMarket matrix array real general\n2 1\n"));
        assert!(text.contains("-5.0000000000000000e-1"));
    }
}
