//! Projection of the full-order system onto selected CMS modes, the reduced
//! damped frequency-response solve, lazy expansion back to full space, and
//! reduced eigenvalues for the stability factor.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::CsrMatrix;
use num_complex::Complex64;
use thiserror::Error;

use crate::decomp::ModalBasis;
use crate::fem::{FullOrderSystem, Material};
use crate::linalg::{self, LinalgError};

#[derive(Debug, Error)]
pub enum ReducedError {
    #[error("selection has {len} entries but the basis has {n} subspaces")]
    SelectionLength { len: usize, n: usize },
    #[error("selection m_{i} = {m} outside [{lo}, {k}]")]
    SelectionOutOfRange { i: usize, m: usize, lo: usize, k: usize },
    #[error("selection retains no modes")]
    EmptySelection,
    #[error("reduced solve failed: {0}")]
    Solve(#[from] LinalgError),
    #[error(
        "reduced system is singular at omega = {omega} (undamped resonance); \
         nearest reduced eigenvalue {nearest:e}"
    )]
    Resonance { omega: f64, nearest: f64 },
}

/// Retained mode counts m = (m_0, …, m_n), validated against a basis:
/// `1 ≤ m_i ≤ k_i` (m_i = 0 only where the subspace itself is empty).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReducedSelection {
    counts: Vec<usize>,
}

impl ReducedSelection {
    pub fn new(counts: Vec<usize>, basis: &ModalBasis) -> Result<Self, ReducedError> {
        if counts.len() != basis.n_subspaces() {
            return Err(ReducedError::SelectionLength {
                len: counts.len(),
                n: basis.n_subspaces(),
            });
        }
        for (i, &m) in counts.iter().enumerate() {
            let k = basis.count(i);
            let lo = usize::from(k > 0);
            if m < lo || m > k {
                return Err(ReducedError::SelectionOutOfRange { i, m, lo, k });
            }
        }
        if counts.iter().sum::<usize>() == 0 {
            return Err(ReducedError::EmptySelection);
        }
        Ok(Self { counts })
    }

    pub fn uniform(basis: &ModalBasis, m: usize) -> Result<Self, ReducedError> {
        Self::new(vec![m; basis.n_subspaces()], basis)
    }

    #[cfg(test)]
    fn from_counts_unchecked(counts: Vec<usize>) -> Self {
        Self { counts }
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Projected system: `Km` is diagonal (the retained eigenvalues), `Mm` dense
/// symmetric, `D^m` implied as `αKm + βMm`. `vm` holds the expansion matrix
/// `V^m` with one column per retained mode, in block order.
pub struct ReducedModel {
    pub km_diag: DVector<f64>,
    pub mm: DMatrix<f64>,
    pub bm: DVector<f64>,
    pub vm: DMatrix<f64>,
    pub selection: ReducedSelection,
    /// Reduced index → (subspace, mode) pair.
    pub mode_index: Vec<(usize, usize)>,
}

impl ReducedModel {
    pub fn dim(&self) -> usize {
        self.km_diag.len()
    }
}

/// Projects onto the selected modes with a caller-supplied load vector;
/// `Km` is read from the stored eigenvalues, never from a triple product.
pub fn project_with_load(
    m_mat: &CsrMatrix<f64>,
    basis: &ModalBasis,
    selection: &ReducedSelection,
    b: &DVector<f64>,
) -> ReducedModel {
    let dim = selection.total();
    let n_free = basis.n_free;
    let mut vm = DMatrix::zeros(n_free, dim);
    let mut km_diag = DVector::zeros(dim);
    let mut mode_index = Vec::with_capacity(dim);
    let mut col = 0;
    for (i, &m_i) in selection.counts().iter().enumerate() {
        let sub = &basis.subspaces[i];
        for j in 0..m_i {
            for (row, &f) in sub.support.iter().enumerate() {
                vm[(f, col)] = sub.modes[(row, j)];
            }
            km_diag[col] = sub.eigenvalues[j];
            mode_index.push((i, j));
            col += 1;
        }
    }
    let mvm = m_mat * &vm;
    let mm = vm.transpose() * &mvm;
    let mm = (&mm + mm.transpose()) * 0.5;
    let bm = vm.transpose() * b;
    ReducedModel {
        km_diag,
        mm,
        bm,
        vm,
        selection: selection.clone(),
        mode_index,
    }
}

pub fn project(
    system: &FullOrderSystem,
    basis: &ModalBasis,
    selection: &ReducedSelection,
) -> ReducedModel {
    project_with_load(&system.m, basis, selection, &system.b)
}

/// Reduced frequency response at one frequency; the full-space expansion is
/// materialized lazily and cached.
#[derive(Debug)]
pub struct ReducedSolution {
    pub coefficients: DVector<Complex64>,
    pub omega: f64,
    expansion: OnceLock<DVector<Complex64>>,
}

impl ReducedSolution {
    /// `V^m · coefficients`.
    pub fn expansion(&self, model: &ReducedModel) -> &DVector<Complex64> {
        self.expansion.get_or_init(|| {
            let re = &model.vm * self.coefficients.map(|z| z.re);
            let im = &model.vm * self.coefficients.map(|z| z.im);
            DVector::from_fn(re.len(), |i, _| Complex64::new(re[i], im[i]))
        })
    }
}

/// Assembles the complex reduced response matrix `ck·Km + cm·Mm`.
fn response_matrix(model: &ReducedModel, ck: Complex64, cm: Complex64) -> DMatrix<Complex64> {
    let dim = model.dim();
    let mut a = model.mm.map(|v| cm * v);
    for i in 0..dim {
        a[(i, i)] += ck * model.km_diag[i];
    }
    a
}

/// Solves `(Km + iωD^m − ω²Mm) c = bm`, `D^m = αKm + βMm`, by dense LU with
/// iterative refinement. The residual contract is the normwise backward
/// error `‖bm − Ac‖ / (‖A‖‖c‖ + ‖bm‖) ≤ 1e-12`, which stays meaningful
/// arbitrarily close to resonances.
pub fn solve_reduced(
    model: &ReducedModel,
    omega: f64,
    material: &Material,
) -> Result<ReducedSolution, ReducedError> {
    solve_reduced_rhs(model, omega, material, &model.bm.map(|v| Complex64::new(v, 0.0)))
}

/// As `solve_reduced` with an explicit right-hand side.
pub fn solve_reduced_rhs(
    model: &ReducedModel,
    omega: f64,
    material: &Material,
    rhs: &DVector<Complex64>,
) -> Result<ReducedSolution, ReducedError> {
    let (ck, cm) = linalg::response_coefficients(omega, material.alpha, material.beta);
    solve_with_coefficients(model, omega, material, ck, cm, rhs)
}

/// Solves the adjoint reduced system `(Km − iωD^m − ω²Mm) c = rhs`; Km and
/// Mm are real symmetric, so only the response coefficients conjugate. Used
/// by the dual problem.
pub fn solve_reduced_adjoint_rhs(
    model: &ReducedModel,
    omega: f64,
    material: &Material,
    rhs: &DVector<Complex64>,
) -> Result<ReducedSolution, ReducedError> {
    let (ck, cm) = linalg::response_coefficients(omega, material.alpha, material.beta);
    solve_with_coefficients(model, omega, material, ck.conj(), cm.conj(), rhs)
}

fn solve_with_coefficients(
    model: &ReducedModel,
    omega: f64,
    material: &Material,
    ck: Complex64,
    cm: Complex64,
    rhs: &DVector<Complex64>,
) -> Result<ReducedSolution, ReducedError> {
    let a = response_matrix(model, ck, cm);
    match linalg::solve_dense_complex(&a, rhs) {
        Ok((coefficients, backward)) if backward <= 1e-12 => Ok(ReducedSolution {
            coefficients,
            omega,
            expansion: OnceLock::new(),
        }),
        Ok((_, backward)) => Err(singularity_error(model, omega, material, format!(
            "backward error {backward:e} exceeds 1e-12"
        ))),
        Err(LinalgError::Singular { context }) => {
            Err(singularity_error(model, omega, material, context))
        }
        Err(e) => Err(e.into()),
    }
}

fn singularity_error(
    model: &ReducedModel,
    omega: f64,
    material: &Material,
    context: String,
) -> ReducedError {
    if material.alpha == 0.0 && material.beta == 0.0 {
        let nearest = reduced_eigenvalues(model)
            .ok()
            .and_then(|vals| {
                vals.iter()
                    .copied()
                    .min_by(|a, b| {
                        (a - omega * omega)
                            .abs()
                            .total_cmp(&(b - omega * omega).abs())
                    })
            })
            .unwrap_or(f64::NAN);
        ReducedError::Resonance { omega, nearest }
    } else {
        ReducedError::Solve(LinalgError::Singular { context })
    }
}

/// Generalized eigenvalues of `(Km, Mm)`, ascending; used to approximate
/// the full spectrum in the stability factor.
pub fn reduced_eigenvalues(model: &ReducedModel) -> Result<Vec<f64>, ReducedError> {
    let km = DMatrix::from_diagonal(&model.km_diag);
    let (vals, _) = linalg::dense_gen_eigs(&km, &model.mm, model.dim())?;
    Ok(vals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomp::{build_extension, classify_dofs, compute_modal_basis, EigenOpts};
    use crate::fem::{assemble_full_system, energy_norm, solve_full_response, LoadSpec};
    use crate::mesh::{build_rect_mesh, default_dirichlet};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        system: FullOrderSystem,
        basis: ModalBasis,
    }

    fn fixture(nx: usize, ny: usize, grid: (usize, usize), load: LoadSpec) -> Fixture {
        let mesh = build_rect_mesh(1.0, 1.0, nx, ny, grid, default_dirichlet).unwrap();
        let material = Material::new(1.0, 0.29, 1.0, 0.025, 0.025).unwrap();
        let system = assemble_full_system(&mesh, material, &load).unwrap();
        let partition = classify_dofs(&mesh, &system.dof_map).unwrap();
        let extension = build_extension(&system.k, &partition).unwrap();
        let counts: Vec<usize> = (0..partition.n_subspaces())
            .map(|i| partition.subspace_dim(i))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let basis = compute_modal_basis(
            &system.k,
            &system.m,
            &partition,
            &extension,
            &counts,
            &EigenOpts::default(),
            &mut rng,
        )
        .unwrap();
        Fixture { system, basis }
    }

    fn example1_load() -> LoadSpec {
        LoadSpec::gaussian_traction([0.7, 0.5], [0.0, -1.0], 1.0, 100.0)
    }

    fn example2_load() -> LoadSpec {
        LoadSpec::gaussian_traction([0.9, 0.25], [1.0, 0.0], 1.0, 100.0)
    }

    #[test]
    fn selection_validation() {
        let f = fixture(6, 6, (3, 2), example1_load());
        assert!(ReducedSelection::uniform(&f.basis, 1).is_ok());
        assert!(matches!(
            ReducedSelection::new(vec![1; 3], &f.basis),
            Err(ReducedError::SelectionLength { .. })
        ));
        let mut counts = vec![1; 7];
        counts[2] = 0;
        assert!(matches!(
            ReducedSelection::new(counts, &f.basis),
            Err(ReducedError::SelectionOutOfRange { i: 2, .. })
        ));
        let mut counts = vec![1; 7];
        counts[3] = f.basis.count(3) + 1;
        assert!(matches!(
            ReducedSelection::new(counts, &f.basis),
            Err(ReducedError::SelectionOutOfRange { i: 3, .. })
        ));
    }

    #[test]
    fn seven_subspace_bookkeeping() {
        let f = fixture(6, 6, (3, 2), example1_load());
        let sel = ReducedSelection::uniform(&f.basis, 1).unwrap();
        let model = project(&f.system, &f.basis, &sel);
        assert_eq!(model.dim(), 7);
        assert_eq!(model.mm.nrows(), 7);
        assert_eq!(model.bm.len(), 7);
        let expect: Vec<(usize, usize)> = (0..7).map(|i| (i, 0)).collect();
        assert_eq!(model.mode_index, expect);
    }

    #[test]
    fn km_matches_triple_product() {
        let f = fixture(8, 8, (2, 2), example1_load());
        let sel = ReducedSelection::new(vec![4, 3, 5, 2, 6], &f.basis).unwrap();
        let model = project(&f.system, &f.basis, &sel);
        let kd = crate::linalg::dense_from_csr(&f.system.k);
        let triple = model.vm.transpose() * kd * &model.vm;
        let lambda_max = model.km_diag.max();
        for r in 0..model.dim() {
            for c in 0..model.dim() {
                let expect = if r == c { model.km_diag[r] } else { 0.0 };
                assert!(
                    (triple[(r, c)] - expect).abs() <= 1e-10 * lambda_max,
                    "Km mismatch at ({r},{c}): {} vs {expect}",
                    triple[(r, c)]
                );
            }
        }
    }

    #[test]
    fn mm_has_identity_blocks() {
        let f = fixture(8, 8, (2, 2), example1_load());
        let sel = ReducedSelection::new(vec![4, 3, 5, 2, 6], &f.basis).unwrap();
        let model = project(&f.system, &f.basis, &sel);
        for (r, &(si, _)) in model.mode_index.iter().enumerate() {
            for (c, &(sj, _)) in model.mode_index.iter().enumerate() {
                if si == sj {
                    let expect = if r == c { 1.0 } else { 0.0 };
                    assert!(
                        (model.mm[(r, c)] - expect).abs() <= 1e-9,
                        "Mm block ({r},{c}) = {}",
                        model.mm[(r, c)]
                    );
                }
            }
        }
    }

    #[test]
    fn full_selection_reproduces_full_solve() {
        let f = fixture(10, 10, (2, 1), example1_load());
        assert!(f.system.n_free() <= 600);
        let sel = ReducedSelection::new(f.basis.counts(), &f.basis).unwrap();
        let model = project(&f.system, &f.basis, &sel);
        let omega = 1.0;
        let sol = solve_reduced(&model, omega, &f.system.material).unwrap();
        let full = solve_full_response(&f.system, omega).unwrap();
        let diff = sol.expansion(&model) - &full;
        let err = energy_norm(&f.system.k, &diff).unwrap();
        let scale = energy_norm(&f.system.k, &full).unwrap();
        assert!(err <= 1e-9 * scale, "relative energy error {}", err / scale);
    }

    #[test]
    fn static_solve_is_real() {
        let f = fixture(6, 6, (3, 2), example1_load());
        let sel = ReducedSelection::uniform(&f.basis, 2).unwrap();
        let model = project(&f.system, &f.basis, &sel);
        let sol = solve_reduced(&model, 0.0, &f.system.material).unwrap();
        assert!(sol.coefficients.iter().all(|z| z.im == 0.0));
    }

    #[test]
    fn example2_residual_contract() {
        let f = fixture(12, 12, (3, 2), example2_load());
        let sel = ReducedSelection::uniform(&f.basis, 3).unwrap();
        let model = project(&f.system, &f.basis, &sel);
        let omega = (3.0f64 / 2.0).sqrt();
        let sol = solve_reduced(&model, omega, &f.system.material).unwrap();
        let (ck, cm) =
            crate::linalg::response_coefficients(omega, 0.025, 0.025);
        let a = response_matrix(&model, ck, cm);
        let rhs = model.bm.map(|v| Complex64::new(v, 0.0));
        let r = &rhs - &a * &sol.coefficients;
        let backward = r.norm() / (a.norm() * sol.coefficients.norm() + rhs.norm());
        assert!(backward <= 1e-12, "backward error {backward}");
    }

    #[test]
    fn reduced_eigenvalues_full_selection_match_fem_spectrum() {
        let f = fixture(6, 6, (2, 1), example1_load());
        let sel = ReducedSelection::new(f.basis.counts(), &f.basis).unwrap();
        let model = project(&f.system, &f.basis, &sel);
        let reduced = reduced_eigenvalues(&model).unwrap();
        let (full, _) = crate::linalg::dense_gen_eigs(
            &crate::linalg::dense_from_csr(&f.system.k),
            &crate::linalg::dense_from_csr(&f.system.m),
            f.system.n_free(),
        )
        .unwrap();
        assert_eq!(reduced.len(), full.len());
        for (a, b) in reduced.iter().zip(&full) {
            assert_relative_eq!(a, b, max_relative = 1e-8);
        }
    }

    #[test]
    fn reduced_eigenvalues_min_max_monotonicity() {
        let f = fixture(8, 8, (2, 2), example1_load());
        let small = ReducedSelection::uniform(&f.basis, 2).unwrap();
        let large = ReducedSelection::uniform(&f.basis, 5).unwrap();
        let eig_small =
            reduced_eigenvalues(&project(&f.system, &f.basis, &small)).unwrap();
        let eig_large =
            reduced_eigenvalues(&project(&f.system, &f.basis, &large)).unwrap();
        for (j, l_small) in eig_small.iter().enumerate() {
            assert!(
                eig_large[j] <= l_small * (1.0 + 1e-10),
                "min-max violated at {j}: {} > {l_small}",
                eig_large[j]
            );
        }
    }

    #[test]
    fn one_mode_per_subspace_bounds_full_spectrum() {
        let f = fixture(6, 6, (3, 2), example1_load());
        let sel = ReducedSelection::uniform(&f.basis, 1).unwrap();
        let model = project(&f.system, &f.basis, &sel);
        let reduced = reduced_eigenvalues(&model).unwrap();
        assert_eq!(reduced.len(), 7);
        let (full, _) = crate::linalg::dense_gen_eigs(
            &crate::linalg::dense_from_csr(&f.system.k),
            &crate::linalg::dense_from_csr(&f.system.m),
            7,
        )
        .unwrap();
        for (r, l) in reduced.iter().zip(&full) {
            assert!(r >= &(l * (1.0 - 1e-10)), "reduced {r} below full {l}");
        }
        assert!(reduced.iter().all(|&l| l > 0.0));
    }

    #[test]
    fn galerkin_orthogonality() {
        let f = fixture(10, 10, (2, 2), example1_load());
        let sel = ReducedSelection::uniform(&f.basis, 4).unwrap();
        let model = project(&f.system, &f.basis, &sel);
        let omega = 1.0;
        let sol = solve_reduced(&model, omega, &f.system.material).unwrap();
        let (ck, cm) = crate::linalg::response_coefficients(omega, 0.025, 0.025);
        let expanded = sol.expansion(&model);
        let residual = f.system.b.map(|v| Complex64::new(v, 0.0))
            - crate::linalg::complex_matvec(&f.system.k, &f.system.m, ck, cm, expanded);
        let re = model.vm.transpose() * residual.map(|z| z.re);
        let im = model.vm.transpose() * residual.map(|z| z.im);
        let proj_norm = (re.norm_squared() + im.norm_squared()).sqrt();
        assert!(
            proj_norm <= 1e-10 * f.system.b.norm(),
            "Galerkin orthogonality violated: {proj_norm:e}"
        );
    }

    #[test]
    fn exact_resonance_reports_nearest_eigenvalue() {
        // Synthetic 1-mode model with Km = [1], Mm = [1]: at ω = 1 the
        // undamped response matrix is exactly zero.
        let model = ReducedModel {
            km_diag: DVector::from_element(1, 1.0),
            mm: DMatrix::identity(1, 1),
            bm: DVector::from_element(1, 1.0),
            vm: DMatrix::identity(1, 1),
            selection: ReducedSelection::from_counts_unchecked(vec![1]),
            mode_index: vec![(0, 0)],
        };
        let material = Material::new(1.0, 0.29, 1.0, 0.0, 0.0).unwrap();
        let err = solve_reduced(&model, 1.0, &material).unwrap_err();
        match err {
            ReducedError::Resonance { omega, nearest } => {
                assert_eq!(omega, 1.0);
                assert_relative_eq!(nearest, 1.0, max_relative = 1e-12);
            }
            other => panic!("expected resonance, got {other}"),
        }
    }

    #[test]
    fn adjoint_solution_is_conjugate_of_primal_for_real_rhs() {
        // A* c̄ = rhs with real rhs gives c̄ = conj(A⁻¹ rhs) since A is
        // complex symmetric with real-symmetric parts.
        let f = fixture(8, 8, (2, 1), example1_load());
        let selection = ReducedSelection::uniform(&f.basis, 3).unwrap();
        let model = project(&f.system, &f.basis, &selection);
        let omega = 1.0;
        let rhs = model.bm.map(|v| Complex64::new(v, 0.0));
        let primal = solve_reduced(&model, omega, &f.system.material).unwrap();
        let adjoint =
            solve_reduced_adjoint_rhs(&model, omega, &f.system.material, &rhs).unwrap();
        let diff = (adjoint.coefficients.map(|z| z.conj()) - &primal.coefficients).norm();
        assert!(diff <= 1e-12 * primal.coefficients.norm(), "diff = {diff:e}");
    }
}
