//! The a-orthogonal decomposition behind component mode synthesis: interior
//! subspaces per subdomain, the energy-minimizing interface extension space,
//! and M-orthonormal modal bases from per-subspace generalized
//! eigenproblems. Subspace 0 is always the interface space; subspaces 1..=n
//! are subdomain interiors.

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CscMatrix, CsrMatrix};
use num_complex::Complex64;
use rand::Rng;
use thiserror::Error;

use crate::linalg::{self, LinalgError, ShiftInvertOpts};
use crate::mesh::{interface_nodes, Mesh};

#[derive(Debug, Error)]
pub enum DecompError {
    #[error("subdomain {label} has no interior DOFs; mesh too coarse for this partition")]
    CoarseSubdomain { label: usize },
    #[error("interior stiffness block is not SPD: {source}")]
    InteriorBlock { source: LinalgError },
    #[error("extension interior solve residual {residual:e} exceeds {tol:e}")]
    ExtensionResidual { residual: f64, tol: f64 },
    #[error("requested {requested} modes from subspace {subspace} of dimension {dim}")]
    TooManyModes {
        subspace: usize,
        requested: usize,
        dim: usize,
    },
    #[error("eigensolver failed on subspace {subspace}: {source}")]
    Eigensolver { subspace: usize, source: LinalgError },
    #[error("subspace {subspace} produced a non-positive eigenvalue {value:e}")]
    NonPositiveEigenvalue { subspace: usize, value: f64 },
}

/// Disjoint split of the free DOFs into `n` interior sets plus the
/// interface set; all index lists ascend.
#[derive(Clone, Debug)]
pub struct DofPartition {
    pub interior_sets: Vec<Vec<usize>>,
    pub interface_set: Vec<usize>,
    pub n: usize,
}

impl DofPartition {
    pub fn n_subspaces(&self) -> usize {
        self.n + 1
    }

    /// Dimension of subspace `i` (0 = interface).
    pub fn subspace_dim(&self, i: usize) -> usize {
        if i == 0 {
            self.interface_set.len()
        } else {
            self.interior_sets[i - 1].len()
        }
    }
}

/// Splits the free DOFs by node incidence: DOFs at interface nodes form the
/// interface set, every other DOF goes to the interior set of its (unique)
/// subdomain.
pub fn classify_dofs(
    mesh: &Mesh,
    dof_map: &crate::fem::DofMap,
) -> Result<DofPartition, DecompError> {
    let mut on_interface = vec![false; mesh.n_nodes()];
    for v in interface_nodes(mesh) {
        on_interface[v] = true;
    }
    // For non-interface nodes every incident triangle carries one label.
    let mut label_of_node = vec![0usize; mesh.n_nodes()];
    for (t, tri) in mesh.triangles.iter().enumerate() {
        for &v in tri {
            label_of_node[v] = mesh.subdomain_of_triangle[t];
        }
    }

    let n = mesh.n_subdomains;
    let mut interior_sets = vec![Vec::new(); n];
    let mut interface_set = Vec::new();
    for (f, &(node, _)) in dof_map.free_dofs().iter().enumerate() {
        if on_interface[node] {
            interface_set.push(f);
        } else {
            interior_sets[label_of_node[node] - 1].push(f);
        }
    }
    if let Some(label) = interior_sets.iter().position(|s| s.is_empty()) {
        return Err(DecompError::CoarseSubdomain { label: label + 1 });
    }
    Ok(DofPartition {
        interior_sets,
        interface_set,
        n,
    })
}

/// Energy-minimizing extension: interface coefficients ν map to the full
/// free-DOF vector with interior blocks solving `K_II x_I = −K_IΓ ν`. The
/// interior response matrix is built eagerly (one multi-RHS Cholesky solve)
/// and its residual verified.
pub struct ExtensionOperator {
    interior_all: Vec<usize>,
    interface: Vec<usize>,
    interior_block: DMatrix<f64>,
    n_free: usize,
}

pub fn build_extension(
    k: &CsrMatrix<f64>,
    partition: &DofPartition,
) -> Result<ExtensionOperator, DecompError> {
    let interior_all: Vec<usize> = partition.interior_sets.iter().flatten().copied().collect();
    let interface = partition.interface_set.clone();
    let n_free = interior_all.len() + interface.len();

    let k_ii = linalg::csr_submatrix(k, &interior_all, &interior_all);
    let k_ig = linalg::csr_submatrix(k, &interior_all, &interface);
    let chol = CscCholesky::factor(&CscMatrix::from(&k_ii)).map_err(|e| {
        DecompError::InteriorBlock {
            source: LinalgError::NotSpd {
                context: format!("interior block Cholesky: {e}"),
            },
        }
    })?;

    let mut rhs = DMatrix::zeros(interior_all.len(), interface.len());
    for (i, j, v) in k_ig.triplet_iter() {
        rhs[(i, j)] = -v;
    }
    let interior_block = chol.solve(&rhs);

    // Contract: interior solves to relative residual ≤ 1e-10.
    let residual = (&k_ii * &interior_block - &rhs).norm();
    let scale = rhs.norm().max(f64::MIN_POSITIVE);
    let tol = 1e-10;
    if residual > tol * scale {
        return Err(DecompError::ExtensionResidual {
            residual: residual / scale,
            tol,
        });
    }

    Ok(ExtensionOperator {
        interior_all,
        interface,
        interior_block,
        n_free,
    })
}

impl ExtensionOperator {
    pub fn interface_dim(&self) -> usize {
        self.interface.len()
    }

    /// Lifts interface coefficients to the full free-DOF vector `Eν`.
    pub fn apply(&self, nu: &DVector<f64>) -> DVector<f64> {
        let x_i = &self.interior_block * nu;
        let mut out = DVector::zeros(self.n_free);
        for (row, &f) in self.interior_all.iter().enumerate() {
            out[f] = x_i[row];
        }
        for (j, &f) in self.interface.iter().enumerate() {
            out[f] = nu[j];
        }
        out
    }

    /// Full extension basis: column j is `E e_j`.
    pub fn basis(&self) -> DMatrix<f64> {
        let mut e = DMatrix::zeros(self.n_free, self.interface.len());
        for (row, &f) in self.interior_all.iter().enumerate() {
            for j in 0..self.interface.len() {
                e[(f, j)] = self.interior_block[(row, j)];
            }
        }
        for (j, &f) in self.interface.iter().enumerate() {
            e[(f, j)] = 1.0;
        }
        e
    }
}

/// Modes of one subspace: ascending eigenvalues and the mode matrix stored
/// on its support rows (free-DOF indices).
#[derive(Clone, Debug)]
pub struct SubspaceModes {
    pub eigenvalues: Vec<f64>,
    pub modes: DMatrix<f64>,
    pub support: Vec<usize>,
}

/// M-orthonormal modal bases for all subspaces, interface first.
#[derive(Clone, Debug)]
pub struct ModalBasis {
    pub subspaces: Vec<SubspaceModes>,
    pub n_free: usize,
}

impl ModalBasis {
    pub fn n_subspaces(&self) -> usize {
        self.subspaces.len()
    }

    /// Number of computed modes k_i.
    pub fn count(&self, i: usize) -> usize {
        self.subspaces[i].eigenvalues.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.subspaces.iter().map(|s| s.eigenvalues.len()).collect()
    }

    /// Expands subspace-i modal coefficients into a full free-DOF vector.
    pub fn lift(&self, i: usize, coeffs: &DVector<f64>) -> DVector<f64> {
        let sub = &self.subspaces[i];
        let local = &sub.modes * coeffs;
        let mut out = DVector::zeros(self.n_free);
        for (row, &f) in sub.support.iter().enumerate() {
            out[f] = local[row];
        }
        out
    }

    pub fn lift_complex(&self, i: usize, coeffs: &DVector<Complex64>) -> DVector<Complex64> {
        let sub = &self.subspaces[i];
        let re = &sub.modes * coeffs.map(|z| z.re);
        let im = &sub.modes * coeffs.map(|z| z.im);
        let mut out = DVector::zeros(self.n_free);
        for (row, &f) in sub.support.iter().enumerate() {
            out[f] = Complex64::new(re[row], im[row]);
        }
        out
    }

    /// `V_iᵀ w` for a full real vector `w`, using only the support rows.
    pub fn project(&self, i: usize, w: &DVector<f64>) -> DVector<f64> {
        let sub = &self.subspaces[i];
        let gathered = DVector::from_fn(sub.support.len(), |r, _| w[sub.support[r]]);
        sub.modes.transpose() * gathered
    }

    pub fn project_complex(&self, i: usize, w: &DVector<Complex64>) -> DVector<Complex64> {
        let sub = &self.subspaces[i];
        let gathered = DVector::from_fn(sub.support.len(), |r, _| w[sub.support[r]]);
        let re = sub.modes.transpose() * gathered.map(|z| z.re);
        let im = sub.modes.transpose() * gathered.map(|z| z.im);
        DVector::from_fn(re.len(), |j, _| Complex64::new(re[j], im[j]))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EigenOpts {
    /// Subspace dimension up to which the dense eigensolver is used;
    /// shift-invert iteration above.
    pub dense_threshold: usize,
    pub shift_invert: ShiftInvertOpts,
}

impl Default for EigenOpts {
    fn default() -> Self {
        Self {
            dense_threshold: 2000,
            shift_invert: ShiftInvertOpts::default(),
        }
    }
}

/// Computes `counts[i]` modes for every subspace: interior subspaces solve
/// `K_ii z = Λ M_ii z` on their index block; the interface subspace solves
/// the problem projected through the extension, `(EᵀKE) z = Λ (EᵀME) z`,
/// and lifts the modes through E.
pub fn compute_modal_basis(
    k: &CsrMatrix<f64>,
    m: &CsrMatrix<f64>,
    partition: &DofPartition,
    extension: &ExtensionOperator,
    counts: &[usize],
    opts: &EigenOpts,
    rng: &mut impl Rng,
) -> Result<ModalBasis, DecompError> {
    assert_eq!(counts.len(), partition.n_subspaces(), "one count per subspace");
    let n_free = k.nrows();
    let mut subspaces = Vec::with_capacity(partition.n_subspaces());

    // Interface subspace: operators are dense after projection through E.
    {
        let dim = partition.interface_set.len();
        let k0 = counts[0];
        if k0 > dim {
            return Err(DecompError::TooManyModes {
                subspace: 0,
                requested: k0,
                dim,
            });
        }
        let (eigenvalues, modes) = if k0 == 0 {
            (Vec::new(), DMatrix::zeros(n_free, 0))
        } else {
            let e = extension.basis();
            let ke = k * &e;
            let me = m * &e;
            let a0 = e.transpose() * &ke;
            let b0 = e.transpose() * &me;
            let a0 = (&a0 + a0.transpose()) * 0.5;
            let b0 = (&b0 + b0.transpose()) * 0.5;
            let (vals, vecs) = linalg::dense_gen_eigs(&a0, &b0, k0)
                .map_err(|source| DecompError::Eigensolver { subspace: 0, source })?;
            (vals, &e * &vecs)
        };
        check_positive(0, &eigenvalues)?;
        subspaces.push(SubspaceModes {
            eigenvalues,
            modes,
            support: (0..n_free).collect(),
        });
    }

    for s in 1..=partition.n {
        let idx = &partition.interior_sets[s - 1];
        let dim = idx.len();
        let k_s = counts[s];
        if k_s > dim {
            return Err(DecompError::TooManyModes {
                subspace: s,
                requested: k_s,
                dim,
            });
        }
        let k_ss = linalg::csr_submatrix(k, idx, idx);
        let m_ss = linalg::csr_submatrix(m, idx, idx);
        let (eigenvalues, modes) = if k_s == 0 {
            (Vec::new(), DMatrix::zeros(dim, 0))
        } else if dim <= opts.dense_threshold || k_s == dim {
            linalg::dense_gen_eigs(
                &linalg::dense_from_csr(&k_ss),
                &linalg::dense_from_csr(&m_ss),
                k_s,
            )
            .map_err(|source| DecompError::Eigensolver { subspace: s, source })?
        } else {
            linalg::shift_invert_gen_eigs(&k_ss, &m_ss, k_s, &opts.shift_invert, rng)
                .map_err(|source| DecompError::Eigensolver { subspace: s, source })?
        };
        check_positive(s, &eigenvalues)?;
        subspaces.push(SubspaceModes {
            eigenvalues,
            modes,
            support: idx.clone(),
        });
    }

    Ok(ModalBasis { subspaces, n_free })
}

fn check_positive(subspace: usize, eigenvalues: &[f64]) -> Result<(), DecompError> {
    if let Some(&value) = eigenvalues.iter().find(|&&v| v <= 0.0) {
        return Err(DecompError::NonPositiveEigenvalue { subspace, value });
    }
    Ok(())
}

/// Modal coefficients of the Ritz projection `ℛ_i w`:
/// `c_j = (V_iᵀ K w)_j / Λ_{i,j}`.
pub fn ritz_project(
    k: &CsrMatrix<f64>,
    basis: &ModalBasis,
    i: usize,
    w: &DVector<f64>,
) -> DVector<f64> {
    let kw = k * w;
    let mut c = basis.project(i, &kw);
    for (j, v) in c.iter_mut().enumerate() {
        *v /= basis.subspaces[i].eigenvalues[j];
    }
    c
}

pub fn ritz_project_complex(
    k: &CsrMatrix<f64>,
    basis: &ModalBasis,
    i: usize,
    w: &DVector<Complex64>,
) -> DVector<Complex64> {
    let kw = linalg::real_spmv_complex(k, w);
    let mut c = basis.project_complex(i, &kw);
    for (j, v) in c.iter_mut().enumerate() {
        *v /= basis.subspaces[i].eigenvalues[j];
    }
    c
}
