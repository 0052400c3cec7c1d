//! A posteriori estimation of the reduction error `E = U − U^m`: algebraic
//! residuals, subspace residual tails, the dual problem with its
//! goal-oriented indicators `η_{J,i}`, and the energy-norm machinery
//! (`I1`, `I2`, the stability factor `S(ω)`, the indicators `η_{a,i}`).
//!
//! All quantities are built from modal projections of the residual: since
//! every basis is M-orthonormal, the Riesz representer solve `M R̄ = r` is
//! never needed — `W_i* r` already yields its modal coefficients.

use nalgebra::DVector;
use nalgebra_sparse::csr::CsrMatrix;
use num_complex::Complex64;
use thiserror::Error;

use crate::decomp::ModalBasis;
use crate::fem::{self, FemError, FullOrderSystem, Material};
use crate::linalg;
use crate::reduced::{self, ReducedError, ReducedModel, ReducedSelection, ReducedSolution};

#[derive(Debug, Error)]
pub enum EstimateError {
    /// The reduced solution is not Galerkin-orthogonal against its own
    /// basis; system, model, and solution are inconsistent.
    #[error("Galerkin check failed: ‖(V^m)*r‖ = {value:e} exceeds {limit:e}")]
    GalerkinViolation { value: f64, limit: f64 },
    #[error(
        "subspace {subspace}: tail {selected}..{depth} is empty but only \
         {selected} of {available} modes are selected"
    )]
    EmptyTail {
        subspace: usize,
        depth: usize,
        selected: usize,
        available: usize,
    },
    #[error("stability factor needs a nonempty spectrum")]
    EmptySpectrum,
    #[error("stability factor: eigenvalue {value} is not positive")]
    NonPositiveSpectrum { value: f64 },
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Reduced(#[from] ReducedError),
}

/// How far down each subspace spectrum the residual tail (and the dual
/// space) reaches: `d_i = min(m_i + offset, k_i)`, or all computed modes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TailDepth {
    Offset(usize),
    Full,
}

impl TailDepth {
    pub fn bound(self, m_i: usize, k_i: usize) -> usize {
        match self {
            TailDepth::Offset(offset) => (m_i + offset).min(k_i),
            TailDepth::Full => k_i,
        }
    }
}

impl Default for TailDepth {
    fn default() -> Self {
        TailDepth::Offset(10)
    }
}

/// Enlarged selection `d` with `d_i = min(m_i + offset, k_i)`, used as the
/// dual space and as the residual tail.
pub fn enlarged_selection(
    basis: &ModalBasis,
    selection: &ReducedSelection,
    depth: TailDepth,
) -> Result<ReducedSelection, ReducedError> {
    let counts = selection
        .counts()
        .iter()
        .enumerate()
        .map(|(i, &m_i)| depth.bound(m_i, basis.count(i)))
        .collect();
    ReducedSelection::new(counts, basis)
}

/// Residual of the expanded reduced solution in the full free-DOF space,
/// `r = b − (K + iωD − ω²M) Ū^m`.
#[derive(Clone, Debug)]
pub struct AlgebraicResidual {
    pub r: DVector<Complex64>,
    pub omega: f64,
}

/// Computes the algebraic residual and verifies Galerkin orthogonality
/// `(V^m)* r ≈ 0`, which holds by construction for a consistent
/// system/model/solution triple.
pub fn algebraic_residual(
    system: &FullOrderSystem,
    model: &ReducedModel,
    sol: &ReducedSolution,
) -> Result<AlgebraicResidual, EstimateError> {
    algebraic_residual_with_load(system, model, sol, &system.b)
}

/// As [`algebraic_residual`] against a caller-supplied load (the model must
/// have been projected with the same load).
pub fn algebraic_residual_with_load(
    system: &FullOrderSystem,
    model: &ReducedModel,
    sol: &ReducedSolution,
    b: &DVector<f64>,
) -> Result<AlgebraicResidual, EstimateError> {
    let (ck, cm) =
        linalg::response_coefficients(sol.omega, system.material.alpha, system.material.beta);
    let u = sol.expansion(model);
    let ku = linalg::real_spmv_complex(&system.k, u);
    let mu = linalg::real_spmv_complex(&system.m, u);
    let r = DVector::from_fn(u.len(), |i, _| Complex64::new(b[i], 0.0) - ck * ku[i] - cm * mu[i]);

    let proj_re = model.vm.transpose() * r.map(|z| z.re);
    let proj_im = model.vm.transpose() * r.map(|z| z.im);
    let value = (proj_re.norm_squared() + proj_im.norm_squared()).sqrt();
    // The residual subtraction cancels terms of size ‖ck·Ku‖ and ‖cm·Mu‖
    // (large near resonance and for fine meshes), so the attainable
    // orthogonality level scales with them, not with ‖b‖ alone.
    let scale = b.norm() + ck.norm() * ku.norm() + cm.norm() * mu.norm();
    let limit = 1e-10 * scale;
    if !(value <= limit) {
        return Err(EstimateError::GalerkinViolation { value, limit });
    }
    Ok(AlgebraicResidual { r, omega: sol.omega })
}

/// Squared tail norms `‖R_i‖² = Σ_{j=m_i+1}^{d_i} |ρ_{i,j}|²` with the tail
/// projection coefficients `ρ_{i,j} = (W_i)_{·j}* r` kept for the goal
/// indicators. `tail_ranges[i] = (m_i, d_i)` records which modes form the
/// tail (0-based, exclusive end); resolved subspaces get an empty range.
#[derive(Clone, Debug)]
pub struct SubspaceResidualNorms {
    pub norms_sq: Vec<f64>,
    pub tail_coefficients: Vec<Vec<Complex64>>,
    pub tail_ranges: Vec<(usize, usize)>,
}

pub fn subspace_residual_norms(
    residual: &AlgebraicResidual,
    basis: &ModalBasis,
    selection: &ReducedSelection,
    depth: TailDepth,
) -> Result<SubspaceResidualNorms, EstimateError> {
    let n = basis.n_subspaces();
    let mut norms_sq = Vec::with_capacity(n);
    let mut tail_coefficients = Vec::with_capacity(n);
    let mut tail_ranges = Vec::with_capacity(n);
    for i in 0..n {
        let m_i = selection.counts()[i];
        let k_i = basis.count(i);
        if m_i == k_i {
            norms_sq.push(0.0);
            tail_coefficients.push(Vec::new());
            tail_ranges.push((m_i, m_i));
            continue;
        }
        let d_i = depth.bound(m_i, k_i);
        if d_i <= m_i {
            return Err(EstimateError::EmptyTail {
                subspace: i,
                depth: d_i,
                selected: m_i,
                available: k_i,
            });
        }
        let coeffs = basis.project_complex(i, &residual.r);
        let tail: Vec<Complex64> = (m_i..d_i).map(|j| coeffs[j]).collect();
        norms_sq.push(tail.iter().map(|z| z.norm_sqr()).sum());
        tail_coefficients.push(tail);
        tail_ranges.push((m_i, d_i));
    }
    Ok(SubspaceResidualNorms {
        norms_sq,
        tail_coefficients,
        tail_ranges,
    })
}

/// Space in which the dual problem is solved.
#[derive(Clone, Copy, Debug)]
pub enum DualSpace<'a> {
    /// The full free-DOF space — the exact discrete dual.
    Full,
    /// The reduced space spanned by the enlarged selection `d`.
    Reduced(&'a ReducedSelection),
}

/// Solves the dual problem `(K − iωD − ω²M) Φ̄ = Mψ` — the
/// conjugate-transposed response matrix against the goal load — either in
/// the full space or projected onto the enlarged reduced space, expanded
/// back to free-DOF coordinates. At `ω = 0` the problem is self-adjoint and
/// `Φ̄` equals the static response to the load `Mψ`.
pub fn solve_dual(
    system: &FullOrderSystem,
    basis: &ModalBasis,
    psi: &DVector<f64>,
    omega: f64,
    space: DualSpace,
) -> Result<DVector<Complex64>, EstimateError> {
    let m_psi = &system.m * psi;
    match space {
        DualSpace::Full => {
            let rhs = m_psi.map(|v| Complex64::new(v, 0.0));
            Ok(fem::solve_full_adjoint_rhs(system, omega, &rhs)?)
        }
        DualSpace::Reduced(d_selection) => {
            let model = reduced::project_with_load(&system.m, basis, d_selection, &m_psi);
            let rhs = model.bm.map(|v| Complex64::new(v, 0.0));
            let sol = reduced::solve_reduced_adjoint_rhs(&model, omega, &system.material, &rhs)?;
            Ok(sol.expansion(&model).clone())
        }
    }
}

/// Per-subspace goal indicators `η_{J,i} = |T_i|` with their signed complex
/// terms `T_i = Σ_{j∈tail} conj(ρ_{i,j}) · ((W_i)_{·j}ᵀ K Φ̄)/Λ_{i,j}`. The
/// tails come from [`subspace_residual_norms`]; at full depth with the
/// exact dual, `total = Σ T_i` reproduces `H(E) = E* M ψ`.
#[derive(Clone, Debug)]
pub struct GoalIndicators {
    pub eta_j: Vec<f64>,
    pub terms: Vec<Complex64>,
    pub total: Complex64,
}

impl GoalIndicators {
    /// The triangle-inequality estimate `Σ η_{J,i} ≥ |H(E)|`.
    pub fn estimate(&self) -> f64 {
        self.eta_j.iter().sum()
    }
}

pub fn goal_indicators(
    norms: &SubspaceResidualNorms,
    basis: &ModalBasis,
    k_mat: &CsrMatrix<f64>,
    phi: &DVector<Complex64>,
) -> GoalIndicators {
    let k_phi = linalg::real_spmv_complex(k_mat, phi);
    let n = basis.n_subspaces();
    let mut eta_j = Vec::with_capacity(n);
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let (lo, hi) = norms.tail_ranges[i];
        if lo == hi {
            eta_j.push(0.0);
            terms.push(Complex64::new(0.0, 0.0));
            continue;
        }
        let weights = basis.project_complex(i, &k_phi);
        let eigenvalues = &basis.subspaces[i].eigenvalues;
        let t: Complex64 = (lo..hi)
            .map(|j| norms.tail_coefficients[i][j - lo].conj() * weights[j] / eigenvalues[j])
            .sum();
        eta_j.push(t.norm());
        terms.push(t);
    }
    let total = terms.iter().sum();
    GoalIndicators { eta_j, terms, total }
}

/// Whether the spectrum supplied to the stability factor came from the full
/// eigenproblem or from the current reduced model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpectrumSource {
    FullSpectrum,
    ReducedSpectrum,
}

/// `S(ω) = max_j sqrt((ω⁴ + ω²c_j²)·λ_j / ((λ_j − ω²)² + ω²c_j²))` with
/// `c_j = αλ_j + β`, maximized over the supplied eigenvalues. `S(0) = 0`;
/// an exactly resonant undamped eigenvalue yields `S = ∞`.
#[derive(Clone, Debug)]
pub struct StabilityFactor {
    pub s: f64,
    pub omega: f64,
    pub spectrum_used: Vec<f64>,
    pub exactness: SpectrumSource,
}

pub fn stability_factor(
    spectrum: &[f64],
    omega: f64,
    material: &Material,
    source: SpectrumSource,
) -> Result<StabilityFactor, EstimateError> {
    if spectrum.is_empty() {
        return Err(EstimateError::EmptySpectrum);
    }
    let w2 = omega * omega;
    let mut s_sq_max = 0.0f64;
    for &lambda in spectrum {
        if lambda <= 0.0 {
            return Err(EstimateError::NonPositiveSpectrum { value: lambda });
        }
        let c = material.alpha * lambda + material.beta;
        let numerator = (w2 * w2 + w2 * c * c) * lambda;
        let denominator = (lambda - w2).powi(2) + w2 * c * c;
        let s_sq = numerator / denominator;
        if s_sq > s_sq_max {
            s_sq_max = s_sq;
        }
    }
    Ok(StabilityFactor {
        s: s_sq_max.sqrt(),
        omega,
        spectrum_used: spectrum.to_vec(),
        exactness: source,
    })
}

/// Energy-norm estimate and its indicators. `energy_bound` is the certified
/// bound `sqrt(I1) + S·sqrt(2·I2) ≥ |||E|||` when `S` comes from the full
/// spectrum; `Σ η_{a,i} = 2·I1 + 4S²·I2 ≥ energy_bound²` by Young's
/// inequality. The goal and sweep fields are filled by the adaptive drivers.
#[derive(Clone, Debug)]
pub struct EstimateReport {
    pub i1: f64,
    pub i2: f64,
    pub s: StabilityFactor,
    pub energy_bound: f64,
    pub eta_a: Vec<f64>,
    pub eta_j: Option<Vec<f64>>,
    pub goal_total: Option<Complex64>,
    pub tau_a: Option<Vec<f64>>,
    pub solution_energy_norm: f64,
    pub true_error: Option<f64>,
    pub efficiency_index: Option<f64>,
}

impl EstimateReport {
    pub fn eta_a_total(&self) -> f64 {
        self.eta_a.iter().sum()
    }

    /// `energy_bound / |||U^m|||`.
    pub fn relative_bound(&self) -> f64 {
        self.energy_bound / self.solution_energy_norm
    }

    /// `sqrt(Σ η_{a,i}) / |||U^m|||` — the quantity the sweep loop drives
    /// under its tolerance.
    pub fn relative_indicator(&self) -> f64 {
        self.eta_a_total().sqrt() / self.solution_energy_norm
    }

    /// `Σ η_{J,i}` when goal indicators are attached.
    pub fn goal_estimate(&self) -> Option<f64> {
        self.eta_j.as_ref().map(|v| v.iter().sum())
    }
}

/// Assembles the energy-norm estimate from precomputed residual
/// tails. Selection counts are read from the tail ranges in `norms`;
/// `Λ_{i,m_i+1}` is the first eigenvalue past the selection. A resolved
/// subspace (`m_i = k_i`) has no such eigenvalue and contributes zero.
/// `|||U^m|||² = Σ Λ_r |c_r|²` is exact in the modal basis. With a
/// reference solve the true error `|||E|||` and the efficiency index
/// `energy_bound / |||E|||` are recorded.
pub fn energy_estimate(
    model: &ReducedModel,
    basis: &ModalBasis,
    norms: &SubspaceResidualNorms,
    s: &StabilityFactor,
    sol: &ReducedSolution,
    reference: Option<(&FullOrderSystem, &DVector<Complex64>)>,
) -> Result<EstimateReport, EstimateError> {
    let n = basis.n_subspaces();
    let mut i1 = 0.0;
    let mut i2 = 0.0;
    let mut eta_a = vec![0.0; n];
    for i in 0..n {
        let (m_i, _) = norms.tail_ranges[i];
        let k_i = basis.count(i);
        if m_i >= k_i {
            if k_i > 0 {
                log::debug!("subspace {i} fully resolved (m = {k_i}); indicator is zero");
            }
            continue;
        }
        let lambda = basis.subspaces[i].eigenvalues[m_i];
        let r_sq = norms.norms_sq[i];
        i1 += r_sq / lambda;
        i2 += r_sq / (lambda * lambda);
        eta_a[i] = 2.0 * r_sq / lambda + 4.0 * s.s * s.s * r_sq / (lambda * lambda);
    }
    let energy_bound = i1.sqrt() + s.s * (2.0 * i2).sqrt();
    let norm_sq: f64 = sol
        .coefficients
        .iter()
        .zip(model.km_diag.iter())
        .map(|(c, &lambda)| lambda * c.norm_sqr())
        .sum();
    let solution_energy_norm = norm_sq.sqrt();
    let (true_error, efficiency_index) = match reference {
        Some((system, u_ref)) => {
            let e = u_ref - sol.expansion(model);
            let te = fem::energy_norm(&system.k, &e)?;
            let ei = (te > 0.0).then(|| energy_bound / te);
            (Some(te), ei)
        }
        None => (None, None),
    };
    Ok(EstimateReport {
        i1,
        i2,
        s: s.clone(),
        energy_bound,
        eta_a,
        eta_j: None,
        goal_total: None,
        tau_a: None,
        solution_energy_norm,
        true_error,
        efficiency_index,
    })
}

/// `H(v) = v* M ψ` — the goal functional under the Hermitian pairing.
pub fn goal_value(
    m_mat: &CsrMatrix<f64>,
    v: &DVector<Complex64>,
    psi: &DVector<f64>,
) -> Complex64 {
    let m_psi = m_mat * psi;
    v.iter()
        .zip(m_psi.iter())
        .map(|(a, &b)| a.conj() * b)
        .sum()
}
