//! P1 vector finite elements for plane-strain elasticity on the free DOFs:
//! stiffness, consistent mass, loads, the full-order frequency response, and
//! the energy norm. Damping is always formed implicitly as αK + βM.

use nalgebra::DVector;
use nalgebra_sparse::{CooMatrix, CsrMatrix};
use num_complex::Complex64;
use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::mesh::{BoundaryTag, Mesh};

#[derive(Debug, Error)]
pub enum FemError {
    #[error("invalid material: {msg}")]
    InvalidMaterial { msg: String },
    #[error("triangle {tri} is degenerate: area {area:e} below threshold {threshold:e}")]
    DegenerateTriangle { tri: usize, area: f64, threshold: f64 },
    #[error("undamped system is singular at omega = {omega}: resonance")]
    Resonance { omega: f64 },
    #[error("full-order solve failed: {0}")]
    Solve(#[from] LinalgError),
    #[error("energy quadratic form is negative ({value:e}); operator not positive semidefinite")]
    NegativeEnergy { value: f64 },
}

/// Isotropic material with Rayleigh damping coefficients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Material {
    pub e: f64,
    pub nu: f64,
    pub rho: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Material {
    pub fn new(e: f64, nu: f64, rho: f64, alpha: f64, beta: f64) -> Result<Self, FemError> {
        let reject = |msg: String| Err(FemError::InvalidMaterial { msg });
        if !(e > 0.0) {
            return reject(format!("Young modulus must be positive, got {e}"));
        }
        if !(0.0..0.5).contains(&nu) {
            return reject(format!("Poisson ratio must lie in [0, 0.5), got {nu}"));
        }
        if !(rho > 0.0) {
            return reject(format!("density must be positive, got {rho}"));
        }
        if alpha < 0.0 || beta < 0.0 {
            return reject(format!(
                "damping coefficients must be nonnegative, got alpha={alpha}, beta={beta}"
            ));
        }
        Ok(Self { e, nu, rho, alpha, beta })
    }

    /// Shear modulus μ = E / (2(1+ν)).
    pub fn mu(&self) -> f64 {
        self.e / (2.0 * (1.0 + self.nu))
    }

    /// First Lamé parameter κ = Eν / ((1+ν)(1−2ν)) (plane strain).
    pub fn kappa(&self) -> f64 {
        self.e * self.nu / ((1.0 + self.nu) * (1.0 - 2.0 * self.nu))
    }
}

/// Maps (node, component) pairs to free-DOF indices, excluding every DOF on
/// a Dirichlet-tagged node. Ordering is node-major, deterministic.
#[derive(Clone, Debug)]
pub struct DofMap {
    free_dofs: Vec<(usize, u8)>,
    index: Vec<Option<usize>>,
}

impl DofMap {
    pub fn build(mesh: &Mesh) -> Self {
        let mut dirichlet = vec![false; mesh.n_nodes()];
        for edge in &mesh.boundary_edges {
            if edge.tag == BoundaryTag::Dirichlet {
                dirichlet[edge.nodes[0]] = true;
                dirichlet[edge.nodes[1]] = true;
            }
        }
        let mut free_dofs = Vec::new();
        let mut index = vec![None; 2 * mesh.n_nodes()];
        for node in 0..mesh.n_nodes() {
            if dirichlet[node] {
                continue;
            }
            for comp in 0..2u8 {
                index[2 * node + comp as usize] = Some(free_dofs.len());
                free_dofs.push((node, comp));
            }
        }
        Self { free_dofs, index }
    }

    /// Directly wraps a free-DOF list; used for synthetic systems in tests.
    pub fn from_free_dofs(n_nodes: usize, free_dofs: Vec<(usize, u8)>) -> Self {
        let mut index = vec![None; 2 * n_nodes];
        for (pos, &(node, comp)) in free_dofs.iter().enumerate() {
            index[2 * node + comp as usize] = Some(pos);
        }
        Self { free_dofs, index }
    }

    pub fn n_free(&self) -> usize {
        self.free_dofs.len()
    }

    pub fn dof(&self, node: usize, comp: u8) -> Option<usize> {
        self.index[2 * node + comp as usize]
    }

    pub fn free_dofs(&self) -> &[(usize, u8)] {
        &self.free_dofs
    }
}

type VecField = Box<dyn Fn(f64, f64) -> [f64; 2] + Send + Sync>;

/// Body force over Ω and/or traction over the Neumann boundary.
#[derive(Default)]
pub struct LoadSpec {
    pub body_force: Option<VecField>,
    pub traction: Option<VecField>,
}

impl LoadSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with_traction(f: impl Fn(f64, f64) -> [f64; 2] + Send + Sync + 'static) -> Self {
        Self {
            body_force: None,
            traction: Some(Box::new(f)),
        }
    }

    pub fn with_body_force(f: impl Fn(f64, f64) -> [f64; 2] + Send + Sync + 'static) -> Self {
        Self {
            body_force: Some(Box::new(f)),
            traction: None,
        }
    }

    /// Traction `amplitude · exp(−sharpness·|x−center|²) · direction`.
    pub fn gaussian_traction(
        center: [f64; 2],
        direction: [f64; 2],
        amplitude: f64,
        sharpness: f64,
    ) -> Self {
        Self::with_traction(move |x, y| {
            let d2 = (x - center[0]).powi(2) + (y - center[1]).powi(2);
            let g = amplitude * (-sharpness * d2).exp();
            [g * direction[0], g * direction[1]]
        })
    }
}

/// Pointwise Gaussian field; shared by loads and goal functionals.
pub fn gaussian_field(
    center: [f64; 2],
    direction: [f64; 2],
    amplitude: f64,
    sharpness: f64,
) -> impl Fn(f64, f64) -> [f64; 2] + Send + Sync + 'static {
    move |x, y| {
        let d2 = (x - center[0]).powi(2) + (y - center[1]).powi(2);
        let g = amplitude * (-sharpness * d2).exp();
        [g * direction[0], g * direction[1]]
    }
}

/// Full-order discrete problem on the free DOFs; `D = αK + βM` is implied by
/// `material` and never stored.
pub struct FullOrderSystem {
    pub k: CsrMatrix<f64>,
    pub m: CsrMatrix<f64>,
    pub b: DVector<f64>,
    pub dof_map: DofMap,
    pub material: Material,
}

impl FullOrderSystem {
    pub fn n_free(&self) -> usize {
        self.b.len()
    }
}

struct TriangleGeometry {
    area: f64,
    /// ∇φ_i = (grad_x[i], grad_y[i]).
    grad_x: [f64; 3],
    grad_y: [f64; 3],
}

fn triangle_geometry(mesh: &Mesh, t: usize) -> Result<TriangleGeometry, FemError> {
    let [a, b, c] = mesh.triangles[t];
    let (pa, pb, pc) = (mesh.nodes[a], mesh.nodes[b], mesh.nodes[c]);
    let area = mesh.triangle_area(t);
    let h2 = [(pb, pc), (pc, pa), (pa, pb)]
        .iter()
        .map(|(p, q)| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2))
        .fold(0.0f64, f64::max);
    let threshold = 1e-14 * h2;
    if area <= threshold {
        return Err(FemError::DegenerateTriangle { tri: t, area, threshold });
    }
    let inv2a = 1.0 / (2.0 * area);
    Ok(TriangleGeometry {
        area,
        grad_x: [
            (pb[1] - pc[1]) * inv2a,
            (pc[1] - pa[1]) * inv2a,
            (pa[1] - pb[1]) * inv2a,
        ],
        grad_y: [
            (pc[0] - pb[0]) * inv2a,
            (pa[0] - pc[0]) * inv2a,
            (pb[0] - pa[0]) * inv2a,
        ],
    })
}

/// Scatters the symmetric 6×6 element matrix into the COO accumulator,
/// mirroring off-diagonal entries so the assembled matrix is exactly
/// symmetric.
fn scatter_symmetric(
    coo: &mut CooMatrix<f64>,
    dofs: &[Option<usize>; 6],
    ke: &[[f64; 6]; 6],
) {
    for r in 0..6 {
        let Some(p) = dofs[r] else { continue };
        for s in r..6 {
            let Some(q) = dofs[s] else { continue };
            let v = ke[r][s];
            if v == 0.0 {
                continue;
            }
            coo.push(p, q, v);
            if p != q {
                coo.push(q, p, v);
            }
        }
    }
}

fn element_dofs(mesh: &Mesh, dof_map: &DofMap, t: usize) -> [Option<usize>; 6] {
    let tri = mesh.triangles[t];
    let mut dofs = [None; 6];
    for i in 0..3 {
        for c in 0..2u8 {
            dofs[2 * i + c as usize] = dof_map.dof(tri[i], c);
        }
    }
    dofs
}

/// Stiffness matrix of `a(v,w) = (2μ ε(v):ε(w)) + (κ ∇·v, ∇·w)` on the free
/// DOFs; exact for P1 since the integrands are piecewise constant. Assembled
/// at unit Young modulus and scaled by E once at the end, so `E → cE` scales
/// K exactly by c.
pub fn assemble_stiffness(
    mesh: &Mesh,
    material: &Material,
    dof_map: &DofMap,
) -> Result<CsrMatrix<f64>, FemError> {
    let unit = Material { e: 1.0, ..*material };
    let (mu, kappa) = (unit.mu(), unit.kappa());
    let n = dof_map.n_free();
    let mut coo = CooMatrix::new(n, n);
    for t in 0..mesh.n_triangles() {
        let geo = triangle_geometry(mesh, t)?;
        let mut ke = [[0.0; 6]; 6];
        for i in 0..3 {
            for ci in 0..2 {
                let r = 2 * i + ci;
                for j in 0..3 {
                    for cj in 0..2 {
                        let s = 2 * j + cj;
                        if s < r {
                            continue;
                        }
                        // ε(φ e_c) in Voigt form (εx, εy, γxy):
                        let ei = voigt_strain(&geo, i, ci);
                        let ej = voigt_strain(&geo, j, cj);
                        let shear = mu * ei[2] * ej[2];
                        let normal = (2.0 * mu + kappa) * (ei[0] * ej[0] + ei[1] * ej[1])
                            + kappa * (ei[0] * ej[1] + ei[1] * ej[0]);
                        ke[r][s] = geo.area * (normal + shear);
                        ke[s][r] = ke[r][s];
                    }
                }
            }
        }
        scatter_symmetric(&mut coo, &element_dofs(mesh, dof_map, t), &ke);
    }
    let mut k = CsrMatrix::from(&coo);
    for v in k.values_mut() {
        *v *= material.e;
    }
    Ok(k)
}

fn voigt_strain(geo: &TriangleGeometry, node: usize, comp: usize) -> [f64; 3] {
    if comp == 0 {
        [geo.grad_x[node], 0.0, geo.grad_y[node]]
    } else {
        [0.0, geo.grad_y[node], geo.grad_x[node]]
    }
}

/// Consistent mass matrix `ρ(v, w)`; per-component element blocks are
/// `area/12 · (2 on diagonal, 1 off)`. Assembled at unit density and scaled
/// by ρ once at the end.
pub fn assemble_mass(
    mesh: &Mesh,
    material: &Material,
    dof_map: &DofMap,
) -> Result<CsrMatrix<f64>, FemError> {
    let n = dof_map.n_free();
    let mut coo = CooMatrix::new(n, n);
    for t in 0..mesh.n_triangles() {
        let geo = triangle_geometry(mesh, t)?;
        let mut ke = [[0.0; 6]; 6];
        for i in 0..3 {
            for j in 0..3 {
                let v = geo.area / 12.0 * if i == j { 2.0 } else { 1.0 };
                for c in 0..2 {
                    ke[2 * i + c][2 * j + c] = v;
                }
            }
        }
        scatter_symmetric(&mut coo, &element_dofs(mesh, dof_map, t), &ke);
    }
    let mut m = CsrMatrix::from(&coo);
    for v in m.values_mut() {
        *v *= material.rho;
    }
    Ok(m)
}

// Degree-2 triangle rule: barycentric points (2/3,1/6,1/6) and cyclic,
// equal weights area/3.
const TRI_QUAD: [[f64; 3]; 3] = [
    [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
    [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
    [1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0],
];

// 3-point Gauss–Legendre on [-1, 1].
const EDGE_QUAD: [(f64, f64); 3] = [
    (-0.7745966692414834, 5.0 / 9.0),
    (0.0, 8.0 / 9.0),
    (0.7745966692414834, 5.0 / 9.0),
];

/// Load vector `b[p] ≈ (f, φ_p) + (g_N, φ_p)_{Γ_N}`: 3-point triangle
/// quadrature for the body force, 3-point Gauss per Neumann edge for the
/// traction.
pub fn assemble_load(mesh: &Mesh, load: &LoadSpec, dof_map: &DofMap) -> DVector<f64> {
    let mut b = DVector::zeros(dof_map.n_free());
    if let Some(f) = &load.body_force {
        for t in 0..mesh.n_triangles() {
            let tri = mesh.triangles[t];
            let w = mesh.triangle_area(t) / 3.0;
            for bary in &TRI_QUAD {
                let (mut x, mut y) = (0.0, 0.0);
                for i in 0..3 {
                    x += bary[i] * mesh.nodes[tri[i]][0];
                    y += bary[i] * mesh.nodes[tri[i]][1];
                }
                let val = f(x, y);
                for i in 0..3 {
                    for c in 0..2usize {
                        if let Some(p) = dof_map.dof(tri[i], c as u8) {
                            b[p] += w * bary[i] * val[c];
                        }
                    }
                }
            }
        }
    }
    if let Some(g) = &load.traction {
        for edge in &mesh.boundary_edges {
            if edge.tag != BoundaryTag::Neumann {
                continue;
            }
            let (pa, pb) = (mesh.nodes[edge.nodes[0]], mesh.nodes[edge.nodes[1]]);
            let len = ((pb[0] - pa[0]).powi(2) + (pb[1] - pa[1]).powi(2)).sqrt();
            for &(s, w) in &EDGE_QUAD {
                let (phi_a, phi_b) = (0.5 * (1.0 - s), 0.5 * (1.0 + s));
                let x = phi_a * pa[0] + phi_b * pb[0];
                let y = phi_a * pa[1] + phi_b * pb[1];
                let val = g(x, y);
                let scale = w * len / 2.0;
                for (node, phi) in [(edge.nodes[0], phi_a), (edge.nodes[1], phi_b)] {
                    for c in 0..2usize {
                        if let Some(p) = dof_map.dof(node, c as u8) {
                            b[p] += scale * phi * val[c];
                        }
                    }
                }
            }
        }
    }
    b
}

/// Assembles K, M, b for one mesh/material/load combination.
pub fn assemble_full_system(
    mesh: &Mesh,
    material: Material,
    load: &LoadSpec,
) -> Result<FullOrderSystem, FemError> {
    let dof_map = DofMap::build(mesh);
    let k = assemble_stiffness(mesh, &material, &dof_map)?;
    let m = assemble_mass(mesh, &material, &dof_map)?;
    let b = assemble_load(mesh, load, &dof_map);
    Ok(FullOrderSystem { k, m, b, dof_map, material })
}

/// Nodal interpolation of a vector field onto the free DOFs.
pub fn interpolate_field(
    mesh: &Mesh,
    dof_map: &DofMap,
    field: impl Fn(f64, f64) -> [f64; 2],
) -> DVector<f64> {
    let mut v = DVector::zeros(dof_map.n_free());
    for &(node, comp) in dof_map.free_dofs() {
        let p = mesh.nodes[node];
        v[dof_map.dof(node, comp).unwrap()] = field(p[0], p[1])[comp as usize];
    }
    v
}

/// Solves `(K + iωD − ω²M) Ū = b` with `D = αK + βM`, to relative residual
/// `‖b − AŪ‖/‖b‖ ≤ 1e-10`.
pub fn solve_full_response(
    sys: &FullOrderSystem,
    omega: f64,
) -> Result<DVector<Complex64>, FemError> {
    let (ck, cm) = linalg::response_coefficients(omega, sys.material.alpha, sys.material.beta);
    let rhs = sys.b.map(|v| Complex64::new(v, 0.0));
    match linalg::solve_complex_system(&sys.k, &sys.m, ck, cm, &rhs, 1e-10) {
        Ok((x, _)) => Ok(x),
        Err(LinalgError::Singular { .. })
            if sys.material.alpha == 0.0 && sys.material.beta == 0.0 =>
        {
            Err(FemError::Resonance { omega })
        }
        Err(e) => Err(e.into()),
    }
}

/// Solves the adjoint response system `(K − iωD − ω²M) Φ̄ = rhs`. K, M, D
/// are real symmetric, so the conjugate transpose only conjugates the
/// response coefficients.
pub fn solve_full_adjoint_rhs(
    sys: &FullOrderSystem,
    omega: f64,
    rhs: &DVector<Complex64>,
) -> Result<DVector<Complex64>, FemError> {
    let (ck, cm) = linalg::response_coefficients(omega, sys.material.alpha, sys.material.beta);
    match linalg::solve_complex_system(&sys.k, &sys.m, ck.conj(), cm.conj(), rhs, 1e-10) {
        Ok((x, _)) => Ok(x),
        Err(LinalgError::Singular { .. })
            if sys.material.alpha == 0.0 && sys.material.beta == 0.0 =>
        {
            Err(FemError::Resonance { omega })
        }
        Err(e) => Err(e.into()),
    }
}

/// Energy norm `sqrt(v* K v)`; the quadratic form must be real nonnegative
/// up to rounding since K is real symmetric positive semidefinite.
pub fn energy_norm(k: &CsrMatrix<f64>, v: &DVector<Complex64>) -> Result<f64, FemError> {
    let kv = linalg::real_spmv_complex(k, v);
    let q: Complex64 = v.iter().zip(kv.iter()).map(|(a, b)| a.conj() * b).sum();
    let scale = v.norm() * kv.norm();
    if q.re < -1e-12 * scale {
        return Err(FemError::NegativeEnergy { value: q.re });
    }
    Ok(q.re.max(0.0).sqrt())
}

pub fn energy_norm_real(k: &CsrMatrix<f64>, v: &DVector<f64>) -> Result<f64, FemError> {
    energy_norm(k, &v.map(|x| Complex64::new(x, 0.0)))
}
