//! Shared fixtures and independent oracles for the integration suites.
//!
//! The oracles here deliberately avoid the library's own numerical paths:
//! the generalized-eigenvalue oracle is a hand-rolled Cholesky reduction
//! followed by cyclic Jacobi, and the strategy oracles respell the integer
//! refinement arithmetic from scratch.

#![allow(dead_code)]

use cms2d::decomp::{
    build_extension, classify_dofs, compute_modal_basis, DofPartition, EigenOpts,
    ExtensionOperator, ModalBasis,
};
use cms2d::fem::{
    assemble_full_system, gaussian_field, interpolate_field, FullOrderSystem, LoadSpec, Material,
};
use cms2d::linalg;
use cms2d::mesh::{build_rect_mesh, default_dirichlet, Mesh};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub mesh: Mesh,
    pub system: FullOrderSystem,
    pub partition: DofPartition,
    pub extension: ExtensionOperator,
    pub basis: ModalBasis,
}

pub fn material() -> Material {
    Material::new(1.0, 0.29, 1.0, 0.025, 0.025).unwrap()
}

/// Unit square, left edge clamped, all subspace modes computed.
pub fn fixture(nx: usize, ny: usize, grid: (usize, usize), load: LoadSpec) -> Fixture {
    let mesh = build_rect_mesh(1.0, 1.0, nx, ny, grid, default_dirichlet).unwrap();
    let system = assemble_full_system(&mesh, material(), &load).unwrap();
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
    Fixture {
        mesh,
        system,
        partition,
        extension,
        basis,
    }
}

/// Vertical Gaussian traction centered at (0.7, 0.5).
pub fn example1_load() -> LoadSpec {
    LoadSpec::gaussian_traction([0.7, 0.5], [0.0, -1.0], 1.0, 100.0)
}

/// Horizontal Gaussian traction centered at (0.9, 0.25).
pub fn example2_load() -> LoadSpec {
    LoadSpec::gaussian_traction([0.9, 0.25], [1.0, 0.0], 1.0, 100.0)
}

/// Nodal interpolant of the Gaussian goal field near (0.95, 0.25).
pub fn goal_psi(f: &Fixture) -> DVector<f64> {
    interpolate_field(
        &f.mesh,
        &f.system.dof_map,
        gaussian_field([0.95, 0.25], [1.0, 0.0], 1.0, 100.0),
    )
}

/// Random Gaussian traction with the center, direction, and sharpness drawn
/// from ranges that keep the load visible on the free boundary.
pub fn random_load(rng: &mut impl Rng) -> LoadSpec {
    let center = [rng.random_range(0.2..1.0), rng.random_range(0.0..1.0)];
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let direction = [angle.cos(), angle.sin()];
    let sharpness = rng.random_range(20.0..200.0);
    LoadSpec::gaussian_traction(center, direction, 1.0, sharpness)
}

/// Random truncation with `1 ≤ m_i ≤ k_i − 1`, so every subspace keeps a
/// nonempty residual tail.
pub fn random_truncation(rng: &mut impl Rng, basis: &ModalBasis) -> Vec<usize> {
    basis
        .counts()
        .iter()
        .map(|&k| rng.random_range(1..k))
        .collect()
}

/// All generalized eigenvalues of the assembled `(K, M)` pencil.
pub fn full_spectrum(system: &FullOrderSystem) -> Vec<f64> {
    let k = linalg::dense_from_csr(&system.k);
    let m = linalg::dense_from_csr(&system.m);
    linalg::dense_gen_eigs(&k, &m, system.n_free()).unwrap().0
}

// ---------------------------------------------------------------------------
// Independent generalized-eigenvalue oracle.

/// Eigenvalues of `A x = λ B x` (both symmetric, `B` positive definite),
/// ascending, via hand-rolled Cholesky reduction and cyclic Jacobi. Shares
/// no code with the library's eigensolvers.
pub fn gen_eigs_oracle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    assert_eq!((a.ncols(), b.nrows(), b.ncols()), (n, n, n));
    let l = cholesky_lower(b);
    // C = L⁻¹ A L⁻ᵀ: forward-substitute twice, then symmetrize the rounding.
    let y = forward_solve_matrix(&l, a);
    let c = forward_solve_matrix(&l, &y.transpose());
    let c = (&c + c.transpose()) * 0.5;
    jacobi_eigenvalues(c)
}

fn cholesky_lower(b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = b.nrows();
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = b[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        assert!(d > 0.0, "oracle Cholesky: pivot {j} not positive ({d:e})");
        let piv = d.sqrt();
        l[(j, j)] = piv;
        for i in j + 1..n {
            let mut s = b[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / piv;
        }
    }
    l
}

/// Solves `L X = R` column by column (L lower triangular).
fn forward_solve_matrix(l: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut x = r.clone();
    for col in 0..x.ncols() {
        for i in 0..n {
            let mut s = x[(i, col)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, col)];
            }
            x[(i, col)] = s / l[(i, i)];
        }
    }
    x
}

/// Cyclic Jacobi without eigenvector accumulation; symmetric eigenvalues
/// are perfectly conditioned, so diagonal entries converge quadratically.
fn jacobi_eigenvalues(mut c: DMatrix<f64>) -> Vec<f64> {
    let n = c.nrows();
    if n == 0 {
        return Vec::new();
    }
    let scale = c.norm().max(f64::MIN_POSITIVE);
    for _sweep in 0..60 {
        let mut off_sq = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off_sq += c[(p, q)] * c[(p, q)];
            }
        }
        if off_sq.sqrt() <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = c[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (c[(q, q)] - c[(p, p)]) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (theta * theta + 1.0).sqrt())
                } else {
                    -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                };
                let cos = 1.0 / (t * t + 1.0).sqrt();
                let sin = t * cos;
                for k in 0..n {
                    let ckp = c[(k, p)];
                    let ckq = c[(k, q)];
                    c[(k, p)] = cos * ckp - sin * ckq;
                    c[(k, q)] = sin * ckp + cos * ckq;
                }
                for k in 0..n {
                    let cpk = c[(p, k)];
                    let cqk = c[(q, k)];
                    c[(p, k)] = cos * cpk - sin * cqk;
                    c[(q, k)] = sin * cpk + cos * cqk;
                }
            }
        }
    }
    let mut vals: Vec<f64> = (0..n).map(|i| c[(i, i)]).collect();
    vals.sort_by(f64::total_cmp);
    vals
}

// ---------------------------------------------------------------------------
// Duplicate-arithmetic oracles for the refinement strategies.

/// Floor snap mirrored from the strategy implementation: worked-example
/// products sit a hair under their integer value in floating point.
pub const FLOOR_SNAP: f64 = 1e-9;

/// `l_i = ⌊η_i/Ση · NMODES/NITS⌋`, respelled with the multiplication
/// before the normalization.
pub fn oracle_refine_counts(eta: &[f64], nmodes: usize, nits: usize) -> Vec<usize> {
    let total: f64 = eta.iter().sum();
    if total <= 0.0 {
        return vec![0; eta.len()];
    }
    eta.iter()
        .map(|&e| {
            let share = e * (nmodes as f64 / nits as f64) / total;
            (share + FLOOR_SNAP).floor() as usize
        })
        .collect()
}

/// Sweep deltas `⌊C·|τ_i|·scale_i⌋` with sign from τ, clamped so the new
/// count stays in `[1, M_i]`; respelled without precomputing `C`.
pub fn oracle_sweep_counts(
    tau: &[f64],
    caps: &[usize],
    add_scale: &[usize],
    remove_scale: &[usize],
    current: &[usize],
) -> Vec<isize> {
    let denom: f64 = tau.iter().map(|t| t.abs()).sum();
    if denom <= 0.0 {
        return vec![0; tau.len()];
    }
    (0..tau.len())
        .map(|i| {
            let t = tau[i];
            if t > 0.0 {
                let raw = (t * add_scale[i] as f64 / denom + FLOOR_SNAP).floor() as usize;
                let max_add = if caps[i] > current[i] { caps[i] - current[i] } else { 0 };
                raw.min(max_add) as isize
            } else if t < 0.0 {
                let raw = (-t * remove_scale[i] as f64 / denom + FLOOR_SNAP).floor() as usize;
                let max_remove = if current[i] > 1 { current[i] - 1 } else { 0 };
                -(raw.min(max_remove) as isize)
            } else {
                0
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Brute-force stability-factor oracle.

/// `max_λ sqrt((ω⁴ + ω²(αλ+β)²)·λ / ((λ−ω²)² + ω²(αλ+β)²))` evaluated
/// per eigenvalue with the square root taken before the maximum.
pub fn oracle_stability_factor(spectrum: &[f64], omega: f64, alpha: f64, beta: f64) -> f64 {
    spectrum
        .iter()
        .map(|&lambda| {
            let w2 = omega * omega;
            let c = alpha * lambda + beta;
            let num = (w2 * w2 + w2 * c * c) * lambda;
            let den = (lambda - w2) * (lambda - w2) + w2 * c * c;
            (num / den).sqrt()
        })
        .fold(0.0f64, f64::max)
}
