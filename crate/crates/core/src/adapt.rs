//! Adaptive subspace refinement: the goal-driven and energy-driven
//! refinement loops, and the frequency-sweep refine/coarsen loop with warm
//! starts between load cases.

use nalgebra::DVector;
use thiserror::Error;

use crate::decomp::ModalBasis;
use crate::estimate::{
    self, EstimateError, EstimateReport, SpectrumSource, StabilityFactor, TailDepth,
};
use crate::fem::{self, FemError, FullOrderSystem};
use crate::reduced::{self, ReducedError, ReducedModel, ReducedSelection, ReducedSolution};

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("mode budget and iteration count must both be ≥ 1")]
    BadBudget,
    #[error("tolerance must lie in (0, 1), got {value}")]
    BadTolerance { value: f64 },
    #[error("{what} has {got} entries, expected one per subspace ({expected})")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("subspace {subspace}: cap {cap} exceeds the {available} computed modes")]
    CapExceedsBasis {
        subspace: usize,
        cap: usize,
        available: usize,
    },
    #[error(
        "subspace {subspace}: add/remove scales and the initial count must \
         lie in 1..=cap (A={add}, R={remove}, initial={initial}, cap={cap})"
    )]
    BadScales {
        subspace: usize,
        add: usize,
        remove: usize,
        initial: usize,
        cap: usize,
    },
    #[error("sweep iteration cap must be ≥ 1")]
    BadIterationCap,
    #[error(transparent)]
    Reduced(#[from] ReducedError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Fem(#[from] FemError),
}

/// Which count the tolerance split `TOL²/n` divides by.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TolSplit {
    /// Subspaces that still carry indicators (`m_i < k_i`) — the default.
    UnresolvedSubspaces,
    /// The full subspace count, interface included.
    SubspaceCount,
}

/// Parameters of the adaptive loops. `nmodes`/`nits` drive the refinement
/// rule, `tol` and the per-subspace caps/scales drive the sweep strategy.
#[derive(Clone, Debug)]
pub struct AdaptConfig {
    /// Total mode budget over one refinement run.
    pub nmodes: usize,
    /// Refinement iteration budget.
    pub nits: usize,
    /// Relative-error tolerance for the sweep loop.
    pub tol: f64,
    /// Per-subspace mode caps M_i (≤ computed modes k_i).
    pub caps: Vec<usize>,
    /// Per-subspace add scales A_i.
    pub add_scale: Vec<usize>,
    /// Per-subspace remove scales R_i.
    pub remove_scale: Vec<usize>,
    /// Starting selection.
    pub initial: Vec<usize>,
    /// Depth of the enlarged dual space and of the goal residual tails.
    pub dual_depth: TailDepth,
    /// Depth of the residual tails in the energy estimators.
    pub tail_depth: TailDepth,
    /// Solve the dual in the full space instead of the enlarged one.
    pub exact_dual: bool,
    /// Inner-iteration cap per sweep load case.
    pub sweep_iteration_cap: usize,
    pub tol_split: TolSplit,
    /// Solve the full problem each iteration and record the true error.
    pub track_truth: bool,
}

impl AdaptConfig {
    /// Budget 200 over 10 iterations at tolerance 0.1; caps at all computed
    /// modes, scales M_i/10, one starting mode per nonempty subspace.
    pub fn defaults_for(basis: &ModalBasis) -> Self {
        let caps = basis.counts();
        let scale: Vec<usize> = caps
            .iter()
            .map(|&k| if k == 0 { 0 } else { (k / 10).max(1) })
            .collect();
        let initial = caps.iter().map(|&k| if k == 0 { 0 } else { 1 }).collect();
        Self {
            nmodes: 200,
            nits: 10,
            tol: 0.1,
            caps,
            add_scale: scale.clone(),
            remove_scale: scale,
            initial,
            dual_depth: TailDepth::Offset(10),
            tail_depth: TailDepth::Offset(10),
            exact_dual: false,
            sweep_iteration_cap: 50,
            tol_split: TolSplit::UnresolvedSubspaces,
            track_truth: false,
        }
    }

    pub fn validate(&self, basis: &ModalBasis) -> Result<(), AdaptError> {
        if self.nmodes == 0 || self.nits == 0 {
            return Err(AdaptError::BadBudget);
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(AdaptError::BadTolerance { value: self.tol });
        }
        if self.sweep_iteration_cap == 0 {
            return Err(AdaptError::BadIterationCap);
        }
        let n = basis.n_subspaces();
        for (what, v) in [
            ("caps", &self.caps),
            ("add_scale", &self.add_scale),
            ("remove_scale", &self.remove_scale),
            ("initial", &self.initial),
        ] {
            if v.len() != n {
                return Err(AdaptError::LengthMismatch {
                    what,
                    got: v.len(),
                    expected: n,
                });
            }
        }
        for i in 0..n {
            let cap = self.caps[i];
            if cap > basis.count(i) {
                return Err(AdaptError::CapExceedsBasis {
                    subspace: i,
                    cap,
                    available: basis.count(i),
                });
            }
            let (add, remove, initial) = (self.add_scale[i], self.remove_scale[i], self.initial[i]);
            let ok = if cap == 0 {
                add == 0 && remove == 0 && initial == 0
            } else {
                (1..=cap).contains(&add)
                    && (1..=cap).contains(&remove)
                    && (1..=cap).contains(&initial)
            };
            if !ok {
                return Err(AdaptError::BadScales {
                    subspace: i,
                    add,
                    remove,
                    initial,
                    cap,
                });
            }
        }
        Ok(())
    }
}

/// Immutable problem data shared by all adaptive runs.
#[derive(Clone, Copy)]
pub struct ProblemBundle<'a> {
    pub system: &'a FullOrderSystem,
    pub basis: &'a ModalBasis,
    /// Full-problem eigenvalues for the stability factor; without them S(ω)
    /// refreshes from the reduced spectrum each iteration.
    pub full_spectrum: Option<&'a [f64]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    /// Indicators vanished, or the sweep drove the relative estimate under
    /// its tolerance.
    ToleranceMet,
    /// Every indicated subspace sits at its cap.
    BudgetExhausted,
    /// The sweep strategy flagged the load case as not resolvable within
    /// the caps.
    NonResolvable,
    /// The iteration budget ran out.
    MaxIterations,
}

#[derive(Clone, Debug)]
pub struct IterationRecord {
    pub selection: Vec<usize>,
    /// Reduced dimension Σ m_i at this iteration.
    pub dofs: usize,
    pub report: EstimateReport,
}

#[derive(Clone, Debug)]
pub struct AdaptTrace {
    pub omega: f64,
    pub iterations: Vec<IterationRecord>,
    pub termination: Termination,
}

impl AdaptTrace {
    pub fn last(&self) -> &IterationRecord {
        self.iterations.last().expect("trace has at least one iteration")
    }

    pub fn final_selection(&self) -> &[usize] {
        &self.last().selection
    }
}

/// Floors sit a hair above representable products of measured indicators;
/// the snap keeps worked-example arithmetic exact without affecting real
/// data.
const FLOOR_SNAP: f64 = 1e-9;

/// Refinement rule: `l_i = ⌊η̃_i · NMODES/NITS⌋` with `η̃_i = η_i/Ση`.
/// All-zero indicators return all zeros.
pub fn refine_counts(eta: &[f64], nmodes: usize, nits: usize) -> Vec<usize> {
    let total: f64 = eta.iter().sum();
    if total <= 0.0 {
        return vec![0; eta.len()];
    }
    let per_iteration = nmodes as f64 / nits as f64;
    eta.iter()
        .map(|&e| (e / total * per_iteration + FLOOR_SNAP).floor() as usize)
        .collect()
}

/// Sweep rule: with `C = 1/Σ|τ|`, add `⌊C·τ_i·A_i⌋` modes where `τ_i > 0`
/// (subject to `m_i ≤ M_i`) and remove `⌊C·|τ_i|·R_i⌋` where `τ_i < 0`
/// (subject to `m_i ≥ 1`). Zero indicators leave the subspace unchanged.
pub fn sweep_counts(tau: &[f64], config: &AdaptConfig, current: &[usize]) -> Vec<isize> {
    let denom: f64 = tau.iter().map(|t| t.abs()).sum();
    if denom <= 0.0 {
        return vec![0; tau.len()];
    }
    let c = 1.0 / denom;
    tau.iter()
        .enumerate()
        .map(|(i, &t)| {
            if t > 0.0 {
                let add = (c * t * config.add_scale[i] as f64 + FLOOR_SNAP).floor() as usize;
                let headroom = config.caps[i].saturating_sub(current[i]);
                add.min(headroom) as isize
            } else if t < 0.0 {
                let remove =
                    (c * t.abs() * config.remove_scale[i] as f64 + FLOOR_SNAP).floor() as usize;
                let room = current[i].saturating_sub(1);
                -(remove.min(room) as isize)
            } else {
                0
            }
        })
        .collect()
}

fn solve_selection(
    bundle: &ProblemBundle,
    selection: &[usize],
    b: &DVector<f64>,
    omega: f64,
) -> Result<(ReducedModel, ReducedSolution), AdaptError> {
    let sel = ReducedSelection::new(selection.to_vec(), bundle.basis)?;
    let model = reduced::project_with_load(&bundle.system.m, bundle.basis, &sel, b);
    let sol = reduced::solve_reduced(&model, omega, &bundle.system.material)?;
    Ok((model, sol))
}

fn spectrum_factor(
    bundle: &ProblemBundle,
    model: &ReducedModel,
    omega: f64,
) -> Result<StabilityFactor, AdaptError> {
    match bundle.full_spectrum {
        Some(spectrum) => Ok(estimate::stability_factor(
            spectrum,
            omega,
            &bundle.system.material,
            SpectrumSource::FullSpectrum,
        )?),
        None => {
            let spectrum = reduced::reduced_eigenvalues(model)?;
            Ok(estimate::stability_factor(
                &spectrum,
                omega,
                &bundle.system.material,
                SpectrumSource::ReducedSpectrum,
            )?)
        }
    }
}

/// Adds `proposed` to the selection, clamped at the caps. Returns whether
/// any mode was actually added.
fn apply_additions(selection: &mut [usize], proposed: &[usize], caps: &[usize]) -> bool {
    let mut changed = false;
    for i in 0..selection.len() {
        let add = proposed[i].min(caps[i].saturating_sub(selection[i]));
        if add > 0 {
            selection[i] += add;
            changed = true;
        }
    }
    changed
}

/// Goal-driven refinement: solve, solve the (enlarged or exact) dual, refine
/// by the normalized η_{J,i} until the indicators vanish, the caps block
/// progress, or the iteration budget runs out.
pub fn adapt_goal(
    bundle: &ProblemBundle,
    psi: &DVector<f64>,
    omega: f64,
    config: &AdaptConfig,
) -> Result<AdaptTrace, AdaptError> {
    config.validate(bundle.basis)?;
    let system = bundle.system;
    let u_ref = if config.track_truth {
        Some(fem::solve_full_response(system, omega)?)
    } else {
        None
    };

    let mut selection = config.initial.clone();
    let mut iterations = Vec::new();
    let mut termination = Termination::MaxIterations;
    for it in 0..config.nits {
        let (model, sol) = solve_selection(bundle, &selection, &system.b, omega)?;
        let residual = estimate::algebraic_residual(system, &model, &sol)?;
        let norms = estimate::subspace_residual_norms(
            &residual,
            bundle.basis,
            &model.selection,
            config.dual_depth,
        )?;
        let dual_selection =
            estimate::enlarged_selection(bundle.basis, &model.selection, config.dual_depth)?;
        let space = if config.exact_dual {
            estimate::DualSpace::Full
        } else {
            estimate::DualSpace::Reduced(&dual_selection)
        };
        let phi = estimate::solve_dual(system, bundle.basis, psi, omega, space)?;
        let goal = estimate::goal_indicators(&norms, bundle.basis, &system.k, &phi);

        let s = spectrum_factor(bundle, &model, omega)?;
        let mut report = estimate::energy_estimate(&model, bundle.basis, &norms, &s, &sol, None)?;
        report.eta_j = Some(goal.eta_j.clone());
        report.goal_total = Some(goal.total);
        if let Some(u_ref) = &u_ref {
            let e = u_ref - sol.expansion(&model);
            let h = estimate::goal_value(&system.m, &e, psi).norm();
            report.true_error = Some(h);
            report.efficiency_index = (h > 0.0).then(|| goal.estimate() / h);
        }
        iterations.push(IterationRecord {
            selection: selection.clone(),
            dofs: model.dim(),
            report,
        });

        if it + 1 == config.nits {
            break;
        }
        let proposed = refine_counts(&goal.eta_j, config.nmodes, config.nits);
        if proposed.iter().all(|&l| l == 0) {
            termination = Termination::ToleranceMet;
            break;
        }
        if !apply_additions(&mut selection, &proposed, &config.caps) {
            termination = Termination::BudgetExhausted;
            break;
        }
    }
    Ok(AdaptTrace {
        omega,
        iterations,
        termination,
    })
}

/// Energy-driven refinement: as [`adapt_goal`] but with the η_{a,i}
/// indicators and no dual solve.
pub fn adapt_energy(
    bundle: &ProblemBundle,
    omega: f64,
    config: &AdaptConfig,
) -> Result<AdaptTrace, AdaptError> {
    config.validate(bundle.basis)?;
    let system = bundle.system;
    let u_ref = if config.track_truth {
        Some(fem::solve_full_response(system, omega)?)
    } else {
        None
    };

    let mut selection = config.initial.clone();
    let mut iterations = Vec::new();
    let mut termination = Termination::MaxIterations;
    for it in 0..config.nits {
        let (model, sol) = solve_selection(bundle, &selection, &system.b, omega)?;
        let residual = estimate::algebraic_residual(system, &model, &sol)?;
        let norms = estimate::subspace_residual_norms(
            &residual,
            bundle.basis,
            &model.selection,
            config.tail_depth,
        )?;
        let s = spectrum_factor(bundle, &model, omega)?;
        let reference = u_ref.as_ref().map(|u| (system, u));
        let report = estimate::energy_estimate(&model, bundle.basis, &norms, &s, &sol, reference)?;
        let eta_a = report.eta_a.clone();
        iterations.push(IterationRecord {
            selection: selection.clone(),
            dofs: model.dim(),
            report,
        });

        if it + 1 == config.nits {
            break;
        }
        let proposed = refine_counts(&eta_a, config.nmodes, config.nits);
        if proposed.iter().all(|&l| l == 0) {
            termination = Termination::ToleranceMet;
            break;
        }
        if !apply_additions(&mut selection, &proposed, &config.caps) {
            termination = Termination::BudgetExhausted;
            break;
        }
    }
    Ok(AdaptTrace {
        omega,
        iterations,
        termination,
    })
}

/// One sweep load case: a frequency, and optionally its own load vector
/// (defaults to the bundle's).
#[derive(Clone, Debug)]
pub struct SweepCase {
    pub omega: f64,
    pub b: Option<DVector<f64>>,
}

impl SweepCase {
    pub fn new(omega: f64) -> Self {
        Self { omega, b: None }
    }
}

/// True when the capped subspace carries the strictly largest positive
/// indicator — the load case cannot be resolved within the caps.
fn non_resolvable(tau: &[f64], selection: &[usize], caps: &[usize]) -> bool {
    let mut best: Option<usize> = None;
    for (i, &t) in tau.iter().enumerate() {
        if t > 0.0 && best.map_or(true, |b| t > tau[b]) {
            best = Some(i);
        }
    }
    match best {
        Some(j) if selection[j] == caps[j] => {
            (0..tau.len()).all(|i| i == j || tau[i] < tau[j])
        }
        _ => false,
    }
}

/// Frequency-sweep refinement/coarsening: per load case, iterate
/// solve → estimate → sweep_counts until the relative estimate falls under
/// the tolerance, the case proves non-resolvable, or the iteration cap
/// hits; the final selection warm-starts the next case. A failed case is
/// recorded and the sweep continues from the last good selection.
pub fn adapt_sweep(
    bundle: &ProblemBundle,
    cases: &[SweepCase],
    config: &AdaptConfig,
) -> Vec<Result<AdaptTrace, AdaptError>> {
    let mut outcomes = Vec::with_capacity(cases.len());
    if let Err(e) = config.validate(bundle.basis) {
        outcomes.push(Err(e));
        return outcomes;
    }
    let mut warm = config.initial.clone();
    for case in cases {
        let outcome = sweep_case(bundle, case, config, warm.clone());
        if let Ok(trace) = &outcome {
            warm = trace.final_selection().to_vec();
        }
        outcomes.push(outcome);
    }
    outcomes
}

fn sweep_case(
    bundle: &ProblemBundle,
    case: &SweepCase,
    config: &AdaptConfig,
    mut selection: Vec<usize>,
) -> Result<AdaptTrace, AdaptError> {
    let system = bundle.system;
    let b = case.b.as_ref().unwrap_or(&system.b);
    let omega = case.omega;
    let u_ref = if config.track_truth {
        Some(solve_full_with_load(system, omega, b)?)
    } else {
        None
    };

    let mut iterations: Vec<IterationRecord> = Vec::new();
    let mut termination = Termination::MaxIterations;
    for _ in 0..config.sweep_iteration_cap {
        let (model, sol) = solve_selection(bundle, &selection, b, omega)?;
        let residual = estimate::algebraic_residual_with_load(system, &model, &sol, b)?;
        let norms = estimate::subspace_residual_norms(
            &residual,
            bundle.basis,
            &model.selection,
            config.tail_depth,
        )?;
        let s = spectrum_factor(bundle, &model, omega)?;
        let reference = u_ref.as_ref().map(|u| (system, u));
        let mut report =
            estimate::energy_estimate(&model, bundle.basis, &norms, &s, &sol, reference)?;

        let eta_total = report.eta_a_total();
        let norm_sq = report.solution_energy_norm.powi(2).max(f64::MIN_POSITIVE);
        let rel = if eta_total == 0.0 {
            0.0
        } else {
            report.relative_indicator()
        };
        let n_div = match config.tol_split {
            TolSplit::UnresolvedSubspaces => (0..bundle.basis.n_subspaces())
                .filter(|&i| model.selection.counts()[i] < bundle.basis.count(i))
                .count()
                .max(1),
            TolSplit::SubspaceCount => bundle.basis.n_subspaces(),
        };
        let split = config.tol * config.tol / n_div as f64;
        let tau: Vec<f64> = report
            .eta_a
            .iter()
            .map(|&eta| eta / norm_sq - split)
            .collect();
        report.tau_a = Some(tau.clone());
        iterations.push(IterationRecord {
            selection: selection.clone(),
            dofs: model.dim(),
            report,
        });

        if rel <= config.tol {
            termination = Termination::ToleranceMet;
            break;
        }
        if non_resolvable(&tau, &selection, &config.caps) {
            termination = Termination::NonResolvable;
            break;
        }
        let deltas = sweep_counts(&tau, config, &selection);
        if deltas.iter().all(|&d| d == 0) {
            break;
        }
        for (m, &d) in selection.iter_mut().zip(&deltas) {
            *m = m.checked_add_signed(d).expect("deltas clamped to valid range");
        }
    }
    Ok(AdaptTrace {
        omega,
        iterations,
        termination,
    })
}

fn solve_full_with_load(
    system: &FullOrderSystem,
    omega: f64,
    b: &DVector<f64>,
) -> Result<DVector<num_complex::Complex64>, AdaptError> {
    use num_complex::Complex64;
    let (ck, cm) =
        crate::linalg::response_coefficients(omega, system.material.alpha, system.material.beta);
    let rhs = b.map(|v| Complex64::new(v, 0.0));
    match crate::linalg::solve_complex_system(&system.k, &system.m, ck, cm, &rhs, 1e-10) {
        Ok((x, _)) => Ok(x),
        Err(crate::linalg::LinalgError::Singular { .. })
            if system.material.alpha == 0.0 && system.material.beta == 0.0 =>
        {
            Err(AdaptError::Fem(FemError::Resonance { omega }))
        }
        Err(e) => Err(AdaptError::Fem(e.into())),
    }
}
