//! Orchestration: a validated [`RunConfig`] in, CSV/SVG/Matrix Market
//! artifacts out.
//!
//! All floating-point cells are written with 17 significant digits and the
//! pipeline is seeded, so identical config + seed gives byte-identical
//! files.

use std::error::Error as _;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::adapt::{
    adapt_energy, adapt_goal, adapt_sweep, AdaptError, AdaptTrace, ProblemBundle,
    SweepCase, Termination,
};
use crate::cache::{self, CacheError};
use crate::config::{ConfigError, Mode, RunConfig};
use crate::decomp::{
    build_extension, classify_dofs, compute_modal_basis, DecompError, EigenOpts, ModalBasis,
};
use crate::estimate::{
    algebraic_residual, enlarged_selection, goal_indicators, solve_dual, stability_factor,
    subspace_residual_norms, DualSpace, EstimateError, EstimateReport, SpectrumSource,
    StabilityFactor,
};
use crate::fem::{
    assemble_full_system, energy_norm, interpolate_field, solve_full_response, FemError,
    FullOrderSystem, Material,
};
use crate::linalg::{self, LinalgError};
use crate::mesh::{build_rect_mesh, default_dirichlet, Mesh, MeshError};
use crate::plot::{emit_convergence_plot, PlotError};
use crate::reduced::{self, reduced_eigenvalues, ReducedError, ReducedModel, ReducedSelection};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Decomp(#[from] DecompError),
    #[error(transparent)]
    Reduced(#[from] ReducedError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Plot(#[from] PlotError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("mode {mode} needs a [goal] section")]
    GoalMissing { mode: &'static str },
}

/// Prints `err` and its source chain to stderr, skipping transparent
/// wrappers that repeat the same message.
pub fn report_error(err: &RunError) {
    eprintln!("error: {err}");
    let mut prev = err.to_string();
    let mut src = err.source();
    while let Some(s) = src {
        let msg = s.to_string();
        if msg != prev {
            eprintln!("  caused by: {msg}");
        }
        prev = msg;
        src = s.source();
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub export_mesh: bool,
    pub export_system: bool,
    pub export_reduced: bool,
    pub basis_cache: Option<PathBuf>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("."),
            export_mesh: false,
            export_system: false,
            export_reduced: false,
            basis_cache: None,
        }
    }
}

pub struct RunOutcome {
    /// 0 success; 2 non-resolvable sweep cases present; 1 is never returned
    /// here (errors surface as `Err`).
    pub exit_code: i32,
    pub artifacts: Vec<PathBuf>,
}

struct Problem {
    mesh: Mesh,
    system: FullOrderSystem,
    psi: Option<DVector<f64>>,
}

fn build_problem(cfg: &RunConfig) -> Result<Problem, RunError> {
    let g = &cfg.geometry;
    let mesh = build_rect_mesh(
        g.width,
        g.height,
        g.nx,
        g.ny,
        (g.subdomains[0], g.subdomains[1]),
        default_dirichlet,
    )?;
    let m = &cfg.material;
    let material = Material::new(m.e, m.nu, m.rho, m.alpha, m.beta)?;
    let system = assemble_full_system(&mesh, material, &cfg.load.load_spec())?;
    let psi = cfg
        .goal
        .as_ref()
        .map(|spec| interpolate_field(&mesh, &system.dof_map, spec.field()));
    Ok(Problem { mesh, system, psi })
}

/// Canonical description of everything the modal basis depends on.
fn basis_key(cfg: &RunConfig) -> String {
    let g = &cfg.geometry;
    let m = &cfg.material;
    format!(
        "basis-v1|{:e}x{:e}|{}x{}|{}x{}|e={:e}|nu={:e}|rho={:e}|dense={}|seed={}",
        g.width,
        g.height,
        g.nx,
        g.ny,
        g.subdomains[0],
        g.subdomains[1],
        m.e,
        m.nu,
        m.rho,
        cfg.solver.dense_eigen_threshold,
        cfg.solver.seed,
    )
}

fn build_basis(
    cfg: &RunConfig,
    problem: &Problem,
    opts: &RunOptions,
) -> Result<ModalBasis, RunError> {
    let partition = classify_dofs(&problem.mesh, &problem.system.dof_map)?;
    let key = basis_key(cfg);
    if let Some(dir) = &opts.basis_cache {
        match cache::load(dir, &key)? {
            Some(basis) if basis.n_free == problem.system.n_free() => {
                log::info!("modal basis loaded from cache");
                return Ok(basis);
            }
            Some(_) => log::warn!("cached basis shape mismatch; recomputing"),
            None => {}
        }
    }
    let extension = build_extension(&problem.system.k, &partition)?;
    let counts: Vec<usize> = (0..partition.n_subspaces())
        .map(|i| partition.subspace_dim(i))
        .collect();
    let opts_eig = EigenOpts {
        dense_threshold: cfg.solver.dense_eigen_threshold,
        ..EigenOpts::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.solver.seed);
    let basis = compute_modal_basis(
        &problem.system.k,
        &problem.system.m,
        &partition,
        &extension,
        &counts,
        &opts_eig,
        &mut rng,
    )?;
    if let Some(dir) = &opts.basis_cache {
        cache::store(dir, &key, &basis)?;
    }
    Ok(basis)
}

fn full_spectrum(system: &FullOrderSystem) -> Result<Vec<f64>, RunError> {
    let k = linalg::dense_from_csr(&system.k);
    let m = linalg::dense_from_csr(&system.m);
    let (vals, _) = linalg::dense_gen_eigs(&k, &m, system.n_free())?;
    Ok(vals)
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

fn term_name(t: Termination) -> &'static str {
    match t {
        Termination::ToleranceMet => "tolerance_met",
        Termination::BudgetExhausted => "budget_exhausted",
        Termination::NonResolvable => "non_resolvable",
        Termination::MaxIterations => "max_iterations",
    }
}

fn selection_header(n: usize) -> String {
    (0..n).map(|i| format!("m_{i}")).collect::<Vec<_>>().join(",")
}

fn selection_cells(sel: &[usize]) -> String {
    sel.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(",")
}

fn write_file(path: &Path, contents: &str) -> Result<(), RunError> {
    fs::write(path, contents).map_err(|source| RunError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Mode-operative scalar estimate of a record: Ση_J for goal traces, the
/// energy bound otherwise.
fn record_estimate(report: &EstimateReport) -> f64 {
    match &report.eta_j {
        Some(eta) => eta.iter().sum(),
        None => report.energy_bound,
    }
}

fn relative_indicator(report: &EstimateReport) -> f64 {
    if report.eta_a_total() == 0.0 {
        0.0
    } else {
        report.relative_indicator()
    }
}

struct Artifacts {
    out_dir: PathBuf,
    paths: Vec<PathBuf>,
}

impl Artifacts {
    fn new(out_dir: &Path) -> Result<Self, RunError> {
        fs::create_dir_all(out_dir).map_err(|source| RunError::Io {
            path: out_dir.display().to_string(),
            source,
        })?;
        Ok(Self {
            out_dir: out_dir.to_path_buf(),
            paths: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<&Path, RunError> {
        let path = self.out_dir.join(name);
        write_file(&path, contents)?;
        self.paths.push(path);
        Ok(self.paths.last().unwrap())
    }

    fn add(&mut self, path: PathBuf) {
        self.paths.push(path);
    }
}

pub fn run(cfg: &RunConfig, opts: &RunOptions) -> Result<RunOutcome, RunError> {
    let problem = build_problem(cfg)?;
    let mut artifacts = Artifacts::new(&opts.out_dir)?;

    if opts.export_mesh {
        let mut text = Vec::new();
        crate::mesh::write_text(&problem.mesh, &mut text)?;
        artifacts.write("mesh.txt", std::str::from_utf8(&text).expect("ascii mesh"))?;
    }
    if opts.export_system {
        let sys = &problem.system;
        let mut buf = Vec::new();
        linalg::write_matrix_market_sym(&mut buf, &sys.k).map_err(io_err("k.mtx"))?;
        artifacts.write("k.mtx", std::str::from_utf8(&buf).expect("ascii mtx"))?;
        buf.clear();
        linalg::write_matrix_market_sym(&mut buf, &sys.m).map_err(io_err("m.mtx"))?;
        artifacts.write("m.mtx", std::str::from_utf8(&buf).expect("ascii mtx"))?;
        buf.clear();
        linalg::write_matrix_market_vector(&mut buf, &sys.b).map_err(io_err("b.mtx"))?;
        artifacts.write("b.mtx", std::str::from_utf8(&buf).expect("ascii mtx"))?;
    }

    let exit_code = match cfg.mode {
        Mode::Solve => run_solve(cfg, &problem, opts, &mut artifacts)?,
        Mode::Estimate => run_estimate(cfg, &problem, opts, &mut artifacts)?,
        Mode::AdaptGoal => run_adapt(cfg, &problem, opts, &mut artifacts, true)?,
        Mode::AdaptEnergy => run_adapt(cfg, &problem, opts, &mut artifacts, false)?,
        Mode::Sweep => run_sweep(cfg, &problem, opts, &mut artifacts)?,
    };
    Ok(RunOutcome {
        exit_code,
        artifacts: artifacts.paths,
    })
}

fn io_err(name: &'static str) -> impl Fn(std::io::Error) -> RunError {
    move |source| RunError::Io {
        path: name.to_string(),
        source,
    }
}

fn export_reduced(
    artifacts: &mut Artifacts,
    model: &ReducedModel,
) -> Result<(), RunError> {
    let mut buf = Vec::new();
    linalg::write_matrix_market_vector(&mut buf, &model.km_diag).map_err(io_err("km_diag.mtx"))?;
    artifacts.write("km_diag.mtx", std::str::from_utf8(&buf).expect("ascii mtx"))?;
    buf.clear();
    linalg::write_matrix_market_dense(&mut buf, &model.mm).map_err(io_err("mm.mtx"))?;
    artifacts.write("mm.mtx", std::str::from_utf8(&buf).expect("ascii mtx"))?;
    buf.clear();
    linalg::write_matrix_market_vector(&mut buf, &model.bm).map_err(io_err("bm.mtx"))?;
    artifacts.write("bm.mtx", std::str::from_utf8(&buf).expect("ascii mtx"))?;
    buf.clear();
    linalg::write_matrix_market_dense(&mut buf, &model.vm).map_err(io_err("vm.mtx"))?;
    artifacts.write("vm.mtx", std::str::from_utf8(&buf).expect("ascii mtx"))?;
    Ok(())
}

fn run_solve(
    cfg: &RunConfig,
    problem: &Problem,
    opts: &RunOptions,
    artifacts: &mut Artifacts,
) -> Result<i32, RunError> {
    let sys = &problem.system;
    let mut csv = String::from("omega2,dofs,energy_norm,residual\n");
    for w2 in cfg.omega2_values()? {
        let omega = w2.sqrt();
        let u = solve_full_response(sys, omega)?;
        let nrm = energy_norm(&sys.k, &u)?;
        let (ck, cm) = linalg::response_coefficients(omega, sys.material.alpha, sys.material.beta);
        let b = sys.b.map(|v| Complex64::new(v, 0.0));
        let r = &b - linalg::complex_matvec(&sys.k, &sys.m, ck, cm, &u);
        let rel = if sys.b.norm() > 0.0 {
            r.norm() / sys.b.norm()
        } else {
            r.norm()
        };
        writeln!(csv, "{},{},{},{}", fmt(w2), sys.n_free(), fmt(nrm), fmt(rel)).unwrap();
    }
    artifacts.write("report.csv", &csv)?;
    if opts.export_reduced {
        let basis = build_basis(cfg, problem, opts)?;
        let adapt_cfg = cfg.adapt.resolve(&basis)?;
        let selection = ReducedSelection::new(adapt_cfg.initial, &basis)?;
        export_reduced(artifacts, &reduced::project(sys, &basis, &selection))?;
    }
    Ok(0)
}

fn stability(
    omega: f64,
    material: &Material,
    spectrum: Option<&[f64]>,
    model: &ReducedModel,
) -> Result<StabilityFactor, RunError> {
    match spectrum {
        Some(vals) => {
            Ok(stability_factor(vals, omega, material, SpectrumSource::FullSpectrum)?)
        }
        None => {
            let vals = reduced_eigenvalues(model)?;
            Ok(stability_factor(&vals, omega, material, SpectrumSource::ReducedSpectrum)?)
        }
    }
}

fn run_estimate(
    cfg: &RunConfig,
    problem: &Problem,
    opts: &RunOptions,
    artifacts: &mut Artifacts,
) -> Result<i32, RunError> {
    let sys = &problem.system;
    let basis = build_basis(cfg, problem, opts)?;
    let adapt_cfg = cfg.adapt.resolve(&basis)?;
    let selection = ReducedSelection::new(adapt_cfg.initial.clone(), &basis)?;
    let model = reduced::project(sys, &basis, &selection);
    let spectrum = if cfg.solver.full_spectrum_s {
        Some(full_spectrum(sys)?)
    } else {
        None
    };

    let n = basis.n_subspaces();
    let mut csv = format!(
        "omega2,dofs,{},energy_norm,i1,i2,s_omega,energy_bound,rel_bound,eta_j_total,\
         true_error,efficiency_index\n",
        selection_header(n)
    );
    for w2 in cfg.omega2_values()? {
        let omega = w2.sqrt();
        let sol = reduced::solve_reduced(&model, omega, &sys.material)?;
        let residual = algebraic_residual(sys, &model, &sol)?;
        let norms = subspace_residual_norms(&residual, &basis, &selection, adapt_cfg.tail_depth)?;
        let s = stability(omega, &sys.material, spectrum.as_deref(), &model)?;
        let reference = if cfg.reference_enabled() {
            Some(solve_full_response(sys, omega)?)
        } else {
            None
        };
        let report = crate::estimate::energy_estimate(
            &model,
            &basis,
            &norms,
            &s,
            &sol,
            reference.as_ref().map(|u| (sys, u)),
        )?;
        let eta_j_total = match &problem.psi {
            Some(psi) => {
                let space_sel;
                let space = if cfg.solver.exact_dual {
                    DualSpace::Full
                } else {
                    space_sel = enlarged_selection(&basis, &selection, adapt_cfg.dual_depth)?;
                    DualSpace::Reduced(&space_sel)
                };
                let phi = solve_dual(sys, &basis, psi, omega, space)?;
                let gi = goal_indicators(&norms, &basis, &sys.k, &phi);
                Some(gi.estimate())
            }
            None => None,
        };
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            fmt(w2),
            selection.total(),
            selection_cells(selection.counts()),
            fmt(report.solution_energy_norm),
            fmt(report.i1),
            fmt(report.i2),
            fmt(report.s.s),
            fmt(report.energy_bound),
            fmt(report.relative_bound()),
            opt(eta_j_total),
            opt(report.true_error),
            opt(report.efficiency_index),
        )
        .unwrap();
    }
    artifacts.write("report.csv", &csv)?;
    if opts.export_reduced {
        export_reduced(artifacts, &model)?;
    }
    Ok(0)
}

fn write_trace_csv(trace: &AdaptTrace, n: usize) -> String {
    let mut csv = format!(
        "iteration,dofs,{},estimate,error,efficiency_index,s_omega\n",
        selection_header(n)
    );
    for (it, rec) in trace.iterations.iter().enumerate() {
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            it + 1,
            rec.dofs,
            selection_cells(&rec.selection),
            fmt(record_estimate(&rec.report)),
            opt(rec.report.true_error),
            opt(rec.report.efficiency_index),
            fmt(rec.report.s.s),
        )
        .unwrap();
    }
    csv
}

fn run_adapt(
    cfg: &RunConfig,
    problem: &Problem,
    opts: &RunOptions,
    artifacts: &mut Artifacts,
    goal: bool,
) -> Result<i32, RunError> {
    let sys = &problem.system;
    let basis = build_basis(cfg, problem, opts)?;
    let mut adapt_cfg = cfg.adapt.resolve(&basis)?;
    adapt_cfg.track_truth = cfg.reference_enabled();
    adapt_cfg.exact_dual = cfg.solver.exact_dual;
    let spectrum = if cfg.solver.full_spectrum_s {
        Some(full_spectrum(sys)?)
    } else {
        None
    };
    let bundle = ProblemBundle {
        system: sys,
        basis: &basis,
        full_spectrum: spectrum.as_deref(),
    };
    let w2 = cfg.omega2_values()?[0];
    let omega = w2.sqrt();
    let trace = if goal {
        let psi = problem.psi.as_ref().ok_or(RunError::GoalMissing { mode: "adapt-goal" })?;
        adapt_goal(&bundle, psi, omega, &adapt_cfg)?
    } else {
        adapt_energy(&bundle, omega, &adapt_cfg)?
    };

    let n = basis.n_subspaces();
    let last = trace.last();
    let mut report = format!(
        "omega2,iterations,termination,dofs,{},estimate,rel_estimate,true_error,\
         efficiency_index\n",
        selection_header(n)
    );
    writeln!(
        report,
        "{},{},{},{},{},{},{},{},{}",
        fmt(w2),
        trace.iterations.len(),
        term_name(trace.termination),
        last.dofs,
        selection_cells(&last.selection),
        fmt(record_estimate(&last.report)),
        fmt(relative_indicator(&last.report)),
        opt(last.report.true_error),
        opt(last.report.efficiency_index),
    )
    .unwrap();
    artifacts.write("report.csv", &report)?;
    artifacts.write("trace.csv", &write_trace_csv(&trace, n))?;

    let svg_path = artifacts.out_dir.join("convergence.svg");
    emit_convergence_plot(&trace, &svg_path)?;
    artifacts.add(svg_path);

    if opts.export_reduced {
        let selection = ReducedSelection::new(trace.final_selection().to_vec(), &basis)?;
        export_reduced(artifacts, &reduced::project(sys, &basis, &selection))?;
    }
    Ok(0)
}

fn run_sweep(
    cfg: &RunConfig,
    problem: &Problem,
    opts: &RunOptions,
    artifacts: &mut Artifacts,
) -> Result<i32, RunError> {
    let sys = &problem.system;
    let basis = build_basis(cfg, problem, opts)?;
    let mut adapt_cfg = cfg.adapt.resolve(&basis)?;
    adapt_cfg.track_truth = cfg.reference_enabled();
    // Surface configuration errors before the per-case loop can mask them.
    adapt_cfg.validate(&basis)?;
    let spectrum = if cfg.solver.full_spectrum_s {
        Some(full_spectrum(sys)?)
    } else {
        None
    };
    let bundle = ProblemBundle {
        system: sys,
        basis: &basis,
        full_spectrum: spectrum.as_deref(),
    };
    let omegas = cfg.omega2_values()?;
    let cases: Vec<SweepCase> = omegas.iter().map(|w2| SweepCase::new(w2.sqrt())).collect();
    let outcomes = adapt_sweep(&bundle, &cases, &adapt_cfg);

    let n = basis.n_subspaces();
    let mut report = format!(
        "omega2,iterations,termination,dofs,{},rel_estimate,s_omega,rel_error,\
         efficiency_index\n",
        selection_header(n)
    );
    let mut trace_csv = format!(
        "case,omega2,iteration,dofs,{},rel_estimate,s_omega\n",
        selection_header(n)
    );
    let mut any_error = false;
    let mut any_non_resolvable = false;
    for (case, (w2, outcome)) in omegas.iter().zip(&outcomes).enumerate() {
        match outcome {
            Ok(trace) => {
                if trace.termination == Termination::NonResolvable {
                    any_non_resolvable = true;
                }
                let last = trace.last();
                let rel_error = last
                    .report
                    .true_error
                    .map(|t| t / last.report.solution_energy_norm.max(f64::MIN_POSITIVE));
                writeln!(
                    report,
                    "{},{},{},{},{},{},{},{},{}",
                    fmt(*w2),
                    trace.iterations.len(),
                    term_name(trace.termination),
                    last.dofs,
                    selection_cells(&last.selection),
                    fmt(relative_indicator(&last.report)),
                    fmt(last.report.s.s),
                    opt(rel_error),
                    opt(last.report.efficiency_index),
                )
                .unwrap();
                for (it, rec) in trace.iterations.iter().enumerate() {
                    writeln!(
                        trace_csv,
                        "{},{},{},{},{},{},{}",
                        case,
                        fmt(*w2),
                        it + 1,
                        rec.dofs,
                        selection_cells(&rec.selection),
                        fmt(relative_indicator(&rec.report)),
                        fmt(rec.report.s.s),
                    )
                    .unwrap();
                }
            }
            Err(e) => {
                any_error = true;
                log::error!("sweep case {case} (ω² = {w2}) failed: {e}");
                let empty_m = vec![String::new(); n].join(",");
                writeln!(report, "{},,error,,{empty_m},,,,", fmt(*w2)).unwrap();
            }
        }
    }
    artifacts.write("report.csv", &report)?;
    artifacts.write("trace.csv", &trace_csv)?;
    if opts.export_reduced {
        if let Some(sel) = outcomes
            .iter()
            .rev()
            .find_map(|o| o.as_ref().ok().map(|t| t.final_selection().to_vec()))
        {
            let selection = ReducedSelection::new(sel, &basis)?;
            export_reduced(artifacts, &reduced::project(sys, &basis, &selection))?;
        }
    }
    Ok(if any_error {
        1
    } else if any_non_resolvable {
        2
    } else {
        0
    })
}
