//! Homogenization experiments driven by an [`ExperimentConfig`].
//!
//! Every norm is taken on the hole-free grid of the run, with the
//! perforated velocity extended by zero into the holes.

pub mod config;
pub mod plot;
pub mod report;

use std::f64::consts::PI;
use std::time::Instant;

pub use config::{
    BrinkmanSpec, CapacitySpec, DensitySpec, EvolutionSpec, ExperimentConfig, ExperimentKind, ForcingSpec, MeshKind,
    VelocitySpec,
};
pub use report::{emit_report, ExperimentReport, Value};

use crate::capacity::{brinkman_matrix_with, capacity_record, BrinkmanMatrix, CellOptions};
use crate::error::Result;
use crate::evolution::{divergence_free, face_density, run_with, DtPolicy, FlowState, InitialData, RunOptions};
use crate::field::{CellField, FaceField, ForcingField};
use crate::geometry::{enumerate_holes, rasterize, DomainSpec, GridMask, HoleLattice};
use crate::grid::Grid;
use crate::mac::Side;
use crate::stokes::{Reflections, SteadySolver, NO_REFLECTIONS};

/// Grade of the hole resolution in cells per radius.
pub fn resolution_quality(cells_per_radius: f64) -> &'static str {
    if cells_per_radius >= 8.0 {
        "resolved"
    } else if cells_per_radius >= 4.0 {
        "marginal"
    } else {
        "coarse"
    }
}

fn unit_coords(domain: &DomainSpec, x: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|a| (x[a] - domain.lo[a]) / domain.side(a))
}

/// Normalized swirl `curl(psi e3)`, `psi = sin^2(pi x) sin^2(pi y) sin(pi z)`.
fn swirl(y: [f64; 3]) -> [f64; 3] {
    let (sx, cx) = (PI * y[0]).sin_cos();
    let (sy, cy) = (PI * y[1]).sin_cos();
    let sz = (PI * y[2]).sin();
    [2.0 * PI * sx * sx * sy * cy * sz, -2.0 * PI * sx * cx * sy * sy * sz, 0.0]
}

impl ForcingSpec {
    pub fn sample(&self, domain: &DomainSpec, grid: &Grid) -> ForcingField {
        match *self {
            ForcingSpec::Zero => FaceField::zeros(grid),
            ForcingSpec::Constant { value } => FaceField::constant(grid, value),
            ForcingSpec::Swirl { amplitude } => FaceField::from_fn(grid, |x| {
                let v = swirl(unit_coords(domain, x));
                [amplitude * v[0], amplitude * v[1], amplitude * v[2]]
            }),
        }
    }

    /// Reflections under which the steady flow driven by this forcing keeps
    /// its symmetry (none for forcings without a matching parity).
    pub fn reflections(&self) -> Reflections {
        match self {
            ForcingSpec::Swirl { .. } => [Some(Side::AntiMirror), Some(Side::AntiMirror), Some(Side::Mirror)],
            ForcingSpec::Zero | ForcingSpec::Constant { .. } => NO_REFLECTIONS,
        }
    }
}

/// The friction matrix of the configuration (computing it if requested).
pub fn resolve_brinkman(cfg: &ExperimentConfig) -> Result<(BrinkmanMatrix, bool)> {
    Ok(match &cfg.brinkman {
        BrinkmanSpec::Computed { radii, cells_per_radius, tol } => {
            let eps = cfg.epsilons.first().copied().unwrap_or(1.0);
            let opts = CellOptions::graded(*cells_per_radius, *tol);
            (brinkman_matrix_with(&cfg.shape, eps, cfg.alpha, radii, &opts)?.0, true)
        }
        BrinkmanSpec::Isotropic { value } => (BrinkmanMatrix::isotropic(*value), false),
        BrinkmanSpec::Matrix { entries } => (BrinkmanMatrix { entries: *entries, ..BrinkmanMatrix::zero() }, false),
    })
}

fn family_member(cfg: &ExperimentConfig, i: usize) -> Result<(HoleLattice, GridMask, f64)> {
    let eps = cfg.epsilons[i];
    let n = cfg.resolutions[i];
    let lat = enumerate_holes(cfg.domain, eps, cfg.alpha, cfg.shape)?;
    let mask = rasterize(&lat, n)?;
    let h = mask.h;
    let cpr = lat.hole_shape().inner_radius() / h;
    Ok((lat, mask, cpr))
}

fn folding(cfg: &ExperimentConfig, mask: &GridMask, d: &BrinkmanMatrix) -> Reflections {
    let refl = cfg.forcing.reflections();
    if !cfg.symmetry || refl == NO_REFLECTIONS {
        return NO_REFLECTIONS;
    }
    let axes = [refl[0].is_some(), refl[1].is_some(), refl[2].is_some()];
    let coupled = (0..3).any(|j| (0..3).any(|l| j != l && d.entries[j][l] != 0.0));
    if coupled || mask.folded(axes).is_none() {
        return NO_REFLECTIONS;
    }
    refl
}

fn start(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    Ok(ExperimentReport::new(cfg.kind, cfg.hash()))
}

/// Steady Stokes flow in each `Omega_eps` against the Brinkman and the
/// hole-blind (no friction) limit models on the same grid.
pub fn run_stationary_homogenization(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut report = start(cfg)?;
    let t0 = Instant::now();
    if matches!(cfg.brinkman, BrinkmanSpec::Computed { .. }) {
        log::info!("computing the friction matrix from cell problems");
    }
    let (d, computed) = match resolve_brinkman(cfg) {
        Ok(x) => x,
        Err(e) if e.is_solver_failure() => {
            report.partial = Some(format!("friction matrix: {e}"));
            return Ok(report);
        }
        Err(e) => return Err(e),
    };
    if computed {
        report.brinkman = Some(d.clone());
        report.timings.push(("brinkman".into(), t0.elapsed().as_secs_f64()));
    }
    for i in 0..cfg.epsilons.len() {
        log::info!("steady run at epsilon = {} on {}^3 cells", cfg.epsilons[i], cfg.resolutions[i]);
        let t = Instant::now();
        match stationary_row(cfg, i, &d) {
            Ok(row) => report.rows.push(row),
            Err(e) if e.is_solver_failure() => {
                report.partial = Some(format!("epsilon {}: {e}", cfg.epsilons[i]));
                break;
            }
            Err(e) => return Err(e),
        }
        report.timings.push((format!("epsilon={}", cfg.epsilons[i]), t.elapsed().as_secs_f64()));
    }
    Ok(report)
}

fn stationary_row(cfg: &ExperimentConfig, i: usize, d: &BrinkmanMatrix) -> Result<Vec<Value>> {
    let (lat, mask, cpr) = family_member(cfg, i)?;
    let n = cfg.resolutions[i];
    let refl = folding(cfg, &mask, d);
    let tol = cfg.tol;
    let (ve, ve_stats) = {
        let solver = SteadySolver::perforated_folded(&mask, cfg.mu, refl)?;
        let f = cfg.forcing.sample(&cfg.domain, solver.grid());
        let sol = solver.solve(&f, tol)?;
        (sol.velocity, sol.stats)
    };
    let brinkman = SteadySolver::brinkman_folded(&cfg.domain, n, cfg.mu, d, refl)?;
    let f = cfg.forcing.sample(&cfg.domain, brinkman.grid());
    let vb = brinkman.solve(&f, tol)?;
    drop(brinkman);
    let blind = SteadySolver::brinkman_folded(&cfg.domain, n, cfg.mu, &BrinkmanMatrix::zero(), refl)?;
    let v0 = blind.solve(&f, tol)?;
    let rel = |a: &FaceField, b: &FaceField| -> Result<f64> {
        let nb = b.l2_norm();
        let dist = a.l2_distance(b)?;
        Ok(if nb > 0.0 { dist / nb } else { dist })
    };
    let folded = refl.iter().filter(|r| r.is_some()).count();
    // the squared norm doubles with every reflected axis
    let full = 2f64.powi(folded as i32).sqrt();
    Ok(vec![
        cfg.epsilons[i].into(),
        n.into(),
        lat.len().into(),
        cpr.into(),
        resolution_quality(cpr).into(),
        folded.into(),
        rel(&ve, &vb.velocity)?.into(),
        rel(&ve, &v0.velocity)?.into(),
        (full * ve.l2_norm()).into(),
        (full * vb.velocity.l2_norm()).into(),
        ve_stats.iterations.into(),
        vb.stats.iterations.into(),
        ve_stats.rel_momentum.max(vb.stats.rel_momentum).max(v0.stats.rel_momentum).into(),
        ve_stats.rel_divergence.max(vb.stats.rel_divergence).max(v0.stats.rel_divergence).into(),
    ])
}

fn initial_density(spec: &DensitySpec, domain: &DomainSpec, mask: &GridMask) -> CellField {
    let g = mask.grid();
    match *spec {
        DensitySpec::Uniform { value } => CellField::constant(&g, value),
        DensitySpec::Layers { low, high, solid } => {
            let mut rho = CellField::from_fn(&g, |x| if unit_coords(domain, x)[2] > 0.5 { high } else { low });
            for (c, r) in rho.values.iter_mut().enumerate() {
                if mask.is_solid(c) {
                    *r = solid;
                }
            }
            rho
        }
    }
}

fn initial_data(ev: &EvolutionSpec, domain: &DomainSpec, mask: &GridMask, tol: f64) -> Result<InitialData> {
    let g = mask.grid();
    let u0 = match ev.velocity {
        VelocitySpec::Rest => FaceField::zeros(&g),
        VelocitySpec::Swirl { amplitude } => {
            let mut u = divergence_free(mask, |x| swirl(unit_coords(domain, x)), 0.1 * tol)?;
            u.scale(amplitude);
            u
        }
    };
    Ok(InitialData { rho0: initial_density(&ev.density, domain, mask), u0 })
}

/// `sqrt(rho_f) u` on faces.
fn momentum_root(s: &FlowState) -> FaceField {
    let rf = face_density(&s.rho.grid, &s.rho.values);
    let mut m = s.u.clone();
    for d in 0..3 {
        for (v, r) in m.u[d].iter_mut().zip(&rf[d]) {
            *v *= r.sqrt();
        }
    }
    m
}

struct Recorded {
    states: Vec<(FaceField, CellField)>,
    ledger: crate::evolution::EnergyLedger,
    steps: usize,
}

fn evolve(cfg: &ExperimentConfig, mask: &GridMask, d: Option<&BrinkmanMatrix>, opts: &RunOptions) -> Result<Recorded> {
    let ev = cfg.evolution.as_ref().expect("validated");
    let init = initial_data(ev, &cfg.domain, mask, cfg.tol)?;
    let f = cfg.forcing.sample(&cfg.domain, &mask.grid());
    let mut states = Vec::new();
    let (ledger, steps) = run_with(mask, &init, &f, cfg.mu, d, opts, |s| {
        states.push((momentum_root(s), s.rho.clone()));
        Ok(())
    })?;
    Ok(Recorded { states, ledger, steps })
}

/// Space-time `L2` distance of `sqrt(rho) u` by the trapezoid rule over the
/// output times, and the largest `L1` distance of the densities.
fn trajectory_distance(a: &Recorded, b: &Recorded, dt: f64) -> Result<(f64, f64)> {
    let mut sq = Vec::with_capacity(a.states.len());
    let mut rho_err: f64 = 0.0;
    for ((ma, ra), (mb, rb)) in a.states.iter().zip(&b.states) {
        sq.push(ma.l2_distance(mb)?.powi(2));
        rho_err = rho_err.max(ra.l1_distance(rb)?);
    }
    let n = sq.len();
    let integral = if n < 2 { 0.0 } else { dt * (0.5 * (sq[0] + sq[n - 1]) + sq[1..n - 1].iter().sum::<f64>()) };
    Ok((integral.sqrt(), rho_err))
}

/// Non-homogeneous flow in each `Omega_eps` against the Brinkman and the
/// hole-blind evolutions on the hole-free grid.
pub fn run_evolution_homogenization(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut report = start(cfg)?;
    let t0 = Instant::now();
    if matches!(cfg.brinkman, BrinkmanSpec::Computed { .. }) {
        log::info!("computing the friction matrix from cell problems");
    }
    let (d, computed) = match resolve_brinkman(cfg) {
        Ok(x) => x,
        Err(e) if e.is_solver_failure() => {
            report.partial = Some(format!("friction matrix: {e}"));
            return Ok(report);
        }
        Err(e) => return Err(e),
    };
    if computed {
        report.brinkman = Some(d.clone());
        report.timings.push(("brinkman".into(), t0.elapsed().as_secs_f64()));
    }
    for i in 0..cfg.epsilons.len() {
        log::info!("evolution runs at epsilon = {} on {}^3 cells", cfg.epsilons[i], cfg.resolutions[i]);
        let t = Instant::now();
        match evolution_row(cfg, i, &d, &mut report) {
            Ok(row) => report.rows.push(row),
            Err(e) if e.is_solver_failure() => {
                report.partial = Some(format!("epsilon {}: {e}", cfg.epsilons[i]));
                break;
            }
            Err(e) => return Err(e),
        }
        report.timings.push((format!("epsilon={}", cfg.epsilons[i]), t.elapsed().as_secs_f64()));
    }
    Ok(report)
}

fn evolution_row(
    cfg: &ExperimentConfig,
    i: usize,
    d: &BrinkmanMatrix,
    report: &mut ExperimentReport,
) -> Result<Vec<Value>> {
    let ev = cfg.evolution.as_ref().expect("validated");
    let (lat, mask, cpr) = family_member(cfg, i)?;
    let n = cfg.resolutions[i];
    let full = GridMask::hole_free(cfg.domain, n)?;
    let opts = RunOptions::new(ev.t_end, ev.snapshots, DtPolicy::Adaptive { cfl: ev.cfl, max_dt: ev.max_dt }, cfg.tol);
    let perforated = evolve(cfg, &mask, None, &opts)?;
    let limit = evolve(cfg, &full, Some(d), &opts)?;
    let blind = evolve(cfg, &full, None, &opts)?;
    let dt_out = ev.t_end / ev.snapshots as f64;
    let (e_b, rho_b) = trajectory_distance(&perforated, &limit, dt_out)?;
    let (e_0, _) = trajectory_distance(&perforated, &blind, dt_out)?;
    let l = &perforated.ledger;
    let max_div = l.rows.iter().map(|r| r.div_residual).fold(0.0, f64::max);
    let row = vec![
        cfg.epsilons[i].into(),
        n.into(),
        lat.len().into(),
        cpr.into(),
        resolution_quality(cpr).into(),
        e_b.into(),
        e_0.into(),
        rho_b.into(),
        perforated.states.len().into(),
        perforated.steps.into(),
        max_div.into(),
        l.residual().into(),
        l.max_mass_drift().into(),
        l.energy_excess().into(),
    ];
    let label = format!("eps{i}");
    report.ledgers.push((format!("{label}_perforated"), perforated.ledger));
    report.ledgers.push((format!("{label}_brinkman"), limit.ledger));
    Ok(row)
}

/// Capacities for every (shape, radius, resolution), plus the extrapolated
/// friction matrix of the configured shape when requested.
pub fn run_capacity_study(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut report = start(cfg)?;
    let cap = cfg.capacity.as_ref().expect("validated");
    let shapes = if cap.shapes.is_empty() { vec![cfg.shape] } else { cap.shapes.clone() };
    let mesh_name = match cap.mesh {
        MeshKind::Uniform => "uniform",
        MeshKind::Graded => "graded",
    };
    'outer: for shape in &shapes {
        for &r in &cap.radii {
            for &n in &cap.resolutions {
                let opts = match cap.mesh {
                    MeshKind::Uniform => CellOptions::uniform(n, cfg.tol),
                    MeshKind::Graded => CellOptions::graded(n, cfg.tol),
                };
                let t = Instant::now();
                let rec = match capacity_record(shape, r, n, &opts) {
                    Ok(rec) => rec,
                    Err(e) if e.is_solver_failure() => {
                        report.partial = Some(format!("{} r={r} N={n}: {e}", shape.to_text()));
                        break 'outer;
                    }
                    Err(e) => return Err(e),
                };
                report.timings.push((format!("{} r={r} N={n}", shape.to_text()), t.elapsed().as_secs_f64()));
                let mut row: Vec<Value> = vec![shape.to_text().as_str().into(), r.into(), n.into()];
                row.extend(rec.capacity.entries.iter().flatten().map(|v| Value::Num(*v)));
                let rm = rec.residuals.iter().map(|x| x.0).fold(0.0, f64::max);
                let rd = rec.residuals.iter().map(|x| x.1).fold(0.0, f64::max);
                row.extend([rm.into(), rd.into(), rec.iterations.iter().sum::<usize>().into(), rec.cells.into()]);
                row.push(mesh_name.into());
                report.rows.push(row);
            }
        }
    }
    if cap.extrapolate && report.partial.is_none() {
        let t = Instant::now();
        match resolve_brinkman(cfg) {
            Ok((d, _)) => report.brinkman = Some(d),
            Err(e) if e.is_solver_failure() => report.partial = Some(format!("friction matrix: {e}")),
            Err(e) => return Err(e),
        }
        report.timings.push(("brinkman".into(), t.elapsed().as_secs_f64()));
    }
    Ok(report)
}

/// Runs the experiment named by `cfg.kind`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    match cfg.kind {
        ExperimentKind::CapacityStudy => run_capacity_study(cfg),
        ExperimentKind::StationaryHomogenization => run_stationary_homogenization(cfg),
        ExperimentKind::EvolutionHomogenization => run_evolution_homogenization(cfg),
    }
}
