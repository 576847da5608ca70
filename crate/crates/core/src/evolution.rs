//! Time stepping of non-homogeneous incompressible flow in a perforated box
//! and of its Brinkman limit.
//!
//! One step from `(rho^n, u^n)`:
//!
//! 1. conservative first-order upwind update of the density with mass
//!    fluxes `F = area * u * rho_upwind`;
//! 2. explicit upwind advection of momentum on the staggered control
//!    volumes, whose mass fluxes are averages of the cell fluxes of step 1 so
//!    that the staggered densities obey the same discrete mass balance;
//! 3. implicit viscous (and friction) step with density `rho^{n+1}` and the
//!    forcing `rho f`;
//! 4. projection `u = u* - dt / rho_f grad phi` onto discretely
//!    divergence-free fields.
//!
//! Under the step restriction of [`Evolver::stable_dt`] steps 1 and 2 are
//! convex combinations, which gives the density maximum principle and a
//! discrete energy inequality: the kinetic energy never exceeds the initial
//! energy plus the work of the forcing minus the dissipation recorded in the
//! ledger (up to solver tolerances).

use serde::{Deserialize, Serialize};

use crate::capacity::BrinkmanMatrix;
use crate::error::{Error, Result};
use crate::field::{CellField, FaceField, ForcingField, PressureField, VelocityField};
use crate::geometry::GridMask;
use crate::grid::Grid;
use crate::linalg::{pcg, Multigrid, Stencil};
use crate::mac::{MacParams, MacSystem};
use crate::par;

/// Largest admissible outflow number `dt * sum_out(area u) / V` of a cell.
pub const CFL_LIMIT: f64 = 1.0;

const MAX_ITERATIONS: usize = 2000;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub rho: CellField,
    pub u: VelocityField,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialData {
    pub rho0: CellField,
    pub u0: VelocityField,
}

impl InitialData {
    /// Checks the data against `mask`: matching grid, positive finite
    /// density, one density value on all solid cells, velocity vanishing on
    /// solid and boundary faces, relative divergence at most `tol`.
    pub fn validate(&self, mask: &GridMask, tol: f64) -> Result<()> {
        let grid = mask.grid();
        if self.rho0.grid != grid || self.u0.grid != grid {
            return Err(Error::ShapeMismatch("initial data must live on the mask grid".into()));
        }
        if self.rho0.values.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::InvalidArgument("initial density must be positive and finite".into()));
        }
        if self.u0.u.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("initial velocity must be finite".into()));
        }
        let mut solid_rho = None;
        for (c, r) in self.rho0.values.iter().enumerate() {
            if mask.is_solid(c) {
                match solid_rho {
                    None => solid_rho = Some(*r),
                    Some(s) if s != *r => {
                        return Err(Error::InvalidArgument("initial density must be one constant on the holes".into()))
                    }
                    _ => {}
                }
            }
        }
        let dims = grid.dims();
        for d in 0..3 {
            let fd = dims.faces(d);
            for (idx, v) in self.u0.u[d].iter().enumerate() {
                let f = fd.coords(idx);
                let fixed = mask.face_class(d, f) != crate::geometry::FaceClass::Fluid;
                if fixed && *v != 0.0 {
                    return Err(Error::InvalidArgument(
                        "initial velocity must vanish on solid and boundary faces".into(),
                    ));
                }
            }
        }
        let div = relative_divergence(mask, &self.u0)?;
        if div > tol {
            return Err(Error::InvalidArgument(format!(
                "initial velocity is not divergence free (relative divergence {div:.3e} > {tol:.1e})"
            )));
        }
        Ok(())
    }
}

/// `|div u|_{L2} / |grad u|_{L2}` of a velocity on `mask` (the divergence
/// alone for a field with vanishing gradient).
pub fn relative_divergence(mask: &GridMask, u: &VelocityField) -> Result<f64> {
    let solid = (0..mask.cells.len()).map(|c| mask.is_solid(c)).collect();
    let sys = MacSystem::new(MacParams::new(mask.grid(), solid, 1.0))?;
    let (div, grad) = div_and_grad(&sys, &u.u);
    Ok(ratio(div, grad))
}

fn ratio(div: f64, grad: f64) -> f64 {
    if grad > 0.0 {
        div / grad
    } else {
        div
    }
}

fn div_and_grad(sys: &MacSystem, u: &[Vec<f64>; 3]) -> (f64, f64) {
    let s = [&u[0][..], &u[1][..], &u[2][..]];
    let div = sys.div_full(s);
    let dims = sys.dims;
    let div_l2 = par::sum_by(dims.len(), |c| {
        if sys.fluid[c] {
            div[c] * div[c] / sys.grid.cell_volume(dims.coords(c))
        } else {
            0.0
        }
    })
    .sqrt();
    (div_l2, sys.grad_inner(s, s).sqrt())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub t: f64,
    pub kinetic: f64,
    /// Cumulative viscous (plus friction) dissipation.
    pub dissipation: f64,
    /// Cumulative work of the forcing.
    pub work: f64,
    pub mass: f64,
    pub min_rho: f64,
    pub max_rho: f64,
    pub div_residual: f64,
}

pub const LEDGER_HEADER: &str = "t,kinetic,dissipation,work,mass,min_rho,max_rho,div_residual";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub initial_energy: f64,
    pub initial_mass: f64,
    pub initial_min_rho: f64,
    pub initial_max_rho: f64,
    /// One row per step, starting with the initial state.
    pub rows: Vec<LedgerRow>,
}

impl EnergyLedger {
    /// Largest violation of `kinetic + dissipation <= initial + work`,
    /// relative to `initial + |work| + dissipation` (zero when satisfied).
    pub fn residual(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| {
                let lhs = r.kinetic + r.dissipation;
                let rhs = self.initial_energy + r.work;
                let scale = self.initial_energy + r.work.abs() + r.dissipation;
                if scale > 0.0 {
                    ((lhs - rhs) / scale).max(0.0)
                } else {
                    0.0
                }
            })
            .fold(0.0, f64::max)
    }

    /// Largest relative excess of the kinetic energy over the initial energy
    /// plus the cumulative work.
    pub fn energy_excess(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| {
                let bound = self.initial_energy + r.work;
                let scale = self.initial_energy + r.work.abs();
                if scale > 0.0 {
                    ((r.kinetic - bound) / scale).max(0.0)
                } else {
                    r.kinetic.max(0.0)
                }
            })
            .fold(0.0, f64::max)
    }

    pub fn max_mass_drift(&self) -> f64 {
        self.rows.iter().map(|r| ((r.mass - self.initial_mass) / self.initial_mass).abs()).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(LEDGER_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}\n",
                r.t, r.kinetic, r.dissipation, r.work, r.mass, r.min_rho, r.max_rho, r.div_residual
            ));
        }
        s
    }
}

/// Mass fluxes `area * u * rho_upwind` on interior faces (zero on the box).
fn mass_fluxes(grid: &Grid, rho: &[f64], u: &[Vec<f64>; 3]) -> [Vec<f64>; 3] {
    let dims = grid.dims();
    let comp = |d: usize| {
        let fd = dims.faces(d);
        let ud = &u[d];
        par::collect(fd.len(), |idx| {
            let f = fd.coords(idx);
            if f[d] == 0 || f[d] == dims.0[d] || ud[idx] == 0.0 {
                return 0.0;
            }
            let mut lo = f;
            lo[d] -= 1;
            let r = if ud[idx] > 0.0 { rho[dims.index_of(lo)] } else { rho[dims.index_of(f)] };
            grid.face_area(d, f) * ud[idx] * r
        })
    };
    [comp(0), comp(1), comp(2)]
}

/// Largest `sum_out(area * u) / V` over the cells.
fn outflow_rate(u: &VelocityField) -> f64 {
    let g = &u.grid;
    let dims = g.dims();
    par::max_by(dims.len(), |c| {
        let cc = dims.coords(c);
        let mut s = 0.0;
        for d in 0..3 {
            let fd = dims.faces(d);
            let lo = fd.index_of(cc);
            let area = g.face_area(d, cc);
            s += area * (u.u[d][lo + fd.stride(d)].max(0.0) + (-u.u[d][lo]).max(0.0));
        }
        s / g.cell_volume(cc)
    })
    .max(0.0)
}

/// Largest `sum over all faces of area * |u| / V`.
fn total_rate(u: &VelocityField) -> f64 {
    let g = &u.grid;
    let dims = g.dims();
    par::max_by(dims.len(), |c| {
        let cc = dims.coords(c);
        let mut s = 0.0;
        for d in 0..3 {
            let fd = dims.faces(d);
            let lo = fd.index_of(cc);
            s += g.face_area(d, cc) * (u.u[d][lo + fd.stride(d)].abs() + u.u[d][lo].abs());
        }
        s / g.cell_volume(cc)
    })
    .max(0.0)
}

fn check_boundary_flux(u: &VelocityField) -> Result<()> {
    let dims = u.dims();
    for d in 0..3 {
        let fd = dims.faces(d);
        for (idx, v) in u.u[d].iter().enumerate() {
            let f = fd.coords(idx);
            if (f[d] == 0 || f[d] == dims.0[d]) && *v != 0.0 {
                return Err(Error::InvalidArgument("normal velocity must vanish on the box".into()));
            }
        }
    }
    Ok(())
}

fn update_density(grid: &Grid, rho: &[f64], flux: &[Vec<f64>; 3], dt: f64) -> Vec<f64> {
    let dims = grid.dims();
    par::collect(dims.len(), |c| {
        let cc = dims.coords(c);
        let mut net = 0.0;
        for d in 0..3 {
            let fd = dims.faces(d);
            let lo = fd.index_of(cc);
            net += flux[d][lo + fd.stride(d)] - flux[d][lo];
        }
        rho[c] - dt * net / grid.cell_volume(cc)
    })
}

/// One conservative first-order upwind step of `rho_t + div(rho u) = 0`.
pub fn advect_density(rho: &CellField, u: &VelocityField, dt: f64) -> Result<CellField> {
    if rho.grid != u.grid {
        return Err(Error::ShapeMismatch("density and velocity grids differ".into()));
    }
    if !(dt >= 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!("time step must be non-negative, got {dt}")));
    }
    check_boundary_flux(u)?;
    let cfl = dt * outflow_rate(u);
    if cfl > CFL_LIMIT * (1.0 + 1e-12) {
        return Err(Error::CflViolation { cfl, limit: CFL_LIMIT });
    }
    let flux = mass_fluxes(&rho.grid, &rho.values, &u.u);
    Ok(CellField { grid: rho.grid.clone(), values: update_density(&rho.grid, &rho.values, &flux, dt) })
}

/// Density on faces: volume-weighted average of the two adjacent cells (the
/// single adjacent cell on the box).
pub fn face_density(grid: &Grid, rho: &[f64]) -> [Vec<f64>; 3] {
    let dims = grid.dims();
    let comp = |d: usize| {
        let fd = dims.faces(d);
        par::collect(fd.len(), |idx| {
            let f = fd.coords(idx);
            let hi = (f[d] < dims.0[d]).then(|| dims.index_of(f));
            let lo = (f[d] > 0).then(|| {
                let mut c = f;
                c[d] -= 1;
                dims.index_of(c)
            });
            match (lo, hi) {
                (Some(a), Some(b)) => {
                    let (va, vb) = (grid.cell_volume(dims.coords(a)), grid.cell_volume(dims.coords(b)));
                    (va * rho[a] + vb * rho[b]) / (va + vb)
                }
                (Some(a), None) => rho[a],
                (None, Some(b)) => rho[b],
                (None, None) => 0.0,
            }
        })
    };
    [comp(0), comp(1), comp(2)]
}

/// Diagnostics of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub dt: f64,
    pub dissipation: f64,
    pub work: f64,
    pub div_residual: f64,
    pub velocity_iterations: usize,
    pub projection_iterations: usize,
}

/// Time stepper for one mask, viscosity and optional friction matrix.
pub struct Evolver {
    sys: MacSystem,
    friction: Option<[[f64; 3]; 3]>,
    tol: f64,
    vel_mg: Option<([Multigrid; 3], f64, usize)>,
    proj_mg: Option<Multigrid>,
    steps: usize,
}

impl Evolver {
    pub fn new(mask: &GridMask, mu: f64, d: Option<&BrinkmanMatrix>, tol: f64) -> Result<Self> {
        if !(tol > 0.0) {
            return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
        }
        if mask.fluid_count() == 0 {
            return Err(Error::Precondition("mask has no fluid cells".into()));
        }
        let grid = mask.grid();
        let solid = (0..mask.cells.len()).map(|c| mask.is_solid(c)).collect();
        let mut params = MacParams::new(grid, solid, mu);
        let friction = match d {
            Some(d) => {
                d.validate()?;
                (!d.is_zero()).then_some(d.entries)
            }
            None => None,
        };
        if let Some(m) = friction {
            if (0..3).any(|j| (0..3).any(|l| j != l && m[j][l] != 0.0)) {
                let mut c = [[0.0; 3]; 3];
                for j in 0..3 {
                    for l in 0..3 {
                        if j != l {
                            c[j][l] = mu * m[j][l];
                        }
                    }
                }
                params.coupling = Some(c);
            }
        }
        let sys = MacSystem::new(params)?;
        Ok(Evolver { sys, friction, tol, vel_mg: None, proj_mg: None, steps: 0 })
    }

    pub fn grid(&self) -> &Grid {
        &self.sys.grid
    }

    pub fn mu(&self) -> f64 {
        self.sys.mu
    }

    /// Kinetic energy `1/2 sum rho_f V_f u^2` over the free faces.
    pub fn kinetic_energy(&self, rho: &CellField, u: &VelocityField) -> f64 {
        let rf = face_density(&self.sys.grid, &rho.values);
        0.5 * (0..3)
            .map(|d| {
                let (c, fv, r, free) = (&u.u[d], &self.sys.face_volume[d], &rf[d], &self.sys.free[d]);
                par::sum_by(c.len(), |i| if free[i] { r[i] * fv[i] * c[i] * c[i] } else { 0.0 })
            })
            .sum::<f64>()
    }

    /// Step size for which the explicit transport of density and momentum
    /// stays a convex combination: `cfl * (rho_min / rho_max) / rate` with
    /// `rate` the largest total face flux per cell volume. Infinite at rest.
    pub fn stable_dt(&self, state: &FlowState, cfl: f64) -> f64 {
        let rate = total_rate(&state.u);
        if rate == 0.0 {
            return f64::INFINITY;
        }
        cfl * (state.rho.min() / state.rho.max()) / rate
    }

    fn refresh_velocity_multigrids(&mut self, dt: f64) {
        let stale = match &self.vel_mg {
            None => true,
            Some((_, dt_mg, built)) => {
                let r = dt / dt_mg;
                !(0.5..=2.0).contains(&r) || self.steps >= built + 100
            }
        };
        if stale {
            self.vel_mg = Some((self.sys.multigrids(), dt, self.steps));
        }
    }

    fn projection_stencil(&self, rho_f: &[Vec<f64>; 3]) -> Stencil {
        let dims = self.sys.dims;
        let g = &self.sys.grid;
        let pos: [Vec<f64>; 3] = std::array::from_fn(|a| (0..dims.0[a]).map(|i| g.axes[a].center(i)).collect());
        let mut st = Stencil::new(dims, pos);
        st.active = self.sys.fluid.clone();
        for a in 0..3 {
            let fd = dims.faces(a);
            let free = &self.sys.free[a];
            let fv = &self.sys.face_volume[a];
            let r = &rho_f[a];
            par::for_each_mut(&mut st.links[a], |c, l| {
                let cc = dims.coords(c);
                if cc[a] + 1 < dims.0[a] {
                    let f = fd.index_of(cc) + fd.stride(a);
                    if free[f] {
                        let area = g.face_area(a, cc);
                        *l = area * area / (r[f] * fv[f]);
                    }
                }
            });
        }
        st.finalize();
        st
    }

    /// Variable-density projection of `u_star` (free faces) with face
    /// densities `rho_f`. Returns the projected field, the pressure, the
    /// relative divergence and the iteration count.
    fn project_faces(
        &mut self,
        u_star: &[Vec<f64>; 3],
        rho_f: &[Vec<f64>; 3],
        dt: f64,
    ) -> Result<([Vec<f64>; 3], Vec<f64>, f64, usize)> {
        let dims = self.sys.dims;
        let g = self.sys.grid.clone();
        let st = self.projection_stencil(rho_f);
        if self.proj_mg.is_none() {
            self.proj_mg = Some(Multigrid::new(st.clone()));
        }
        let mg = self.proj_mg.as_ref().expect("built above");
        let mut rhs = vec![0.0; dims.len()];
        self.sys.apply_div([&u_star[0], &u_star[1], &u_star[2]], &mut rhs);
        par::scale(-1.0 / dt, &mut rhs);
        let sys = &self.sys;
        let project = |p: &mut [f64]| sys.project_pressure(p);
        let apply = |x: &[f64], y: &mut [f64]| st.apply(x, y);
        let precond = |r: &[f64], z: &mut [f64]| mg.vcycle(r, z);
        let mut phi = vec![0.0; dims.len()];
        let mut iterations = 0;
        let mut inner = 0.1 * self.tol;
        let mut last = f64::INFINITY;
        let grad_star = div_and_grad(&self.sys, u_star).1;
        for _round in 0..6 {
            let stats = pcg(&apply, &precond, Some(&project), &rhs, &mut phi, inner, MAX_ITERATIONS);
            let stats = match stats {
                Ok(s) => s,
                Err(Error::NonConvergence { iterations: it, .. }) => {
                    iterations += it;
                    inner *= 0.01;
                    continue;
                }
                Err(e) => return Err(e),
            };
            iterations += stats.iterations;
            let u = self.correct(u_star, rho_f, &phi, dt, &g);
            // relative to the larger of the two gradients, so that removing
            // a pure gradient counts as success
            let (div, grad) = div_and_grad(&self.sys, &u);
            let rel = ratio(div, grad.max(grad_star));
            last = rel;
            if rel <= self.tol {
                let mut p = phi;
                self.sys.gauge_pressure(&mut p);
                return Ok((u, p, rel, iterations));
            }
            inner = (inner * 0.01 * self.tol / rel).max(1e-15);
        }
        Err(Error::NonConvergence { iterations, residual: last, trace: vec![] })
    }

    fn correct(&self, u_star: &[Vec<f64>; 3], rho_f: &[Vec<f64>; 3], phi: &[f64], dt: f64, g: &Grid) -> [Vec<f64>; 3] {
        let dims = self.sys.dims;
        std::array::from_fn(|d| {
            let fd = dims.faces(d);
            let free = &self.sys.free[d];
            let fv = &self.sys.face_volume[d];
            par::collect(fd.len(), |idx| {
                if !free[idx] {
                    return 0.0;
                }
                let f = fd.coords(idx);
                let hi = if f[d] < dims.0[d] { phi[dims.index_of(f)] } else { 0.0 };
                let lo = if f[d] > 0 {
                    let mut c = f;
                    c[d] -= 1;
                    phi[dims.index_of(c)]
                } else {
                    0.0
                };
                u_star[d][idx] - dt * g.face_area(d, f) * (hi - lo) / (rho_f[d][idx] * fv[idx])
            })
        })
    }

    /// Projects `u_star` onto discretely divergence-free fields for density `rho`.
    pub fn project(
        &mut self,
        u_star: &VelocityField,
        rho: &CellField,
        dt: f64,
    ) -> Result<(VelocityField, PressureField, f64)> {
        if u_star.grid != self.sys.grid || rho.grid != self.sys.grid {
            return Err(Error::ShapeMismatch("fields must live on the evolver grid".into()));
        }
        let rho_f = face_density(&self.sys.grid, &rho.values);
        let masked = self.masked(&u_star.u);
        let (u, p, rel, _) = self.project_faces(&masked, &rho_f, dt)?;
        Ok((FaceField { grid: self.sys.grid.clone(), u }, CellField { grid: self.sys.grid.clone(), values: p }, rel))
    }

    fn masked(&self, u: &[Vec<f64>; 3]) -> [Vec<f64>; 3] {
        std::array::from_fn(|d| {
            let free = &self.sys.free[d];
            u[d].iter().zip(free).map(|(v, fr)| if *fr { *v } else { 0.0 }).collect()
        })
    }

    /// Advances `state` by `dt`. With `frozen_density` the density is kept
    /// fixed (the constant-density code path).
    pub fn step(
        &mut self,
        state: &FlowState,
        f: &ForcingField,
        dt: f64,
        frozen_density: bool,
    ) -> Result<(FlowState, StepReport)> {
        let g = self.sys.grid.clone();
        if state.u.grid != g || state.rho.grid != g || f.grid != g {
            return Err(Error::ShapeMismatch("state and forcing must live on the evolver grid".into()));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
        }
        let cfl = dt * outflow_rate(&state.u);
        if cfl > CFL_LIMIT * (1.0 + 1e-12) {
            return Err(Error::CflViolation { cfl, limit: CFL_LIMIT });
        }
        let dims = self.sys.dims;
        let u = &state.u.u;
        let flux = mass_fluxes(&g, &state.rho.values, u);
        let rho_new =
            if frozen_density { state.rho.values.clone() } else { update_density(&g, &state.rho.values, &flux, dt) };
        let rf_old = face_density(&g, &state.rho.values);
        let rf_new = face_density(&g, &rho_new);

        // explicit momentum transport on the staggered volumes
        let u_adv: [Vec<f64>; 3] = std::array::from_fn(|d| {
            let fd = dims.faces(d);
            let free = &self.sys.free[d];
            let fv = &self.sys.face_volume[d];
            let ud = &u[d];
            par::collect(fd.len(), |idx| {
                if !free[idx] {
                    return 0.0;
                }
                let f = fd.coords(idx);
                let sd = fd.stride(d);
                let up = |g: f64, from: usize, to: usize| if g > 0.0 { g * ud[from] } else { g * ud[to] };
                // along d: planes through the centres of the cells above and below
                let g_hi = 0.5 * (flux[d][idx] + flux[d][idx + sd]);
                let g_lo = 0.5 * (flux[d][idx - sd] + flux[d][idx]);
                let mut out = up(g_hi, idx, idx + sd) - up(g_lo, idx - sd, idx);
                let mut below = f;
                below[d] -= 1;
                for a in 0..3 {
                    if a == d {
                        continue;
                    }
                    let fa = dims.faces(a);
                    let sa = fd.stride(a);
                    if f[a] + 1 < dims.0[a] {
                        let (mut l, mut r) = (below, f);
                        l[a] += 1;
                        r[a] += 1;
                        let gh = 0.5 * (flux[a][fa.index_of(l)] + flux[a][fa.index_of(r)]);
                        out += up(gh, idx, idx + sa);
                    }
                    if f[a] > 0 {
                        let gl = 0.5 * (flux[a][fa.index_of(below)] + flux[a][fa.index_of(f)]);
                        out -= up(gl, idx - sa, idx);
                    }
                }
                (rf_old[d][idx] * fv[idx] * ud[idx] - dt * out) / (rf_new[d][idx] * fv[idx])
            })
        });

        // implicit viscous and friction step
        let zeroth: [Vec<f64>; 3] = std::array::from_fn(|d| {
            let extra = self.friction.map_or(0.0, |m| self.sys.mu * m[d][d]);
            rf_new[d].iter().map(|r| r / dt + extra).collect()
        });
        self.sys.set_zeroth(&zeroth);
        let vu = self.sys.velocity_len();
        let mut b = vec![0.0; vu];
        let mut x = vec![0.0; vu];
        {
            let bs = self.sys.split3_mut(&mut b);
            for (d, bd) in bs.into_iter().enumerate() {
                let (free, fv, r, ua, fd) =
                    (&self.sys.free[d], &self.sys.face_volume[d], &rf_new[d], &u_adv[d], &f.u[d]);
                par::for_each_mut(bd, |i, v| {
                    if free[i] {
                        *v = r[i] * fv[i] * (ua[i] / dt + fd[i]);
                    }
                });
            }
            let xs = self.sys.split3_mut(&mut x);
            for (d, xd) in xs.into_iter().enumerate() {
                xd.copy_from_slice(&u_adv[d]);
            }
        }
        let tol = self.tol;
        self.refresh_velocity_multigrids(dt);
        let mgs = &self.vel_mg.as_ref().expect("built above").0;
        let vstats = self.sys.solve_velocity(mgs, &b, &mut x, 0.1 * tol, MAX_ITERATIONS)?;
        let u_star: [Vec<f64>; 3] = {
            let xs = self.sys.split3(&x);
            std::array::from_fn(|d| xs[d].to_vec())
        };
        let star = FaceField { grid: g.clone(), u: u_star.clone() };
        let visc = {
            let s = [&u_star[0][..], &u_star[1][..], &u_star[2][..]];
            self.sys.mu * self.sys.grad_inner(s, s)
        };
        let fric = self.friction.map_or(0.0, |m| self.sys.mu * crate::stokes::friction(&g, &m, &star));
        let work = (0..3)
            .map(|d| {
                let (free, fv, r, us, fd) =
                    (&self.sys.free[d], &self.sys.face_volume[d], &rf_new[d], &u_star[d], &f.u[d]);
                par::sum_by(us.len(), |i| if free[i] { r[i] * fv[i] * fd[i] * us[i] } else { 0.0 })
            })
            .sum::<f64>();

        let (u_new, _p, div, pits) = self.project_faces(&u_star, &rf_new, dt)?;
        self.steps += 1;
        let next = FlowState {
            rho: CellField { grid: g.clone(), values: rho_new },
            u: FaceField { grid: g, u: u_new },
            t: state.t + dt,
        };
        let report = StepReport {
            dt,
            dissipation: dt * (visc + fric),
            work: dt * work,
            div_residual: div,
            velocity_iterations: vstats.iterations,
            projection_iterations: pits,
        };
        Ok((next, report))
    }
}

/// How the step size is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DtPolicy {
    /// `min(Evolver::stable_dt(cfl), max_dt)`, shortened to hit output times.
    Adaptive { cfl: f64, max_dt: f64 },
    /// Constant step (the last step before an output time may be shorter).
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub t_end: f64,
    /// Number of equal output intervals; states are reported at
    /// `k * t_end / outputs` for `k = 0..=outputs`.
    pub outputs: usize,
    pub dt: DtPolicy,
    pub tol: f64,
    pub frozen_density: bool,
    /// Allowed drift of the density bounds per run, relative to the upper bound.
    pub bound_slack: f64,
    /// Allowed relative drift of the total mass.
    pub mass_slack: f64,
}

impl RunOptions {
    pub fn new(t_end: f64, outputs: usize, dt: DtPolicy, tol: f64) -> Self {
        RunOptions { t_end, outputs, dt, tol, frozen_density: false, bound_slack: 1e-8, mass_slack: 1e-10 }
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub snapshots: Vec<FlowState>,
    pub ledger: EnergyLedger,
    pub steps: usize,
}

fn ledger_row(ev: &Evolver, s: &FlowState, diss: f64, work: f64, div: f64) -> LedgerRow {
    LedgerRow {
        t: s.t,
        kinetic: ev.kinetic_energy(&s.rho, &s.u),
        dissipation: diss,
        work,
        mass: s.rho.integral(),
        min_rho: s.rho.min(),
        max_rho: s.rho.max(),
        div_residual: div,
    }
}

/// Runs to `opts.t_end`, calling `observe` at every output time (including
/// the initial state). Returns the ledger and the number of steps.
pub fn run_with(
    mask: &GridMask,
    init: &InitialData,
    f: &ForcingField,
    mu: f64,
    d: Option<&BrinkmanMatrix>,
    opts: &RunOptions,
    mut observe: impl FnMut(&FlowState) -> Result<()>,
) -> Result<(EnergyLedger, usize)> {
    init.validate(mask, opts.tol)?;
    if !(opts.t_end >= 0.0) || opts.outputs == 0 {
        return Err(Error::InvalidArgument("need t_end >= 0 and at least one output interval".into()));
    }
    let mut ev = Evolver::new(mask, mu, d, opts.tol)?;
    if f.grid != *ev.grid() {
        return Err(Error::ShapeMismatch("forcing must live on the mask grid".into()));
    }
    let mut state = FlowState { rho: init.rho0.clone(), u: init.u0.clone(), t: 0.0 };
    let mut ledger = EnergyLedger {
        initial_energy: ev.kinetic_energy(&state.rho, &state.u),
        initial_mass: state.rho.integral(),
        initial_min_rho: state.rho.min(),
        initial_max_rho: state.rho.max(),
        rows: vec![],
    };
    let (div0, grad0) = div_and_grad(&ev.sys, &state.u.u);
    let div0 = ratio(div0, grad0);
    ledger.rows.push(ledger_row(&ev, &state, 0.0, 0.0, div0));
    observe(&state)?;
    let (lo, hi) = (ledger.initial_min_rho, ledger.initial_max_rho);
    let (mut diss, mut work) = (0.0, 0.0);
    let mut steps = 0;
    for k in 1..=opts.outputs {
        let t_out = opts.t_end * k as f64 / opts.outputs as f64;
        while state.t < t_out * (1.0 - 1e-12) {
            let mut dt = match opts.dt {
                DtPolicy::Adaptive { cfl, max_dt } => ev.stable_dt(&state, cfl).min(max_dt),
                DtPolicy::Fixed(dt) => dt,
            };
            if !(dt > 0.0) {
                return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
            }
            let last = state.t + dt >= t_out * (1.0 - 1e-12);
            if last {
                dt = t_out - state.t;
            }
            let (mut next, rep) = ev.step(&state, f, dt, opts.frozen_density)?;
            if last {
                next.t = t_out;
            }
            state = next;
            steps += 1;
            diss += rep.dissipation;
            work += rep.work;
            let row = ledger_row(&ev, &state, diss, work, rep.div_residual);
            let slack = opts.bound_slack * hi;
            if row.min_rho < lo - slack || row.max_rho > hi + slack {
                return Err(Error::Invariant(format!(
                    "density left [{lo}, {hi}] at t = {}: [{}, {}]",
                    state.t, row.min_rho, row.max_rho
                )));
            }
            if ((row.mass - ledger.initial_mass) / ledger.initial_mass).abs() > opts.mass_slack {
                return Err(Error::Invariant(format!("mass drifted to {} from {}", row.mass, ledger.initial_mass)));
            }
            ledger.rows.push(row);
        }
        observe(&state)?;
    }
    Ok((ledger, steps))
}

/// Runs to `opts.t_end` and keeps the states at the output times.
pub fn run(
    mask: &GridMask,
    init: &InitialData,
    f: &ForcingField,
    mu: f64,
    d: Option<&BrinkmanMatrix>,
    opts: &RunOptions,
) -> Result<Trajectory> {
    let mut snapshots = Vec::new();
    let (ledger, steps) = run_with(mask, init, f, mu, d, opts, |s| {
        snapshots.push(s.clone());
        Ok(())
    })?;
    Ok(Trajectory { snapshots, ledger, steps })
}

/// One full step (transport, implicit viscous step, projection) from
/// `state`; returns the new velocity.
pub fn momentum_step(
    mask: &GridMask,
    state: &FlowState,
    f: &ForcingField,
    mu: f64,
    d: Option<&BrinkmanMatrix>,
    dt: f64,
    tol: f64,
) -> Result<VelocityField> {
    let mut ev = Evolver::new(mask, mu, d, tol)?;
    Ok(ev.step(state, f, dt, false)?.0.u)
}

/// Variable-density projection on the fluid part of `mask`.
pub fn project(
    mask: &GridMask,
    u_star: &VelocityField,
    rho: &CellField,
    dt: f64,
    tol: f64,
) -> Result<(VelocityField, PressureField)> {
    let mut ev = Evolver::new(mask, 1.0, None, tol)?;
    let (u, p, _) = ev.project(u_star, rho, dt)?;
    Ok((u, p))
}

/// Discretely divergence-free velocity on `mask` closest (in the
/// density-weighted norm) to samples of `v`.
pub fn divergence_free(mask: &GridMask, v: impl Fn([f64; 3]) -> [f64; 3] + Sync, tol: f64) -> Result<VelocityField> {
    let g = mask.grid();
    let raw = FaceField::from_fn(&g, v);
    project(mask, &raw, &CellField::constant(&g, 1.0), 1.0, tol).map(|r| r.0)
}
