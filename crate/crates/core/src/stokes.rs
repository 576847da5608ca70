//! Steady Stokes solvers: the perforated problem with no-slip holes and the
//! Brinkman problem with a friction matrix on the hole-free grid.
//!
//! Both share the MAC discretization of [`crate::mac`]; the Brinkman
//! friction `mu D v` is a zeroth-order term (diagonal entries on the faces,
//! off-diagonal entries through cell-averaged velocities).

use serde::{Deserialize, Serialize};

use crate::capacity::BrinkmanMatrix;
use crate::error::{Error, Result};
use crate::field::{CellField, FaceField, ForcingField, PressureField, VelocityField};
use crate::geometry::{DomainSpec, GridMask};
use crate::grid::Grid;
use crate::linalg::Multigrid;
use crate::mac::{MacParams, MacSystem, Side};
use crate::par;

/// Iteration cap for the saddle-point solves.
pub const MAX_ITERATIONS: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteadyStats {
    pub iterations: usize,
    pub rel_momentum: f64,
    pub rel_divergence: f64,
}

#[derive(Debug, Clone)]
pub struct SteadySolution {
    pub velocity: VelocityField,
    pub pressure: PressureField,
    pub stats: SteadyStats,
}

/// An assembled steady operator with its preconditioner, reusable for
/// several right-hand sides.
pub struct SteadySolver {
    sys: MacSystem,
    mgs: [Multigrid; 3],
    brinkman: Option<[[f64; 3]; 3]>,
}

/// Symmetry reduction: for every axis with `Some(side)` only the lower half
/// of the box is solved and the mid-plane becomes a reflection plane of the
/// given kind. The data must have the matching parity (see [`Side`]).
pub type Reflections = [Option<Side>; 3];

pub const NO_REFLECTIONS: Reflections = [None, None, None];

impl SteadySolver {
    /// Stokes in the fluid part of `mask`, no-slip on holes and on the box.
    pub fn perforated(mask: &GridMask, mu: f64) -> Result<Self> {
        Self::perforated_folded(mask, mu, NO_REFLECTIONS)
    }

    pub fn perforated_folded(mask: &GridMask, mu: f64, refl: Reflections) -> Result<Self> {
        if mask.fluid_count() == 0 {
            return Err(Error::Precondition("mask has no fluid cells".into()));
        }
        let (grid, solid) = fold(mask, refl)?;
        Self::build(grid, solid, sides(refl), mu, None)
    }

    /// Perforated problem with the given box sides instead of walls.
    pub fn perforated_with_sides(mask: &GridMask, mu: f64, sides: [[Side; 2]; 3]) -> Result<Self> {
        let (grid, solid) = fold(mask, NO_REFLECTIONS)?;
        Self::build(grid, solid, sides, mu, None)
    }

    /// Brinkman operator `-mu Lap + mu D` on the hole-free grid.
    pub fn brinkman(domain: &DomainSpec, resolution: usize, mu: f64, d: &BrinkmanMatrix) -> Result<Self> {
        Self::brinkman_folded(domain, resolution, mu, d, NO_REFLECTIONS)
    }

    pub fn brinkman_folded(
        domain: &DomainSpec,
        resolution: usize,
        mu: f64,
        d: &BrinkmanMatrix,
        refl: Reflections,
    ) -> Result<Self> {
        d.validate()?;
        for r in 0..3 {
            if refl[r].is_some() && (0..3).any(|b| b != r && d.entries[r][b] != 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "friction couples axis {r} to the others, so the flow is not reflection symmetric along it"
                )));
            }
        }
        let mask = GridMask::hole_free(*domain, resolution)?;
        let (grid, solid) = fold(&mask, refl)?;
        Self::build(grid, solid, sides(refl), mu, Some(d))
    }

    fn build(grid: Grid, solid: Vec<bool>, sides: [[Side; 2]; 3], mu: f64, d: Option<&BrinkmanMatrix>) -> Result<Self> {
        let mut params = MacParams::new(grid, solid, mu);
        params.sides = sides;
        let friction = d.filter(|d| !d.is_zero()).map(|d| d.entries);
        if let Some(m) = friction {
            let dims = params.grid.dims();
            params.zeroth = Some([
                vec![mu * m[0][0]; dims.faces(0).len()],
                vec![mu * m[1][1]; dims.faces(1).len()],
                vec![mu * m[2][2]; dims.faces(2).len()],
            ]);
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
        let mgs = sys.multigrids();
        Ok(SteadySolver { sys, mgs, brinkman: friction })
    }

    pub fn grid(&self) -> &Grid {
        &self.sys.grid
    }

    pub fn mu(&self) -> f64 {
        self.sys.mu
    }

    pub fn solve(&self, f: &ForcingField, tol: f64) -> Result<SteadySolution> {
        if f.grid != self.sys.grid {
            return Err(Error::ShapeMismatch("forcing grid differs from the solver grid".into()));
        }
        if f.u.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("forcing has non-finite values".into()));
        }
        let sol = self.sys.solve_with(&self.mgs, Some(&f.u), tol, MAX_ITERATIONS)?;
        Ok(SteadySolution {
            velocity: FaceField { grid: self.sys.grid.clone(), u: sol.u },
            pressure: CellField { grid: self.sys.grid.clone(), values: sol.p },
            stats: SteadyStats {
                iterations: sol.stats.iterations,
                rel_momentum: sol.rel_momentum,
                rel_divergence: sol.rel_divergence,
            },
        })
    }

    /// Viscous dissipation `mu |grad v|^2`.
    pub fn viscous_energy(&self, v: &VelocityField) -> f64 {
        let u = [&v.u[0][..], &v.u[1][..], &v.u[2][..]];
        self.sys.mu * self.sys.grad_inner(u, u)
    }

    /// Friction `mu v^T D v` (zero for the perforated problem).
    pub fn friction_energy(&self, v: &VelocityField) -> f64 {
        match &self.brinkman {
            Some(m) => self.sys.mu * friction(&self.sys.grid, m, v),
            None => 0.0,
        }
    }

    /// Force exerted by the fluid on the solid cells selected by `body`,
    /// from the momentum balance on the faces they fix.
    pub fn drag(&self, sol: &SteadySolution, body: impl Fn(usize) -> bool + Sync) -> [f64; 3] {
        let dims = self.sys.dims;
        let mut out = [0.0; 3];
        for (d, o) in out.iter_mut().enumerate() {
            let fd = dims.faces(d);
            let u = &sol.velocity.u[d];
            let p = &sol.pressure.values;
            *o = -par::sum_by(fd.len(), |idx| {
                if self.sys.free[d][idx] {
                    return 0.0;
                }
                let f = fd.coords(idx);
                let mut below = f;
                let lo = f[d] > 0 && {
                    below[d] -= 1;
                    body(dims.index_of(below))
                };
                let hi = f[d] < dims.0[d] && body(dims.index_of(f));
                if lo || hi {
                    self.sys.reaction(d, idx, u, p)
                } else {
                    0.0
                }
            });
        }
        out
    }
}

fn fold(mask: &GridMask, refl: Reflections) -> Result<(Grid, Vec<bool>)> {
    if refl.iter().all(Option::is_none) {
        return Ok((mask.grid(), (0..mask.cells.len()).map(|c| mask.is_solid(c)).collect()));
    }
    let axes = [refl[0].is_some(), refl[1].is_some(), refl[2].is_some()];
    mask.folded(axes).ok_or_else(|| Error::Precondition("mask is not mirror symmetric along the requested axes".into()))
}

fn sides(refl: Reflections) -> [[Side; 2]; 3] {
    let mut s = [[Side::Wall; 2]; 3];
    for a in 0..3 {
        if let Some(side) = refl[a] {
            s[a][1] = side;
        }
    }
    s
}

/// `v^T D v` with diagonal entries on faces and off-diagonal entries on
/// cell averages, matching the discrete operator.
pub(crate) fn friction(grid: &Grid, m: &[[f64; 3]; 3], v: &VelocityField) -> f64 {
    let mut s = 0.0;
    for d in 0..3 {
        let w = FaceField::face_volumes(grid, d);
        let c = &v.u[d];
        s += m[d][d] * par::sum_by(c.len(), |i| w[i] * c[i] * c[i]);
    }
    let dims = grid.dims();
    s + par::sum_by(dims.len(), |c| {
        let cc = dims.coords(c);
        let mut avg = [0.0; 3];
        for (d, a) in avg.iter_mut().enumerate() {
            let fd = dims.faces(d);
            let lo = fd.index_of(cc);
            *a = 0.5 * (v.u[d][lo] + v.u[d][lo + fd.stride(d)]);
        }
        let mut t = 0.0;
        for j in 0..3 {
            for l in 0..3 {
                if j != l {
                    t += m[j][l] * avg[j] * avg[l];
                }
            }
        }
        grid.cell_volume(cc) * t
    })
}

/// Steady Stokes flow in the perforated domain of `mask`.
pub fn solve_stokes_perforated(mask: &GridMask, f: &ForcingField, mu: f64, tol: f64) -> Result<SteadySolution> {
    SteadySolver::perforated(mask, mu)?.solve(f, tol)
}

/// Steady Brinkman flow `-mu Lap v + mu D v + grad q = f` in the box.
pub fn solve_brinkman_steady(
    domain: &DomainSpec,
    resolution: usize,
    f: &ForcingField,
    mu: f64,
    d: &BrinkmanMatrix,
    tol: f64,
) -> Result<SteadySolution> {
    SteadySolver::brinkman(domain, resolution, mu, d)?.solve(f, tol)
}

/// Quadrature of `f . u` over the faces.
pub fn dissipation(u: &VelocityField, f: &ForcingField) -> Result<f64> {
    u.inner(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{enumerate_holes, rasterize, HoleShape};

    #[test]
    fn zero_forcing_gives_zero_flow() {
        let mask = GridMask::hole_free(DomainSpec::unit_cube(), 8).unwrap();
        let f = FaceField::zeros(&mask.grid());
        let sol = solve_stokes_perforated(&mask, &f, 1.0, 1e-8).unwrap();
        assert_eq!(sol.velocity.max_abs(), 0.0);
        assert!(sol.pressure.values.iter().all(|p| *p == 0.0));
    }

    #[test]
    fn energy_identity_with_holes() {
        let lat = enumerate_holes(DomainSpec::unit_cube(), 0.5, 1.3, HoleShape::Ball { radius: 0.5 }).unwrap();
        let mask = rasterize(&lat, 24).unwrap();
        let f = FaceField::from_fn(&mask.grid(), |x| [1.0, x[0], (3.0 * x[1]).sin()]).restricted(&mask).unwrap();
        let solver = SteadySolver::perforated(&mask, 0.7).unwrap();
        let tol = 1e-8;
        let sol = solver.solve(&f, tol).unwrap();
        let work = dissipation(&sol.velocity, &f).unwrap();
        let visc = solver.viscous_energy(&sol.velocity);
        assert!((work - visc).abs() <= 10.0 * tol * work, "{work} vs {visc}");
        assert_eq!(sol.velocity.max_on_solid(&mask), 0.0);
    }

    fn swirl(x: [f64; 3]) -> [f64; 3] {
        use std::f64::consts::PI;
        let (sx, cx) = (PI * x[0]).sin_cos();
        let (sy, cy) = (PI * x[1]).sin_cos();
        let sz = (PI * x[2]).sin();
        [2.0 * PI * sx * sx * sy * cy * sz, -2.0 * PI * sx * cx * sy * sy * sz, 0.0]
    }

    #[test]
    fn folded_solve_matches_full_solve() {
        let lat = enumerate_holes(DomainSpec::unit_cube(), 0.5, 1.5, HoleShape::Ball { radius: 0.5 }).unwrap();
        let mask = rasterize(&lat, 16).unwrap();
        let tol = 1e-10;
        let full = SteadySolver::perforated(&mask, 1.0).unwrap();
        let f = FaceField::from_fn(full.grid(), swirl).restricted(&mask).unwrap();
        let vf = full.solve(&f, tol).unwrap().velocity;
        let refl = [Some(Side::AntiMirror), Some(Side::AntiMirror), Some(Side::Mirror)];
        let half = SteadySolver::perforated_folded(&mask, 1.0, refl).unwrap();
        assert_eq!(half.grid().dims(), crate::grid::Dims([8, 8, 8]));
        let g = half.grid().clone();
        let fh = FaceField::from_fn(&g, swirl);
        let vh = half.solve(&fh, tol).unwrap().velocity;
        let scale = vf.max_abs();
        for d in 0..3 {
            let (fd, hd) = (vf.dims().faces(d), g.dims().faces(d));
            for idx in 0..hd.len() {
                let w = vf.u[d][fd.index_of(hd.coords(idx))];
                assert!((vh.u[d][idx] - w).abs() <= 1e-7 * scale, "component {d} face {idx}");
            }
        }
        assert!(SteadySolver::brinkman_folded(
            &DomainSpec::unit_cube(),
            16,
            1.0,
            &BrinkmanMatrix { entries: [[2.0, 0.1, 0.0], [0.1, 2.0, 0.0], [0.0, 0.0, 2.0]], ..BrinkmanMatrix::zero() },
            refl
        )
        .is_err());
    }

    #[test]
    fn brinkman_energy_identity_with_anisotropic_friction() {
        let mut d = BrinkmanMatrix::isotropic(0.0);
        d.entries = [[30.0, 2.0, 0.5], [2.0, 20.0, 1.0], [0.5, 1.0, 25.0]];
        let dom = DomainSpec::unit_cube();
        let solver = SteadySolver::brinkman(&dom, 12, 1.5, &d).unwrap();
        let f = FaceField::from_fn(solver.grid(), |x| [x[1], 1.0, x[0] * x[2]]);
        let tol = 1e-9;
        let sol = solver.solve(&f, tol).unwrap();
        let work = dissipation(&sol.velocity, &f).unwrap();
        let e = solver.viscous_energy(&sol.velocity) + solver.friction_energy(&sol.velocity);
        assert!((work - e).abs() <= 10.0 * tol * work, "{work} vs {e}");
    }
}
