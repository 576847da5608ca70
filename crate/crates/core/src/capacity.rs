//! Stokes capacity of an obstacle and the Brinkman friction matrix.
//!
//! The cell problem for direction `i` is Stokes flow in `B(0,1) \ Q` with
//! velocity `e_i` on the obstacle and zero on the unit sphere. The capacity
//! `C_jl` is the viscous energy pairing of the solutions `v^j`, `v^l`.
//!
//! By default the problem is solved on the octant `[0,1]^3`: for direction
//! `i` the solution is even in `x_i` with odd tangential components, and even
//! in the other coordinates, so the planes through the origin become
//! [`Side::AntiMirror`] / [`Side::Mirror`] planes and the off-diagonal
//! capacities vanish by parity. [`Symmetry::Full`] solves on `[-1,1]^3`.

use std::time::Instant;

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::HoleShape;
use crate::grid::{Axis, Grid};
use crate::mac::{MacParams, MacSystem, Side};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CellMesh {
    /// `resolution` cells across `[-1, 1]`.
    Uniform { resolution: usize },
    /// Spacing `r / cells_per_radius` around the obstacle (`r` its inner
    /// radius), growing geometrically by `growth` up to `h_out`.
    Graded { cells_per_radius: usize, growth: f64, h_out: f64 },
}

impl CellMesh {
    pub fn graded(cells_per_radius: usize) -> Self {
        CellMesh::Graded { cells_per_radius, growth: 1.12, h_out: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Symmetry {
    Octant,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellOptions {
    pub mesh: CellMesh,
    pub symmetry: Symmetry,
    pub tol: f64,
    pub max_iter: usize,
}

impl CellOptions {
    pub fn uniform(resolution: usize, tol: f64) -> Self {
        CellOptions { mesh: CellMesh::Uniform { resolution }, symmetry: Symmetry::Octant, tol, max_iter: 5000 }
    }

    pub fn graded(cells_per_radius: usize, tol: f64) -> Self {
        CellOptions { mesh: CellMesh::graded(cells_per_radius), symmetry: Symmetry::Octant, tol, max_iter: 5000 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellProblemSolution {
    pub shape: HoleShape,
    pub options: CellOptions,
    pub grid: Grid,
    /// `v[i][d]`: component `d` of the solution for direction `i`.
    pub v: [[Vec<f64>; 3]; 3],
    /// Pressures, zero mean over the fluid cells.
    pub q: [Vec<f64>; 3],
    /// `(momentum, divergence)` relative residual per direction.
    pub residuals: [(f64, f64); 3],
    pub iterations: [usize; 3],
    /// Viscous energy pairings `sum over links c dv^j dv^l` (whole ball).
    pub gram: [[f64; 3]; 3],
    /// Pressure work `<div v^l, q^j>` (whole ball); vanishes at convergence.
    pub pressure_work: [[f64; 3]; 3],
    pub cells: usize,
    pub min_spacing: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityMatrix {
    pub entries: [[f64; 3]; 3],
    /// `|C - C^T| / |C|` of the raw force pairing before symmetrizing.
    pub asymmetry: f64,
}

impl CapacityMatrix {
    pub fn eigenvalues(&self) -> [f64; 3] {
        eigenvalues(&self.entries)
    }

    pub fn trace(&self) -> f64 {
        self.entries[0][0] + self.entries[1][1] + self.entries[2][2]
    }

    pub fn quad(&self, xi: [f64; 3]) -> f64 {
        let mut s = 0.0;
        for j in 0..3 {
            for l in 0..3 {
                s += xi[j] * self.entries[j][l] * xi[l];
            }
        }
        s
    }
}

pub fn eigenvalues(m: &[[f64; 3]; 3]) -> [f64; 3] {
    let mat = Matrix3::from_fn(|i, j| m[i][j]);
    let e = SymmetricEigen::new(mat).eigenvalues;
    let mut v = [e[0], e[1], e[2]];
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

fn view(s: &crate::mac::SaddleSolution) -> [&[f64]; 3] {
    [s.u[0].as_slice(), s.u[1].as_slice(), s.u[2].as_slice()]
}

fn frob(m: &[[f64; 3]; 3]) -> f64 {
    m.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
}

/// Builds the grid for the cell problem of `shape`.
pub fn cell_grid(shape: &HoleShape, mesh: CellMesh, symmetry: Symmetry) -> Result<Grid> {
    let mirrored = symmetry == Symmetry::Full;
    match mesh {
        CellMesh::Uniform { resolution } => {
            if resolution < 8 || resolution % 2 != 0 {
                return Err(Error::InvalidArgument(format!(
                    "cell-problem resolution must be even and at least 8, got {resolution}"
                )));
            }
            let (lo, cells) = if mirrored { (-1.0, resolution) } else { (0.0, resolution / 2) };
            let a = Axis::uniform(lo, 1.0, cells);
            Ok(Grid::new([a.clone(), a.clone(), a]))
        }
        CellMesh::Graded { cells_per_radius, growth, h_out } => {
            let ext = shape.half_extent();
            let h_in = shape.inner_radius() / cells_per_radius as f64;
            let mut axes = Vec::new();
            for e in ext {
                let inner = (e + 2.0 * h_in).min(0.95);
                axes.push(Axis::graded(h_in, inner, growth, h_out.max(h_in), mirrored)?);
            }
            let axes: [Axis; 3] = axes.try_into().expect("three axes");
            Ok(Grid::new(axes))
        }
    }
}

/// Solves the three cell problems of `shape` on a uniform grid with
/// `resolution` cells across `[-1, 1]`.
pub fn solve_cell_problem(shape: &HoleShape, resolution: usize, tol: f64) -> Result<CellProblemSolution> {
    solve_cell_problem_with(shape, &CellOptions::uniform(resolution, tol))
}

pub fn solve_cell_problem_with(shape: &HoleShape, opts: &CellOptions) -> Result<CellProblemSolution> {
    shape.validate()?;
    let outer = shape.outer_radius();
    if outer >= 0.75 {
        return Err(Error::Precondition(format!(
            "obstacle radius {outer:.3} must stay below 3/4 inside the unit ball"
        )));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {}", opts.tol)));
    }
    let start = Instant::now();
    let grid = cell_grid(shape, opts.mesh, opts.symmetry)?;
    let dims = grid.dims();
    let h_min = grid.min_spacing();
    let r_in = shape.inner_radius();
    if r_in < 2.0 * h_min * (1.0 - 1e-9) {
        return Err(Error::UnresolvedHole { radius: r_in, two_h: 2.0 * h_min });
    }
    // 0: fluid, 1: obstacle, 2: exterior of the unit ball
    let class: Vec<u8> = par::collect(dims.len(), |c| {
        let x = grid.cell_center(dims.coords(c));
        if shape.contains(x) {
            1
        } else if x[0] * x[0] + x[1] * x[1] + x[2] * x[2] >= 1.0 {
            2
        } else {
            0
        }
    });
    let solid: Vec<bool> = class.iter().map(|c| *c != 0).collect();
    let build = |i: usize| -> Result<MacSystem> {
        let mut p = MacParams::new(grid.clone(), solid.clone(), 1.0);
        if opts.symmetry == Symmetry::Octant {
            for a in 0..3 {
                p.sides[a][0] = if a == i { Side::AntiMirror } else { Side::Mirror };
            }
        }
        let cls = class.clone();
        p.body_velocity = Some(Box::new(move |c| {
            let mut e = [0.0; 3];
            if cls[c] == 1 {
                e[i] = 1.0;
            }
            e
        }));
        MacSystem::new(p)
    };
    let solve_one = |i: &usize| -> Result<(MacSystem, crate::mac::SaddleSolution)> {
        let sys = build(*i)?;
        let sol = sys.solve(None, opts.tol, opts.max_iter)?;
        log::info!(
            "cell problem e{}: {} iterations, residuals {:.2e} / {:.2e}",
            i + 1,
            sol.stats.iterations,
            sol.rel_momentum,
            sol.rel_divergence
        );
        Ok((sys, sol))
    };
    let results: Vec<Result<_>> = par::map_slice(&[0usize, 1, 2], solve_one);
    let mut systems = Vec::new();
    let mut sols = Vec::new();
    for r in results {
        let (s, x) = r?;
        systems.push(s);
        sols.push(x);
    }
    let mut gram = [[0.0; 3]; 3];
    let mut pressure_work = [[0.0; 3]; 3];
    match opts.symmetry {
        Symmetry::Octant => {
            // mirror images of the octant cover the ball eight times
            for i in 0..3 {
                let vi = view(&sols[i]);
                gram[i][i] = 8.0 * systems[i].grad_inner(vi, vi);
                let div = systems[i].div_full(vi);
                pressure_work[i][i] = 8.0 * par::dot(&div, &sols[i].p);
            }
        }
        Symmetry::Full => {
            for j in 0..3 {
                for l in 0..3 {
                    let (vj, vl) = (view(&sols[j]), view(&sols[l]));
                    gram[j][l] = systems[0].grad_inner(vj, vl);
                    let div = systems[0].div_full(vl);
                    pressure_work[j][l] = par::dot(&div, &sols[j].p);
                }
            }
        }
    }
    let mut v: [[Vec<f64>; 3]; 3] = Default::default();
    let mut q: [Vec<f64>; 3] = Default::default();
    let mut residuals = [(0.0, 0.0); 3];
    let mut iterations = [0; 3];
    for (i, s) in sols.into_iter().enumerate() {
        residuals[i] = (s.rel_momentum, s.rel_divergence);
        iterations[i] = s.stats.iterations;
        v[i] = s.u;
        q[i] = s.p;
    }
    Ok(CellProblemSolution {
        shape: *shape,
        options: *opts,
        cells: dims.len(),
        min_spacing: h_min,
        grid,
        v,
        q,
        residuals,
        iterations,
        gram,
        pressure_work,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Capacity matrix from the force pairing `C_jl = B(v^j, v^l) - <div v^l, q^j>`
/// (the momentum reaction of problem `j` tested with the boundary data of
/// problem `l`), symmetrized with its asymmetry recorded.
pub fn capacity_matrix(sol: &CellProblemSolution) -> CapacityMatrix {
    let mut raw = [[0.0; 3]; 3];
    for j in 0..3 {
        for l in 0..3 {
            raw[j][l] = sol.gram[j][l] - sol.pressure_work[j][l];
        }
    }
    let mut sym = [[0.0; 3]; 3];
    let mut skew = [[0.0; 3]; 3];
    for j in 0..3 {
        for l in 0..3 {
            sym[j][l] = 0.5 * (raw[j][l] + raw[l][j]);
            skew[j][l] = raw[j][l] - raw[l][j];
        }
    }
    let norm = frob(&raw);
    let asymmetry = if norm > 0.0 { frob(&skew) / norm } else { 0.0 };
    CapacityMatrix { entries: sym, asymmetry }
}

/// Linear fit of `C(r)/r` used to extrapolate to vanishing obstacle size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extrapolation {
    pub radii: Vec<f64>,
    /// `C(r)/r` for every radius.
    pub scaled: Vec<[[f64; 3]; 3]>,
    /// Number of smallest radii entering the fit.
    pub fit_points: usize,
    /// Intercepts `C_inf` and slopes of the fit.
    pub limit: [[f64; 3]; 3],
    pub slope: [[f64; 3]; 3],
    /// Relative change of the trace of `C(r)/r` between the two smallest radii.
    pub last_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrinkmanMatrix {
    pub entries: [[f64; 3]; 3],
    pub epsilon: f64,
    pub alpha: f64,
    pub shape: HoleShape,
    pub provenance: Option<Extrapolation>,
}

impl BrinkmanMatrix {
    pub fn zero() -> Self {
        BrinkmanMatrix {
            entries: [[0.0; 3]; 3],
            epsilon: 0.0,
            alpha: 3.0,
            shape: HoleShape::Ball { radius: 0.5 },
            provenance: None,
        }
    }

    /// `s * I`, for experiments that prescribe the friction directly.
    pub fn isotropic(s: f64) -> Self {
        let mut m = BrinkmanMatrix::zero();
        for i in 0..3 {
            m.entries[i][i] = s;
        }
        m
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut m = self.clone();
        for row in m.entries.iter_mut() {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        m
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().flatten().all(|v| *v == 0.0)
    }

    pub fn eigenvalues(&self) -> [f64; 3] {
        eigenvalues(&self.entries)
    }

    /// Symmetric and either zero or positive definite.
    pub fn validate(&self) -> Result<()> {
        let m = &self.entries;
        let scale = frob(m);
        for j in 0..3 {
            for l in 0..3 {
                if !m[j][l].is_finite() || (m[j][l] - m[l][j]).abs() > 1e-12 * scale {
                    return Err(Error::InvalidArgument("Brinkman matrix must be finite and symmetric".into()));
                }
            }
        }
        if !self.is_zero() && self.eigenvalues()[0] <= 0.0 {
            return Err(Error::InvalidArgument("Brinkman matrix must be positive definite or zero".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// One row of a capacity study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityRecord {
    pub shape: HoleShape,
    pub r: f64,
    pub resolution: usize,
    pub capacity: CapacityMatrix,
    pub residuals: [(f64, f64); 3],
    pub iterations: [usize; 3],
    pub cells: usize,
    pub seconds: f64,
}

pub fn capacity_record(shape: &HoleShape, r: f64, resolution: usize, opts: &CellOptions) -> Result<CapacityRecord> {
    let scaled = shape.scaled(r);
    let sol = solve_cell_problem_with(&scaled, opts)?;
    let capacity = capacity_matrix(&sol);
    Ok(CapacityRecord {
        shape: *shape,
        r,
        resolution,
        capacity,
        residuals: sol.residuals,
        iterations: sol.iterations,
        cells: sol.cells,
        seconds: sol.seconds,
    })
}

/// Relative change above which the small-radius extrapolation is rejected.
pub const EXTRAPOLATION_LIMIT: f64 = 0.10;

/// Brinkman matrix of `shape` at the critical scaling: capacities of
/// `r * shape` for each radius on graded grids with `resolution` cells per
/// obstacle radius, extrapolated linearly in `r` to `C_inf`.
pub fn brinkman_matrix(
    shape: &HoleShape,
    epsilon: f64,
    alpha: f64,
    radii: &[f64],
    resolution: usize,
    tol: f64,
) -> Result<BrinkmanMatrix> {
    let opts = CellOptions::graded(resolution, tol);
    brinkman_matrix_with(shape, epsilon, alpha, radii, &opts).map(|(b, _)| b)
}

pub fn brinkman_matrix_with(
    shape: &HoleShape,
    epsilon: f64,
    alpha: f64,
    radii: &[f64],
    opts: &CellOptions,
) -> Result<(BrinkmanMatrix, Vec<CapacityRecord>)> {
    if (alpha - 3.0).abs() > 1e-12 {
        return Err(Error::Precondition(format!(
            "alpha = {alpha}: the Brinkman limit needs the critical case alpha = 3, where hole capacities scale like epsilon^3"
        )));
    }
    if radii.len() < 2 {
        return Err(Error::InvalidArgument("at least two radii are needed to extrapolate".into()));
    }
    if radii.windows(2).any(|w| !(w[1] < w[0])) || radii.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::InvalidArgument("radii must be positive and strictly decreasing".into()));
    }
    let resolution = match opts.mesh {
        CellMesh::Uniform { resolution } => resolution,
        CellMesh::Graded { cells_per_radius, .. } => cells_per_radius,
    };
    let mut records = Vec::new();
    for &r in radii {
        records.push(capacity_record(shape, r, resolution, opts)?);
    }
    let scaled: Vec<[[f64; 3]; 3]> = records
        .iter()
        .map(|rec| {
            let mut m = rec.capacity.entries;
            m.iter_mut().flatten().for_each(|v| *v /= rec.r);
            m
        })
        .collect();
    let n = radii.len();
    let tr = |m: &[[f64; 3]; 3]| m[0][0] + m[1][1] + m[2][2];
    let last_change = (tr(&scaled[n - 2]) - tr(&scaled[n - 1])).abs() / tr(&scaled[n - 1]).abs();
    if last_change > EXTRAPOLATION_LIMIT {
        return Err(Error::ExtrapolationUnstable { change: 100.0 * last_change });
    }
    let k = 2;
    let xs = &radii[n - k..];
    let mut limit = [[0.0; 3]; 3];
    let mut slope = [[0.0; 3]; 3];
    for j in 0..3 {
        for l in 0..3 {
            let ys: Vec<f64> = scaled[n - k..].iter().map(|m| m[j][l]).collect();
            let (a, b) = linear_fit(xs, &ys);
            limit[j][l] = a;
            slope[j][l] = b;
        }
    }
    // the critical scaling a = eps^3 makes a / eps^3 = 1; keep the general
    // factor for other epsilon conventions
    let factor = epsilon.powf(alpha) / epsilon.powi(3);
    let mut entries = limit;
    entries.iter_mut().flatten().for_each(|v| *v *= factor);
    for j in 0..3 {
        for l in 0..j {
            let m = 0.5 * (entries[j][l] + entries[l][j]);
            entries[j][l] = m;
            entries[l][j] = m;
        }
    }
    let out = BrinkmanMatrix {
        entries,
        epsilon,
        alpha,
        shape: *shape,
        provenance: Some(Extrapolation { radii: radii.to_vec(), scaled, fit_points: k, limit, slope, last_change }),
    };
    let ev = out.eigenvalues();
    let trace = entries[0][0] + entries[1][1] + entries[2][2];
    if ev[0] <= 1e-6 * trace {
        return Err(Error::Invariant(format!("extrapolated Brinkman matrix is not positive definite: {ev:?}")));
    }
    Ok((out, records))
}

/// Least-squares line `y = a + b x`.
fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let b = sxy / sxx;
    (my - b * mx, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_recovers_line() {
        let (a, b) = linear_fit(&[0.1, 0.05], &[3.0 + 0.2, 3.0 + 0.1]);
        assert!((a - 3.0).abs() < 1e-12 && (b - 2.0).abs() < 1e-12);
    }

    #[test]
    fn large_obstacle_is_rejected() {
        let e = solve_cell_problem(&HoleShape::Ball { radius: 0.99 }, 32, 1e-8).unwrap_err();
        assert!(matches!(e, Error::Precondition(_)));
    }

    #[test]
    fn non_critical_alpha_is_rejected() {
        let e = brinkman_matrix(&HoleShape::Ball { radius: 0.5 }, 0.5, 2.0, &[0.2, 0.1], 8, 1e-6).unwrap_err();
        assert!(e.to_string().contains("critical"));
    }

    #[test]
    fn isotropic_matrix_validates() {
        assert!(BrinkmanMatrix::isotropic(3.0).validate().is_ok());
        assert!(BrinkmanMatrix::zero().validate().is_ok());
        assert!(BrinkmanMatrix::isotropic(-1.0).validate().is_err());
    }
}
