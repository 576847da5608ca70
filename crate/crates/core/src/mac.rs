//! Staggered (MAC) finite-volume discretization of the Stokes operator on a
//! rectilinear grid with solid cells.
//!
//! Pressure lives in cells and the velocity component `d` on the faces
//! normal to `d`. All operators are integrated over control volumes: the
//! divergence of cell `c` is `sum area * (u_hi - u_lo)` and the pressure
//! gradient is minus its transpose, which makes the saddle-point matrix
//! `[K, -D^T; -D, 0]` symmetric.
//!
//! A face is fixed (prescribed velocity) when it touches a solid cell or lies
//! on a wall or mirror plane; all other faces carry unknowns. Each side of the
//! box is one of:
//!
//! * [`Side::Wall`], no-slip.
//! * [`Side::Mirror`]: reflection plane for fields even under the reflection
//!   (normal velocity zero, tangential stress free, pressure even).
//! * [`Side::AntiMirror`]: reflection plane for odd fields (tangential
//!   velocity zero, normal velocity free with zero normal flux, pressure zero).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, Grid};
use crate::linalg::{minres, pcg, Multigrid, SolveStats, Stencil};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Wall,
    Mirror,
    AntiMirror,
}

/// Velocity of every solid cell (used for the faces it fixes).
pub type BodyVelocity = Box<dyn Fn(usize) -> [f64; 3] + Send + Sync>;

pub struct MacParams {
    pub grid: Grid,
    pub solid: Vec<bool>,
    pub sides: [[Side; 2]; 3],
    pub mu: f64,
    /// Zero when absent.
    pub body_velocity: Option<BodyVelocity>,
    /// Zeroth-order coefficient per unit volume on each face (friction or
    /// inertia); the face row gains `coef * V_f`.
    pub zeroth: Option<[Vec<f64>; 3]>,
    /// Off-diagonal zeroth-order coupling per unit volume, applied to the
    /// cell-averaged velocity. Only entries with `d != e` are used.
    pub coupling: Option<[[f64; 3]; 3]>,
}

impl MacParams {
    pub fn new(grid: Grid, solid: Vec<bool>, mu: f64) -> Self {
        MacParams { grid, solid, sides: [[Side::Wall; 2]; 3], mu, body_velocity: None, zeroth: None, coupling: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Nb {
    Free(usize),
    Fixed(usize),
    Ghost,
}

/// Assembled discrete Stokes-type operator.
pub struct MacSystem {
    pub grid: Grid,
    pub dims: Dims,
    pub sides: [[Side; 2]; 3],
    pub mu: f64,
    pub fluid: Vec<bool>,
    pub free: [Vec<bool>; 3],
    /// Prescribed values on fixed faces (zero on free faces).
    pub fixed_value: [Vec<f64>; 3],
    pub face_volume: [Vec<f64>; 3],
    pub comp: [Stencil; 3],
    /// Right-hand side contribution of couplings to fixed faces.
    pub lift: [Vec<f64>; 3],
    pub coupling: Option<[[f64; 3]; 3]>,
    /// Pressure component label per fluid cell (`usize::MAX` elsewhere).
    pub component: Vec<usize>,
    /// Whether a component has no constant-pressure null mode.
    pub pinned: Vec<bool>,
    offsets: [usize; 4],
    len: usize,
}

/// Solution of a saddle-point solve, with fixed values filled in.
#[derive(Debug, Clone)]
pub struct SaddleSolution {
    pub u: [Vec<f64>; 3],
    pub p: Vec<f64>,
    pub stats: SolveStats,
    pub rel_momentum: f64,
    pub rel_divergence: f64,
}

impl MacSystem {
    pub fn new(params: MacParams) -> Result<Self> {
        let MacParams { grid, solid, sides, mu, body_velocity, zeroth, coupling } = params;
        let dims = grid.dims();
        if solid.len() != dims.len() {
            return Err(Error::ShapeMismatch(format!("solid mask has {} cells, grid {}", solid.len(), dims.len())));
        }
        if !(mu > 0.0) {
            return Err(Error::InvalidArgument(format!("viscosity must be positive, got {mu}")));
        }
        let fluid: Vec<bool> = solid.iter().map(|s| !s).collect();
        let mut free: [Vec<bool>; 3] = Default::default();
        let mut fixed_value: [Vec<f64>; 3] = Default::default();
        let mut face_volume: [Vec<f64>; 3] = Default::default();
        for d in 0..3 {
            let fd = dims.faces(d);
            let nd = dims.0[d];
            free[d] = par::collect(fd.len(), |idx| {
                let f = fd.coords(idx);
                let lo = if f[d] > 0 { Some(cell_below(dims, d, f)) } else { None };
                let hi = if f[d] < nd { Some(dims.index_of(f)) } else { None };
                match (lo, hi) {
                    (Some(a), Some(b)) => fluid[a] && fluid[b],
                    (None, Some(b)) => sides[d][0] == Side::AntiMirror && fluid[b],
                    (Some(a), None) => sides[d][1] == Side::AntiMirror && fluid[a],
                    (None, None) => false,
                }
            });
            let body = &body_velocity;
            let free_d = &free[d];
            fixed_value[d] = par::collect(fd.len(), |idx| {
                if free_d[idx] {
                    return 0.0;
                }
                let Some(body) = body else { return 0.0 };
                let f = fd.coords(idx);
                let lo = if f[d] > 0 { Some(cell_below(dims, d, f)) } else { None };
                let hi = if f[d] < nd { Some(dims.index_of(f)) } else { None };
                for c in [lo, hi].into_iter().flatten() {
                    if solid[c] {
                        return body(c)[d];
                    }
                }
                0.0
            });
            let g = &grid;
            face_volume[d] = par::collect(fd.len(), |idx| {
                let f = fd.coords(idx);
                g.face_span(d, f) * g.face_area(d, f)
            });
        }
        let mut sys = MacSystem {
            grid,
            dims,
            sides,
            mu,
            fluid,
            free,
            fixed_value,
            face_volume,
            comp: Default::default(),
            lift: Default::default(),
            coupling,
            component: vec![],
            pinned: vec![],
            offsets: [0; 4],
            len: 0,
        };
        let mut off = 0;
        for d in 0..3 {
            sys.offsets[d] = off;
            off += dims.faces(d).len();
        }
        sys.offsets[3] = off;
        sys.len = off + dims.len();
        for d in 0..3 {
            let (st, lift) = sys.assemble_component(d, zeroth.as_ref().map(|z| &z[d][..]));
            sys.comp[d] = st;
            sys.lift[d] = lift;
        }
        sys.label_components();
        Ok(sys)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn velocity_len(&self) -> usize {
        self.offsets[3]
    }

    pub fn range(&self, block: usize) -> std::ops::Range<usize> {
        let end = if block == 3 { self.len } else { self.offsets[block + 1] };
        self.offsets[block]..end
    }

    /// Enumerates the couplings of the free face `idx` of component `d`:
    /// `(axis, neighbour, coefficient)`.
    pub(crate) fn couplings(&self, d: usize, idx: usize, mut visit: impl FnMut(usize, Nb, f64)) {
        let dims = self.dims;
        let fd = dims.faces(d);
        let f = fd.coords(idx);
        let g = &self.grid;
        let free = &self.free[d];
        let classify = |n: usize| if free[n] { Nb::Free(n) } else { Nb::Fixed(n) };
        let area = g.face_area(d, f);
        let sd = fd.stride(d);
        if f[d] < dims.0[d] {
            visit(d, classify(idx + sd), self.mu * area / g.axes[d].width(f[d]));
        }
        if f[d] > 0 {
            visit(d, classify(idx - sd), self.mu * area / g.axes[d].width(f[d] - 1));
        }
        let span = g.face_span(d, f);
        for a in [0, 1, 2] {
            if a == d {
                continue;
            }
            let b = 3 - a - d;
            let ax = &g.axes[a];
            let ia = f[a];
            let tr = span * g.axes[b].width(f[b]);
            let sa = fd.stride(a);
            if ia + 1 < dims.0[a] {
                let dist = 0.5 * (ax.width(ia) + ax.width(ia + 1));
                visit(a, classify(idx + sa), self.mu * tr / dist);
            } else if self.sides[a][1] != Side::Mirror {
                visit(a, Nb::Ghost, self.mu * tr / (0.5 * ax.width(ia)));
            }
            if ia > 0 {
                let dist = 0.5 * (ax.width(ia) + ax.width(ia - 1));
                visit(a, classify(idx - sa), self.mu * tr / dist);
            } else if self.sides[a][0] != Side::Mirror {
                visit(a, Nb::Ghost, self.mu * tr / (0.5 * ax.width(ia)));
            }
        }
    }

    fn assemble_component(&self, d: usize, zeroth: Option<&[f64]>) -> (Stencil, Vec<f64>) {
        let dims = self.dims;
        let fd = dims.faces(d);
        let g = &self.grid;
        let mut pos: [Vec<f64>; 3] = Default::default();
        for a in 0..3 {
            pos[a] =
                if a == d { g.axes[a].nodes().to_vec() } else { (0..dims.0[a]).map(|i| g.axes[a].center(i)).collect() };
        }
        struct Row {
            links: [f64; 3],
            excess: [f64; 3],
            lift: f64,
            mass: f64,
        }
        let gv = &self.fixed_value[d];
        let rows: Vec<Row> = par::collect(fd.len(), |idx| {
            let mut r = Row { links: [0.0; 3], excess: [0.0; 3], lift: 0.0, mass: 0.0 };
            if !self.free[d][idx] {
                return r;
            }
            self.couplings(d, idx, |a, nb, c| match nb {
                Nb::Free(n) => {
                    if n > idx {
                        r.links[a] = c;
                    }
                }
                Nb::Fixed(n) => {
                    r.excess[a] += c;
                    r.lift += c * gv[n];
                }
                Nb::Ghost => r.excess[a] += c,
            });
            if let Some(z) = zeroth {
                r.mass = z[idx] * self.face_volume[d][idx];
            }
            r
        });
        let mut st = Stencil::new(fd, pos);
        st.active = self.free[d].clone();
        let mut lift = vec![0.0; fd.len()];
        for (idx, r) in rows.into_iter().enumerate() {
            for a in 0..3 {
                st.links[a][idx] = r.links[a];
                st.excess[a][idx] = r.excess[a];
            }
            st.mass[idx] = r.mass;
            lift[idx] = r.lift;
        }
        st.finalize();
        (st, lift)
    }

    fn label_components(&mut self) {
        let dims = self.dims;
        let n = dims.len();
        let mut comp = vec![usize::MAX; n];
        let mut pinned = Vec::new();
        let mut stack = Vec::new();
        for start in 0..n {
            if !self.fluid[start] || comp[start] != usize::MAX {
                continue;
            }
            let id = pinned.len();
            let mut pin = false;
            comp[start] = id;
            stack.push(start);
            while let Some(c) = stack.pop() {
                let cc = dims.coords(c);
                for d in 0..3 {
                    let fd = dims.faces(d);
                    let lo_face = fd.index_of(cc);
                    let hi_face = lo_face + fd.stride(d);
                    if self.free[d][lo_face] {
                        if cc[d] == 0 {
                            pin = true;
                        } else {
                            let nb = c - dims.stride(d);
                            if comp[nb] == usize::MAX {
                                comp[nb] = id;
                                stack.push(nb);
                            }
                        }
                    }
                    if self.free[d][hi_face] {
                        if cc[d] + 1 == dims.0[d] {
                            pin = true;
                        } else {
                            let nb = c + dims.stride(d);
                            if comp[nb] == usize::MAX {
                                comp[nb] = id;
                                stack.push(nb);
                            }
                        }
                    }
                }
            }
            pinned.push(pin);
        }
        self.component = comp;
        self.pinned = pinned;
    }

    /// Removes the Euclidean mean of the pressure block on every component
    /// with a constant-pressure null mode.
    pub fn project_pressure(&self, p: &mut [f64]) {
        let k = self.pinned.len();
        let mut sum = vec![0.0; k];
        let mut cnt = vec![0usize; k];
        for (c, &id) in self.component.iter().enumerate() {
            if id != usize::MAX && !self.pinned[id] {
                sum[id] += p[c];
                cnt[id] += 1;
            }
        }
        for (c, &id) in self.component.iter().enumerate() {
            if id != usize::MAX && !self.pinned[id] {
                p[c] -= sum[id] / cnt[id] as f64;
            }
        }
    }

    /// Shifts the pressure to zero volume-weighted mean on every unpinned
    /// component and zeroes it outside the fluid.
    pub fn gauge_pressure(&self, p: &mut [f64]) {
        let k = self.pinned.len();
        let mut sum = vec![0.0; k];
        let mut vol = vec![0.0; k];
        for (c, &id) in self.component.iter().enumerate() {
            if id != usize::MAX && !self.pinned[id] {
                let v = self.grid.cell_volume(self.dims.coords(c));
                sum[id] += v * p[c];
                vol[id] += v;
            }
        }
        for (c, &id) in self.component.iter().enumerate() {
            if id == usize::MAX {
                p[c] = 0.0;
            } else if !self.pinned[id] {
                p[c] -= sum[id] / vol[id];
            }
        }
    }

    /// Replaces the zeroth-order coefficients (per unit volume) of all three
    /// velocity components.
    pub fn set_zeroth(&mut self, zeroth: &[Vec<f64>; 3]) {
        for d in 0..3 {
            let fv = &self.face_volume[d];
            let free = &self.free[d];
            let z = &zeroth[d];
            par::for_each_mut(&mut self.comp[d].mass, |i, m| *m = if free[i] { z[i] * fv[i] } else { 0.0 });
            self.comp[d].finalize();
        }
    }

    /// Velocity operator `K` (homogeneous: fixed entries read as zero).
    pub fn apply_velocity(&self, u: [&[f64]; 3], out: [&mut [f64]; 3]) {
        for (d, o) in out.into_iter().enumerate() {
            self.comp[d].apply(u[d], o);
        }
    }

    fn apply_coupling(&self, u: [&[f64]; 3], out: &mut [&mut [f64]; 3]) {
        let Some(m) = self.coupling else { return };
        let dims = self.dims;
        // cell-averaged velocity
        let avg: Vec<[f64; 3]> = par::collect(dims.len(), |c| {
            if !self.fluid[c] {
                return [0.0; 3];
            }
            let cc = dims.coords(c);
            let mut v = [0.0; 3];
            for d in 0..3 {
                let fd = dims.faces(d);
                let lo = fd.index_of(cc);
                v[d] = 0.5 * (u[d][lo] + u[d][lo + fd.stride(d)]);
            }
            v
        });
        for d in 0..3 {
            let fd = dims.faces(d);
            let free = &self.free[d];
            let g = &self.grid;
            par::for_each_mut(out[d], |idx, o| {
                if !free[idx] {
                    return;
                }
                let f = fd.coords(idx);
                let mut s = 0.0;
                for side in 0..2 {
                    let c = if side == 0 {
                        if f[d] == 0 {
                            continue;
                        }
                        cell_below(dims, d, f)
                    } else {
                        if f[d] == dims.0[d] {
                            continue;
                        }
                        dims.index_of(f)
                    };
                    if !self.fluid[c] {
                        continue;
                    }
                    let vol = g.cell_volume(dims.coords(c));
                    for e in 0..3 {
                        if e != d {
                            s += 0.5 * vol * m[d][e] * avg[c][e];
                        }
                    }
                }
                *o += s;
            });
        }
    }

    /// Homogeneous divergence `D u` over free faces, per cell (zero outside the fluid).
    pub fn apply_div(&self, u: [&[f64]; 3], out: &mut [f64]) {
        let dims = self.dims;
        let g = &self.grid;
        par::for_each_mut(out, |c, o| {
            if !self.fluid[c] {
                *o = 0.0;
                return;
            }
            let cc = dims.coords(c);
            let mut s = 0.0;
            for d in 0..3 {
                let fd = dims.faces(d);
                let lo = fd.index_of(cc);
                let hi = lo + fd.stride(d);
                let area = g.face_area(d, cc);
                if self.free[d][hi] {
                    s += area * u[d][hi];
                }
                if self.free[d][lo] {
                    s -= area * u[d][lo];
                }
            }
            *o = s;
        });
    }

    /// Integrated divergence of a full field (fixed entries included).
    pub fn div_full(&self, u: [&[f64]; 3]) -> Vec<f64> {
        let dims = self.dims;
        let g = &self.grid;
        par::collect(dims.len(), |c| {
            if !self.fluid[c] {
                return 0.0;
            }
            let cc = dims.coords(c);
            let mut s = 0.0;
            for d in 0..3 {
                let fd = dims.faces(d);
                let lo = fd.index_of(cc);
                s += g.face_area(d, cc) * (u[d][lo + fd.stride(d)] - u[d][lo]);
            }
            s
        })
    }

    /// `G p = -D^T p` on free faces of component `d`.
    pub fn apply_grad(&self, d: usize, p: &[f64], out: &mut [f64]) {
        let dims = self.dims;
        let fd = dims.faces(d);
        let g = &self.grid;
        par::for_each_mut(out, |idx, o| {
            *o = if self.free[d][idx] { self.grad_at(d, fd, g, idx, p) } else { 0.0 };
        });
    }

    #[inline]
    fn grad_at(&self, d: usize, fd: Dims, g: &Grid, idx: usize, p: &[f64]) -> f64 {
        let f = fd.coords(idx);
        let dims = self.dims;
        let lo = if f[d] > 0 { p[cell_below(dims, d, f)] } else { 0.0 };
        let hi = if f[d] < dims.0[d] { p[dims.index_of(f)] } else { 0.0 };
        g.face_area(d, f) * (hi - lo)
    }

    /// Pressure force `G p` on any face, with zero pressure in solid cells.
    pub fn grad_any(&self, d: usize, idx: usize, p: &[f64]) -> f64 {
        let fd = self.dims.faces(d);
        let f = fd.coords(idx);
        let dims = self.dims;
        let val = |c: usize| if self.fluid[c] { p[c] } else { 0.0 };
        let lo = if f[d] > 0 { val(cell_below(dims, d, f)) } else { 0.0 };
        let hi = if f[d] < dims.0[d] { val(dims.index_of(f)) } else { 0.0 };
        self.grid.face_area(d, f) * (hi - lo)
    }

    /// Full saddle operator `[K, G; G^T, 0]` on the packed vector.
    pub fn apply_saddle(&self, x: &[f64], y: &mut [f64]) {
        let (xu, xp) = x.split_at(self.offsets[3]);
        let (yu, yp) = y.split_at_mut(self.offsets[3]);
        let xs = self.split3(xu);
        let (y0, rest) = yu.split_at_mut(self.offsets[1]);
        let (y1, y2) = rest.split_at_mut(self.offsets[2] - self.offsets[1]);
        let mut ys = [y0, y1, y2];
        for d in 0..3 {
            self.comp[d].apply(xs[d], ys[d]);
        }
        self.apply_coupling(xs, &mut ys);
        let dims = self.dims;
        let g = &self.grid;
        for d in 0..3 {
            let fd = dims.faces(d);
            let free = &self.free[d];
            par::for_each_mut(ys[d], |idx, o| {
                if free[idx] {
                    *o += self.grad_at(d, fd, g, idx, xp);
                }
            });
        }
        self.apply_div(xs, yp);
        par::scale(-1.0, yp);
    }

    pub(crate) fn split3<'a>(&self, v: &'a [f64]) -> [&'a [f64]; 3] {
        let (a, rest) = v.split_at(self.offsets[1]);
        let (b, c) = rest.split_at(self.offsets[2] - self.offsets[1]);
        [a, b, c]
    }

    pub(crate) fn split3_mut<'a>(&self, v: &'a mut [f64]) -> [&'a mut [f64]; 3] {
        let (a, rest) = v.split_at_mut(self.offsets[1]);
        let (b, c) = rest.split_at_mut(self.offsets[2] - self.offsets[1]);
        [a, b, c]
    }

    /// Velocity operator including the coupling, on packed velocity vectors.
    pub fn apply_velocity_packed(&self, x: &[f64], y: &mut [f64]) {
        let xs = self.split3(x);
        let mut ys = self.split3_mut(y);
        for d in 0..3 {
            self.comp[d].apply(xs[d], ys[d]);
        }
        self.apply_coupling(xs, &mut ys);
    }

    /// Builds the per-component multigrid preconditioners.
    pub fn multigrids(&self) -> [Multigrid; 3] {
        let v = par::map_slice(&[0usize, 1, 2], |&d| Multigrid::new(self.comp[d].clone()));
        let mut it = v.into_iter();
        [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()]
    }

    /// Right-hand side of the momentum rows for a forcing density given on
    /// all faces (ignored on fixed faces), including the boundary lift.
    pub fn momentum_rhs(&self, force: Option<&[Vec<f64>; 3]>) -> Vec<f64> {
        let mut b = vec![0.0; self.offsets[3]];
        let bs = self.split3_mut(&mut b);
        for (d, bd) in bs.into_iter().enumerate() {
            par::for_each_mut(bd, |idx, v| {
                if self.free[d][idx] {
                    let f = force.map_or(0.0, |f| f[d][idx]);
                    *v = f * self.face_volume[d][idx] + self.lift[d][idx];
                }
            });
        }
        b
    }

    /// Divergence of the fixed face values, per fluid cell.
    pub fn fixed_divergence(&self) -> Vec<f64> {
        self.div_full([&self.fixed_value[0], &self.fixed_value[1], &self.fixed_value[2]])
    }

    /// Adds the fixed values to a homogeneous velocity.
    pub fn with_fixed(&self, u: [&[f64]; 3]) -> [Vec<f64>; 3] {
        let mut out: [Vec<f64>; 3] = Default::default();
        for d in 0..3 {
            out[d] = u[d]
                .iter()
                .zip(&self.free[d])
                .zip(&self.fixed_value[d])
                .map(|((x, fr), g)| if *fr { *x } else { *g })
                .collect();
        }
        out
    }

    /// Viscous energy `B(u, w) = sum over links c * (du)(dw)` of two full
    /// fields, divided by `mu` (so `B(u, u) = |grad u|^2`). Links between two
    /// fixed faces are left out.
    pub fn grad_inner(&self, u: [&[f64]; 3], w: [&[f64]; 3]) -> f64 {
        let mut total = 0.0;
        for d in 0..3 {
            let n = self.dims.faces(d).len();
            total += par::sum_by(n, |idx| {
                if !self.free[d][idx] {
                    return 0.0;
                }
                let (ud, wd) = (u[d], w[d]);
                let mut s = 0.0;
                self.couplings(d, idx, |_, nb, c| match nb {
                    Nb::Free(m) => {
                        if m > idx {
                            s += c * (ud[idx] - ud[m]) * (wd[idx] - wd[m]);
                        }
                    }
                    Nb::Fixed(m) => s += c * (ud[idx] - ud[m]) * (wd[idx] - wd[m]),
                    Nb::Ghost => s += c * ud[idx] * wd[idx],
                });
                s
            });
        }
        total / self.mu
    }

    /// Momentum reaction `(K_full u + G p)` on the fixed face `idx` of
    /// component `d` from its free neighbours (`u` is a full field).
    pub fn reaction(&self, d: usize, idx: usize, u: &[f64], p: &[f64]) -> f64 {
        let fd = self.dims.faces(d);
        let f = fd.coords(idx);
        let mut s = 0.0;
        for a in 0..3 {
            let st = fd.stride(a);
            let n_a = fd.0[a];
            for nb in
                [f[a].checked_sub(1).map(|_| idx - st), (f[a] + 1 < n_a).then_some(idx + st)].into_iter().flatten()
            {
                if self.free[d][nb] {
                    self.couplings(d, nb, |_, who, c| {
                        if who == Nb::Fixed(idx) {
                            s += c * (u[idx] - u[nb]);
                        }
                    });
                }
            }
        }
        s + self.grad_any(d, idx, p)
    }

    /// Relative residuals of a candidate solution (homogeneous velocity
    /// `x_u`, pressure `p`) against momentum right-hand side `b` and the
    /// divergence constraint.
    pub fn residuals(&self, b: &[f64], x: &[f64]) -> (f64, f64) {
        let mut y = vec![0.0; self.len];
        self.apply_saddle(x, &mut y);
        let vu = self.offsets[3];
        let mut num = 0.0;
        let mut den = 0.0;
        for d in 0..3 {
            let r = self.range(d);
            let fv = &self.face_volume[d];
            let off = r.start;
            num +=
                par::sum_by(r.len(), |i| if self.free[d][i] { (b[off + i] - y[off + i]).powi(2) / fv[i] } else { 0.0 });
            den += par::sum_by(r.len(), |i| if self.free[d][i] { b[off + i].powi(2) / fv[i] } else { 0.0 });
        }
        let rel_mom = if den > 0.0 { (num / den).sqrt() } else { num.sqrt() };
        let full = self.with_fixed(self.split3(&x[..vu]));
        let fr = [&full[0][..], &full[1][..], &full[2][..]];
        let div = self.div_full(fr);
        let dims = self.dims;
        let div_l2 = par::sum_by(dims.len(), |c| {
            if self.fluid[c] {
                div[c] * div[c] / self.grid.cell_volume(dims.coords(c))
            } else {
                0.0
            }
        })
        .sqrt();
        let grad = self.grad_inner(fr, fr).sqrt();
        let rel_div = if grad > 0.0 { div_l2 / grad } else { div_l2 };
        (rel_mom, rel_div)
    }

    /// Solves the saddle-point system with forcing density `force` (per unit
    /// volume, on faces) to relative residual `tol` in both rows.
    pub fn solve(&self, force: Option<&[Vec<f64>; 3]>, tol: f64, max_iter: usize) -> Result<SaddleSolution> {
        let mgs = self.multigrids();
        self.solve_with(&mgs, force, tol, max_iter)
    }

    pub fn solve_with(
        &self,
        mgs: &[Multigrid; 3],
        force: Option<&[Vec<f64>; 3]>,
        tol: f64,
        max_iter: usize,
    ) -> Result<SaddleSolution> {
        if !(tol > 0.0) {
            return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
        }
        let vu = self.offsets[3];
        let mut b = self.momentum_rhs(force);
        let mut rhs_p = self.fixed_divergence();
        self.project_pressure(&mut rhs_p);
        b.extend_from_slice(&rhs_p);
        let dims = self.dims;
        let inv_vol: Vec<f64> =
            par::collect(
                dims.len(),
                |c| {
                    if self.fluid[c] {
                        self.mu / self.grid.cell_volume(dims.coords(c))
                    } else {
                        0.0
                    }
                },
            );
        let precond = |r: &[f64], z: &mut [f64]| {
            let (ru, rp) = r.split_at(vu);
            let (zu, zp) = z.split_at_mut(vu);
            let rs = self.split3(ru);
            let zs = self.split3_mut(zu);
            #[cfg(feature = "parallel")]
            {
                let [z0, z1, z2] = zs;
                rayon::join(
                    || mgs[0].vcycle(rs[0], z0),
                    || rayon::join(|| mgs[1].vcycle(rs[1], z1), || mgs[2].vcycle(rs[2], z2)),
                );
            }
            #[cfg(not(feature = "parallel"))]
            for (d, zd) in zs.into_iter().enumerate() {
                mgs[d].vcycle(rs[d], zd);
            }
            par::for_each_mut(zp, |c, v| *v = inv_vol[c] * rp[c]);
        };
        let project = |x: &mut [f64]| self.project_pressure(&mut x[vu..]);
        let apply = |x: &[f64], y: &mut [f64]| self.apply_saddle(x, y);
        let mut x = vec![0.0; self.len];
        let mut inner_tol = 0.1 * tol;
        let mut stats = SolveStats::default();
        let mut rel = (f64::INFINITY, f64::INFINITY);
        for _restart in 0..8 {
            let st = minres(&apply, &precond, Some(&project), &b, &mut x, inner_tol, max_iter - stats.iterations);
            stats.iterations += st.iterations;
            stats.trace.extend(st.trace.iter().skip(1));
            stats.residual = st.residual;
            rel = self.residuals(&b, &x);
            log::debug!(
                "minres: {} its, est {:.2e}, momentum {:.2e}, divergence {:.2e}",
                st.iterations,
                st.residual,
                rel.0,
                rel.1
            );
            if rel.0 <= tol && rel.1 <= tol {
                break;
            }
            if stats.iterations >= max_iter {
                break;
            }
            // a restart measures progress relative to its own initial
            // residual, so ask only for the missing reduction
            let worst = (rel.0 / tol).max(rel.1 / tol);
            inner_tol = (0.1 / worst).clamp(1e-12, 0.1);
        }
        if !(rel.0 <= tol && rel.1 <= tol) {
            return Err(Error::NonConvergence {
                iterations: stats.iterations,
                residual: rel.0.max(rel.1),
                trace: stats.trace,
            });
        }
        let (xu, xp) = x.split_at(vu);
        let u = self.with_fixed(self.split3(xu));
        let mut p = xp.to_vec();
        self.gauge_pressure(&mut p);
        Ok(SaddleSolution { u, p, stats, rel_momentum: rel.0, rel_divergence: rel.1 })
    }

    /// Solves `K u = b` (velocity rows only) with block multigrid PCG.
    pub fn solve_velocity(
        &self,
        mgs: &[Multigrid; 3],
        b: &[f64],
        x: &mut [f64],
        tol: f64,
        max_iter: usize,
    ) -> Result<SolveStats> {
        let precond = |r: &[f64], z: &mut [f64]| {
            let rs = self.split3(r);
            let zs = self.split3_mut(z);
            for (d, zd) in zs.into_iter().enumerate() {
                mgs[d].vcycle(rs[d], zd);
            }
        };
        let apply = |x: &[f64], y: &mut [f64]| self.apply_velocity_packed(x, y);
        pcg(&apply, &precond, None, b, x, tol, max_iter)
    }
}

/// Index of the cell below face `f` (normal to `d`).
#[inline]
pub(crate) fn cell_below(dims: Dims, d: usize, f: [usize; 3]) -> usize {
    let mut c = f;
    c[d] -= 1;
    dims.index_of(c)
}

/// Face lattice index of the lower face of cell `c` along `d`.
#[inline]
pub fn lower_face(dims: Dims, d: usize, c: [usize; 3]) -> usize {
    dims.faces(d).index_of(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Axis;

    fn box_system(n: usize, sides: [[Side; 2]; 3]) -> MacSystem {
        let g = Grid::uniform([0.0; 3], [1.0; 3], 1.0 / n as f64).unwrap();
        let solid = vec![false; g.cell_count()];
        let mut p = MacParams::new(g, solid, 1.0);
        p.sides = sides;
        MacSystem::new(p).unwrap()
    }

    #[test]
    fn saddle_operator_is_symmetric() {
        let mut sides = [[Side::Wall; 2]; 3];
        sides[0][0] = Side::AntiMirror;
        sides[1][0] = Side::Mirror;
        let axes = [
            Axis::from_nodes(vec![0.0, 0.1, 0.3, 0.6, 1.0]).unwrap(),
            Axis::uniform(0.0, 1.0, 3),
            Axis::from_nodes(vec![0.0, 0.2, 0.5, 0.7, 1.0]).unwrap(),
        ];
        let g = Grid::new(axes);
        let mut solid = vec![false; g.cell_count()];
        solid[5] = true;
        let mut p = MacParams::new(g, solid, 1.3);
        p.sides = sides;
        p.coupling = Some([[0.0, 0.4, 0.1], [0.4, 0.0, 0.2], [0.1, 0.2, 0.0]]);
        let sys = MacSystem::new(p).unwrap();
        let n = sys.len();
        let mask = |v: &mut Vec<f64>| {
            for d in 0..3 {
                let r = sys.range(d);
                for (i, fr) in sys.free[d].iter().enumerate() {
                    if !fr {
                        v[r.start + i] = 0.0;
                    }
                }
            }
            let r = sys.range(3);
            for c in 0..sys.dims.len() {
                if !sys.fluid[c] {
                    v[r.start + c] = 0.0;
                }
            }
        };
        let mut x: Vec<f64> = (0..n).map(|i| ((i * 17) % 23) as f64 / 23.0 - 0.5).collect();
        let mut y: Vec<f64> = (0..n).map(|i| ((i * 7) % 19) as f64 / 19.0 - 0.5).collect();
        mask(&mut x);
        mask(&mut y);
        let mut ax = vec![0.0; n];
        let mut ay = vec![0.0; n];
        sys.apply_saddle(&x, &mut ax);
        sys.apply_saddle(&y, &mut ay);
        let l = par::dot(&ax, &y);
        let r = par::dot(&x, &ay);
        assert!((l - r).abs() < 1e-12 * (l.abs() + 1.0), "{l} vs {r}");
    }

    #[test]
    fn energy_matches_operator() {
        let sys = box_system(4, [[Side::Wall; 2]; 3]);
        let vu = sys.velocity_len();
        let x: Vec<f64> = (0..vu).map(|i| if (i * 5) % 3 == 0 { 0.3 } else { -0.2 } * (i as f64).sin()).collect();
        let mut xm = x.clone();
        for d in 0..3 {
            let r = sys.range(d);
            for (i, fr) in sys.free[d].iter().enumerate() {
                if !fr {
                    xm[r.start + i] = 0.0;
                }
            }
        }
        let mut kx = vec![0.0; vu];
        sys.apply_velocity_packed(&xm, &mut kx);
        let quad = par::dot(&xm, &kx);
        let full = sys.with_fixed(sys.split3(&xm));
        let fr = [&full[0][..], &full[1][..], &full[2][..]];
        assert!((quad - sys.grad_inner(fr, fr)).abs() < 1e-12 * quad);
    }

    #[test]
    fn closed_box_has_one_pressure_mode() {
        let sys = box_system(4, [[Side::Wall; 2]; 3]);
        assert_eq!(sys.pinned, vec![false]);
        let mut sides = [[Side::Wall; 2]; 3];
        sides[2][0] = Side::AntiMirror;
        let sys = box_system(4, sides);
        assert_eq!(sys.pinned, vec![true]);
    }

    #[test]
    fn zero_forcing_gives_zero_solution() {
        let sys = box_system(6, [[Side::Wall; 2]; 3]);
        let sol = sys.solve(None, 1e-8, 200).unwrap();
        assert!(sol.u.iter().all(|c| c.iter().all(|v| *v == 0.0)));
        assert!(sol.p.iter().all(|v| *v == 0.0));
    }
}
