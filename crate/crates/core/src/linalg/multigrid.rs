//! Aggregation multigrid for [`Stencil`] operators.
//!
//! Adjacent node layers are merged in pairs along each axis, thinnest layers
//! first, so every coarse level is again a tensor lattice with a 7-point
//! stencil and strongly stretched cells are coarsened only along their short
//! side until they become isotropic. Coarse links are the summed fine
//! links crossing between aggregates, rescaled by the ratio of fine to coarse
//! node distances, which keeps the coarse operator close to a
//! rediscretization. The V-cycle uses symmetric red-black Gauss-Seidel and is
//! therefore a symmetric positive definite preconditioner.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::grid::Dims;
use crate::linalg::stencil::Stencil;
use crate::par;

/// Coarsening stops once a level has at most this many active nodes.
pub const COARSEST_NODES: usize = 800;

struct Level {
    op: Stencil,
    /// Fine-to-coarse layer map per axis (for the transfer to the next level).
    maps: [Vec<usize>; 3],
}

pub struct Multigrid {
    levels: Vec<Level>,
    coarse_idx: Vec<usize>,
    coarse: Cholesky<f64, nalgebra::Dyn>,
    pub sweeps: usize,
}

impl std::fmt::Debug for Multigrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Multigrid")
            .field("levels", &self.levels.len())
            .field("coarse_nodes", &self.coarse_idx.len())
            .finish()
    }
}

/// Width of every node layer along one axis, from the node positions.
fn layer_widths(pos: &[f64]) -> Vec<f64> {
    let n = pos.len();
    if n < 2 {
        return vec![1.0; n];
    }
    (0..n)
        .map(|i| {
            let lo = if i == 0 { pos[1] - pos[0] } else { pos[i] - pos[i - 1] };
            let hi = if i + 1 == n { pos[n - 1] - pos[n - 2] } else { pos[i + 1] - pos[i] };
            0.5 * (lo + hi)
        })
        .collect()
}

/// Greedy pairing of adjacent layers whose combined width stays within
/// `target`; wider layers are kept as they are. Returns the layer map and
/// whether each coarse layer is a merged pair.
fn merge_map(widths: &[f64], target: f64) -> (Vec<usize>, Vec<bool>) {
    let mut map = Vec::with_capacity(widths.len());
    let mut merged = Vec::new();
    let mut i = 0;
    while i < widths.len() {
        let c = merged.len();
        if i + 1 < widths.len() && widths[i] + widths[i + 1] <= target * (1.0 + 1e-9) {
            map.push(c);
            map.push(c);
            merged.push(true);
            i += 2;
        } else {
            map.push(c);
            merged.push(false);
            i += 1;
        }
    }
    (map, merged)
}

fn coarsen(fine: &Stencil, widths: &[Vec<f64>; 3], target: f64) -> Option<(Stencil, [Vec<usize>; 3], [Vec<f64>; 3])> {
    let fd = fine.dims;
    let mut maps: [Vec<usize>; 3] = Default::default();
    let mut merged: [Vec<bool>; 3] = Default::default();
    let mut cn = [0usize; 3];
    for a in 0..3 {
        let (m, g) = merge_map(&widths[a], target);
        cn[a] = g.len();
        maps[a] = m;
        merged[a] = g;
    }
    if cn == fd.0 {
        return None;
    }
    let cd = Dims(cn);
    let mut pos: [Vec<f64>; 3] = [vec![0.0; cn[0]], vec![0.0; cn[1]], vec![0.0; cn[2]]];
    let mut cw: [Vec<f64>; 3] = [vec![0.0; cn[0]], vec![0.0; cn[1]], vec![0.0; cn[2]]];
    for a in 0..3 {
        for (i, &c) in maps[a].iter().enumerate() {
            pos[a][c] += widths[a][i] * fine.pos[a][i];
            cw[a][c] += widths[a][i];
        }
        for c in 0..cn[a] {
            pos[a][c] /= cw[a][c];
        }
    }
    let mut coarse = Stencil::new(cd, pos);
    coarse.active = vec![false; cd.len()];
    for n in 0..fd.len() {
        if !fine.active[n] {
            continue;
        }
        let c = fd.coords(n);
        let cc = [maps[0][c[0]], maps[1][c[1]], maps[2][c[2]]];
        let m = cd.index_of(cc);
        coarse.active[m] = true;
        coarse.mass[m] += fine.mass[n];
        for a in 0..3 {
            let e = fine.excess[a][n];
            coarse.excess[a][m] += if merged[a][cc[a]] { 0.5 * e } else { e };
            let l = fine.links[a][n];
            if l != 0.0 && c[a] + 1 < fd.0[a] {
                let up = maps[a][c[a] + 1];
                if up != cc[a] {
                    let df = fine.pos[a][c[a] + 1] - fine.pos[a][c[a]];
                    let dc = coarse.pos[a][up] - coarse.pos[a][cc[a]];
                    coarse.links[a][m] += l * df / dc;
                }
            }
        }
    }
    coarse.finalize();
    Some((coarse, maps, cw))
}

impl Multigrid {
    pub fn new(op: Stencil) -> Self {
        let mut levels = Vec::new();
        let mut widths: [Vec<f64>; 3] = [layer_widths(&op.pos[0]), layer_widths(&op.pos[1]), layer_widths(&op.pos[2])];
        let h_min = widths.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
        let h_max = widths.iter().flatten().cloned().fold(0.0, f64::max);
        let mut target = 2.0 * h_min;
        let mut cur = op;
        while cur.active_count() > COARSEST_NODES {
            match coarsen(&cur, &widths, target) {
                Some((next, maps, w)) => {
                    levels.push(Level { op: cur, maps });
                    cur = next;
                    widths = w;
                }
                None if target > 4.0 * h_max * cur.dims.0.iter().max().copied().unwrap_or(1) as f64 => break,
                None => {}
            }
            target *= 2.0;
        }
        let (idx, dense) = cur.to_dense();
        let m = idx.len();
        let mut mat = DMatrix::from_row_slice(m, m, &dense);
        let trace: f64 = (0..m).map(|i| mat[(i, i)]).sum::<f64>().max(f64::MIN_POSITIVE);
        let chol = match Cholesky::new(mat.clone()) {
            Some(c) => c,
            None => {
                // singular (pure Neumann) operators: a tiny shift keeps the
                // factorization defined; callers project the null space
                let shift = 1e-10 * trace / m.max(1) as f64;
                for i in 0..m {
                    mat[(i, i)] += shift;
                }
                Cholesky::new(mat).expect("shifted coarse operator is positive definite")
            }
        };
        levels.push(Level { op: cur, maps: [vec![], vec![], vec![]] });
        Multigrid { levels, coarse_idx: idx, coarse: chol, sweeps: 2 }
    }

    pub fn op(&self) -> &Stencil {
        &self.levels[0].op
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// `x = M^{-1} b` for one V-cycle from a zero initial guess.
    pub fn vcycle(&self, b: &[f64], x: &mut [f64]) {
        x.iter_mut().for_each(|v| *v = 0.0);
        self.cycle(0, b, x);
    }

    fn cycle(&self, l: usize, b: &[f64], x: &mut [f64]) {
        let level = &self.levels[l];
        if l + 1 == self.levels.len() {
            let rhs = DVector::from_iterator(self.coarse_idx.len(), self.coarse_idx.iter().map(|&n| b[n]));
            let sol = self.coarse.solve(&rhs);
            for (k, &n) in self.coarse_idx.iter().enumerate() {
                x[n] = sol[k];
            }
            return;
        }
        let op = &level.op;
        for _ in 0..self.sweeps {
            op.sweep_color(b, x, 0);
            op.sweep_color(b, x, 1);
        }
        let mut r = vec![0.0; op.len()];
        op.residual(b, x, &mut r);
        let next = &self.levels[l + 1].op;
        let cd = next.dims;
        let fd = op.dims;
        let maps = &level.maps;
        // restriction = transpose of piecewise-constant prolongation
        let mut rc = vec![0.0; cd.len()];
        for n in 0..fd.len() {
            if op.active[n] {
                let c = fd.coords(n);
                rc[cd.index(maps[0][c[0]], maps[1][c[1]], maps[2][c[2]])] += r[n];
            }
        }
        let mut ec = vec![0.0; cd.len()];
        self.cycle(l + 1, &rc, &mut ec);
        par::for_each_mut(x, |n, xn| {
            if op.active[n] {
                let c = fd.coords(n);
                *xn += ec[cd.index(maps[0][c[0]], maps[1][c[1]], maps[2][c[2]])];
            }
        });
        for _ in 0..self.sweeps {
            op.sweep_color(b, x, 1);
            op.sweep_color(b, x, 0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dirichlet_laplacian(n: usize) -> Stencil {
        let d = Dims([n, n, n]);
        let h = 1.0 / n as f64;
        let pos: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) * h).collect();
        let mut s = Stencil::new(d, [pos.clone(), pos.clone(), pos]);
        for idx in 0..d.len() {
            let c = d.coords(idx);
            for a in 0..3 {
                s.links[a][idx] = h;
                if c[a] == 0 || c[a] + 1 == n {
                    s.excess[a][idx] += 2.0 * h;
                }
            }
        }
        s.finalize();
        s
    }

    #[test]
    fn vcycle_reduces_error_steadily() {
        let s = dirichlet_laplacian(32);
        let mg = Multigrid::new(s.clone());
        assert!(mg.depth() >= 3);
        let n = s.len();
        let exact: Vec<f64> = (0..n).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
        let mut b = vec![0.0; n];
        s.apply(&exact, &mut b);
        let mut x = vec![0.0; n];
        let mut r = vec![0.0; n];
        let mut e = vec![0.0; n];
        let r0 = par::norm2(&b);
        for _ in 0..12 {
            s.residual(&b, &x, &mut r);
            mg.vcycle(&r, &mut e);
            par::axpy(1.0, &e, &mut x);
        }
        s.residual(&b, &x, &mut r);
        // stationary iteration; contraction well below one per cycle
        assert!(par::norm2(&r) < 1e-4 * r0, "residual {}", par::norm2(&r) / r0);
    }

    #[test]
    fn vcycle_is_symmetric() {
        let mut s = dirichlet_laplacian(12);
        for n in [5, 77, 300, 301, 302] {
            s.active[n] = false;
        }
        s.finalize();
        let mg = Multigrid::new(s.clone());
        let n = s.len();
        let mut u: Vec<f64> = (0..n).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let mut v: Vec<f64> = (0..n).map(|i| ((i * 5) % 9) as f64 - 4.0).collect();
        for k in 0..n {
            if !s.active[k] {
                u[k] = 0.0;
                v[k] = 0.0;
            }
        }
        let mut mu = vec![0.0; n];
        let mut mv = vec![0.0; n];
        mg.vcycle(&u, &mut mu);
        mg.vcycle(&v, &mut mv);
        let a = par::dot(&mu, &v);
        let b = par::dot(&u, &mv);
        assert!((a - b).abs() < 1e-10 * a.abs().max(1.0), "{a} vs {b}");
    }
}
