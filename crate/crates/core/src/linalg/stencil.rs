//! Symmetric 7-point operators on a tensor lattice with an activity mask.
//!
//! Row `n` of the operator is
//! `diag[n] * x[n] - sum over neighbours m of link(n, m) * x[m]`
//! with `diag = sum of links + sum of excess + mass`. Inactive nodes carry no
//! unknown; they read and write zero.

use crate::grid::Dims;
use crate::par;

#[derive(Debug, Clone, Default)]
pub struct Stencil {
    pub dims: Dims,
    pub active: Vec<bool>,
    /// `links[a][n]` couples `n` with `n + e_a`; zero when either end is
    /// inactive or `n` is on the last layer along `a`.
    pub links: [Vec<f64>; 3],
    /// Extra diagonal from couplings to prescribed values, split by axis.
    pub excess: [Vec<f64>; 3],
    pub mass: Vec<f64>,
    /// Coordinate of each node layer along each axis.
    pub pos: [Vec<f64>; 3],
    pub diag: Vec<f64>,
}

impl Stencil {
    /// Empty stencil (no links, no excess, no mass) with every node active.
    pub fn new(dims: Dims, pos: [Vec<f64>; 3]) -> Self {
        let n = dims.len();
        Stencil {
            dims,
            active: vec![true; n],
            links: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            excess: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            mass: vec![0.0; n],
            pos,
            diag: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }

    /// Zeroes links touching inactive nodes and recomputes the diagonal.
    pub fn finalize(&mut self) {
        let d = self.dims;
        for a in 0..3 {
            let s = d.stride(a);
            let na = d.0[a];
            let active = &self.active;
            par::for_each_mut(&mut self.links[a], |n, l| {
                let c = d.coords(n);
                if c[a] + 1 >= na || !active[n] || !active[n + s] {
                    *l = 0.0;
                }
            });
        }
        let links = &self.links;
        let excess = &self.excess;
        let mass = &self.mass;
        let active = &self.active;
        self.diag = par::collect(d.len(), |n| {
            if !active[n] {
                return 1.0;
            }
            let c = d.coords(n);
            let mut s = mass[n];
            for a in 0..3 {
                s += links[a][n] + excess[a][n];
                if c[a] > 0 {
                    s += links[a][n - d.stride(a)];
                }
            }
            s
        });
    }

    #[inline]
    fn offdiag(&self, n: usize, c: [usize; 3], x: &[f64]) -> f64 {
        self.offdiag_with(n, c, |m| x[m])
    }

    #[inline]
    fn offdiag_with(&self, n: usize, c: [usize; 3], x: impl Fn(usize) -> f64) -> f64 {
        let d = self.dims;
        let mut s = 0.0;
        for a in 0..3 {
            let st = d.stride(a);
            if c[a] + 1 < d.0[a] {
                s += self.links[a][n] * x(n + st);
            }
            if c[a] > 0 {
                s += self.links[a][n - st] * x(n - st);
            }
        }
        s
    }

    /// `y = A x`
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        let d = self.dims;
        par::for_each_mut(y, |n, yn| {
            *yn = if self.active[n] { self.diag[n] * x[n] - self.offdiag(n, d.coords(n), x) } else { 0.0 };
        });
    }

    /// `r = b - A x`
    pub fn residual(&self, b: &[f64], x: &[f64], r: &mut [f64]) {
        let d = self.dims;
        par::for_each_mut(r, |n, rn| {
            *rn = if self.active[n] { b[n] - self.diag[n] * x[n] + self.offdiag(n, d.coords(n), x) } else { 0.0 };
        });
    }

    /// One Gauss-Seidel half sweep over the nodes with `(i + j + k) % 2 == color`.
    pub fn sweep_color(&self, b: &[f64], x: &mut [f64], color: usize) {
        let d = self.dims;
        let rows = d.0[1] * d.0[2];
        let n0 = d.0[0];
        let ptr = par::SharedMut(x.as_mut_ptr());
        par::for_range(rows, |row| {
            // capture the whole wrapper, not its raw-pointer field
            #[allow(clippy::redundant_locals)]
            let ptr = ptr;
            let j = row % d.0[1];
            let k = row / d.0[1];
            let base = row * n0;
            let start = (color + j + k) % 2;
            let mut i = start;
            while i < n0 {
                let n = base + i;
                if self.active[n] {
                    // SAFETY: this task writes only nodes of `color` in its own
                    // row and reads only neighbours of the other colour, which
                    // no task writes during this half sweep.
                    let off = self.offdiag_with(n, [i, j, k], |m| unsafe { *ptr.0.add(m) });
                    unsafe { *ptr.0.add(n) = (b[n] + off) / self.diag[n] };
                }
                i += 2;
            }
        });
    }

    /// Dense copy of the active block (row-major), with the active indices.
    pub fn to_dense(&self) -> (Vec<usize>, Vec<f64>) {
        let d = self.dims;
        let idx: Vec<usize> = (0..d.len()).filter(|n| self.active[*n]).collect();
        let mut local = vec![usize::MAX; d.len()];
        for (k, n) in idx.iter().enumerate() {
            local[*n] = k;
        }
        let m = idx.len();
        let mut a = vec![0.0; m * m];
        for (k, &n) in idx.iter().enumerate() {
            a[k * m + k] = self.diag[n];
            let c = d.coords(n);
            for ax in 0..3 {
                if c[ax] + 1 < d.0[ax] {
                    let nb = n + d.stride(ax);
                    let l = self.links[ax][n];
                    if l != 0.0 && local[nb] != usize::MAX {
                        let q = local[nb];
                        a[k * m + q] -= l;
                        a[q * m + k] -= l;
                    }
                }
            }
        }
        (idx, a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn laplacian(n: usize) -> Stencil {
        let d = Dims([n, n, n]);
        let h = 1.0 / n as f64;
        let pos: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) * h).collect();
        let mut s = Stencil::new(d, [pos.clone(), pos.clone(), pos]);
        for idx in 0..d.len() {
            let c = d.coords(idx);
            for a in 0..3 {
                s.links[a][idx] = h;
                if c[a] == 0 {
                    s.excess[a][idx] += 2.0 * h;
                }
                if c[a] + 1 == n {
                    s.excess[a][idx] += 2.0 * h;
                }
            }
        }
        s.finalize();
        s
    }

    #[test]
    fn apply_is_symmetric() {
        let mut s = laplacian(5);
        s.active[7] = false;
        s.active[60] = false;
        s.finalize();
        let x: Vec<f64> = (0..125).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..125).map(|i| ((i * 3) % 13) as f64 - 6.0).collect();
        let mut ax = vec![0.0; 125];
        let mut ay = vec![0.0; 125];
        s.apply(&x, &mut ax);
        s.apply(&y, &mut ay);
        let l = par::dot(&ax, &y);
        let r = par::dot(&x, &ay);
        assert!((l - r).abs() < 1e-12 * l.abs().max(1.0));
        assert_eq!(ax[7], 0.0);
    }

    #[test]
    fn dense_matches_apply() {
        let s = laplacian(3);
        let (idx, a) = s.to_dense();
        let m = idx.len();
        let x: Vec<f64> = (0..27).map(|i| (i as f64).cos()).collect();
        let mut y = vec![0.0; 27];
        s.apply(&x, &mut y);
        for r in 0..m {
            let v: f64 = (0..m).map(|c| a[r * m + c] * x[idx[c]]).sum();
            assert!((v - y[idx[r]]).abs() < 1e-12);
        }
    }
}
