//! Rectilinear tensor-product grids and lattice indexing.
//!
//! Cells are indexed `i + n0 * (j + n1 * k)`. Faces normal to axis `d` live
//! on the lattice with `n[d] + 1` points along `d`; the face with lattice
//! coordinate `i_d` separates cells `i_d - 1` and `i_d`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extents of a 3D index lattice.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims(pub [usize; 3]);

impl Dims {
    #[inline]
    pub fn len(&self) -> usize {
        self.0[0] * self.0[1] * self.0[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.0[0] * (j + self.0[1] * k)
    }

    #[inline]
    pub fn index_of(&self, c: [usize; 3]) -> usize {
        self.index(c[0], c[1], c[2])
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.0[0];
        let r = idx / self.0[0];
        [i, r % self.0[1], r / self.0[1]]
    }

    /// Linear index offset for a unit step along `axis`.
    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => 1,
            1 => self.0[0],
            _ => self.0[0] * self.0[1],
        }
    }

    /// Lattice of faces normal to `axis` for a cell lattice with these dims.
    pub fn faces(&self, axis: usize) -> Dims {
        let mut d = self.0;
        d[axis] += 1;
        Dims(d)
    }
}

/// Node coordinates along one axis (strictly increasing).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    nodes: Vec<f64>,
}

impl Axis {
    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::InvalidArgument("axis needs at least one cell".into()));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) || nodes.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("axis nodes must be finite and strictly increasing".into()));
        }
        Ok(Axis { nodes })
    }

    pub fn uniform(lo: f64, hi: f64, cells: usize) -> Self {
        let h = (hi - lo) / cells as f64;
        let mut nodes: Vec<f64> = (0..=cells).map(|i| lo + h * i as f64).collect();
        nodes[cells] = hi;
        Axis { nodes }
    }

    /// Axis on `[0, 1]` (or `[-1, 1]` when `mirrored`) with spacing `h_in` up
    /// to `inner`, geometric growth by `growth` until the spacing reaches
    /// `h_out`, then roughly uniform spacing up to 1.
    pub fn graded(h_in: f64, inner: f64, growth: f64, h_out: f64, mirrored: bool) -> Result<Self> {
        if !(h_in > 0.0 && h_out >= h_in && growth > 1.0 && (0.0..1.0).contains(&inner)) {
            return Err(Error::InvalidArgument(format!(
                "bad grading h_in={h_in} inner={inner} growth={growth} h_out={h_out}"
            )));
        }
        let mut half = vec![0.0];
        let mut x = 0.0;
        let mut h = h_in;
        while x + h <= inner + 1e-12 * h_in {
            x += h;
            half.push(x);
        }
        while h * growth < h_out && x + h * growth < 1.0 {
            h *= growth;
            x += h;
            half.push(x);
        }
        let rest = 1.0 - x;
        if rest > 1e-12 {
            let m = ((rest / h_out).round() as usize).max(1);
            let step = rest / m as f64;
            for s in 1..=m {
                half.push(x + step * s as f64);
            }
        }
        let last = half.len() - 1;
        half[last] = 1.0;
        let nodes = if mirrored {
            let mut v: Vec<f64> = half.iter().rev().map(|x| -x).collect();
            v.extend_from_slice(&half[1..]);
            v
        } else {
            half
        };
        Axis::from_nodes(nodes)
    }

    #[inline]
    pub fn cells(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    #[inline]
    pub fn node(&self, i: usize) -> f64 {
        self.nodes[i]
    }

    #[inline]
    pub fn width(&self, i: usize) -> f64 {
        self.nodes[i + 1] - self.nodes[i]
    }

    /// Width of cell `i`, or 0 outside the axis.
    #[inline]
    pub fn width_or_zero(&self, i: isize) -> f64 {
        if i < 0 || i as usize >= self.cells() {
            0.0
        } else {
            self.width(i as usize)
        }
    }

    #[inline]
    pub fn center(&self, i: usize) -> f64 {
        0.5 * (self.nodes[i] + self.nodes[i + 1])
    }

    pub fn lo(&self) -> f64 {
        self.nodes[0]
    }

    pub fn hi(&self) -> f64 {
        self.nodes[self.cells()]
    }

    pub fn min_width(&self) -> f64 {
        (0..self.cells()).map(|i| self.width(i)).fold(f64::INFINITY, f64::min)
    }

    pub fn max_width(&self) -> f64 {
        (0..self.cells()).map(|i| self.width(i)).fold(0.0, f64::max)
    }

    pub fn is_uniform(&self) -> bool {
        let h = self.width(0);
        (0..self.cells()).all(|i| (self.width(i) - h).abs() <= 1e-9 * h)
    }
}

/// Tensor-product grid of three axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub axes: [Axis; 3],
}

impl Grid {
    pub fn new(axes: [Axis; 3]) -> Self {
        Grid { axes }
    }

    /// Uniform cubic cells of side `h` covering `[lo, hi]`; every side must
    /// be an integer multiple of `h` up to 1e-6 relative.
    pub fn uniform(lo: [f64; 3], hi: [f64; 3], h: f64) -> Result<Self> {
        let mut axes = Vec::with_capacity(3);
        for a in 0..3 {
            let side = hi[a] - lo[a];
            let n = (side / h).round();
            if n < 1.0 || ((n * h - side) / side).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!("side {side} along axis {a} is not a multiple of h = {h}")));
            }
            axes.push(Axis::uniform(lo[a], hi[a], n as usize));
        }
        let axes: [Axis; 3] = axes.try_into().expect("three axes");
        Ok(Grid { axes })
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        Dims([self.axes[0].cells(), self.axes[1].cells(), self.axes[2].cells()])
    }

    #[inline]
    pub fn cell_count(&self) -> usize {
        self.dims().len()
    }

    #[inline]
    pub fn face_dims(&self, axis: usize) -> Dims {
        self.dims().faces(axis)
    }

    pub fn cell_center(&self, c: [usize; 3]) -> [f64; 3] {
        [self.axes[0].center(c[0]), self.axes[1].center(c[1]), self.axes[2].center(c[2])]
    }

    pub fn cell_volume(&self, c: [usize; 3]) -> f64 {
        self.axes[0].width(c[0]) * self.axes[1].width(c[1]) * self.axes[2].width(c[2])
    }

    /// Center of the face normal to `axis` with lattice coordinates `f`.
    pub fn face_center(&self, axis: usize, f: [usize; 3]) -> [f64; 3] {
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = if a == axis { self.axes[a].node(f[a]) } else { self.axes[a].center(f[a]) };
        }
        p
    }

    /// Area of the face normal to `axis` with lattice coordinates `f`.
    pub fn face_area(&self, axis: usize, f: [usize; 3]) -> f64 {
        let (b, c) = others(axis);
        self.axes[b].width(f[b]) * self.axes[c].width(f[c])
    }

    /// Length along `axis` of the staggered control volume of the face `f`:
    /// from the center of the lower cell to the center of the upper one,
    /// clipped at the domain boundary.
    pub fn face_span(&self, axis: usize, f: [usize; 3]) -> f64 {
        let i = f[axis] as isize;
        0.5 * (self.axes[axis].width_or_zero(i - 1) + self.axes[axis].width_or_zero(i))
    }

    pub fn min_spacing(&self) -> f64 {
        self.axes.iter().map(Axis::min_width).fold(f64::INFINITY, f64::min)
    }

    pub fn max_spacing(&self) -> f64 {
        self.axes.iter().map(Axis::max_width).fold(0.0, f64::max)
    }

    pub fn is_uniform(&self) -> bool {
        let h = self.axes[0].width(0);
        self.axes.iter().all(|a| a.is_uniform() && (a.width(0) - h).abs() <= 1e-9 * h)
    }
}

/// The two axes other than `axis`, in increasing order.
#[inline]
pub fn others(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_round_trip() {
        let d = Dims([3, 4, 5]);
        for idx in 0..d.len() {
            assert_eq!(d.index_of(d.coords(idx)), idx);
        }
        assert_eq!(d.stride(2), 12);
        assert_eq!(d.faces(1), Dims([3, 5, 5]));
    }

    #[test]
    fn graded_axis_is_monotone_and_reaches_one() {
        let a = Axis::graded(0.01, 0.1, 1.15, 0.08, false).unwrap();
        assert_eq!(a.lo(), 0.0);
        assert_eq!(a.hi(), 1.0);
        assert!((a.width(0) - 0.01).abs() < 1e-12);
        assert!(a.max_width() < 0.12);
        let m = Axis::graded(0.01, 0.1, 1.15, 0.08, true).unwrap();
        assert_eq!(m.cells(), 2 * a.cells());
        assert_eq!(m.lo(), -1.0);
        for i in 0..m.cells() {
            assert!((m.width(i) - m.width(m.cells() - 1 - i)).abs() < 1e-14);
        }
    }

    #[test]
    fn uniform_grid_rejects_incommensurate_box() {
        assert!(Grid::uniform([0.0; 3], [1.0, 1.0, 0.55], 0.1).is_err());
        let g = Grid::uniform([0.0; 3], [1.0, 2.0, 0.5], 0.25).unwrap();
        assert_eq!(g.dims(), Dims([4, 8, 2]));
        assert!(g.is_uniform());
        assert!((g.face_span(0, [0, 0, 0]) - 0.125).abs() < 1e-15);
        assert!((g.face_span(0, [2, 0, 0]) - 0.25).abs() < 1e-15);
    }
}
