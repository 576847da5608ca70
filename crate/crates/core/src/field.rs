//! Discrete fields on a uniform grid and their binary file format.
//!
//! A [`FaceField`] stores one value per face for each of the three
//! components (component `d` lives on the faces normal to `d`), a
//! [`CellField`] one value per cell. Both use the lattice order of
//! [`crate::grid::Dims`] (first index fastest).
//!
//! # File format
//!
//! A field file is a UTF-8 text header terminated by the line `end`,
//! followed immediately by the raw values as IEEE-754 `f64` in
//! little-endian byte order:
//!
//! ```text
//! brinkhom-field 1
//! kind = face            (or: cell)
//! name = velocity
//! dims = 32 32 32        (cells per axis)
//! lo = 0 0 0
//! hi = 1 1 1
//! spacing = 0.03125 0.03125 0.03125
//! components = u1 u2 u3  (a cell field has a single component)
//! byte_order = little-endian
//! end
//! ```
//!
//! Components follow one another in the listed order; component `d` of a
//! face field has `dims[d] + 1` entries along axis `d`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::geometry::GridMask;
use crate::grid::{Axis, Dims, Grid};
use crate::par;

/// Face-centred vector field (velocity, forcing).
#[derive(Debug, Clone, PartialEq)]
pub struct FaceField {
    pub grid: Grid,
    pub u: [Vec<f64>; 3],
}

pub type VelocityField = FaceField;
pub type ForcingField = FaceField;

/// Cell-centred scalar field (pressure, density).
#[derive(Debug, Clone, PartialEq)]
pub struct CellField {
    pub grid: Grid,
    pub values: Vec<f64>,
}

pub type PressureField = CellField;

fn check_grid(a: &Grid, b: &Grid) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("fields live on different grids ({:?} vs {:?})", a.dims(), b.dims())));
    }
    Ok(())
}

impl FaceField {
    pub fn zeros(grid: &Grid) -> Self {
        let d = grid.dims();
        FaceField {
            grid: grid.clone(),
            u: [vec![0.0; d.faces(0).len()], vec![0.0; d.faces(1).len()], vec![0.0; d.faces(2).len()]],
        }
    }

    /// Samples component `d` of `f` at the centres of the faces normal to `d`.
    pub fn from_fn(grid: &Grid, f: impl Fn([f64; 3]) -> [f64; 3] + Sync) -> Self {
        let dims = grid.dims();
        let comp = |d: usize| {
            let fd = dims.faces(d);
            par::collect(fd.len(), |idx| f(grid.face_center(d, fd.coords(idx)))[d])
        };
        FaceField { grid: grid.clone(), u: [comp(0), comp(1), comp(2)] }
    }

    pub fn constant(grid: &Grid, v: [f64; 3]) -> Self {
        FaceField::from_fn(grid, |_| v)
    }

    pub fn dims(&self) -> Dims {
        self.grid.dims()
    }

    /// Control-volume weight of every face (half cells on the boundary).
    pub fn face_volumes(grid: &Grid, d: usize) -> Vec<f64> {
        let fd = grid.dims().faces(d);
        par::collect(fd.len(), |idx| {
            let f = fd.coords(idx);
            grid.face_span(d, f) * grid.face_area(d, f)
        })
    }

    /// `L^2` inner product by face quadrature.
    pub fn inner(&self, other: &FaceField) -> Result<f64> {
        check_grid(&self.grid, &other.grid)?;
        let mut s = 0.0;
        for d in 0..3 {
            let fd = self.dims().faces(d);
            let g = &self.grid;
            let (a, b) = (&self.u[d], &other.u[d]);
            s += par::sum_by(fd.len(), |idx| {
                let f = fd.coords(idx);
                g.face_span(d, f) * g.face_area(d, f) * a[idx] * b[idx]
            });
        }
        Ok(s)
    }

    pub fn l2_norm(&self) -> f64 {
        self.inner(self).expect("same grid").sqrt()
    }

    pub fn l2_distance(&self, other: &FaceField) -> Result<f64> {
        let diff = self.sub(other)?;
        Ok(diff.l2_norm())
    }

    pub fn sub(&self, other: &FaceField) -> Result<FaceField> {
        check_grid(&self.grid, &other.grid)?;
        let mut out = self.clone();
        for d in 0..3 {
            let o = &other.u[d];
            par::for_each_mut(&mut out.u[d], |i, v| *v -= o[i]);
        }
        Ok(out)
    }

    pub fn scale(&mut self, s: f64) {
        for c in self.u.iter_mut() {
            par::scale(s, c);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.u.iter().map(|c| par::max_by(c.len(), |i| c[i].abs()).max(0.0)).fold(0.0, f64::max)
    }

    /// Zeroes every face that touches a solid cell of `mask` (the indicator
    /// restriction `1_{fluid} f`).
    pub fn restricted(&self, mask: &GridMask) -> Result<FaceField> {
        if mask.dims != self.dims() {
            return Err(Error::ShapeMismatch("mask and field dims differ".into()));
        }
        let mut out = self.clone();
        for d in 0..3 {
            let fd = self.dims().faces(d);
            par::for_each_mut(&mut out.u[d], |idx, v| {
                if touches_solid(mask, d, fd.coords(idx)) {
                    *v = 0.0;
                }
            });
        }
        Ok(out)
    }

    /// Largest magnitude on faces that touch a solid cell.
    pub fn max_on_solid(&self, mask: &GridMask) -> f64 {
        let mut m: f64 = 0.0;
        for d in 0..3 {
            let fd = self.dims().faces(d);
            let c = &self.u[d];
            m = m.max(par::max_by(
                fd.len(),
                |idx| {
                    if touches_solid(mask, d, fd.coords(idx)) {
                        c[idx].abs()
                    } else {
                        0.0
                    }
                },
            ));
        }
        m
    }

    /// Pointwise divergence per cell (integrated divergence over the volume).
    pub fn divergence(&self) -> CellField {
        let dims = self.dims();
        let g = &self.grid;
        let values = par::collect(dims.len(), |c| {
            let cc = dims.coords(c);
            let mut s = 0.0;
            for d in 0..3 {
                let fd = dims.faces(d);
                let lo = fd.index_of(cc);
                s += g.face_area(d, cc) * (self.u[d][lo + fd.stride(d)] - self.u[d][lo]);
            }
            s / g.cell_volume(cc)
        });
        CellField { grid: self.grid.clone(), values }
    }

    pub fn write_to(&self, name: &str, w: &mut impl Write) -> Result<()> {
        write_header(w, &self.grid, "face", name, &["u1", "u2", "u3"])?;
        for c in &self.u {
            write_values(w, c)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<(String, FaceField)> {
        let h = read_header(r)?;
        if h.kind != "face" {
            return Err(Error::Parse(format!("expected a face field, found kind {}", h.kind)));
        }
        let dims = h.grid.dims();
        let mut u: [Vec<f64>; 3] = Default::default();
        for (d, c) in u.iter_mut().enumerate() {
            *c = read_values(r, dims.faces(d).len())?;
        }
        Ok((h.name, FaceField { grid: h.grid, u }))
    }
}

fn touches_solid(mask: &GridMask, d: usize, f: [usize; 3]) -> bool {
    let n = mask.dims.0[d];
    let mut lo = f;
    let below = f[d] > 0 && {
        lo[d] -= 1;
        mask.cell(lo) == crate::geometry::CellClass::Solid
    };
    below || (f[d] < n && mask.cell(f) == crate::geometry::CellClass::Solid)
}

impl CellField {
    pub fn constant(grid: &Grid, v: f64) -> Self {
        CellField { grid: grid.clone(), values: vec![v; grid.cell_count()] }
    }

    pub fn from_fn(grid: &Grid, f: impl Fn([f64; 3]) -> f64 + Sync) -> Self {
        let dims = grid.dims();
        CellField { grid: grid.clone(), values: par::collect(dims.len(), |c| f(grid.cell_center(dims.coords(c)))) }
    }

    /// Volume integral.
    pub fn integral(&self) -> f64 {
        let dims = self.grid.dims();
        par::sum_by(dims.len(), |c| self.grid.cell_volume(dims.coords(c)) * self.values[c])
    }

    pub fn l1_distance(&self, other: &CellField) -> Result<f64> {
        check_grid(&self.grid, &other.grid)?;
        let dims = self.grid.dims();
        Ok(par::sum_by(dims.len(), |c| {
            self.grid.cell_volume(dims.coords(c)) * (self.values[c] - other.values[c]).abs()
        }))
    }

    pub fn l2_norm(&self) -> f64 {
        let dims = self.grid.dims();
        par::sum_by(dims.len(), |c| self.grid.cell_volume(dims.coords(c)) * self.values[c] * self.values[c]).sqrt()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn write_to(&self, name: &str, w: &mut impl Write) -> Result<()> {
        write_header(w, &self.grid, "cell", name, &[name])?;
        write_values(w, &self.values)
    }

    pub fn read_from(r: &mut impl Read) -> Result<(String, CellField)> {
        let h = read_header(r)?;
        if h.kind != "cell" {
            return Err(Error::Parse(format!("expected a cell field, found kind {}", h.kind)));
        }
        let values = read_values(r, h.grid.cell_count())?;
        Ok((h.name, CellField { grid: h.grid, values }))
    }
}

fn write_header(w: &mut impl Write, grid: &Grid, kind: &str, name: &str, comps: &[&str]) -> Result<()> {
    if !grid.is_uniform() {
        return Err(Error::InvalidArgument("the field format stores uniform grids only".into()));
    }
    let d = grid.dims().0;
    let h = grid.axes[0].width(0);
    let lo = [grid.axes[0].lo(), grid.axes[1].lo(), grid.axes[2].lo()];
    let hi = [grid.axes[0].hi(), grid.axes[1].hi(), grid.axes[2].hi()];
    let text = format!(
        "brinkhom-field 1\nkind = {kind}\nname = {name}\ndims = {} {} {}\nlo = {:?} {:?} {:?}\nhi = {:?} {:?} {:?}\nspacing = {h:?} {h:?} {h:?}\ncomponents = {}\nbyte_order = little-endian\nend\n",
        d[0],
        d[1],
        d[2],
        lo[0],
        lo[1],
        lo[2],
        hi[0],
        hi[1],
        hi[2],
        comps.join(" ")
    );
    w.write_all(text.as_bytes())?;
    Ok(())
}

fn write_values(w: &mut impl Write, v: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 * v.len());
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Header {
    kind: String,
    name: String,
    grid: Grid,
}

fn read_header(r: &mut impl Read) -> Result<Header> {
    let mut lines = Vec::new();
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(Error::Parse("field header ended before `end`".into()));
        }
        if byte[0] == b'\n' {
            let s = String::from_utf8(std::mem::take(&mut line)).map_err(|e| Error::Parse(e.to_string()))?;
            if s == "end" {
                break;
            }
            lines.push(s);
            if lines.len() > 64 {
                return Err(Error::Parse("field header too long".into()));
            }
        } else {
            line.push(byte[0]);
        }
    }
    if lines.first().map(String::as_str) != Some("brinkhom-field 1") {
        return Err(Error::Parse("not a brinkhom field file".into()));
    }
    let get = |key: &str| -> Result<&str> {
        lines
            .iter()
            .find_map(|l| l.split_once(" = ").filter(|(k, _)| *k == key).map(|(_, v)| v))
            .ok_or_else(|| Error::Parse(format!("field header lacks `{key}`")))
    };
    let nums = |key: &str| -> Result<Vec<f64>> {
        get(key)?
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("{key}: {e}"))))
            .collect()
    };
    if get("byte_order")? != "little-endian" {
        return Err(Error::Parse("unsupported byte order".into()));
    }
    let dims = nums("dims")?;
    let lo = nums("lo")?;
    let hi = nums("hi")?;
    if dims.len() != 3 || lo.len() != 3 || hi.len() != 3 {
        return Err(Error::Parse("dims, lo and hi need three entries".into()));
    }
    let mut axes = Vec::with_capacity(3);
    for a in 0..3 {
        if dims[a] < 1.0 || dims[a].fract() != 0.0 || !(hi[a] > lo[a]) {
            return Err(Error::Parse(format!("bad extent along axis {a}")));
        }
        axes.push(Axis::uniform(lo[a], hi[a], dims[a] as usize));
    }
    let grid = Grid::new(axes.try_into().expect("three axes"));
    Ok(Header { kind: get("kind")?.to_string(), name: get("name")?.to_string(), grid })
}

fn read_values(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; 8 * n];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_field_has_box_volume_norm() {
        let g = Grid::uniform([0.0; 3], [1.0; 3], 0.125).unwrap();
        let e1 = FaceField::constant(&g, [1.0, 0.0, 0.0]);
        assert!((e1.inner(&e1).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn binary_round_trip() {
        let g = Grid::uniform([0.0, -1.0, 0.0], [1.0, 0.0, 0.5], 0.25).unwrap();
        let f = FaceField::from_fn(&g, |x| [x[0], x[1] * x[2], -1.0 / 3.0]);
        let mut buf = Vec::new();
        f.write_to("velocity", &mut buf).unwrap();
        let (name, back) = FaceField::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(name, "velocity");
        assert_eq!(back, f);
        let rho = CellField::from_fn(&g, |x| 1.0 + x[0]);
        let mut buf = Vec::new();
        rho.write_to("rho", &mut buf).unwrap();
        assert_eq!(CellField::read_from(&mut buf.as_slice()).unwrap().1, rho);
        assert!(FaceField::read_from(&mut buf.as_slice()).is_err());
    }
}
