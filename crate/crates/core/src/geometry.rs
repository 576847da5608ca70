//! Perforated domains: hole lattices and their rasterization onto uniform
//! staggered grids.
//!
//! A domain box is tiled by cubes of side `epsilon` starting at its lower
//! corner; every cube that fits in the closed box carries one hole
//! `x_k + a * U`, where `a = epsilon^alpha` and `U` is the rescaled
//! [`HoleShape`] centred at the origin.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, Grid};

/// Axis-aligned box holding the fluid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Default for DomainSpec {
    fn default() -> Self {
        DomainSpec::unit_cube()
    }
}

impl DomainSpec {
    pub fn unit_cube() -> Self {
        DomainSpec { lo: [0.0; 3], hi: [1.0; 3] }
    }

    pub fn new(lo: [f64; 3], hi: [f64; 3]) -> Result<Self> {
        let d = DomainSpec { lo, hi };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.hi[a] - self.lo[a] > 0.0) || !self.lo[a].is_finite() || !self.hi[a].is_finite() {
                return Err(Error::InvalidArgument(format!("domain side {a} must be positive")));
            }
        }
        Ok(())
    }

    pub fn side(&self, axis: usize) -> f64 {
        self.hi[axis] - self.lo[axis]
    }

    pub fn min_side(&self) -> f64 {
        (0..3).map(|a| self.side(a)).fold(f64::INFINITY, f64::min)
    }

    pub fn volume(&self) -> f64 {
        (0..3).map(|a| self.side(a)).product()
    }

    pub fn center(&self) -> [f64; 3] {
        [0.5 * (self.lo[0] + self.hi[0]), 0.5 * (self.lo[1] + self.hi[1]), 0.5 * (self.lo[2] + self.hi[2])]
    }

    /// Uniform grid with `resolution` cells along the shortest side.
    pub fn grid(&self, resolution: usize) -> Result<Grid> {
        Grid::uniform(self.lo, self.hi, self.min_side() / resolution as f64)
    }
}

/// Rescaled hole shape, centred at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HoleShape {
    Ball { radius: f64 },
    Cube { half_width: f64 },
    Ellipsoid { semi_axes: [f64; 3] },
}

impl HoleShape {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            HoleShape::Ball { radius } => radius > 0.0 && radius.is_finite(),
            HoleShape::Cube { half_width } => half_width > 0.0 && half_width.is_finite(),
            HoleShape::Ellipsoid { semi_axes } => semi_axes.iter().all(|s| *s > 0.0 && s.is_finite()),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("shape dimensions must be positive: {self:?}")))
        }
    }

    /// Closed-set membership.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        match *self {
            HoleShape::Ball { radius } => p[0] * p[0] + p[1] * p[1] + p[2] * p[2] <= radius * radius,
            HoleShape::Cube { half_width } => p.iter().all(|x| x.abs() <= half_width),
            HoleShape::Ellipsoid { semi_axes: s } => {
                (p[0] / s[0]).powi(2) + (p[1] / s[1]).powi(2) + (p[2] / s[2]).powi(2) <= 1.0
            }
        }
    }

    /// Distance from the origin to the boundary along the unit direction `d`.
    pub fn radius_along(&self, d: [f64; 3]) -> f64 {
        match *self {
            HoleShape::Ball { radius } => radius,
            HoleShape::Cube { half_width } => half_width / d.iter().map(|x| x.abs()).fold(0.0, f64::max),
            HoleShape::Ellipsoid { semi_axes: s } => {
                1.0 / ((d[0] / s[0]).powi(2) + (d[1] / s[1]).powi(2) + (d[2] / s[2]).powi(2)).sqrt()
            }
        }
    }

    /// Radius of the largest centred ball inside the shape.
    pub fn inner_radius(&self) -> f64 {
        match *self {
            HoleShape::Ball { radius } => radius,
            HoleShape::Cube { half_width } => half_width,
            HoleShape::Ellipsoid { semi_axes: s } => s.iter().cloned().fold(f64::INFINITY, f64::min),
        }
    }

    /// Radius of the smallest centred ball containing the shape.
    pub fn outer_radius(&self) -> f64 {
        match *self {
            HoleShape::Ball { radius } => radius,
            HoleShape::Cube { half_width } => half_width * 3f64.sqrt(),
            HoleShape::Ellipsoid { semi_axes: s } => s.iter().cloned().fold(0.0, f64::max),
        }
    }

    /// Half-extent of the bounding box along each axis.
    pub fn half_extent(&self) -> [f64; 3] {
        match *self {
            HoleShape::Ball { radius } => [radius; 3],
            HoleShape::Cube { half_width } => [half_width; 3],
            HoleShape::Ellipsoid { semi_axes } => semi_axes,
        }
    }

    pub fn scaled(&self, s: f64) -> HoleShape {
        match *self {
            HoleShape::Ball { radius } => HoleShape::Ball { radius: radius * s },
            HoleShape::Cube { half_width } => HoleShape::Cube { half_width: half_width * s },
            HoleShape::Ellipsoid { semi_axes } => {
                HoleShape::Ellipsoid { semi_axes: [semi_axes[0] * s, semi_axes[1] * s, semi_axes[2] * s] }
            }
        }
    }

    pub fn volume(&self) -> f64 {
        match *self {
            HoleShape::Ball { radius } => 4.0 / 3.0 * PI * radius.powi(3),
            HoleShape::Cube { half_width } => (2.0 * half_width).powi(3),
            HoleShape::Ellipsoid { semi_axes: s } => 4.0 / 3.0 * PI * s[0] * s[1] * s[2],
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            HoleShape::Ball { .. } => "ball",
            HoleShape::Cube { .. } => "cube",
            HoleShape::Ellipsoid { .. } => "ellipsoid",
        }
    }

    /// Compact text form used in the mask files: `ball 0.5`, `cube 0.5`,
    /// `ellipsoid 0.6 0.55 0.7`.
    pub fn to_text(&self) -> String {
        match *self {
            HoleShape::Ball { radius } => format!("ball {radius}"),
            HoleShape::Cube { half_width } => format!("cube {half_width}"),
            HoleShape::Ellipsoid { semi_axes: s } => format!("ellipsoid {} {} {}", s[0], s[1], s[2]),
        }
    }

    pub fn from_text(s: &str) -> Result<Self> {
        let mut it = s.split_whitespace();
        let kind = it.next().ok_or_else(|| Error::Parse("empty shape".into()))?;
        let nums: Vec<f64> = it
            .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("shape value {t}: {e}"))))
            .collect::<Result<_>>()?;
        let shape = match (kind, nums.as_slice()) {
            ("ball", [r]) => HoleShape::Ball { radius: *r },
            ("cube", [w]) => HoleShape::Cube { half_width: *w },
            ("ellipsoid", [a, b, c]) => HoleShape::Ellipsoid { semi_axes: [*a, *b, *c] },
            _ => return Err(Error::Parse(format!("unrecognized shape '{s}'"))),
        };
        shape.validate()?;
        Ok(shape)
    }
}

/// Family member `Omega_eps`: hole size, centres and lattice indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoleLattice {
    pub domain: DomainSpec,
    pub epsilon: f64,
    pub alpha: f64,
    pub shape: HoleShape,
    /// Hole size `a = epsilon^alpha`.
    pub a_eps: f64,
    /// `sqrt(epsilon^3 / a)`, the 3D critical ratio.
    pub sigma: f64,
    /// Lattice indices `k` of the admissible cells.
    pub cells: Vec<[i64; 3]>,
    pub centers: Vec<[f64; 3]>,
    /// Set when no cell fits in the domain (the perforated domain is the box).
    pub warning: Option<String>,
}

impl HoleLattice {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// The physical hole `x_k + a * U`.
    pub fn hole_shape(&self) -> HoleShape {
        self.shape.scaled(self.a_eps)
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let hole = self.hole_shape();
        self.centers.iter().any(|c| hole.contains([p[0] - c[0], p[1] - c[1], p[2] - c[2]]))
    }

    /// Lattice without holes on the same domain.
    pub fn empty(domain: DomainSpec) -> Self {
        HoleLattice {
            domain,
            epsilon: domain.min_side(),
            alpha: 3.0,
            shape: HoleShape::Ball { radius: 0.5 },
            a_eps: 0.0,
            sigma: f64::INFINITY,
            cells: vec![],
            centers: vec![],
            warning: None,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("brinkhom-lattice 1\n");
        write_header(&mut s, self);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_kv(text, "brinkhom-lattice")?;
        lattice_from_kv(&kv)
    }
}

/// Builds the hole lattice of `domain` at scale `epsilon`.
pub fn enumerate_holes(domain: DomainSpec, epsilon: f64, alpha: f64, shape: HoleShape) -> Result<HoleLattice> {
    domain.validate()?;
    shape.validate()?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(alpha >= 1.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be >= 1, got {alpha}")));
    }
    let a_eps = epsilon.powf(alpha);
    let sigma = (epsilon.powi(3) / a_eps).sqrt();
    let counts: Vec<i64> = (0..3).map(|a| (domain.side(a) / epsilon * (1.0 + 1e-12)).floor() as i64).collect();
    let mut cells = Vec::new();
    let mut centers = Vec::new();
    for k in 0..counts[2] {
        for j in 0..counts[1] {
            for i in 0..counts[0] {
                let kk = [i, j, k];
                cells.push(kk);
                centers.push([
                    domain.lo[0] + epsilon * (i as f64 + 0.5),
                    domain.lo[1] + epsilon * (j as f64 + 0.5),
                    domain.lo[2] + epsilon * (k as f64 + 0.5),
                ]);
            }
        }
    }
    let warning = if cells.is_empty() {
        Some(format!("epsilon = {epsilon} exceeds the domain size; no holes, the perforated domain is the whole box"))
    } else {
        None
    };
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(HoleLattice { domain, epsilon, alpha, shape, a_eps, sigma, cells, centers, warning })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationKind {
    /// `B(x, a/2)` is not inside the hole.
    InnerInclusion,
    /// The hole is not inside `B(x, 3a/4)`.
    OuterInclusion,
    /// `B(x, 3a/4)` is not inside its lattice cell.
    CellContainment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub hole: usize,
    pub kind: ViolationKind,
    pub detail: String,
}

/// Number of boundary directions sampled per hole.
pub const VALIDATION_DIRECTIONS: usize = 2000;

/// Checks the hole-distribution inclusions for every hole, by sampling the
/// shape boundary along [`VALIDATION_DIRECTIONS`] directions.
pub fn validate_lattice(lattice: &HoleLattice) -> Vec<Violation> {
    let dirs = fibonacci_sphere(VALIDATION_DIRECTIONS);
    let mut out = Vec::new();
    let a = lattice.a_eps;
    for (h, c) in lattice.centers.iter().enumerate() {
        let mut rmin = f64::INFINITY;
        let mut rmax: f64 = 0.0;
        for d in &dirs {
            let r = a * lattice.shape.radius_along(*d);
            rmin = rmin.min(r);
            rmax = rmax.max(r);
        }
        // axis and diagonal directions catch the extremes of boxes and ellipsoids
        for d in extreme_directions() {
            let r = a * lattice.shape.radius_along(d);
            rmin = rmin.min(r);
            rmax = rmax.max(r);
        }
        if rmin < 0.5 * a * (1.0 - 1e-12) {
            out.push(Violation {
                hole: h,
                kind: ViolationKind::InnerInclusion,
                detail: format!("boundary reaches radius {:.4} < a/2", rmin / a),
            });
        }
        if rmax >= 0.75 * a {
            out.push(Violation {
                hole: h,
                kind: ViolationKind::OuterInclusion,
                detail: format!("boundary reaches radius {:.4} >= 3a/4", rmax / a),
            });
        }
        let half = 0.5 * lattice.epsilon;
        let cell_ok = (0..3).all(|ax| {
            let lo = c[ax] - half;
            let hi = c[ax] + half;
            0.75 * a < half && lo >= lattice.domain.lo[ax] - 1e-12 && hi <= lattice.domain.hi[ax] + 1e-12
        });
        if !cell_ok {
            out.push(Violation {
                hole: h,
                kind: ViolationKind::CellContainment,
                detail: "B(x, 3a/4) or its cell leaves the lattice cell / domain".into(),
            });
        }
    }
    out
}

fn fibonacci_sphere(n: usize) -> Vec<[f64; 3]> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let t = golden * i as f64;
            [r * t.cos(), r * t.sin(), z]
        })
        .collect()
}

fn extreme_directions() -> Vec<[f64; 3]> {
    let s = 1.0 / 3f64.sqrt();
    let mut v = Vec::new();
    for a in 0..3 {
        for sign in [-1.0, 1.0] {
            let mut d = [0.0; 3];
            d[a] = sign;
            v.push(d);
        }
    }
    for sx in [-s, s] {
        for sy in [-s, s] {
            for sz in [-s, s] {
                v.push([sx, sy, sz]);
            }
        }
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellClass {
    Fluid,
    Solid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaceClass {
    Fluid,
    Solid,
    Boundary,
}

/// Rasterized perforated domain on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMask {
    pub lattice: HoleLattice,
    /// Cells along the shortest domain side.
    pub resolution: usize,
    pub h: f64,
    pub dims: Dims,
    pub cells: Vec<CellClass>,
    /// Smallest hole radius measured in grid cells (infinite without holes).
    pub min_cells_per_radius: f64,
}

impl GridMask {
    pub fn grid(&self) -> Grid {
        self.lattice.domain.grid(self.resolution).expect("mask grid is valid by construction")
    }

    pub fn hole_free(domain: DomainSpec, resolution: usize) -> Result<Self> {
        rasterize(&HoleLattice::empty(domain), resolution)
    }

    pub fn cell(&self, c: [usize; 3]) -> CellClass {
        self.cells[self.dims.index_of(c)]
    }

    pub fn is_solid(&self, idx: usize) -> bool {
        self.cells[idx] == CellClass::Solid
    }

    pub fn solid_count(&self) -> usize {
        self.cells.iter().filter(|c| **c == CellClass::Solid).count()
    }

    pub fn fluid_count(&self) -> usize {
        self.cells.len() - self.solid_count()
    }

    /// Grid and solid flags of the lower half of the box along every axis
    /// flagged in `axes`. `None` unless the mask is mirror symmetric about
    /// the mid-plane of each such axis (which needs an even cell count).
    pub fn folded(&self, axes: [bool; 3]) -> Option<(Grid, Vec<bool>)> {
        let n = self.dims.0;
        if (0..3).any(|a| axes[a] && n[a] % 2 == 1) {
            return None;
        }
        for idx in 0..self.cells.len() {
            let c = self.dims.coords(idx);
            for a in 0..3 {
                if axes[a] {
                    let mut m = c;
                    m[a] = n[a] - 1 - c[a];
                    if self.cell(m) != self.cells[idx] {
                        return None;
                    }
                }
            }
        }
        let full = self.grid();
        let mut half = [0usize; 3];
        let mut axes_out = Vec::with_capacity(3);
        for a in 0..3 {
            half[a] = if axes[a] { n[a] / 2 } else { n[a] };
            let nodes = full.axes[a].nodes()[..=half[a]].to_vec();
            axes_out.push(crate::grid::Axis::from_nodes(nodes).ok()?);
        }
        let grid = Grid::new(axes_out.try_into().ok()?);
        let hd = Dims(half);
        let solid = (0..hd.len()).map(|i| self.cell(hd.coords(i)) == CellClass::Solid).collect();
        Some((grid, solid))
    }

    /// Class of the face normal to `axis` at face-lattice coordinates `f`.
    pub fn face_class(&self, axis: usize, f: [usize; 3]) -> FaceClass {
        let n = self.dims.0[axis];
        if f[axis] == 0 || f[axis] == n {
            return FaceClass::Boundary;
        }
        let mut lo = f;
        lo[axis] -= 1;
        if self.cell(lo) == CellClass::Solid || self.cell(f) == CellClass::Solid {
            FaceClass::Solid
        } else {
            FaceClass::Fluid
        }
    }

    /// Mask text: lattice header plus run-length-encoded cells (`F`/`S`).
    pub fn to_text(&self) -> String {
        let mut s = String::from("brinkhom-mask 1\n");
        write_header(&mut s, &self.lattice);
        let _ = writeln!(s, "resolution = {}", self.resolution);
        let _ = writeln!(s, "dims = {} {} {}", self.dims.0[0], self.dims.0[1], self.dims.0[2]);
        s.push_str("cells =");
        let mut i = 0;
        while i < self.cells.len() {
            let c = self.cells[i];
            let mut j = i;
            while j < self.cells.len() && self.cells[j] == c {
                j += 1;
            }
            let tag = if c == CellClass::Fluid { 'F' } else { 'S' };
            let _ = write!(s, " {}{}", j - i, tag);
            i = j;
        }
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_kv(text, "brinkhom-mask")?;
        let lattice = lattice_from_kv(&kv)?;
        let resolution: usize =
            get(&kv, "resolution")?.parse().map_err(|e| Error::Parse(format!("resolution: {e}")))?;
        let dims_v: Vec<usize> = get(&kv, "dims")?
            .split_whitespace()
            .map(|t| t.parse().map_err(|e| Error::Parse(format!("dims: {e}"))))
            .collect::<Result<_>>()?;
        if dims_v.len() != 3 {
            return Err(Error::Parse("dims needs three values".into()));
        }
        let dims = Dims([dims_v[0], dims_v[1], dims_v[2]]);
        let mut cells = Vec::with_capacity(dims.len());
        for run in get(&kv, "cells")?.split_whitespace() {
            let (num, tag) = run.split_at(run.len() - 1);
            let count: usize = num.parse().map_err(|e| Error::Parse(format!("run '{run}': {e}")))?;
            let class = match tag {
                "F" => CellClass::Fluid,
                "S" => CellClass::Solid,
                _ => return Err(Error::Parse(format!("bad cell tag in '{run}'"))),
            };
            cells.extend(std::iter::repeat_n(class, count));
        }
        if cells.len() != dims.len() {
            return Err(Error::Parse(format!("mask has {} cells, dims need {}", cells.len(), dims.len())));
        }
        let grid = lattice.domain.grid(resolution)?;
        if grid.dims() != dims {
            return Err(Error::Parse("dims do not match domain and resolution".into()));
        }
        let h = lattice.domain.min_side() / resolution as f64;
        let min_cells_per_radius = cells_per_radius(&lattice, h);
        Ok(GridMask { lattice, resolution, h, dims, cells, min_cells_per_radius })
    }
}

fn cells_per_radius(lattice: &HoleLattice, h: f64) -> f64 {
    if lattice.is_empty() {
        f64::INFINITY
    } else {
        lattice.a_eps * lattice.shape.inner_radius() / h
    }
}

/// Minimum resolution accepted by [`rasterize`].
pub const MIN_RESOLUTION: usize = 8;

/// Classifies every cell of the uniform grid with `resolution` cells along
/// the shortest side: solid iff its centre lies in a hole (boundary ties are
/// solid).
pub fn rasterize(lattice: &HoleLattice, resolution: usize) -> Result<GridMask> {
    if resolution < MIN_RESOLUTION {
        return Err(Error::InvalidArgument(format!("resolution must be at least {MIN_RESOLUTION}, got {resolution}")));
    }
    let grid = lattice.domain.grid(resolution)?;
    let h = lattice.domain.min_side() / resolution as f64;
    if !lattice.is_empty() {
        let radius = lattice.a_eps * lattice.shape.inner_radius();
        if radius < 2.0 * h * (1.0 - 1e-9) {
            return Err(Error::UnresolvedHole { radius, two_h: 2.0 * h });
        }
    }
    let dims = grid.dims();
    let hole = lattice.hole_shape();
    let ext = hole.half_extent();
    let n = dims.0;
    // Holes are disjoint and each owns a bounding box of cells, so the cell
    // loop only needs the hole of its own lattice cell.
    let lo = lattice.domain.lo;
    let eps = lattice.epsilon;
    let counts: Vec<i64> = if lattice.is_empty() {
        vec![0; 3]
    } else {
        (0..3).map(|a| lattice.cells.iter().map(|c| c[a]).max().unwrap_or(-1) + 1).collect()
    };
    let cells = crate::par::collect(dims.len(), |idx| {
        if lattice.is_empty() {
            return CellClass::Fluid;
        }
        let c = dims.coords(idx);
        let p = grid.cell_center(c);
        let mut k = [0i64; 3];
        for a in 0..3 {
            k[a] = ((p[a] - lo[a]) / eps).floor() as i64;
            if k[a] < 0 || k[a] >= counts[a] {
                return CellClass::Fluid;
            }
        }
        // neighbouring lattice cells only matter when a hole pokes out of its
        // cell, which validate_lattice reports; check them anyway
        for dz in -1..=1i64 {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let kk = [k[0] + dx, k[1] + dy, k[2] + dz];
                    if (0..3).any(|a| kk[a] < 0 || kk[a] >= counts[a]) {
                        continue;
                    }
                    let center = [
                        lo[0] + eps * (kk[0] as f64 + 0.5),
                        lo[1] + eps * (kk[1] as f64 + 0.5),
                        lo[2] + eps * (kk[2] as f64 + 0.5),
                    ];
                    let q = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
                    if q.iter().zip(ext.iter()).any(|(x, e)| x.abs() > *e) {
                        continue;
                    }
                    if hole.contains(q) {
                        return CellClass::Solid;
                    }
                }
            }
        }
        CellClass::Fluid
    });
    let _ = n;
    Ok(GridMask {
        lattice: lattice.clone(),
        resolution,
        h,
        dims,
        cells,
        min_cells_per_radius: cells_per_radius(lattice, h),
    })
}

fn write_header(s: &mut String, l: &HoleLattice) {
    let d = &l.domain;
    let _ = writeln!(s, "domain = {} {} {} {} {} {}", d.lo[0], d.lo[1], d.lo[2], d.hi[0], d.hi[1], d.hi[2]);
    let _ = writeln!(s, "epsilon = {}", l.epsilon);
    let _ = writeln!(s, "alpha = {}", l.alpha);
    let _ = writeln!(s, "shape = {}", l.shape.to_text());
    let _ = writeln!(s, "holes = {}", l.len());
}

fn parse_kv(text: &str, magic: &str) -> Result<Vec<(String, String)>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
    let first = lines.next().ok_or_else(|| Error::Parse("empty input".into()))?;
    let mut head = first.split_whitespace();
    if head.next() != Some(magic) || head.next() != Some("1") {
        return Err(Error::Parse(format!("expected header '{magic} 1', got '{first}'")));
    }
    lines
        .map(|l| {
            let (k, v) = l.split_once('=').ok_or_else(|| Error::Parse(format!("expected 'key = value', got '{l}'")))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

fn get<'a>(kv: &'a [(String, String)], key: &str) -> Result<&'a str> {
    kv.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Parse(format!("missing key '{key}'")))
}

fn parse_f64(kv: &[(String, String)], key: &str) -> Result<f64> {
    get(kv, key)?.parse().map_err(|e| Error::Parse(format!("{key}: {e}")))
}

fn lattice_from_kv(kv: &[(String, String)]) -> Result<HoleLattice> {
    let dv: Vec<f64> = get(kv, "domain")?
        .split_whitespace()
        .map(|t| t.parse().map_err(|e| Error::Parse(format!("domain: {e}"))))
        .collect::<Result<_>>()?;
    if dv.len() != 6 {
        return Err(Error::Parse("domain needs six values".into()));
    }
    let domain = DomainSpec::new([dv[0], dv[1], dv[2]], [dv[3], dv[4], dv[5]])?;
    let shape = HoleShape::from_text(get(kv, "shape")?)?;
    let holes: usize = get(kv, "holes")?.parse().map_err(|e| Error::Parse(format!("holes: {e}")))?;
    let epsilon = parse_f64(kv, "epsilon")?;
    let alpha = parse_f64(kv, "alpha")?;
    let lattice = if holes == 0 {
        HoleLattice { epsilon, alpha, shape, ..HoleLattice::empty(domain) }
    } else {
        enumerate_holes(domain, epsilon, alpha, shape)?
    };
    if lattice.len() != holes {
        return Err(Error::Parse(format!("hole count {} does not match lattice {}", holes, lattice.len())));
    }
    Ok(lattice)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ball(r: f64) -> HoleShape {
        HoleShape::Ball { radius: r }
    }

    #[test]
    fn half_epsilon_gives_eight_holes() {
        let l = enumerate_holes(DomainSpec::unit_cube(), 0.5, 3.0, ball(0.5)).unwrap();
        assert_eq!(l.len(), 8);
        assert_eq!(l.a_eps, 0.125);
        for c in &l.centers {
            for x in c {
                assert!((x - 0.25).abs() < 1e-15 || (x - 0.75).abs() < 1e-15);
            }
        }
        assert!((l.hole_shape().inner_radius() - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn unit_epsilon_gives_centred_hole() {
        let l = enumerate_holes(DomainSpec::unit_cube(), 1.0, 2.0, ball(0.6)).unwrap();
        assert_eq!(l.centers, vec![[0.5, 0.5, 0.5]]);
        assert!(l.warning.is_none());
    }

    #[test]
    fn oversized_epsilon_is_empty_with_warning() {
        let l = enumerate_holes(DomainSpec::unit_cube(), 1.5, 3.0, ball(0.6)).unwrap();
        assert!(l.is_empty());
        assert!(l.warning.is_some());
    }

    #[test]
    fn quarter_epsilon_counts() {
        let l = enumerate_holes(DomainSpec::unit_cube(), 0.25, 3.0, ball(0.5)).unwrap();
        assert_eq!(l.len(), 64);
        assert_eq!(l.a_eps, 1.0 / 64.0);
        assert!((l.sigma - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bad_arguments_are_rejected() {
        let d = DomainSpec::unit_cube();
        assert!(enumerate_holes(d, 0.0, 3.0, ball(0.5)).is_err());
        assert!(enumerate_holes(d, 0.5, 0.5, ball(0.5)).is_err());
        assert!(enumerate_holes(d, 0.5, 3.0, ball(-1.0)).is_err());
    }

    #[test]
    fn validation_examples() {
        let d = DomainSpec::unit_cube();
        let ok = enumerate_holes(d, 0.5, 3.0, ball(0.6)).unwrap();
        assert!(validate_lattice(&ok).is_empty());
        let big = enumerate_holes(d, 0.5, 3.0, ball(0.9)).unwrap();
        let v = validate_lattice(&big);
        assert_eq!(v.len(), 8);
        assert!(v.iter().all(|x| x.kind == ViolationKind::OuterInclusion));
        // circumradius 0.5 * sqrt(3) exceeds 3/4
        let cube = enumerate_holes(d, 0.5, 3.0, HoleShape::Cube { half_width: 0.5 }).unwrap();
        let v = validate_lattice(&cube);
        assert!(!v.is_empty());
        assert!(v.iter().all(|x| x.kind == ViolationKind::OuterInclusion));
    }

    #[test]
    fn empty_lattice_rasterizes_to_fluid() {
        let m = GridMask::hole_free(DomainSpec::unit_cube(), 16).unwrap();
        assert_eq!(m.fluid_count(), 16 * 16 * 16);
        assert_eq!(m.face_class(0, [0, 3, 3]), FaceClass::Boundary);
        assert_eq!(m.face_class(0, [5, 3, 3]), FaceClass::Fluid);
    }

    #[test]
    fn unresolved_hole_is_an_error() {
        // a = 1/32, radius 1/64 < 2h for h = 1/64
        let l = enumerate_holes(DomainSpec::unit_cube(), 0.5, 5.0, ball(0.5)).unwrap();
        match rasterize(&l, 64) {
            Err(Error::UnresolvedHole { .. }) => {}
            Err(e) => panic!("expected UnresolvedHole, got {e}"),
            Ok(_) => panic!("expected UnresolvedHole"),
        }
        assert!(rasterize(&l, 4).is_err());
    }

    #[test]
    fn faces_next_to_solid_cells_are_solid() {
        let l = enumerate_holes(DomainSpec::unit_cube(), 1.0, 1.0, ball(0.25)).unwrap();
        let m = rasterize(&l, 16).unwrap();
        for axis in 0..3 {
            let fd = m.dims.faces(axis);
            for idx in 0..fd.len() {
                let f = fd.coords(idx);
                let class = m.face_class(axis, f);
                if f[axis] == 0 || f[axis] == m.dims.0[axis] {
                    assert_eq!(class, FaceClass::Boundary);
                    continue;
                }
                let mut lo = f;
                lo[axis] -= 1;
                let touches = m.cell(lo) == CellClass::Solid || m.cell(f) == CellClass::Solid;
                assert_eq!(class == FaceClass::Solid, touches);
            }
        }
    }

    #[test]
    fn mask_text_round_trips() {
        let l = enumerate_holes(DomainSpec::unit_cube(), 0.5, 1.0, ball(0.6)).unwrap();
        let m = rasterize(&l, 16).unwrap();
        let back = GridMask::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        let lt = HoleLattice::from_text(&l.to_text()).unwrap();
        assert_eq!(lt, l);
    }
}
