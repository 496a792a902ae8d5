//! Core spatial types: world extent, cubelet resolution, cubelet addressing
//! and sparse occupancy frames.
//!
//! The world occupies the half-open box `[0,dx) x [0,dy) x [0,dz)` with the
//! origin at one corner. Occupancy is stored sparsely as a sorted list of
//! occupied cubelets; dense tensors are only materialized at export or model
//! boundaries.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bounding box of the world, in world units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldExtent {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl WorldExtent {
    /// Extent of the standard boids world.
    pub const BOIDS: WorldExtent = WorldExtent {
        dx: 827.0,
        dy: 748.0,
        dz: 173.0,
    };

    pub fn new(dx: f64, dy: f64, dz: f64) -> Result<Self> {
        let extent = WorldExtent { dx, dy, dz };
        extent.validate()?;
        Ok(extent)
    }

    pub fn validate(&self) -> Result<()> {
        for (axis, v) in ["dx", "dy", "dz"].iter().zip(self.as_array()) {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("extent {axis} must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.dx, self.dy, self.dz]
    }

    /// True when the point lies in the half-open world box.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        p.iter()
            .zip(self.as_array())
            .all(|(&c, d)| c >= 0.0 && c < d)
    }
}

/// Cubelet edge lengths per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
}

impl Resolution {
    pub const UNIT: Resolution = Resolution {
        cx: 1.0,
        cy: 1.0,
        cz: 1.0,
    };

    pub fn new(cx: f64, cy: f64, cz: f64) -> Result<Self> {
        let res = Resolution { cx, cy, cz };
        for (axis, v) in ["cx", "cy", "cz"].iter().zip(res.as_array()) {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!(
                    "resolution {axis} must be > 0, got {v}"
                )));
            }
        }
        Ok(res)
    }

    pub fn cubic(edge: f64) -> Result<Self> {
        Self::new(edge, edge, edge)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.cx, self.cy, self.cz]
    }

    /// Volume of one cubelet.
    pub fn volume(&self) -> f64 {
        self.cx * self.cy * self.cz
    }

    /// Checks the resolution fits inside the extent on every axis.
    pub fn check_within(&self, extent: &WorldExtent) -> Result<()> {
        let names = ["x", "y", "z"];
        for ((axis, c), d) in names.iter().zip(self.as_array()).zip(extent.as_array()) {
            if c > d {
                return Err(Error::config(format!(
                    "cubelet size {c} exceeds world extent {d} on the {axis} axis"
                )));
            }
        }
        Ok(())
    }

    /// Directory-friendly label such as `103x93x21`.
    pub fn label(&self) -> String {
        format!("{}x{}x{}", self.cx, self.cy, self.cz)
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.cx, self.cy, self.cz)
    }
}

/// Number of cubelets along each axis, `(n1, n2, n3)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    pub n1: u32,
    pub n2: u32,
    pub n3: u32,
}

impl GridShape {
    pub fn new(n1: u32, n2: u32, n3: u32) -> Result<Self> {
        if n1 == 0 || n2 == 0 || n3 == 0 {
            return Err(Error::config(format!(
                "grid shape must be positive, got ({n1}, {n2}, {n3})"
            )));
        }
        Ok(GridShape { n1, n2, n3 })
    }

    pub fn as_array(&self) -> [u32; 3] {
        [self.n1, self.n2, self.n3]
    }

    pub fn cubelet_count(&self) -> u64 {
        self.n1 as u64 * self.n2 as u64 * self.n3 as u64
    }

    pub fn contains(&self, idx: CubeletIndex) -> bool {
        idx.i < self.n1 && idx.j < self.n2 && idx.k < self.n3
    }

    pub fn check(&self, idx: CubeletIndex) -> Result<()> {
        if self.contains(idx) {
            Ok(())
        } else {
            Err(Error::OutOfBounds {
                index: idx,
                shape: *self,
            })
        }
    }

    /// Row-major offset with `k` varying fastest.
    pub fn linear(&self, idx: CubeletIndex) -> usize {
        (idx.i as usize * self.n2 as usize + idx.j as usize) * self.n3 as usize + idx.k as usize
    }

    pub fn unlinear(&self, offset: usize) -> CubeletIndex {
        let n3 = self.n3 as usize;
        let n2 = self.n2 as usize;
        CubeletIndex {
            i: (offset / (n2 * n3)) as u32,
            j: ((offset / n3) % n2) as u32,
            k: (offset % n3) as u32,
        }
    }

    /// The in-bounds face neighbor of `idx` in direction `dir`
    /// (see [`FACE_DIRECTIONS`]).
    pub fn neighbor(&self, idx: CubeletIndex, dir: [i32; 3]) -> Option<CubeletIndex> {
        let step = |v: u32, d: i32, n: u32| -> Option<u32> {
            let w = v as i64 + d as i64;
            (w >= 0 && w < n as i64).then_some(w as u32)
        };
        Some(CubeletIndex {
            i: step(idx.i, dir[0], self.n1)?,
            j: step(idx.j, dir[1], self.n2)?,
            k: step(idx.k, dir[2], self.n3)?,
        })
    }

    /// In-bounds 6-connected face neighbors of `idx`.
    pub fn face_neighbors(self, idx: CubeletIndex) -> impl Iterator<Item = CubeletIndex> {
        FACE_DIRECTIONS
            .iter()
            .filter_map(move |&d| self.neighbor(idx, d))
    }

    /// Iterates every cubelet in lexicographic `(i, j, k)` order.
    pub fn iter(self) -> impl Iterator<Item = CubeletIndex> {
        (0..self.n1).flat_map(move |i| {
            (0..self.n2).flat_map(move |j| (0..self.n3).map(move |k| CubeletIndex { i, j, k }))
        })
    }
}

impl fmt::Display for GridShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.n1, self.n2, self.n3)
    }
}

/// Face directions in the fixed order `-i, +i, -j, +j, -k, +k`.
pub const FACE_DIRECTIONS: [[i32; 3]; 6] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
];

/// Address of one cubelet. Ordering is lexicographic by `(i, j, k)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CubeletIndex {
    pub i: u32,
    pub j: u32,
    pub k: u32,
}

impl CubeletIndex {
    pub const fn new(i: u32, j: u32, k: u32) -> Self {
        CubeletIndex { i, j, k }
    }

    /// Lattice (Manhattan) distance.
    pub fn manhattan(&self, other: &CubeletIndex) -> u32 {
        self.i.abs_diff(other.i) + self.j.abs_diff(other.j) + self.k.abs_diff(other.k)
    }
}

impl From<(u32, u32, u32)> for CubeletIndex {
    fn from((i, j, k): (u32, u32, u32)) -> Self {
        CubeletIndex { i, j, k }
    }
}

impl fmt::Display for CubeletIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.i, self.j, self.k)
    }
}

/// Sparse occupancy of every cubelet at timestep `t`.
///
/// `occupied` is kept sorted and free of duplicates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccupancyFrame {
    t: usize,
    shape: GridShape,
    occupied: Vec<CubeletIndex>,
}

impl OccupancyFrame {
    /// Builds a frame, sorting and deduplicating `occupied`.
    pub fn new(t: usize, shape: GridShape, mut occupied: Vec<CubeletIndex>) -> Result<Self> {
        for &idx in &occupied {
            shape.check(idx)?;
        }
        occupied.sort_unstable();
        occupied.dedup();
        Ok(OccupancyFrame { t, shape, occupied })
    }

    pub fn empty(t: usize, shape: GridShape) -> Self {
        OccupancyFrame {
            t,
            shape,
            occupied: Vec::new(),
        }
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn occupied(&self) -> &[CubeletIndex] {
        &self.occupied
    }

    pub fn len(&self) -> usize {
        self.occupied.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupied.is_empty()
    }

    /// Same occupancy, relabelled to another timestep.
    pub fn with_t(mut self, t: usize) -> Self {
        self.t = t;
        self
    }

    /// Occupancy label of one cubelet.
    pub fn query(&self, idx: CubeletIndex) -> Result<bool> {
        self.shape.check(idx)?;
        Ok(self.contains(idx))
    }

    /// Membership test without the bounds check.
    pub fn contains(&self, idx: CubeletIndex) -> bool {
        self.occupied.binary_search(&idx).is_ok()
    }

    /// Number of cubelets occupied in both frames.
    pub fn intersection_len(&self, other: &OccupancyFrame) -> usize {
        let (mut a, mut b) = (self.occupied.iter().peekable(), other.occupied.iter().peekable());
        let mut n = 0;
        while let (Some(x), Some(y)) = (a.peek(), b.peek()) {
            match x.cmp(y) {
                std::cmp::Ordering::Less => {
                    a.next();
                }
                std::cmp::Ordering::Greater => {
                    b.next();
                }
                std::cmp::Ordering::Equal => {
                    n += 1;
                    a.next();
                    b.next();
                }
            }
        }
        n
    }

    pub fn to_dense(&self) -> DenseFrame {
        frame_to_dense(self)
    }
}

/// Dense binary tensor of shape `(n1, n2, n3)`, one byte per cubelet,
/// `k` varying fastest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseFrame {
    shape: GridShape,
    cells: Vec<u8>,
}

impl DenseFrame {
    pub fn zeros(shape: GridShape) -> Self {
        DenseFrame {
            shape,
            cells: vec![0; shape.cubelet_count() as usize],
        }
    }

    pub fn from_cells(shape: GridShape, cells: Vec<u8>) -> Result<Self> {
        if cells.len() as u64 != shape.cubelet_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} cells for grid {shape}",
                cells.len()
            )));
        }
        if cells.iter().any(|&c| c > 1) {
            return Err(Error::format("dense frame values must be 0 or 1"));
        }
        Ok(DenseFrame { shape, cells })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn get(&self, idx: CubeletIndex) -> u8 {
        self.cells[self.shape.linear(idx)]
    }

    pub fn set(&mut self, idx: CubeletIndex, value: bool) {
        let off = self.shape.linear(idx);
        self.cells[off] = value as u8;
    }

    pub fn popcount(&self) -> usize {
        self.cells.iter().filter(|&&c| c == 1).count()
    }

    pub fn to_sparse(&self, t: usize) -> OccupancyFrame {
        let occupied = self
            .cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == 1)
            .map(|(off, _)| self.shape.unlinear(off))
            .collect();
        // Offsets ascend in lexicographic index order, so this is already sorted.
        OccupancyFrame {
            t,
            shape: self.shape,
            occupied,
        }
    }
}

/// Materializes a sparse frame as a dense binary tensor.
pub fn frame_to_dense(frame: &OccupancyFrame) -> DenseFrame {
    let mut dense = DenseFrame::zeros(frame.shape);
    for &idx in &frame.occupied {
        dense.set(idx, true);
    }
    dense
}

/// Occupancy label of `idx` in `frame`; errors when `idx` is out of bounds.
pub fn query(frame: &OccupancyFrame, idx: CubeletIndex) -> Result<bool> {
    frame.query(idx)
}
