//! Static terrain: annotated points, their unit-resolution occupancy, CSV
//! ingestion and a procedural city generator.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{CubeletIndex, GridShape, WorldExtent};

pub const TERRAIN_HEADER: [&str; 7] = ["x", "y", "z", "r", "g", "b", "reflectance"];

/// One annotated terrain sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerrainPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
    pub g: f64,
    pub b: f64,
    pub reflectance: f64,
}

impl TerrainPoint {
    fn validate(&self, row: usize, extent: &WorldExtent) -> Result<()> {
        if !extent.contains([self.x, self.y, self.z]) {
            return Err(Error::PointOutOfExtent {
                row,
                x: self.x,
                y: self.y,
                z: self.z,
            });
        }
        for c in [self.r, self.g, self.b] {
            if !(0.0..=255.0).contains(&c) {
                return Err(Error::format(format!(
                    "terrain row {row}: color channel {c} outside [0, 255]"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.reflectance) {
            return Err(Error::format(format!(
                "terrain row {row}: reflectance {} outside [0, 1]",
                self.reflectance
            )));
        }
        Ok(())
    }
}

/// Terrain points plus their occupancy voxelized at unit resolution.
#[derive(Debug, Clone)]
pub struct TerrainMap {
    extent: WorldExtent,
    points: Vec<TerrainPoint>,
    unit_shape: GridShape,
    occupied: Vec<CubeletIndex>,
    bits: Vec<u64>,
}

impl TerrainMap {
    pub fn new(extent: WorldExtent, points: Vec<TerrainPoint>) -> Result<Self> {
        extent.validate()?;
        let unit_shape = unit_grid_shape(&extent);
        let mut occupied = Vec::with_capacity(points.len());
        for (row, p) in points.iter().enumerate() {
            p.validate(row, &extent)?;
            occupied.push(unit_cubelet(&unit_shape, [p.x, p.y, p.z]));
        }
        occupied.sort_unstable();
        occupied.dedup();

        let mut bits = vec![0u64; (unit_shape.cubelet_count() as usize).div_ceil(64)];
        for idx in &occupied {
            let off = unit_shape.linear(*idx);
            bits[off / 64] |= 1 << (off % 64);
        }
        Ok(TerrainMap {
            extent,
            points,
            unit_shape,
            occupied,
            bits,
        })
    }

    /// Terrain with no points.
    pub fn empty(extent: WorldExtent) -> Result<Self> {
        Self::new(extent, Vec::new())
    }

    pub fn extent(&self) -> WorldExtent {
        self.extent
    }

    pub fn points(&self) -> &[TerrainPoint] {
        &self.points
    }

    pub fn unit_shape(&self) -> GridShape {
        self.unit_shape
    }

    /// Occupied unit cubelets, sorted lexicographically.
    pub fn unit_occupancy(&self) -> &[CubeletIndex] {
        &self.occupied
    }

    pub fn is_occupied(&self, idx: CubeletIndex) -> bool {
        if !self.unit_shape.contains(idx) {
            return false;
        }
        let off = self.unit_shape.linear(idx);
        self.bits[off / 64] & (1 << (off % 64)) != 0
    }

    /// Whether the unit cubelet containing `p` is terrain.
    pub fn occupies_point(&self, p: [f64; 3]) -> bool {
        self.extent.contains(p) && self.is_occupied(unit_cubelet(&self.unit_shape, p))
    }

    pub fn read_csv<R: Read>(extent: WorldExtent, reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::format(format!("terrain header: {e}")))?
            .clone();
        if headers.iter().ne(TERRAIN_HEADER) {
            return Err(Error::format(format!(
                "terrain header must be `{}`, found `{}`",
                TERRAIN_HEADER.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut points = Vec::new();
        for (row, rec) in rdr.deserialize::<TerrainPoint>().enumerate() {
            points.push(rec.map_err(|e| Error::format(format!("terrain row {row}: {e}")))?);
        }
        Self::new(extent, points)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        for p in &self.points {
            wtr.serialize(p)
                .map_err(|e| Error::format(format!("terrain write: {e}")))?;
        }
        wtr.flush().map_err(|e| Error::io("<terrain>", e))?;
        Ok(())
    }
}

/// Unit-resolution grid covering `extent`.
pub fn unit_grid_shape(extent: &WorldExtent) -> GridShape {
    GridShape {
        n1: extent.dx.ceil() as u32,
        n2: extent.dy.ceil() as u32,
        n3: extent.dz.ceil() as u32,
    }
}

fn unit_cubelet(shape: &GridShape, p: [f64; 3]) -> CubeletIndex {
    let f = |c: f64, n: u32| (c.floor() as u32).min(n - 1);
    CubeletIndex::new(f(p[0], shape.n1), f(p[1], shape.n2), f(p[2], shape.n3))
}

/// Parameters of the procedural city: box buildings, one street slab
/// running along x, and trees made of a trunk column and a crown block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerrainGenConfig {
    pub buildings: usize,
    pub footprint_min: f64,
    pub footprint_max: f64,
    pub height_min: f64,
    pub height_max: f64,
    pub street_width: f64,
    pub trees: usize,
    pub tree_height: f64,
}

impl Default for TerrainGenConfig {
    fn default() -> Self {
        TerrainGenConfig {
            buildings: 10,
            footprint_min: 30.0,
            footprint_max: 70.0,
            height_min: 30.0,
            height_max: 150.0,
            street_width: 24.0,
            trees: 24,
            tree_height: 12.0,
        }
    }
}

impl TerrainGenConfig {
    pub fn validate(&self, extent: &WorldExtent) -> Result<()> {
        let bad = |m: &str| Err(Error::config(format!("terrain generator: {m}")));
        if !(self.footprint_min >= 1.0 && self.footprint_min <= self.footprint_max) {
            return bad("need 1 <= footprint_min <= footprint_max");
        }
        if !(self.height_min >= 1.0 && self.height_min <= self.height_max) {
            return bad("need 1 <= height_min <= height_max");
        }
        if self.footprint_max >= extent.dx.min(extent.dy) {
            return bad("footprint_max must be smaller than the world footprint");
        }
        if self.street_width < 0.0 || self.street_width >= extent.dy {
            return bad("street_width must lie in [0, dy)");
        }
        if self.tree_height < 2.0 {
            return bad("tree_height must be >= 2");
        }
        if self.trees > 0 && (extent.dx < 8.0 || extent.dy < 8.0) {
            return bad("trees need a world at least 8 units wide in x and y");
        }
        Ok(())
    }
}

const BUILDING_RGB: [f64; 3] = [128.0, 128.0, 132.0];
const STREET_RGB: [f64; 3] = [50.0, 50.0, 55.0];
const TRUNK_RGB: [f64; 3] = [101.0, 67.0, 33.0];
const CROWN_RGB: [f64; 3] = [34.0, 139.0, 34.0];

/// Generates a deterministic city for `seed`. Points sit at unit-cubelet
/// centers so each one voxelizes to exactly its own cubelet.
pub fn generate_terrain(extent: WorldExtent, cfg: &TerrainGenConfig, seed: u64) -> Result<TerrainMap> {
    cfg.validate(&extent)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = unit_grid_shape(&extent);
    let mut cells: Vec<(CubeletIndex, [f64; 3], f64)> = Vec::new();

    // Street slab: ground layer across the whole x range, centered in y.
    let street_w = cfg.street_width.round() as u32;
    let street_j0 = (unit.n2.saturating_sub(street_w)) / 2;
    for i in 0..unit.n1 {
        for j in street_j0..(street_j0 + street_w).min(unit.n2) {
            cells.push((CubeletIndex::new(i, j, 0), STREET_RGB, 0.15));
        }
    }
    let street = street_j0..street_j0 + street_w;
    let clear_of_street = |j0: u32, j1: u32| j1 <= street.start || j0 >= street.end;

    for _ in 0..cfg.buildings {
        let w = rng.random_range(cfg.footprint_min..=cfg.footprint_max).round() as u32;
        let d = rng.random_range(cfg.footprint_min..=cfg.footprint_max).round() as u32;
        let h = (rng.random_range(cfg.height_min..=cfg.height_max).round() as u32).min(unit.n3 - 1);
        // A few tries to keep buildings off the street.
        let mut placed = None;
        for _ in 0..32 {
            let i0 = rng.random_range(0..=unit.n1 - w);
            let j0 = rng.random_range(0..=unit.n2 - d);
            if clear_of_street(j0, j0 + d) {
                placed = Some((i0, j0));
                break;
            }
        }
        let Some((i0, j0)) = placed else { continue };
        for i in i0..i0 + w {
            for j in j0..j0 + d {
                let wall = i == i0 || i == i0 + w - 1 || j == j0 || j == j0 + d - 1;
                let top = if wall { h } else { 1 };
                for k in 0..top {
                    cells.push((CubeletIndex::new(i, j, k), BUILDING_RGB, 0.35));
                }
                cells.push((CubeletIndex::new(i, j, h), BUILDING_RGB, 0.4));
            }
        }
    }

    // Trees line both sides of the street.
    let th = (cfg.tree_height.round() as u32).min(unit.n3 - 1);
    for n in 0..cfg.trees {
        let i = rng.random_range(2..unit.n1 - 2);
        let j = if n % 2 == 0 {
            street.start.saturating_sub(3)
        } else {
            (street.end + 2).min(unit.n2 - 2)
        };
        for k in 0..th {
            cells.push((CubeletIndex::new(i, j, k), TRUNK_RGB, 0.2));
        }
        for ci in i - 2..=i + 2 {
            for cj in j.saturating_sub(2)..=(j + 2).min(unit.n2 - 1) {
                for ck in th.saturating_sub(2)..=th.min(unit.n3 - 1) {
                    cells.push((CubeletIndex::new(ci, cj, ck), CROWN_RGB, 0.25));
                }
            }
        }
    }

    cells.sort_by_key(|c| c.0);
    cells.dedup_by_key(|c| c.0);
    let points = cells
        .into_iter()
        .filter(|(idx, _, _)| unit.contains(*idx))
        .map(|(idx, rgb, reflectance)| TerrainPoint {
            x: (idx.i as f64 + 0.5).min(next_below(extent.dx)),
            y: (idx.j as f64 + 0.5).min(next_below(extent.dy)),
            z: (idx.k as f64 + 0.5).min(next_below(extent.dz)),
            r: rgb[0],
            g: rgb[1],
            b: rgb[2],
            reflectance,
        })
        .collect();
    TerrainMap::new(extent, points)
}

/// Largest float strictly below `v` (for positive finite `v`).
pub(crate) fn next_below(v: f64) -> f64 {
    f64::from_bits(v.to_bits() - 1)
}
