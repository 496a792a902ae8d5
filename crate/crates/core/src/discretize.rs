//! Voxelization of boid coordinates, OR-aggregation between nested
//! resolutions, sliding (history, future) windows and time-ordered folds.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::TrajectoryLog;
use crate::world::{CubeletIndex, DenseFrame, GridShape, OccupancyFrame, Resolution, WorldExtent};

/// Relative slack when deciding that a float quotient is an integer.
const INTEGRAL_TOL: f64 = 1e-9;

fn near_integer(q: f64) -> Option<f64> {
    let r = q.round();
    ((q - r).abs() <= INTEGRAL_TOL * r.abs().max(1.0)).then_some(r)
}

/// Cubelet counts per axis: `ceil(extent / resolution)`.
///
/// Quotients within float noise of an integer are taken as that integer, so
/// `30 / 0.1` gives 300 rather than 301.
pub fn grid_shape(extent: &WorldExtent, resolution: &Resolution) -> GridShape {
    let count = |d: f64, c: f64| {
        let q = d / c;
        near_integer(q).unwrap_or_else(|| q.ceil()).max(1.0) as u32
    };
    GridShape {
        n1: count(extent.dx, resolution.cx),
        n2: count(extent.dy, resolution.cy),
        n3: count(extent.dz, resolution.cz),
    }
}

/// A world extent, a cubelet resolution and the derived grid shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub extent: WorldExtent,
    pub resolution: Resolution,
    pub shape: GridShape,
}

impl GridSpec {
    pub fn new(extent: WorldExtent, resolution: Resolution) -> Result<Self> {
        extent.validate()?;
        Resolution::new(resolution.cx, resolution.cy, resolution.cz)?;
        resolution.check_within(&extent)?;
        Ok(GridSpec {
            extent,
            resolution,
            shape: grid_shape(&extent, &resolution),
        })
    }

    /// Cubelet containing `p`, or `None` outside the extent.
    pub fn locate(&self, p: [f64; 3]) -> Option<CubeletIndex> {
        if !self.extent.contains(p) {
            return None;
        }
        let axis = |c: f64, r: f64, n: u32| ((c / r).floor() as u32).min(n - 1);
        Some(CubeletIndex::new(
            axis(p[0], self.resolution.cx, self.shape.n1),
            axis(p[1], self.resolution.cy, self.shape.n2),
            axis(p[2], self.resolution.cz, self.shape.n3),
        ))
    }
}

/// Maps the boid coordinates of one timestep to occupied cubelets.
pub fn voxelize_frame(t: usize, points: &[[f64; 3]], grid: &GridSpec) -> Result<OccupancyFrame> {
    let occupied = points
        .iter()
        .enumerate()
        .map(|(row, &p)| {
            grid.locate(p).ok_or(Error::PointOutOfExtent {
                row,
                x: p[0],
                y: p[1],
                z: p[2],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    OccupancyFrame::new(t, grid.shape, occupied)
}

/// Voxelizes every timestep of a trajectory, in order.
pub fn voxelize_log(log: &TrajectoryLog, grid: &GridSpec) -> Result<Vec<OccupancyFrame>> {
    (0..log.len())
        .into_par_iter()
        .map(|t| voxelize_frame(t, log.positions(t), grid))
        .collect()
}

/// Integer ratio of coarse to fine cubelet size per axis.
pub fn nesting_ratio(fine: &GridSpec, coarse: &GridSpec) -> Result<[u32; 3]> {
    let non_nesting = || Error::NonNesting {
        fine: fine.resolution.to_string(),
        coarse: coarse.resolution.to_string(),
    };
    if fine.extent != coarse.extent {
        return Err(Error::ShapeMismatch(
            "fine and coarse grids cover different extents".into(),
        ));
    }
    let mut ratio = [0u32; 3];
    for (r, (f, c)) in ratio
        .iter_mut()
        .zip(fine.resolution.as_array().into_iter().zip(coarse.resolution.as_array()))
    {
        let q = near_integer(c / f).filter(|&q| q >= 1.0).ok_or_else(non_nesting)?;
        *r = q as u32;
    }
    Ok(ratio)
}

/// OR-aggregation: a coarse cubelet is occupied iff any fine cubelet inside
/// it is occupied.
pub fn aggregate(frame: &OccupancyFrame, fine: &GridSpec, coarse: &GridSpec) -> Result<OccupancyFrame> {
    if frame.shape() != fine.shape {
        return Err(Error::ShapeMismatch(format!(
            "frame shape {} does not match fine grid {}",
            frame.shape(),
            fine.shape
        )));
    }
    let [ri, rj, rk] = nesting_ratio(fine, coarse)?;
    let occupied = frame
        .occupied()
        .iter()
        .map(|c| CubeletIndex::new(c.i / ri, c.j / rj, c.k / rk))
        .collect();
    OccupancyFrame::new(frame.t(), coarse.shape, occupied)
}

/// One training instance: `t1` history frames followed by `t2` future
/// frames, borrowed from the frame sequence.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub start_t: usize,
    pub history: &'a [OccupancyFrame],
    pub future: &'a [OccupancyFrame],
}

impl Sample<'_> {
    pub fn t1(&self) -> usize {
        self.history.len()
    }

    pub fn t2(&self) -> usize {
        self.future.len()
    }

    pub fn shape(&self) -> GridShape {
        self.history[0].shape()
    }

    pub fn dense_history(&self) -> Vec<DenseFrame> {
        self.history.iter().map(OccupancyFrame::to_dense).collect()
    }

    pub fn dense_future(&self) -> Vec<DenseFrame> {
        self.future.iter().map(OccupancyFrame::to_dense).collect()
    }
}

/// Number of stride-1 windows in a sequence of `len` frames.
pub fn window_count(len: usize, t1: usize, t2: usize) -> usize {
    (len + 1).saturating_sub(t1 + t2)
}

/// All stride-1 windows: sample `s` has history `[s, s+t1)` and future
/// `[s+t1, s+t1+t2)`.
pub fn make_windows(frames: &[OccupancyFrame], t1: usize, t2: usize) -> Result<Vec<Sample<'_>>> {
    if t1 == 0 || t2 == 0 {
        return Err(Error::config("t1 and t2 must both be >= 1"));
    }
    if frames.len() < t1 + t2 {
        return Err(Error::TooFewFrames {
            len: frames.len(),
            required: t1 + t2,
        });
    }
    Ok((0..window_count(frames.len(), t1, t2))
        .map(|s| Sample {
            start_t: s,
            history: &frames[s..s + t1],
            future: &frames[s + t1..s + t1 + t2],
        })
        .collect())
}

/// Contiguous, time-ordered cross-validation blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    blocks: Vec<Range<usize>>,
}

impl FoldAssignment {
    pub fn num_folds(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_samples(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.end)
    }

    /// Samples held out when evaluating fold `f`.
    pub fn test_range(&self, fold: usize) -> Range<usize> {
        self.blocks[fold].clone()
    }

    /// Samples used for training fold `f` (everything outside its block).
    pub fn train_indices(&self, fold: usize) -> impl Iterator<Item = usize> + '_ {
        let test = self.test_range(fold);
        (0..self.num_samples()).filter(move |s| !test.contains(s))
    }

    pub fn train_len(&self, fold: usize) -> usize {
        self.num_samples() - self.blocks[fold].len()
    }

    pub fn fold_of(&self, sample: usize) -> usize {
        self.blocks.partition_point(|b| b.end <= sample)
    }

    /// Fold id of every sample, in order.
    pub fn assignments(&self) -> Vec<u8> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(f, b)| std::iter::repeat_n(f as u8, b.len()))
            .collect()
    }

    pub fn from_assignments(ids: &[u8]) -> Result<Self> {
        let mut blocks: Vec<Range<usize>> = Vec::new();
        for (s, &f) in ids.iter().enumerate() {
            let f = f as usize;
            if f + 1 == blocks.len() {
                blocks[f].end = s + 1;
            } else if f == blocks.len() {
                blocks.push(s..s + 1);
            } else {
                return Err(Error::format("fold ids must form contiguous ascending blocks"));
            }
        }
        Ok(FoldAssignment { blocks })
    }
}

/// Splits `num_samples` time-ordered samples into `num_folds` contiguous
/// blocks whose sizes differ by at most one (larger blocks first).
pub fn split_folds(num_samples: usize, num_folds: usize) -> Result<FoldAssignment> {
    if num_folds < 2 {
        return Err(Error::config(format!("need at least 2 folds, got {num_folds}")));
    }
    if num_folds > u8::MAX as usize + 1 {
        return Err(Error::config("at most 256 folds are supported"));
    }
    if num_samples < num_folds {
        return Err(Error::config(format!(
            "{num_samples} samples cannot fill {num_folds} folds"
        )));
    }
    let base = num_samples / num_folds;
    let extra = num_samples % num_folds;
    let mut start = 0;
    let blocks = (0..num_folds)
        .map(|f| {
            let len = base + usize::from(f < extra);
            let b = start..start + len;
            start += len;
            b
        })
        .collect();
    Ok(FoldAssignment { blocks })
}

/// Everything needed to reproduce one exported dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub grid: GridSpec,
    pub t1: usize,
    pub t2: usize,
    pub num_samples: usize,
    pub num_folds: usize,
    pub folds: Vec<u8>,
    pub seed: u64,
    pub trajectory_sha256: String,
}

impl DatasetManifest {
    pub fn fold_assignment(&self) -> Result<FoldAssignment> {
        let f = FoldAssignment::from_assignments(&self.folds)?;
        if f.num_samples() != self.num_samples || f.num_folds() != self.num_folds {
            return Err(Error::format("manifest fold ids disagree with its counts"));
        }
        Ok(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn boids_grid(edge: [f64; 3]) -> GridSpec {
        GridSpec::new(WorldExtent::BOIDS, Resolution::new(edge[0], edge[1], edge[2]).unwrap()).unwrap()
    }

    #[test]
    fn standard_grid_shapes() {
        let e = WorldExtent::BOIDS;
        let s = grid_shape(&e, &Resolution::new(103.0, 93.0, 21.0).unwrap());
        assert_eq!(s.as_array(), [9, 9, 9]);
        assert_eq!(s.cubelet_count(), 729);
        let s = grid_shape(&e, &Resolution::cubic(15.0).unwrap());
        assert_eq!(s.as_array(), [56, 50, 12]);
        assert_eq!(s.cubelet_count(), 33_600);
        let s = grid_shape(&e, &Resolution::cubic(3.0).unwrap());
        assert_eq!(s.as_array(), [276, 250, 58]);
        assert_eq!(s.cubelet_count(), 4_002_000);
    }

    #[test]
    fn grid_shape_tolerates_float_noise() {
        let e = WorldExtent::new(30.0, 0.7, 10.0).unwrap();
        let s = grid_shape(&e, &Resolution::new(0.1, 0.1, 2.5).unwrap());
        assert_eq!(s.as_array(), [300, 7, 4]);
    }

    #[test]
    fn voxelize_floor_division() {
        let g = GridSpec::new(
            WorldExtent::new(30.0, 30.0, 30.0).unwrap(),
            Resolution::cubic(3.0).unwrap(),
        )
        .unwrap();
        let f = voxelize_frame(0, &[[5.9, 2.1, 0.0]], &g).unwrap();
        assert_eq!(f.occupied(), &[CubeletIndex::new(1, 0, 0)]);
        let f = voxelize_frame(0, &[[1.0, 1.0, 1.0], [2.0, 2.5, 0.5]], &g).unwrap();
        assert_eq!(f.len(), 1);
    }

    #[test]
    fn voxelize_upper_boundary() {
        let g = boids_grid([1.0, 1.0, 1.0]);
        let f = voxelize_frame(0, &[[826.9, 747.9, 172.9]], &g).unwrap();
        assert_eq!(f.occupied(), &[CubeletIndex::new(826, 747, 172)]);
        let err = voxelize_frame(0, &[[1.0, 1.0, 1.0], [827.0, 1.0, 1.0]], &g).unwrap_err();
        assert!(matches!(err, Error::PointOutOfExtent { row: 1, .. }));
    }

    #[test]
    fn aggregate_or_rule() {
        let fine = boids_grid([1.0, 1.0, 1.0]);
        let coarse = boids_grid([3.0, 3.0, 3.0]);
        let empty = OccupancyFrame::empty(0, fine.shape);
        assert!(aggregate(&empty, &fine, &coarse).unwrap().is_empty());
        let one = OccupancyFrame::new(0, fine.shape, vec![CubeletIndex::new(7, 2, 3)]).unwrap();
        let agg = aggregate(&one, &fine, &coarse).unwrap();
        assert_eq!(agg.occupied(), &[CubeletIndex::new(2, 0, 1)]);
        assert_eq!(agg.shape(), coarse.shape);
    }

    #[test]
    fn aggregate_rejects_non_nesting() {
        let fine = boids_grid([2.0, 2.0, 2.0]);
        let coarse = boids_grid([3.0, 3.0, 3.0]);
        let f = OccupancyFrame::empty(0, fine.shape);
        assert!(matches!(aggregate(&f, &fine, &coarse), Err(Error::NonNesting { .. })));
        // Finer "coarse" grid does not nest either.
        assert!(aggregate(&OccupancyFrame::empty(0, coarse.shape), &coarse, &fine).is_err());
    }

    // Commutation oracle: aggregating voxelized points equals voxelizing
    // at the coarse resolution directly.
    #[test]
    fn aggregate_commutes_with_voxelize() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fine = boids_grid([1.0, 1.0, 1.0]);
        let coarse = boids_grid([103.0, 93.0, 21.0]);
        for t in 0..100 {
            let n = rng.random_range(1..40);
            let pts: Vec<[f64; 3]> = (0..n)
                .map(|_| {
                    [
                        rng.random_range(0.0..827.0),
                        rng.random_range(0.0..748.0),
                        rng.random_range(0.0..173.0),
                    ]
                })
                .collect();
            let via_fine = aggregate(&voxelize_frame(t, &pts, &fine).unwrap(), &fine, &coarse).unwrap();
            assert_eq!(via_fine, voxelize_frame(t, &pts, &coarse).unwrap());
        }
    }

    fn frames(n: usize) -> Vec<OccupancyFrame> {
        let s = GridShape::new(2, 2, 2).unwrap();
        (0..n).map(|t| OccupancyFrame::empty(t, s)).collect()
    }

    #[test]
    fn window_counts() {
        let f = frames(20);
        assert_eq!(make_windows(&f, 10, 10).unwrap().len(), 1);
        let f = frames(25);
        let w = make_windows(&f, 10, 10).unwrap();
        assert_eq!(w.len(), 6);
        assert_eq!(w.iter().map(|s| s.start_t).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4, 5]);
        let f = frames(19);
        assert!(matches!(
            make_windows(&f, 10, 10),
            Err(Error::TooFewFrames { len: 19, required: 20 })
        ));
    }

    #[test]
    fn window_slices() {
        let f = frames(25);
        for s in make_windows(&f, 10, 10).unwrap() {
            let hist: Vec<_> = s.history.iter().map(|f| f.t()).collect();
            let fut: Vec<_> = s.future.iter().map(|f| f.t()).collect();
            assert_eq!(hist, (s.start_t..s.start_t + 10).collect::<Vec<_>>());
            assert_eq!(fut, (s.start_t + 10..s.start_t + 20).collect::<Vec<_>>());
        }
        assert!(make_windows(&f, 0, 3).is_err());
    }

    #[test]
    fn fold_blocks() {
        let f = split_folds(9982, 5).unwrap();
        let sizes: Vec<_> = (0..5).map(|k| f.test_range(k).len()).collect();
        assert_eq!(sizes, vec![1997, 1997, 1996, 1996, 1996]);
        assert_eq!(f.train_len(0), 7985);
        assert_eq!(f.train_indices(0).count(), 7985);

        let f = split_folds(10, 5).unwrap();
        for k in 0..5 {
            assert_eq!(f.test_range(k).len(), 2);
            assert_eq!(f.train_len(k), 8);
        }
        assert_eq!(f.fold_of(0), 0);
        assert_eq!(f.fold_of(3), 1);
        assert_eq!(f.fold_of(9), 4);

        assert!(split_folds(4, 5).is_err());
        assert!(split_folds(10, 1).is_err());
    }

    #[test]
    fn fold_assignment_round_trip() {
        let f = split_folds(17, 4).unwrap();
        let ids = f.assignments();
        assert_eq!(ids.len(), 17);
        assert_eq!(FoldAssignment::from_assignments(&ids).unwrap(), f);
        assert!(FoldAssignment::from_assignments(&[0, 1, 0]).is_err());
        assert!(FoldAssignment::from_assignments(&[1, 1]).is_err());
    }
}
