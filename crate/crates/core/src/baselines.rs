//! One-step occupancy predictors and the recursive multi-step driver.
//!
//! Predictions are sparse: a [`ProbFrame`] stores explicit probabilities for
//! a few cubelets and a background value for the rest, which keeps full
//! resolution grids cheap when only a handful of cubelets are occupied.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::discretize::Sample;
use crate::error::{Error, Result};
use crate::world::{CubeletIndex, GridShape, OccupancyFrame, FACE_DIRECTIONS};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Occupancy probabilities over one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbFrame {
    shape: GridShape,
    background: f64,
    /// Sorted by cubelet, no duplicates.
    values: Vec<(CubeletIndex, f64)>,
}

impl ProbFrame {
    pub fn new(shape: GridShape, background: f64, mut values: Vec<(CubeletIndex, f64)>) -> Result<Self> {
        check_prob(background)?;
        for &(c, p) in &values {
            shape.check(c)?;
            check_prob(p)?;
        }
        values.sort_unstable_by_key(|&(c, _)| c);
        if values.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::ShapeMismatch("duplicate cubelet in probability frame".into()));
        }
        Ok(ProbFrame { shape, background, values })
    }

    /// Probability 1 on the occupied cubelets of `frame`, 0 elsewhere.
    pub fn from_frame(frame: &OccupancyFrame) -> Self {
        ProbFrame {
            shape: frame.shape(),
            background: 0.0,
            values: frame.occupied().iter().map(|&c| (c, 1.0)).collect(),
        }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn background(&self) -> f64 {
        self.background
    }

    pub fn explicit(&self) -> &[(CubeletIndex, f64)] {
        &self.values
    }

    pub fn get(&self, c: CubeletIndex) -> f64 {
        match self.values.binary_search_by_key(&c, |&(x, _)| x) {
            Ok(n) => self.values[n].1,
            Err(_) => self.background,
        }
    }

    /// Cubelets with `p > threshold`.
    pub fn binarize(&self, t: usize, threshold: f64) -> OccupancyFrame {
        let occupied: Vec<_> = if self.background > threshold {
            self.shape.iter().filter(|&c| self.get(c) > threshold).collect()
        } else {
            self.values.iter().filter(|&&(_, p)| p > threshold).map(|&(c, _)| c).collect()
        };
        OccupancyFrame::new(t, self.shape, occupied).expect("cubelets already bounds-checked")
    }
}

fn check_prob(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::format(format!("probability {p} outside [0, 1]")))
    }
}

/// Maps a history of `t1` frames to next-frame occupancy probabilities.
pub trait Predictor {
    fn predict(&self, history: &[OccupancyFrame]) -> Result<ProbFrame>;
}

fn last_frame(history: &[OccupancyFrame]) -> Result<&OccupancyFrame> {
    history.last().ok_or_else(|| Error::config("t1 must be ≥ 1"))
}

/// The last history frame.
pub fn predict_persistence(history: &[OccupancyFrame]) -> Result<ProbFrame> {
    Ok(ProbFrame::from_frame(last_frame(history)?))
}

/// Fraction of history frames in which each cubelet was occupied.
pub fn predict_frequency(history: &[OccupancyFrame]) -> Result<ProbFrame> {
    let shape = last_frame(history)?.shape();
    let mut counts: HashMap<CubeletIndex, u32> = HashMap::new();
    for f in history {
        for &c in f.occupied() {
            *counts.entry(c).or_default() += 1;
        }
    }
    let n = history.len() as f64;
    ProbFrame::new(shape, 0.0, counts.into_iter().map(|(c, k)| (c, k as f64 / n)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Persistence;

impl Predictor for Persistence {
    fn predict(&self, history: &[OccupancyFrame]) -> Result<ProbFrame> {
        predict_persistence(history)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Frequency;

impl Predictor for Frequency {
    fn predict(&self, history: &[OccupancyFrame]) -> Result<ProbFrame> {
        predict_frequency(history)
    }
}

/// Predicts `t2` frames, feeding each binarized prediction back as the
/// newest history frame. Output frames are numbered after the last input.
pub fn forecast_recursive<P: Predictor + ?Sized>(
    predictor: &P,
    history: &[OccupancyFrame],
    t2: usize,
    threshold: f64,
) -> Result<Vec<OccupancyFrame>> {
    if t2 == 0 {
        return Err(Error::config("t2 must be ≥ 1"));
    }
    let t0 = last_frame(history)?.t() + 1;
    let mut window: Vec<OccupancyFrame> = history.to_vec();
    let mut out = Vec::with_capacity(t2);
    for step in 0..t2 {
        let next = predictor.predict(&window)?.binarize(t0 + step, threshold);
        window.remove(0);
        window.push(next.clone());
        out.push(next);
    }
    Ok(out)
}

/// Logistic regression on a cubelet's own occupancy and that of its six
/// face neighbors over the history window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodModel {
    pub t1: usize,
    /// `t1 * 7` feature weights followed by the bias.
    pub weights: Vec<f64>,
    pub trained: bool,
    pub threshold: f64,
}

/// Slots per history frame: the cubelet itself, then its face neighbors.
const SLOTS: usize = 1 + FACE_DIRECTIONS.len();

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            learning_rate: 0.5,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl NeighborhoodModel {
    pub fn new(t1: usize) -> Result<Self> {
        if t1 == 0 {
            return Err(Error::config("t1 must be ≥ 1"));
        }
        Ok(NeighborhoodModel {
            t1,
            weights: vec![0.0; Self::feature_dim(t1)],
            trained: false,
            threshold: DEFAULT_THRESHOLD,
        })
    }

    pub fn feature_dim(t1: usize) -> usize {
        t1 * SLOTS + 1
    }

    fn bias(&self) -> f64 {
        *self.weights.last().unwrap()
    }

    /// Active (value 1) feature indices of every cubelet with at least one
    /// active feature. All other cubelets see only the bias.
    fn active_features(&self, history: &[OccupancyFrame]) -> Result<HashMap<CubeletIndex, Vec<u16>>> {
        if history.len() != self.t1 {
            return Err(Error::ShapeMismatch(format!(
                "history has {} frames, model expects {}",
                history.len(),
                self.t1
            )));
        }
        let shape = history[0].shape();
        let mut feats: HashMap<CubeletIndex, Vec<u16>> = HashMap::new();
        for (h, f) in history.iter().enumerate() {
            if f.shape() != shape {
                return Err(Error::ShapeMismatch("history frames differ in shape".into()));
            }
            for &c in f.occupied() {
                feats.entry(c).or_default().push((h * SLOTS) as u16);
                // c is neighbor d of the cubelet on the opposite side.
                for (d, dir) in FACE_DIRECTIONS.iter().enumerate() {
                    let back = [-dir[0], -dir[1], -dir[2]];
                    if let Some(owner) = shape.neighbor(c, back) {
                        feats.entry(owner).or_default().push((h * SLOTS + 1 + d) as u16);
                    }
                }
            }
        }
        for v in feats.values_mut() {
            v.sort_unstable();
        }
        Ok(feats)
    }

    fn score(&self, active: &[u16]) -> f64 {
        sigmoid(self.bias() + active.iter().map(|&a| self.weights[a as usize]).sum::<f64>())
    }
}

impl Predictor for NeighborhoodModel {
    fn predict(&self, history: &[OccupancyFrame]) -> Result<ProbFrame> {
        let shape = last_frame(history)?.shape();
        let feats = self.active_features(history)?;
        let values = feats.iter().map(|(&c, a)| (c, self.score(a))).collect();
        ProbFrame::new(shape, sigmoid(self.bias()), values)
    }
}

/// Fits the model by full-batch gradient descent on mean log-loss against
/// the first future frame of every sample. Identical feature rows are
/// pooled with counts, so cost scales with the occupied region rather than
/// the grid. Steps use per-coordinate (Adagrad) scaling because the rare
/// positive class otherwise contributes vanishing gradients on large grids.
pub fn train_neighborhood(
    mut model: NeighborhoodModel,
    samples: &[Sample<'_>],
    cfg: &TrainConfig,
) -> Result<NeighborhoodModel> {
    let first = samples.first().ok_or_else(|| Error::config("no training samples"))?;
    let shape = first.shape();
    let total_cells = shape.cubelet_count();
    let mut rows: HashMap<(Vec<u16>, bool), u64> = HashMap::new();
    for s in samples {
        if s.shape() != shape || s.t1() != model.t1 {
            return Err(Error::ShapeMismatch("training samples differ in shape or t1".into()));
        }
        let target = s.future.first().ok_or_else(|| Error::config("t2 must be ≥ 1"))?;
        let feats = model.active_features(s.history)?;
        let mut explicit = 0u64;
        for (c, a) in &feats {
            *rows.entry((a.clone(), target.contains(*c))).or_default() += 1;
            explicit += 1;
        }
        let bare_pos = target.occupied().iter().filter(|c| !feats.contains_key(c)).count() as u64;
        if bare_pos > 0 {
            *rows.entry((Vec::new(), true)).or_default() += bare_pos;
        }
        let bare_neg = total_cells - explicit - bare_pos;
        if bare_neg > 0 {
            *rows.entry((Vec::new(), false)).or_default() += bare_neg;
        }
    }
    // Fixed row order keeps the floating-point sums reproducible.
    let mut rows: Vec<_> = rows.into_iter().collect();
    rows.sort_unstable();
    let n: f64 = rows.iter().map(|(_, k)| *k as f64).sum();
    let dim = model.weights.len();
    let mut accum = vec![0.0; dim];
    for _ in 0..cfg.epochs {
        let mut grad = vec![0.0; dim];
        for ((active, y), count) in &rows {
            let err = (model.score(active) - if *y { 1.0 } else { 0.0 }) * *count as f64 / n;
            for &a in active {
                grad[a as usize] += err;
            }
            grad[dim - 1] += err;
        }
        for ((w, g), acc) in model.weights.iter_mut().zip(&grad).zip(&mut accum) {
            *acc += g * g;
            if *acc > 0.0 {
                *w -= cfg.learning_rate * g / acc.sqrt();
            }
        }
    }
    if model.weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::config("training diverged; lower the learning rate"));
    }
    model.trained = true;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::make_windows;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::cell::Cell;

    fn shape(a: u32, b: u32, c: u32) -> GridShape {
        GridShape::new(a, b, c).unwrap()
    }

    fn frame(t: usize, s: GridShape, cells: &[(u32, u32, u32)]) -> OccupancyFrame {
        OccupancyFrame::new(t, s, cells.iter().map(|&c| c.into()).collect()).unwrap()
    }

    fn random_frames(rng: &mut ChaCha8Rng, s: GridShape, n: usize, p: f64) -> Vec<OccupancyFrame> {
        (0..n)
            .map(|t| OccupancyFrame::new(t, s, s.iter().filter(|_| rng.random_bool(p)).collect()).unwrap())
            .collect()
    }

    fn f1(pred: &[OccupancyFrame], truth: &[OccupancyFrame]) -> f64 {
        let (mut tp, mut np, mut nt) = (0, 0, 0);
        for (a, b) in pred.iter().zip(truth) {
            tp += a.intersection_len(b);
            np += a.len();
            nt += b.len();
        }
        2.0 * tp as f64 / (np + nt) as f64
    }

    #[test]
    fn persistence_examples() {
        let s = shape(3, 3, 3);
        let h = vec![frame(0, s, &[(0, 0, 0)]), frame(1, s, &[(1, 1, 1), (2, 0, 1)])];
        let p = predict_persistence(&h).unwrap();
        assert_eq!(p.binarize(2, 0.5).occupied(), h[1].occupied());
        assert_eq!(p.get(CubeletIndex::new(0, 0, 0)), 0.0);
        let empty = vec![frame(0, s, &[(0, 0, 0)]), frame(1, s, &[])];
        assert!(predict_persistence(&empty).unwrap().binarize(2, 0.5).is_empty());
        assert!(predict_persistence(&[]).is_err());
    }

    #[test]
    fn persistence_is_a_fixed_point() {
        let s = shape(4, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = random_frames(&mut rng, s, 10, 0.2);
        let out = forecast_recursive(&Persistence, &h, 10, 0.5).unwrap();
        assert_eq!(out.len(), 10);
        for (n, f) in out.iter().enumerate() {
            assert_eq!(f.occupied(), h[9].occupied());
            assert_eq!(f.t(), 10 + n);
        }
        let one = forecast_recursive(&Persistence, &h, 1, 0.5).unwrap();
        assert_eq!(one, out[..1]);
        assert!(forecast_recursive(&Persistence, &h, 0, 0.5).is_err());
    }

    #[test]
    fn static_sequence_scores_perfectly() {
        let s = shape(5, 5, 5);
        let f = frame(0, s, &[(1, 2, 3), (4, 4, 4)]);
        let frames: Vec<_> = (0..20).map(|t| f.clone().with_t(t)).collect();
        let out = forecast_recursive(&Persistence, &frames[..10], 10, 0.5).unwrap();
        assert_eq!(f1(&out, &frames[10..]), 1.0);
    }

    #[test]
    fn frequency_examples() {
        let s = shape(2, 1, 1);
        let a = CubeletIndex::new(0, 0, 0);
        let b = CubeletIndex::new(1, 0, 0);
        let h: Vec<_> = (0..10)
            .map(|t| if t % 2 == 0 { frame(t, s, &[(0, 0, 0)]) } else { frame(t, s, &[]) })
            .collect();
        let p = predict_frequency(&h).unwrap();
        assert_eq!(p.get(a), 0.5);
        assert_eq!(p.get(b), 0.0);
        let always: Vec<_> = (0..10).map(|t| frame(t, s, &[(1, 0, 0)])).collect();
        assert_eq!(predict_frequency(&always).unwrap().get(b), 1.0);
    }

    // t1=2, t2=3, one cubelet, history [1, 0]:
    //   step 1: mean(1,0) = 0.5, not > 0.5 -> 0; window [0, 0]
    //   step 2: 0 -> 0; step 3: 0 -> 0.
    // history [0, 1] gives the same cascade; history [1, 1] stays at 1.
    #[test]
    fn frequency_cascade_by_hand() {
        let s = shape(1, 1, 1);
        let on = |t| frame(t, s, &[(0, 0, 0)]);
        let off = |t| frame(t, s, &[]);
        let bits = |h: Vec<OccupancyFrame>| -> Vec<usize> {
            forecast_recursive(&Frequency, &h, 3, 0.5).unwrap().iter().map(|f| f.len()).collect()
        };
        assert_eq!(bits(vec![on(0), off(1)]), vec![0, 0, 0]);
        assert_eq!(bits(vec![off(0), on(1)]), vec![0, 0, 0]);
        assert_eq!(bits(vec![on(0), on(1)]), vec![1, 1, 1]);
        // At threshold 0.4 the 0.5 vote is a positive and the cascade holds at 1.
        let h = vec![on(0), off(1)];
        let lo: Vec<_> = forecast_recursive(&Frequency, &h, 3, 0.4).unwrap().iter().map(|f| f.len()).collect();
        assert_eq!(lo, vec![1, 1, 1]);
    }

    #[test]
    fn binarize_with_high_background() {
        let s = shape(2, 2, 1);
        let p = ProbFrame::new(s, 0.9, vec![(CubeletIndex::new(0, 1, 0), 0.2)]).unwrap();
        assert_eq!(p.binarize(0, 0.5).len(), 3);
        assert!(ProbFrame::new(s, 1.5, vec![]).is_err());
        assert!(ProbFrame::new(s, 0.0, vec![(CubeletIndex::new(2, 0, 0), 0.1)]).is_err());
    }

    struct Corrupting<P> {
        inner: P,
        calls: Cell<usize>,
        corrupt_at: usize,
    }

    impl<P: Predictor> Predictor for Corrupting<P> {
        fn predict(&self, history: &[OccupancyFrame]) -> Result<ProbFrame> {
            let n = self.calls.get();
            self.calls.set(n + 1);
            let p = self.inner.predict(history)?;
            if n == self.corrupt_at {
                let all: Vec<_> = p.shape().iter().map(|c| (c, 1.0 - p.get(c))).collect();
                return ProbFrame::new(p.shape(), 0.0, all);
            }
            Ok(p)
        }
    }

    #[test]
    fn corruption_only_affects_later_steps() {
        let s = shape(3, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let h = random_frames(&mut rng, s, 4, 0.3);
            let clean = forecast_recursive(&Frequency, &h, 6, 0.5).unwrap();
            let at = rng.random_range(0..6);
            let bad = Corrupting {
                inner: Frequency,
                calls: Cell::new(0),
                corrupt_at: at,
            };
            let dirty = forecast_recursive(&bad, &h, 6, 0.5).unwrap();
            assert_eq!(clean[..at], dirty[..at]);
            assert_ne!(clean[at], dirty[at]);
        }
    }

    #[test]
    fn forecast_output_is_binary_and_shaped() {
        let s = shape(3, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = random_frames(&mut rng, s, 5, 0.4);
        let out = forecast_recursive(&Frequency, &h, 7, 0.5).unwrap();
        assert_eq!(out.len(), 7);
        assert!(out.iter().all(|f| f.shape() == s));
    }

    #[test]
    fn feature_dimension() {
        assert_eq!(NeighborhoodModel::feature_dim(10), 71);
        assert_eq!(NeighborhoodModel::new(10).unwrap().weights.len(), 71);
        assert!(NeighborhoodModel::new(0).is_err());
    }

    // Dense recomputation of the feature layout.
    #[test]
    fn feature_layout_matches_dense_oracle() {
        let s = shape(3, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_frames(&mut rng, s, 2, 0.3);
        let m = NeighborhoodModel::new(2).unwrap();
        let feats = m.active_features(&h).unwrap();
        for c in s.iter() {
            let mut dense = vec![0u8; 14];
            for (t, f) in h.iter().enumerate() {
                dense[t * 7] = f.contains(c) as u8;
                for (d, dir) in FACE_DIRECTIONS.iter().enumerate() {
                    dense[t * 7 + 1 + d] = s.neighbor(c, *dir).is_some_and(|n| f.contains(n)) as u8;
                }
            }
            let got = feats.get(&c).cloned().unwrap_or_default();
            let want: Vec<u16> = (0..14).filter(|&i| dense[i] == 1).map(|i| i as u16).collect();
            assert_eq!(got, want, "cubelet {c}");
        }
    }

    #[test]
    fn learns_copy_dynamics() {
        let s = shape(6, 6, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // Copy dynamics: every future frame equals the last history frame.
        let mut train = Vec::new();
        let mut test = Vec::new();
        for n in 0..12 {
            let mut frames = random_frames(&mut rng, s, 4, 0.1);
            let last = frames[3].clone();
            frames.extend((4..6).map(|t| last.clone().with_t(t)));
            if n < 8 { train.push(frames) } else { test.push(frames) }
        }
        let samples: Vec<_> = train.iter().flat_map(|f| make_windows(f, 4, 2).unwrap()).collect();
        let model = train_neighborhood(NeighborhoodModel::new(4).unwrap(), &samples, &TrainConfig::default()).unwrap();
        assert!(model.trained);
        for frames in &test {
            let out = forecast_recursive(&model, &frames[..4], 2, model.threshold).unwrap();
            assert!(f1(&out, &frames[4..]) >= 0.99);
        }
    }

    #[test]
    fn all_empty_targets_predict_nothing() {
        let s = shape(4, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<Vec<OccupancyFrame>> = (0..5)
            .map(|_| {
                let mut f = random_frames(&mut rng, s, 3, 0.3);
                f.push(OccupancyFrame::empty(3, s));
                f
            })
            .collect();
        let samples: Vec<_> = data.iter().flat_map(|f| make_windows(f, 3, 1).unwrap()).collect();
        let model = train_neighborhood(NeighborhoodModel::new(3).unwrap(), &samples, &TrainConfig::default()).unwrap();
        let h = random_frames(&mut rng, s, 3, 0.5);
        let p = model.predict(&h).unwrap();
        assert!(p.background() < 0.5);
        assert!(p.explicit().iter().all(|&(_, v)| v < 0.5));
    }

    #[test]
    fn training_needs_samples_and_is_deterministic() {
        assert!(train_neighborhood(NeighborhoodModel::new(2).unwrap(), &[], &TrainConfig::default()).is_err());
        let s = shape(4, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let frames = random_frames(&mut rng, s, 12, 0.2);
        let samples = make_windows(&frames, 2, 1).unwrap();
        let cfg = TrainConfig { epochs: 50, learning_rate: 0.3 };
        let a = train_neighborhood(NeighborhoodModel::new(2).unwrap(), &samples, &cfg).unwrap();
        let b = train_neighborhood(NeighborhoodModel::new(2).unwrap(), &samples, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
