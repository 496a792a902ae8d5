//! The artifact pipeline: simulate → discretize → graph → predict → evaluate.
//!
//! Every stage reads its inputs from the output directory, so stages can be
//! run one at a time or together through `all`.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use cubeletworld::baselines::{
    forecast_recursive, train_neighborhood, Frequency, NeighborhoodModel, Persistence, Predictor,
};
use cubeletworld::discretize::{make_windows, split_folds, voxelize_log, DatasetManifest, GridSpec, Sample};
use cubeletworld::eval::{
    aggregate_folds, aggregate_subgraphs, compute_metrics, render_report, ConfusionCounts, MetricsRecord,
    ReportRow, Scope,
};
use cubeletworld::formats::{
    open_reader, read_frames_csv, read_predictions, write_atomic, write_dataset, write_frames_csv,
    write_predictions, DenseHeader, DATASET_MAGIC, FORMAT_VERSION,
};
use cubeletworld::graph::{
    decompose_subgraphs, prune_full_graph, read_graph_file, write_full_graph, write_subgraphs, GraphMode,
};
use cubeletworld::sim::{simulate, SimConfig, TrajectoryLog};
use cubeletworld::terrain::{generate_terrain, TerrainMap};
use cubeletworld::world::{CubeletIndex, GridShape, OccupancyFrame, Resolution};
use cubeletworld::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ModelKind, PipelineConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Simulate,
    Discretize,
    Graph,
    Predict,
    Evaluate,
    All,
}

const PREDICTIONS_HEADER: &str = "sample,step,i,j,k";

/// Artifact paths under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
    pub fn config_echo(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn lock(&self) -> PathBuf {
        self.root.join(".lock")
    }
    pub fn trajectory(&self) -> PathBuf {
        self.root.join("traj/trajectory.csv")
    }
    pub fn terrain(&self) -> PathBuf {
        self.root.join("traj/terrain.csv")
    }
    pub fn frames_dir(&self, res: &Resolution) -> PathBuf {
        self.root.join("frames").join(res.label())
    }
    pub fn frames(&self, res: &Resolution) -> PathBuf {
        self.frames_dir(res).join("frames.csv")
    }
    pub fn manifest(&self, res: &Resolution) -> PathBuf {
        self.frames_dir(res).join("manifest.json")
    }
    pub fn dataset(&self, res: &Resolution) -> PathBuf {
        self.frames_dir(res).join("dataset.cwds")
    }
    pub fn graph(&self, res: &Resolution) -> PathBuf {
        self.root.join("graphs").join(res.label()).join("graph.jsonl")
    }
    pub fn preds_dir(&self, model: ModelKind, res: &Resolution) -> PathBuf {
        self.root.join("preds").join(model.name()).join(res.label())
    }
    pub fn predictions_csv(&self, model: ModelKind, res: &Resolution) -> PathBuf {
        self.preds_dir(model, res).join("predictions.csv")
    }
    pub fn predictions_cwpr(&self, model: ModelKind, res: &Resolution) -> PathBuf {
        self.preds_dir(model, res).join("predictions.cwpr")
    }
    pub fn metrics(&self, model: ModelKind, res: &Resolution) -> PathBuf {
        self.preds_dir(model, res).join("metrics.json")
    }
    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn report_txt(&self) -> PathBuf {
        self.root.join("report.txt")
    }
}

/// Holds `.lock` in the output directory for the lifetime of a run.
struct LockGuard(PathBuf);

impl LockGuard {
    fn acquire(path: PathBuf) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(LockGuard(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::config(format!(
                "output directory is in use ({} exists; remove it if no other run is active)",
                path.display()
            ))),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn require(path: &Path, what: &str, command: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::config(format!(
            "missing {what}; run {command} (expected {})",
            path.display()
        )))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(open_reader(path)?)?)
}

fn dense_size(shape: GridShape, frames_per_sample: usize, num_samples: usize) -> u64 {
    let header = DenseHeader {
        magic: DATASET_MAGIC,
        version: FORMAT_VERSION,
        t1: 0,
        t2: 0,
        shape,
        num_samples: 0,
    };
    DenseHeader::LEN as u64 + (header.frame_bytes() * frames_per_sample * num_samples) as u64
}

/// A discretized resolution loaded back from disk.
struct Frames {
    res: Resolution,
    manifest: DatasetManifest,
    frames: Vec<OccupancyFrame>,
}

impl Frames {
    fn samples(&self) -> Result<Vec<Sample<'_>>> {
        make_windows(&self.frames, self.manifest.t1, self.manifest.t2)
    }

    fn shape(&self) -> GridShape {
        self.manifest.grid.shape
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MetricsFile {
    model: String,
    cubelet_size: [f64; 3],
    mode: GraphMode,
    folds: Vec<MetricsRecord>,
    aggregate: MetricsRecord,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    layout: Layout,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Self {
        let layout = Layout::new(&cfg.out_dir);
        Pipeline { cfg, layout }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Runs one command; `evaluate` and `all` return the rendered table.
    pub fn run(&self, command: Command) -> Result<Option<String>> {
        let _lock = LockGuard::acquire(self.layout.lock())?;
        let echo = self.cfg.to_toml()?;
        write_atomic(&self.layout.config_echo(), |w| {
            w.write_all(echo.as_bytes()).map_err(|e| Error::io("config.toml", e))
        })?;
        match command {
            Command::Simulate => self.simulate().map(|_| None),
            Command::Discretize => self.discretize().map(|_| None),
            Command::Graph => self.graph().map(|_| None),
            Command::Predict => self.predict().map(|_| None),
            Command::Evaluate => self.evaluate().map(Some),
            Command::All => {
                self.simulate()?;
                self.discretize()?;
                self.graph()?;
                self.predict()?;
                self.evaluate().map(Some)
            }
        }
    }

    fn terrain(&self) -> Result<TerrainMap> {
        match &self.cfg.terrain {
            Some(path) => TerrainMap::read_csv(self.cfg.world, open_reader(path)?),
            None => generate_terrain(self.cfg.world, &self.cfg.terrain_gen, self.cfg.seed),
        }
    }

    pub fn simulate(&self) -> Result<()> {
        let terrain = self.terrain()?;
        write_atomic(&self.layout.terrain(), |w| terrain.write_csv(w))?;
        let config = SimConfig {
            num_boids: self.cfg.sim.num_boids,
            num_steps: self.cfg.sim.num_steps,
            seed: self.cfg.seed,
            extent: self.cfg.world,
            params: self.cfg.flock.clone(),
            terrain: Arc::new(terrain),
        };
        let log = simulate(&config)?;
        let path = self.layout.trajectory();
        write_atomic(&path, |w| log.write_csv(w).map_err(|e| Error::io(&path, e)))
    }

    fn load_trajectory(&self) -> Result<TrajectoryLog> {
        let path = self.layout.trajectory();
        require(&path, "trajectory", "simulate")?;
        TrajectoryLog::read_csv(open_reader(&path)?)
    }

    pub fn discretize(&self) -> Result<()> {
        let log = self.load_trajectory()?;
        let hash = log.content_hash();
        for res in self.cfg.resolutions() {
            let grid = GridSpec::new(self.cfg.world, res)?;
            let frames = voxelize_log(&log, &grid)?;
            let samples = make_windows(&frames, self.cfg.t1, self.cfg.t2)?;
            let folds = split_folds(samples.len(), self.cfg.folds)?;
            let manifest = DatasetManifest {
                grid,
                t1: self.cfg.t1,
                t2: self.cfg.t2,
                num_samples: samples.len(),
                num_folds: self.cfg.folds,
                folds: folds.assignments(),
                seed: self.cfg.seed,
                trajectory_sha256: hash.clone(),
            };
            write_atomic(&self.layout.frames(&res), |w| write_frames_csv(w, &frames))?;
            write_json(&self.layout.manifest(&res), &manifest)?;
            let dataset = self.layout.dataset(&res);
            if dense_size(grid.shape, self.cfg.t1 + self.cfg.t2, samples.len()) <= self.cfg.dense_export_max_bytes {
                write_atomic(&dataset, |w| write_dataset(w, grid.shape, self.cfg.t1, self.cfg.t2, &samples))?;
            } else if dataset.exists() {
                fs::remove_file(&dataset).map_err(|e| Error::io(&dataset, e))?;
            }
        }
        Ok(())
    }

    fn load_frames(&self, res: Resolution) -> Result<Frames> {
        let path = self.layout.manifest(&res);
        require(&path, &format!("frames for {}", res.label()), "discretize")?;
        let manifest: DatasetManifest = read_json(&path)?;
        if manifest.t1 != self.cfg.t1 || manifest.t2 != self.cfg.t2 || manifest.num_folds != self.cfg.folds {
            return Err(Error::config(format!(
                "{} was written with different t1/t2/folds; run discretize",
                path.display()
            )));
        }
        let num_frames = manifest.num_samples + manifest.t1 + manifest.t2 - 1;
        let frames_path = self.layout.frames(&res);
        require(&frames_path, &format!("frames for {}", res.label()), "discretize")?;
        let frames = read_frames_csv(open_reader(&frames_path)?, manifest.grid.shape, num_frames)?;
        Ok(Frames { res, manifest, frames })
    }

    pub fn graph(&self) -> Result<()> {
        let k = self.cfg.graph.k;
        for res in self.cfg.resolutions() {
            let data = self.load_frames(res)?;
            let frames_ref = format!("../../frames/{}/frames.csv", res.label());
            let path = self.layout.graph(&res);
            match self.cfg.graph.mode {
                GraphMode::FullGraph => {
                    let g = prune_full_graph(&data.frames, data.shape(), k)?;
                    write_atomic(&path, |w| write_full_graph(w, &g, k, &frames_ref))?;
                }
                GraphMode::MultiSubgraph => {
                    let subs = decompose_subgraphs(&data.frames, data.shape(), k)?;
                    write_atomic(&path, |w| {
                        write_subgraphs(w, data.shape(), data.frames.len(), &subs, k, &frames_ref)
                    })?;
                }
            }
        }
        Ok(())
    }

    fn forecast_all<P: Predictor + Sync>(&self, p: &P, samples: &[Sample<'_>]) -> Result<Vec<Vec<OccupancyFrame>>> {
        samples
            .par_iter()
            .map(|s| forecast_recursive(p, s.history, self.cfg.t2, self.cfg.threshold))
            .collect()
    }

    pub fn predict(&self) -> Result<()> {
        let model = self.cfg.model;
        for res in self.cfg.resolutions() {
            let data = self.load_frames(res)?;
            let samples = data.samples()?;
            let folds = data.manifest.fold_assignment()?;
            let preds = match model {
                ModelKind::Persistence => self.forecast_all(&Persistence, &samples)?,
                ModelKind::Frequency => self.forecast_all(&Frequency, &samples)?,
                ModelKind::Neighborhood => {
                    let mut preds = Vec::with_capacity(samples.len());
                    for f in 0..folds.num_folds() {
                        let train: Vec<Sample<'_>> = folds.train_indices(f).map(|i| samples[i]).collect();
                        let mut m = NeighborhoodModel::new(self.cfg.t1)?;
                        m.threshold = self.cfg.threshold;
                        let m = train_neighborhood(m, &train, &self.cfg.train)?;
                        let dir = self.layout.preds_dir(model, &res);
                        write_json(&dir.join(format!("model_fold{f}.json")), &m)?;
                        preds.extend(self.forecast_all(&m, &samples[folds.test_range(f)])?);
                    }
                    preds
                }
            };
            write_atomic(&self.layout.predictions_csv(model, &res), |w| write_predictions_csv(w, &preds))?;
            let cwpr = self.layout.predictions_cwpr(model, &res);
            if dense_size(data.shape(), self.cfg.t2, preds.len()) <= self.cfg.dense_export_max_bytes {
                write_atomic(&cwpr, |w| write_predictions(w, data.shape(), self.cfg.t1, self.cfg.t2, &preds))?;
            } else if cwpr.exists() {
                fs::remove_file(&cwpr).map_err(|e| Error::io(&cwpr, e))?;
            }
        }
        Ok(())
    }

    fn load_predictions(&self, data: &Frames) -> Result<Vec<Vec<OccupancyFrame>>> {
        let model = self.cfg.model;
        let cwpr = self.layout.predictions_cwpr(model, &data.res);
        let n = data.manifest.num_samples;
        let preds = if cwpr.is_file() {
            let file = read_predictions(open_reader(&cwpr)?)?;
            if file.header.shape != data.shape() || file.header.t2 as usize != self.cfg.t2 {
                return Err(Error::ShapeMismatch(format!("{} does not match the dataset", cwpr.display())));
            }
            file.samples
        } else {
            let csv = self.layout.predictions_csv(model, &data.res);
            require(&csv, "predictions", "predict")?;
            read_predictions_csv(open_reader(&csv)?, data.shape(), n, self.cfg.t2)?
        };
        if preds.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} predicted samples for {n} dataset samples; run predict",
                preds.len()
            )));
        }
        Ok(preds)
    }

    fn evaluate_resolution(&self, res: Resolution) -> Result<(MetricsFile, usize)> {
        let data = self.load_frames(res)?;
        let preds = self.load_predictions(&data)?;
        let samples = data.samples()?;
        let folds = data.manifest.fold_assignment()?;
        let mode = self.cfg.graph.mode;
        let subgraphs = match mode {
            GraphMode::FullGraph => None,
            GraphMode::MultiSubgraph => {
                let path = self.layout.graph(&res);
                require(&path, "graph", "graph")?;
                let (_, listings) = read_graph_file(open_reader(&path)?)?;
                Some(listings.into_iter().map(|l| l.nodes).collect::<Vec<_>>())
            }
        };
        let mut records = Vec::with_capacity(folds.num_folds());
        let mut degenerate_subgraphs = 0;
        for f in 0..folds.num_folds() {
            let range = folds.test_range(f);
            let pred: Vec<OccupancyFrame> = preds[range.clone()].iter().flatten().cloned().collect();
            let truth: Vec<OccupancyFrame> = samples[range].iter().flat_map(|s| s.future.iter().cloned()).collect();
            let record = match &subgraphs {
                None => compute_metrics(&pred, &truth, Scope::Fold)?,
                Some(members) => {
                    let per = subgraph_metrics(members, &pred, &truth)?;
                    let agg = aggregate_subgraphs(&per)?;
                    degenerate_subgraphs += agg.degenerate_count;
                    MetricsRecord { scope: Scope::Fold, ..agg }
                }
            };
            records.push(record);
        }
        let aggregate = aggregate_folds(&records, self.cfg.folds)?;
        Ok((
            MetricsFile {
                model: self.cfg.model.name().to_string(),
                cubelet_size: res.as_array(),
                mode,
                folds: records,
                aggregate,
            },
            degenerate_subgraphs,
        ))
    }

    pub fn evaluate(&self) -> Result<String> {
        let model = self.cfg.model;
        let label = match self.cfg.graph.mode {
            GraphMode::FullGraph => model.name().to_string(),
            GraphMode::MultiSubgraph => format!("{}-msg", model.name()),
        };
        let mut rows = Vec::new();
        for res in self.cfg.resolutions() {
            let (metrics, degenerate) = self.evaluate_resolution(res)?;
            write_json(&self.layout.metrics(model, &res), &metrics)?;
            rows.push(ReportRow::new(&label, res, &metrics.aggregate.metrics, degenerate));
        }
        let (report, text) = render_report(rows)?;
        write_json(&self.layout.report_json(), &report)?;
        write_atomic(&self.layout.report_txt(), |w| {
            w.write_all(text.as_bytes()).map_err(|e| Error::io("report.txt", e))
        })?;
        Ok(text)
    }
}

/// Per-subgraph confusion counts over aligned frame sequences, restricted
/// to each subgraph's member cubelets.
pub fn subgraph_metrics(
    members: &[Vec<CubeletIndex>],
    pred: &[OccupancyFrame],
    truth: &[OccupancyFrame],
) -> Result<Vec<MetricsRecord>> {
    let mut owners: HashMap<CubeletIndex, Vec<u32>> = HashMap::new();
    for (s, m) in members.iter().enumerate() {
        for &c in m {
            owners.entry(c).or_default().push(s as u32);
        }
    }
    let mut counts = vec![ConfusionCounts::default(); members.len()];
    for (p, t) in pred.iter().zip(truth) {
        ConfusionCounts::from_frame(p, t)?;
        for &c in p.occupied() {
            let hit = t.contains(c);
            for &s in owners.get(&c).into_iter().flatten() {
                if hit {
                    counts[s as usize].tp += 1;
                } else {
                    counts[s as usize].fp += 1;
                }
            }
        }
        for &c in t.occupied() {
            if !p.contains(c) {
                for &s in owners.get(&c).into_iter().flatten() {
                    counts[s as usize].fn_ += 1;
                }
            }
        }
    }
    let frames = pred.len() as u64;
    Ok(counts
        .into_iter()
        .zip(members)
        .map(|(mut c, m)| {
            c.tn = m.len() as u64 * frames - c.tp - c.fp - c.fn_;
            MetricsRecord::from_counts(c, Scope::Subgraph)
        })
        .collect())
}

/// Sparse predictions: one `sample,step,i,j,k` row per predicted occupied
/// cubelet, sorted.
pub fn write_predictions_csv<W: Write>(w: &mut W, preds: &[Vec<OccupancyFrame>]) -> Result<()> {
    let io = |e| Error::io("predictions.csv", e);
    writeln!(w, "{PREDICTIONS_HEADER}").map_err(io)?;
    for (s, frames) in preds.iter().enumerate() {
        for (step, f) in frames.iter().enumerate() {
            for c in f.occupied() {
                writeln!(w, "{s},{step},{},{},{}", c.i, c.j, c.k).map_err(io)?;
            }
        }
    }
    Ok(())
}

pub fn read_predictions_csv<R: std::io::Read>(
    r: R,
    shape: GridShape,
    num_samples: usize,
    t2: usize,
) -> Result<Vec<Vec<OccupancyFrame>>> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(r);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::format(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.join(",") != PREDICTIONS_HEADER {
        return Err(Error::format(format!("predictions header must be {PREDICTIONS_HEADER}")));
    }
    let mut cells = vec![vec![Vec::new(); t2]; num_samples];
    for row in rdr.deserialize::<(usize, usize, u32, u32, u32)>() {
        let (s, step, i, j, k) = row.map_err(|e| Error::format(e.to_string()))?;
        if s >= num_samples || step >= t2 {
            return Err(Error::format(format!("prediction row ({s}, {step}) out of range")));
        }
        cells[s][step].push(CubeletIndex::new(i, j, k));
    }
    cells
        .into_iter()
        .map(|steps| {
            steps
                .into_iter()
                .enumerate()
                .map(|(t, c)| OccupancyFrame::new(t, shape, c))
                .collect()
        })
        .collect()
}
