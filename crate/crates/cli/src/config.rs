//! Pipeline configuration: one TOML file plus command-line overrides.

use std::fmt;
use std::path::{Path, PathBuf};

use cubeletworld::baselines::TrainConfig;
use cubeletworld::graph::{GraphConfig, GraphMode};
use cubeletworld::sim::FlockParams;
use cubeletworld::terrain::TerrainGenConfig;
use cubeletworld::world::{Resolution, WorldExtent};
use cubeletworld::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Persistence,
    Frequency,
    Neighborhood,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Persistence => "persistence",
            ModelKind::Frequency => "frequency",
            ModelKind::Neighborhood => "neighborhood",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub num_boids: usize,
    /// Trajectory length including the initial state.
    pub num_steps: usize,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            num_boids: 30,
            num_steps: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Terrain point file; a procedural city is generated when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terrain: Option<PathBuf>,
    pub resolutions: Vec<[f64; 3]>,
    #[serde(default = "default_window")]
    pub t1: usize,
    #[serde(default = "default_window")]
    pub t2: usize,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_model")]
    pub model: ModelKind,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Dense `CWDS`/`CWPR` files larger than this are not written.
    #[serde(default = "default_dense_cap")]
    pub dense_export_max_bytes: u64,
    #[serde(default = "default_world")]
    pub world: WorldExtent,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub flock: FlockParams,
    #[serde(default)]
    pub terrain_gen: TerrainGenConfig,
    #[serde(default)]
    pub graph: GraphConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_window() -> usize {
    10
}
fn default_folds() -> usize {
    5
}
fn default_model() -> ModelKind {
    ModelKind::Persistence
}
fn default_threshold() -> f64 {
    0.5
}
fn default_dense_cap() -> u64 {
    256 << 20
}
fn default_world() -> WorldExtent {
    WorldExtent::BOIDS
}

/// Command-line values that replace config entries.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub resolutions: Vec<[f64; 3]>,
    pub model: Option<ModelKind>,
    pub out: Option<PathBuf>,
    pub folds: Option<usize>,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("malformed config: {e}")))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if !o.resolutions.is_empty() {
            self.resolutions = o.resolutions.clone();
        }
        if let Some(m) = o.model {
            self.model = m;
        }
        if let Some(p) = &o.out {
            self.out_dir = p.clone();
        }
        if let Some(f) = o.folds {
            self.folds = f;
        }
    }

    pub fn resolutions(&self) -> Vec<Resolution> {
        self.resolutions
            .iter()
            .map(|&[cx, cy, cz]| Resolution { cx, cy, cz })
            .collect()
    }

    /// Every violated constraint, in a stable order.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if let Err(e) = self.world.validate() {
            v.push(e.to_string());
        }
        if self.resolutions.is_empty() {
            v.push("resolutions must not be empty".into());
        }
        for r in &self.resolutions {
            match Resolution::new(r[0], r[1], r[2]) {
                Ok(res) => {
                    if let Err(e) = res.check_within(&self.world) {
                        v.push(e.to_string());
                    }
                }
                Err(e) => v.push(e.to_string()),
            }
        }
        if self.t1 < 1 {
            v.push("t1 must be ≥ 1".into());
        }
        if self.t2 < 1 {
            v.push("t2 must be ≥ 1".into());
        }
        if self.folds < 2 {
            v.push("folds must be ≥ 2".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            v.push(format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        if self.sim.num_boids < 1 {
            v.push("sim.num_boids must be ≥ 1".into());
        }
        let windows = (self.sim.num_steps + 1).saturating_sub(self.t1 + self.t2);
        if windows < self.folds {
            v.push(format!(
                "sim.num_steps = {} yields {windows} samples, fewer than {} folds",
                self.sim.num_steps, self.folds
            ));
        }
        v.extend(self.flock.violations());
        if self.flock.v_max * self.flock.dt >= self.world.dx.min(self.world.dy).min(self.world.dz) {
            v.push("flock.v_max * flock.dt must be smaller than every world side".into());
        }
        match &self.terrain {
            Some(p) if !p.is_file() => v.push(format!("terrain file {} not found", p.display())),
            Some(_) => {}
            None => {
                if let Err(e) = self.terrain_gen.validate(&self.world) {
                    v.push(e.to_string());
                }
            }
        }
        if self.graph.mode == GraphMode::MultiSubgraph && self.graph.k < 1 {
            v.push("graph.k must be ≥ 1 in multi_subgraph mode".into());
        }
        if self.train.epochs < 1 {
            v.push("train.epochs must be ≥ 1".into());
        }
        if !(self.train.learning_rate.is_finite() && self.train.learning_rate > 0.0) {
            v.push("train.learning_rate must be > 0".into());
        }
        v
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }
}

/// Reads, overrides and checks a config file. Relative paths inside the
/// file are taken relative to the file's directory.
pub fn validate_config(path: &Path, overrides: &Overrides) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = PipelineConfig::parse(&text)?;
    let base = path.parent().unwrap_or(Path::new(""));
    cfg.out_dir = base.join(&cfg.out_dir);
    cfg.terrain = cfg.terrain.map(|t| base.join(t));
    cfg.apply(overrides);
    let violations = cfg.violations();
    if violations.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::config(format!(
            "invalid config {}:\n  - {}",
            path.display(),
            violations.join("\n  - ")
        )))
    }
}

/// Parses `cx,cy,cz`.
pub fn parse_resolution(s: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    <[f64; 3]>::try_from(parts).map_err(|_| format!("expected cx,cy,cz, got {s:?}"))
}
