//! Deterministic boids flocking over a static terrain.
//!
//! Each step computes separation, alignment, cohesion and terrain avoidance
//! for every boid from the pre-step snapshot, then applies the velocity and
//! position updates synchronously. Walls reflect.
//!
//! Randomness comes from `ChaCha8Rng` (the 8-round ChaCha stream cipher used
//! as a generator, seeded through `SeedableRng::seed_from_u64`). Tie-breaks
//! for coincident boids use a stateless SplitMix64 hash so they do not depend
//! on evaluation order.

use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::terrain::{next_below, TerrainMap};
use crate::world::{CubeletIndex, WorldExtent};

pub type Vec3 = Vector3<f64>;

/// Attempts per boid when drawing a start position outside terrain.
const PLACEMENT_ATTEMPTS: usize = 10_000;

/// The speed clamp stops this far (relative) below `v_max` so rounding in
/// the position update cannot push a displacement past `v_max * dt`.
const SPEED_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoidState {
    pub position: Vec3,
    pub velocity: Vec3,
}

impl BoidState {
    pub fn new(position: [f64; 3], velocity: [f64; 3]) -> Self {
        BoidState {
            position: Vec3::from(position),
            velocity: Vec3::from(velocity),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlockParams {
    pub neighbor_radius: f64,
    /// Half-angle of the view cone around the velocity, radians.
    pub view_half_angle: f64,
    pub sep_radius: f64,
    pub w_sep: f64,
    pub w_align: f64,
    pub w_coh: f64,
    pub w_avoid: f64,
    pub v_max: f64,
    pub v_init: f64,
    pub dt: f64,
}

impl Default for FlockParams {
    fn default() -> Self {
        FlockParams {
            neighbor_radius: 25.0,
            view_half_angle: 3.0 * std::f64::consts::FRAC_PI_4,
            sep_radius: 8.0,
            w_sep: 1.5,
            w_align: 1.0,
            w_coh: 1.0,
            w_avoid: 2.0,
            v_max: 4.0,
            v_init: 2.0,
            dt: 1.0,
        }
    }
}

impl FlockParams {
    /// Returns every violated constraint.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let finite = [
            ("neighbor_radius", self.neighbor_radius),
            ("view_half_angle", self.view_half_angle),
            ("sep_radius", self.sep_radius),
            ("w_sep", self.w_sep),
            ("w_align", self.w_align),
            ("w_coh", self.w_coh),
            ("w_avoid", self.w_avoid),
            ("v_max", self.v_max),
            ("v_init", self.v_init),
            ("dt", self.dt),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                out.push(format!("{name} must be finite"));
            }
        }
        if !(self.sep_radius > 0.0 && self.sep_radius <= self.neighbor_radius) {
            out.push("need 0 < sep_radius <= neighbor_radius".into());
        }
        if !(self.view_half_angle > 0.0 && self.view_half_angle <= std::f64::consts::PI) {
            out.push("need 0 < view_half_angle <= pi".into());
        }
        for (name, w) in [
            ("w_sep", self.w_sep),
            ("w_align", self.w_align),
            ("w_coh", self.w_coh),
            ("w_avoid", self.w_avoid),
        ] {
            if w < 0.0 {
                out.push(format!("{name} must be >= 0"));
            }
        }
        if self.v_max <= 0.0 {
            out.push("v_max must be > 0".into());
        }
        if !(self.v_init >= 0.0 && self.v_init <= self.v_max) {
            out.push("need 0 <= v_init <= v_max".into());
        }
        if self.dt <= 0.0 {
            out.push("dt must be > 0".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::config(v.join("; ")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub num_boids: usize,
    pub num_steps: usize,
    pub seed: u64,
    pub extent: WorldExtent,
    pub params: FlockParams,
    pub terrain: Arc<TerrainMap>,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let mut v = self.params.violations();
        if self.num_boids == 0 {
            v.push("num_boids must be >= 1".into());
        }
        if self.num_steps == 0 {
            v.push("num_steps must be >= 1".into());
        }
        if let Err(e) = self.extent.validate() {
            v.push(e.to_string());
        }
        let min_side = self.extent.dx.min(self.extent.dy).min(self.extent.dz);
        if self.params.v_max * self.params.dt >= min_side {
            v.push("v_max * dt must be smaller than every world side".into());
        }
        if self.terrain.extent() != self.extent {
            v.push("terrain extent differs from the simulation extent".into());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::config(v.join("; ")))
        }
    }
}

/// Indices of `others` inside the neighborhood arc of `me`: within
/// `neighbor_radius` of its center and within `view_half_angle` of its
/// heading. A stationary boid sees the full sphere.
pub fn find_neighbors(me: &BoidState, others: &[BoidState], params: &FlockParams) -> Vec<usize> {
    others
        .iter()
        .enumerate()
        .filter(|(_, o)| in_arc(me, o, params))
        .map(|(n, _)| n)
        .collect()
}

fn in_arc(me: &BoidState, other: &BoidState, params: &FlockParams) -> bool {
    let offset = other.position - me.position;
    let dist = offset.norm();
    if dist > params.neighbor_radius {
        return false;
    }
    let speed = me.velocity.norm();
    if speed == 0.0 || dist == 0.0 {
        return true;
    }
    let cos = (me.velocity.dot(&offset) / (speed * dist)).clamp(-1.0, 1.0);
    cos.acos() <= params.view_half_angle
}

/// Unit steering directions (each zero when undefined).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Steering {
    pub sep: Vec3,
    pub align: Vec3,
    pub coh: Vec3,
}

fn normalize_or_zero(v: Vec3) -> Vec3 {
    let n = v.norm();
    if n > 0.0 && n.is_finite() {
        v / n
    } else {
        Vec3::zeros()
    }
}

/// Separation, alignment and cohesion for `me` given its neighbors.
///
/// `coincident(n)` supplies the repulsion direction when neighbor `n` sits
/// exactly on `me`.
pub fn steering(
    me: &BoidState,
    neighbors: &[BoidState],
    params: &FlockParams,
    mut coincident: impl FnMut(usize) -> Vec3,
) -> Steering {
    if neighbors.is_empty() {
        return Steering {
            sep: Vec3::zeros(),
            align: Vec3::zeros(),
            coh: Vec3::zeros(),
        };
    }
    let mut push = Vec3::zeros();
    for (n, other) in neighbors.iter().enumerate() {
        let away = me.position - other.position;
        let d2 = away.norm_squared();
        if d2 == 0.0 {
            push += coincident(n);
        } else if d2.sqrt() <= params.sep_radius {
            push += away / d2;
        }
    }
    let count = neighbors.len() as f64;
    let mean_vel = neighbors.iter().map(|o| o.velocity).sum::<Vec3>() / count;
    let centroid = neighbors.iter().map(|o| o.position).sum::<Vec3>() / count;
    Steering {
        sep: normalize_or_zero(push),
        align: normalize_or_zero(mean_vel - me.velocity),
        coh: normalize_or_zero(centroid - me.position),
    }
}

/// Inverse-square repulsion from terrain unit cubelets whose centers lie
/// within `sep_radius` of the boid.
pub fn avoid_terrain(me: &BoidState, terrain: &TerrainMap, params: &FlockParams) -> Vec3 {
    let r = params.sep_radius;
    let shape = terrain.unit_shape();
    let p = me.position;
    // Cubelet centers c + 0.5 within [p - r, p + r].
    let range = |c: f64, n: u32| {
        let lo = (c - r - 0.5).ceil().max(0.0);
        let hi = (c + r - 0.5).floor().min(n as f64 - 1.0);
        (lo as i64)..=(hi as i64)
    };
    let mut force = Vec3::zeros();
    if terrain.unit_occupancy().is_empty() {
        return force;
    }
    for i in range(p.x, shape.n1) {
        for j in range(p.y, shape.n2) {
            for k in range(p.z, shape.n3) {
                let idx = CubeletIndex::new(i as u32, j as u32, k as u32);
                if !terrain.is_occupied(idx) {
                    continue;
                }
                let center = Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5);
                let away = p - center;
                let d = away.norm();
                if d > r {
                    continue;
                }
                if d == 0.0 {
                    // Sitting on a cubelet center: push straight up.
                    force += Vec3::z();
                } else {
                    force += away / (d * d * d);
                }
            }
        }
    }
    force
}

fn clamp_norm(v: Vec3, max: f64) -> Vec3 {
    let n = v.norm();
    let cap = max * (1.0 - SPEED_MARGIN);
    if n > cap {
        v * (cap / n)
    } else {
        v
    }
}

/// Folds a coordinate back into `[0, d)`, flipping the velocity component
/// once per bounce.
fn reflect(p: &mut f64, v: &mut f64, d: f64) {
    loop {
        if *p < 0.0 {
            *p = -*p;
            *v = -*v;
        } else if *p >= d {
            *p = 2.0 * d - *p;
            *v = -*v;
            if *p >= d {
                *p = next_below(d);
            }
        } else {
            break;
        }
    }
    // Normalise -0.0 so serialized output never prints "-0".
    *p += 0.0;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic unit vector for the coincident pair `(lo, hi)` at step `t`.
fn pair_direction(seed: u64, t: usize, lo: usize, hi: usize) -> Vec3 {
    let h1 = splitmix64(seed ^ splitmix64(t as u64 ^ splitmix64((lo as u64) << 32 | hi as u64)));
    let h2 = splitmix64(h1);
    let u = (h1 >> 11) as f64 / (1u64 << 53) as f64;
    let w = (h2 >> 11) as f64 / (1u64 << 53) as f64;
    let z = 2.0 * u - 1.0;
    let phi = 2.0 * std::f64::consts::PI * w;
    let rho = (1.0 - z * z).max(0.0).sqrt();
    Vec3::new(rho * phi.cos(), rho * phi.sin(), z)
}

fn state_key(s: &BoidState) -> [f64; 6] {
    [
        s.position.x,
        s.position.y,
        s.position.z,
        s.velocity.x,
        s.velocity.y,
        s.velocity.z,
    ]
}

/// Total steering acceleration on boid `me_idx`.
fn boid_force(states: &[BoidState], me_idx: usize, config: &SimConfig, t: usize) -> Vec3 {
    let p = &config.params;
    let me = &states[me_idx];
    let mut found: Vec<(usize, BoidState)> = states
        .iter()
        .enumerate()
        .filter(|(n, other)| *n != me_idx && in_arc(me, other, p))
        .map(|(n, other)| (n, *other))
        .collect();
    // Sum contributions in an order fixed by state, not by label, so that
    // relabelling the flock permutes trajectories bit for bit.
    found.sort_by(|a, b| state_key(&a.1).partial_cmp(&state_key(&b.1)).unwrap_or(std::cmp::Ordering::Equal));
    let (ids, neighbors): (Vec<usize>, Vec<BoidState>) = found.into_iter().unzip();
    let s = steering(me, &neighbors, p, |slot| {
        let other = ids[slot];
        let dir = pair_direction(config.seed, t, me_idx.min(other), me_idx.max(other));
        if me_idx < other {
            dir
        } else {
            -dir
        }
    });
    let avoid = avoid_terrain(me, &config.terrain, p);
    s.sep * p.w_sep + s.align * p.w_align + s.coh * p.w_coh + avoid * p.w_avoid
}

/// Advances all boids by one synchronous update. `t` is the index of the
/// step being taken; it only seeds coincident-pair tie-breaks.
pub fn step(states: &[BoidState], config: &SimConfig, t: usize) -> Vec<BoidState> {
    let p = &config.params;
    let extent = config.extent.as_array();
    let forces: Vec<Vec3> = (0..states.len())
        .into_par_iter()
        .map(|n| boid_force(states, n, config, t))
        .collect();
    states
        .iter()
        .zip(forces)
        .map(|(s, f)| {
            let velocity = clamp_norm(s.velocity + f * p.dt, p.v_max);
            let mut pos = s.position + velocity * p.dt;
            let mut vel = velocity;
            for axis in 0..3 {
                reflect(&mut pos[axis], &mut vel[axis], extent[axis]);
            }
            BoidState {
                position: pos,
                velocity: vel,
            }
        })
        .collect()
}

/// Draws start states: positions uniform over the extent outside terrain
/// cubelets, velocities uniform on the sphere scaled to `v_init`. Each boid
/// draws its position (with rejection) and then its velocity.
pub fn initial_states(config: &SimConfig, rng: &mut ChaCha8Rng) -> Result<Vec<BoidState>> {
    let e = config.extent;
    let mut states = Vec::with_capacity(config.num_boids);
    for placed in 0..config.num_boids {
        let mut position = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let cand = [
                rng.random_range(0.0..e.dx),
                rng.random_range(0.0..e.dy),
                rng.random_range(0.0..e.dz),
            ];
            if !config.terrain.occupies_point(cand) {
                position = Some(cand);
                break;
            }
        }
        let Some(position) = position else {
            return Err(Error::Placement {
                placed,
                requested: config.num_boids,
                attempts: PLACEMENT_ATTEMPTS,
            });
        };
        let dir: [f64; 3] = UnitSphere.sample(rng);
        let velocity = Vec3::from(dir) * config.params.v_init;
        states.push(BoidState {
            position: Vec3::from(position),
            velocity,
        });
    }
    Ok(states)
}

/// Runs the simulation from explicit start states, logging `num_steps`
/// entries: the start positions followed by `num_steps - 1` updates.
pub fn simulate_from(config: &SimConfig, start: Vec<BoidState>) -> Result<TrajectoryLog> {
    config.validate()?;
    let mut log = TrajectoryLog::with_capacity(start.len(), config.num_steps);
    let mut states = start;
    log.push(&states);
    for t in 1..config.num_steps {
        states = step(&states, config, t);
        log.push(&states);
    }
    Ok(log)
}

/// Runs the full seeded simulation.
pub fn simulate(config: &SimConfig) -> Result<TrajectoryLog> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let start = initial_states(config, &mut rng)?;
    simulate_from(config, start)
}

/// Boid coordinates over time: `len()` entries of `num_boids` points.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    num_boids: usize,
    coords: Vec<[f64; 3]>,
}

pub const TRAJECTORY_HEADER: &str = "t,boid_id,x,y,z";

impl TrajectoryLog {
    pub fn with_capacity(num_boids: usize, steps: usize) -> Self {
        TrajectoryLog {
            num_boids,
            coords: Vec::with_capacity(num_boids * steps),
        }
    }

    pub fn from_entries(num_boids: usize, entries: &[Vec<[f64; 3]>]) -> Result<Self> {
        let mut log = TrajectoryLog::with_capacity(num_boids, entries.len());
        for (t, e) in entries.iter().enumerate() {
            if e.len() != num_boids {
                return Err(Error::ShapeMismatch(format!(
                    "entry {t} has {} boids, expected {num_boids}",
                    e.len()
                )));
            }
            log.coords.extend_from_slice(e);
        }
        Ok(log)
    }

    fn push(&mut self, states: &[BoidState]) {
        self.coords
            .extend(states.iter().map(|s| [s.position.x, s.position.y, s.position.z]));
    }

    pub fn num_boids(&self) -> usize {
        self.num_boids
    }

    pub fn len(&self) -> usize {
        self.coords.len().checked_div(self.num_boids).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// The `s x 3` coordinate matrix at timestep `t`.
    pub fn positions(&self, t: usize) -> &[[f64; 3]] {
        &self.coords[t * self.num_boids..(t + 1) * self.num_boids]
    }

    pub fn entries(&self) -> impl Iterator<Item = &[[f64; 3]]> {
        self.coords.chunks(self.num_boids.max(1))
    }

    /// Writes `t,boid_id,x,y,z` rows sorted by `(t, boid_id)`. Floats use
    /// the shortest representation that round-trips.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{TRAJECTORY_HEADER}")?;
        for (t, entry) in self.entries().enumerate() {
            for (b, c) in entry.iter().enumerate() {
                writeln!(w, "{t},{b},{},{},{}", c[0], c[1], c[2])?;
            }
        }
        Ok(())
    }

    pub fn to_csv_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Hex SHA-256 of the CSV serialization.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_csv_bytes()))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().from_reader(r);
        let headers = rdr
            .headers()
            .map_err(|e| Error::format(format!("trajectory header: {e}")))?;
        if headers.iter().collect::<Vec<_>>().join(",") != TRAJECTORY_HEADER {
            return Err(Error::format(format!(
                "trajectory header must be `{TRAJECTORY_HEADER}`"
            )));
        }
        let mut rows: Vec<(usize, usize, [f64; 3])> = Vec::new();
        for (n, rec) in rdr.deserialize::<(usize, usize, f64, f64, f64)>().enumerate() {
            let (t, b, x, y, z) =
                rec.map_err(|e| Error::format(format!("trajectory row {n}: {e}")))?;
            rows.push((t, b, [x, y, z]));
        }
        let num_boids = rows.iter().take_while(|r| r.0 == 0).count();
        if rows.is_empty() || num_boids == 0 || rows.len() % num_boids != 0 {
            return Err(Error::format("trajectory has no complete timestep"));
        }
        for (n, (t, b, _)) in rows.iter().enumerate() {
            if *t != n / num_boids || *b != n % num_boids {
                return Err(Error::format(format!(
                    "trajectory row {n} is (t={t}, boid={b}); rows must be sorted by (t, boid_id) with {num_boids} boids per step"
                )));
            }
        }
        Ok(TrajectoryLog {
            num_boids,
            coords: rows.into_iter().map(|r| r.2).collect(),
        })
    }
}
