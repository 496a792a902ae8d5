//! Lattice graphs over cubelets.
//!
//! Nodes are cubelets, edges join face-adjacent cubelets (6-connectivity).
//! Two constructions are provided: the pruned full graph, which keeps every
//! ever-occupied cubelet plus its k-hop neighborhood, and the multi-subgraph
//! decomposition, which builds one independent k-hop subgraph around each
//! ever-occupied cubelet. Node order is always lexicographic by `(i, j, k)`.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{CubeletIndex, GridShape, OccupancyFrame};

/// Positive face directions; each lattice edge is enumerated once from its
/// lexicographically smaller endpoint.
const FORWARD: [[i32; 3]; 3] = [[1, 0, 0], [0, 1, 0], [0, 0, 1]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    FullGraph,
    MultiSubgraph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    pub mode: GraphMode,
    pub k: u32,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            mode: GraphMode::FullGraph,
            k: 1,
        }
    }
}

/// `n2*n3*(n1-1) + n1*n3*(n2-1) + n1*n2*(n3-1)`.
pub fn lattice_edge_count(shape: GridShape) -> u64 {
    let [a, b, c] = shape.as_array().map(u64::from);
    b * c * (a - 1) + a * c * (b - 1) + a * b * (c - 1)
}

/// Every undirected lattice edge `(u, v)` with `u < v`, in lexicographic
/// order of `u`.
pub fn build_adjacency(shape: GridShape) -> impl Iterator<Item = (CubeletIndex, CubeletIndex)> {
    shape
        .iter()
        .flat_map(move |u| FORWARD.iter().filter_map(move |&d| shape.neighbor(u, d).map(|v| (u, v))))
}

/// Cubelets within `k` hops of `center` on the bounded lattice, sorted.
pub fn khop_neighbors(center: CubeletIndex, shape: GridShape, k: u32) -> Result<Vec<CubeletIndex>> {
    shape.check(center)?;
    let dist = bfs(&[center], shape, k);
    let mut nodes: Vec<_> = dist.into_keys().collect();
    nodes.sort_unstable();
    Ok(nodes)
}

/// Multi-source breadth-first search to depth `k`; returns hop distances.
fn bfs(sources: &[CubeletIndex], shape: GridShape, k: u32) -> HashMap<CubeletIndex, u32> {
    let mut dist: HashMap<CubeletIndex, u32> = sources.iter().map(|&s| (s, 0)).collect();
    let mut queue: VecDeque<CubeletIndex> = sources.iter().copied().collect();
    while let Some(u) = queue.pop_front() {
        let d = dist[&u];
        if d == k {
            continue;
        }
        for v in shape.face_neighbors(u) {
            dist.entry(v).or_insert_with(|| {
                queue.push_back(v);
                d + 1
            });
        }
    }
    dist
}

/// Timesteps at which each ever-occupied cubelet is occupied.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyHistory {
    shape: GridShape,
    num_frames: usize,
    times: BTreeMap<CubeletIndex, Vec<u32>>,
}

impl OccupancyHistory {
    /// Collects occupancy over a frame sequence; time is the position in
    /// `frames`.
    pub fn from_frames(frames: &[OccupancyFrame], shape: GridShape) -> Result<Self> {
        let mut times: BTreeMap<CubeletIndex, Vec<u32>> = BTreeMap::new();
        for (t, f) in frames.iter().enumerate() {
            if f.shape() != shape {
                return Err(Error::ShapeMismatch(format!(
                    "frame {t} has shape {}, expected {shape}",
                    f.shape()
                )));
            }
            for &c in f.occupied() {
                times.entry(c).or_default().push(t as u32);
            }
        }
        Ok(OccupancyHistory {
            shape,
            num_frames: frames.len(),
            times,
        })
    }

    pub fn ever_occupied(&self) -> impl Iterator<Item = CubeletIndex> + '_ {
        self.times.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn times_of(&self, c: &CubeletIndex) -> Vec<u32> {
        self.times.get(c).cloned().unwrap_or_default()
    }
}

/// A node set with its induced lattice edges and per-node occupancy.
#[derive(Debug, Clone, PartialEq)]
pub struct CubeletGraph {
    shape: GridShape,
    num_frames: usize,
    nodes: Vec<CubeletIndex>,
    edges: Vec<(u32, u32)>,
    /// Sparse feature rows: timesteps at which node `n` is occupied.
    features: Vec<Vec<u32>>,
}

impl CubeletGraph {
    /// Induced subgraph of the lattice on `nodes` (sorted, deduplicated).
    fn induced(mut nodes: Vec<CubeletIndex>, history: &OccupancyHistory) -> Self {
        nodes.sort_unstable();
        nodes.dedup();
        let shape = history.shape;
        let ordinal = |c: &CubeletIndex| nodes.binary_search(c).ok();
        let mut edges = Vec::new();
        for (a, &u) in nodes.iter().enumerate() {
            for d in FORWARD {
                if let Some(b) = shape.neighbor(u, d).as_ref().and_then(ordinal) {
                    edges.push((a as u32, b as u32));
                }
            }
        }
        edges.sort_unstable();
        let features = nodes.iter().map(|c| history.times_of(c)).collect();
        CubeletGraph {
            shape,
            num_frames: history.num_frames,
            nodes,
            edges,
            features,
        }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn nodes(&self) -> &[CubeletIndex] {
        &self.nodes
    }

    /// Edges as `(a, b)` node ordinals with `a < b`.
    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn ordinal(&self, c: CubeletIndex) -> Option<usize> {
        self.nodes.binary_search(&c).ok()
    }

    /// Timesteps at which node `n` is occupied.
    pub fn occupied_times(&self, n: usize) -> &[u32] {
        &self.features[n]
    }

    /// Dense binary occupancy sequence of node `n` over all frames.
    pub fn feature_row(&self, n: usize) -> Vec<u8> {
        let mut row = vec![0u8; self.num_frames];
        for &t in &self.features[n] {
            row[t as usize] = 1;
        }
        row
    }

    /// Neighbor ordinals of each node.
    pub fn adjacency_lists(&self) -> Vec<Vec<u32>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for &(a, b) in &self.edges {
            adj[a as usize].push(b);
            adj[b as usize].push(a);
        }
        adj
    }
}

/// Full graph with never-occupied cubelets removed: the ever-occupied
/// cubelets plus everything within `k` hops of one of them.
pub fn prune_full_graph(frames: &[OccupancyFrame], shape: GridShape, k: u32) -> Result<CubeletGraph> {
    let history = OccupancyHistory::from_frames(frames, shape)?;
    if history.is_empty() {
        return Err(Error::EmptyGraph);
    }
    let sources: Vec<_> = history.ever_occupied().collect();
    let nodes = bfs(&sources, shape, k).into_keys().collect();
    Ok(CubeletGraph::induced(nodes, &history))
}

/// A k-hop neighborhood around one ever-occupied cubelet.
#[derive(Debug, Clone, PartialEq)]
pub struct Subgraph {
    pub center: CubeletIndex,
    pub graph: CubeletGraph,
}

impl Subgraph {
    pub fn members(&self) -> &[CubeletIndex] {
        self.graph.nodes()
    }
}

/// One subgraph per ever-occupied cubelet, ordered by center. Subgraphs may
/// overlap and are never merged.
pub fn decompose_subgraphs(frames: &[OccupancyFrame], shape: GridShape, k: u32) -> Result<Vec<Subgraph>> {
    if k == 0 {
        return Err(Error::config("subgraph decomposition needs k >= 1"));
    }
    let history = OccupancyHistory::from_frames(frames, shape)?;
    let centers: Vec<_> = history.ever_occupied().collect();
    centers
        .into_par_iter()
        .map(|center| {
            let members = khop_neighbors(center, shape, k)?;
            Ok(Subgraph {
                center,
                graph: CubeletGraph::induced(members, &history),
            })
        })
        .collect()
}

/// One JSON-lines record of a graph file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum GraphRecord {
    Header {
        shape: [u32; 3],
        mode: GraphMode,
        k: u32,
        node_count: usize,
        edge_count: usize,
        subgraph_count: usize,
        num_frames: usize,
        /// Sparse frames file holding the node features.
        frames: String,
    },
    Subgraph {
        ordinal: usize,
        center: [u32; 3],
        node_count: usize,
        edge_count: usize,
    },
    Node {
        ordinal: usize,
        i: u32,
        j: u32,
        k: u32,
    },
    Edge {
        u: u32,
        v: u32,
    },
}

fn write_record<W: Write>(w: &mut W, r: &GraphRecord) -> Result<()> {
    serde_json::to_writer(&mut *w, r)?;
    w.write_all(b"\n").map_err(|e| Error::io("<graph>", e))
}

fn write_body<W: Write>(w: &mut W, g: &CubeletGraph) -> Result<()> {
    for (n, c) in g.nodes.iter().enumerate() {
        write_record(
            w,
            &GraphRecord::Node {
                ordinal: n,
                i: c.i,
                j: c.j,
                k: c.k,
            },
        )?;
    }
    for &(u, v) in &g.edges {
        write_record(w, &GraphRecord::Edge { u, v })?;
    }
    Ok(())
}

/// Writes a pruned full graph: header, node records, edge records.
pub fn write_full_graph<W: Write>(w: &mut W, g: &CubeletGraph, k: u32, frames_ref: &str) -> Result<()> {
    write_record(
        w,
        &GraphRecord::Header {
            shape: g.shape.as_array(),
            mode: GraphMode::FullGraph,
            k,
            node_count: g.node_count(),
            edge_count: g.edge_count(),
            subgraph_count: 0,
            num_frames: g.num_frames,
            frames: frames_ref.to_string(),
        },
    )?;
    write_body(w, g)
}

/// Writes a subgraph decomposition: header, then for each subgraph a
/// `subgraph` record followed by its nodes and edges (ordinals local to
/// the subgraph). Header counts are totals over all subgraphs.
pub fn write_subgraphs<W: Write>(
    w: &mut W,
    shape: GridShape,
    num_frames: usize,
    subgraphs: &[Subgraph],
    k: u32,
    frames_ref: &str,
) -> Result<()> {
    write_record(
        w,
        &GraphRecord::Header {
            shape: shape.as_array(),
            mode: GraphMode::MultiSubgraph,
            k,
            node_count: subgraphs.iter().map(|s| s.graph.node_count()).sum(),
            edge_count: subgraphs.iter().map(|s| s.graph.edge_count()).sum(),
            subgraph_count: subgraphs.len(),
            num_frames,
            frames: frames_ref.to_string(),
        },
    )?;
    for (n, s) in subgraphs.iter().enumerate() {
        write_record(
            w,
            &GraphRecord::Subgraph {
                ordinal: n,
                center: [s.center.i, s.center.j, s.center.k],
                node_count: s.graph.node_count(),
                edge_count: s.graph.edge_count(),
            },
        )?;
        write_body(w, &s.graph)?;
    }
    Ok(())
}

/// Node and edge lists of one graph read back from a graph file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GraphListing {
    pub center: Option<CubeletIndex>,
    pub nodes: Vec<CubeletIndex>,
    pub edges: Vec<(u32, u32)>,
}

/// Parses a graph file into its header and one listing per graph (a single
/// listing for a full graph).
pub fn read_graph_file<R: BufRead>(r: R) -> Result<(GraphRecord, Vec<GraphListing>)> {
    let mut lines = r.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::format("empty graph file"))?
        .map_err(|e| Error::io("<graph>", e))?;
    let header: GraphRecord = serde_json::from_str(&first)?;
    let GraphRecord::Header { mode, .. } = &header else {
        return Err(Error::format("graph file must start with a header record"));
    };
    let mut graphs: Vec<GraphListing> = Vec::new();
    if *mode == GraphMode::FullGraph {
        graphs.push(GraphListing::default());
    }
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io("<graph>", e))?;
        let rec: GraphRecord = serde_json::from_str(&line)?;
        let current = || Error::format(format!("graph line {}: record outside a graph", n + 2));
        match rec {
            GraphRecord::Subgraph { center, .. } => graphs.push(GraphListing {
                center: Some(CubeletIndex::new(center[0], center[1], center[2])),
                ..Default::default()
            }),
            GraphRecord::Node { ordinal, i, j, k } => {
                let g = graphs.last_mut().ok_or_else(current)?;
                if ordinal != g.nodes.len() {
                    return Err(Error::format(format!("graph line {}: node ordinal out of order", n + 2)));
                }
                g.nodes.push(CubeletIndex::new(i, j, k));
            }
            GraphRecord::Edge { u, v } => graphs.last_mut().ok_or_else(current)?.edges.push((u, v)),
            GraphRecord::Header { .. } => {
                return Err(Error::format(format!("graph line {}: duplicate header", n + 2)))
            }
        }
    }
    Ok((header, graphs))
}

/// Upper bound on the size of a k-hop ball on the infinite 3D lattice:
/// the number of integer points with L1 norm at most `k`.
pub fn khop_ball_size(k: u32) -> u64 {
    let k = k as u64;
    (2 * k + 1) * (2 * k * k + 2 * k + 3) / 3
}
