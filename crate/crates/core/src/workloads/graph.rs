//! CSR graphs: generation, binary storage, reference algorithms, and BFS
//! and connected components running over storage-backed arrays.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{parallel_for, worker_threads, Meter, Mode};
use crate::array::{ArrayHandle, WARP};
use crate::error::{Error, Result};
use crate::metrics::RunMetrics;
use crate::system::System;

/// Distance of nodes BFS never reaches.
pub const UNREACHABLE: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    #[default]
    Uniform,
    Kron,
}

impl std::str::FromStr for GraphKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(GraphKind::Uniform),
            "kron" => Ok(GraphKind::Kron),
            other => Err(Error::config(format!("unknown graph kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CsrGraph {
    pub row_offsets: Vec<u64>,
    pub col_indices: Vec<u64>,
}

impl CsrGraph {
    pub fn num_nodes(&self) -> u64 {
        self.row_offsets.len() as u64 - 1
    }

    pub fn num_edges(&self) -> u64 {
        self.col_indices.len() as u64
    }

    pub fn neighbors(&self, u: u64) -> &[u64] {
        &self.col_indices[self.row_offsets[u as usize] as usize..self.row_offsets[u as usize + 1] as usize]
    }

    /// Build from an edge list; adjacency lists come out sorted.
    pub fn from_edges(nodes: u64, edges: &[(u64, u64)]) -> Result<Self> {
        let mut degree = vec![0u64; nodes as usize + 1];
        for &(u, v) in edges {
            if u >= nodes || v >= nodes {
                return Err(Error::OutOfRange {
                    what: "edge endpoint",
                    index: u.max(v),
                    limit: nodes,
                });
            }
            degree[u as usize + 1] += 1;
        }
        for i in 1..degree.len() {
            degree[i] += degree[i - 1];
        }
        let mut fill = degree.clone();
        let mut cols = vec![0u64; edges.len()];
        for &(u, v) in edges {
            cols[fill[u as usize] as usize] = v;
            fill[u as usize] += 1;
        }
        for u in 0..nodes as usize {
            cols[degree[u] as usize..degree[u + 1] as usize].sort_unstable();
        }
        Ok(CsrGraph {
            row_offsets: degree,
            col_indices: cols,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::config(format!("malformed CSR graph: {msg}")));
        if self.row_offsets.is_empty() || self.row_offsets[0] != 0 {
            return bad("row_offsets must start at 0");
        }
        if self.row_offsets.windows(2).any(|w| w[0] > w[1]) {
            return bad("row_offsets must be non-decreasing");
        }
        if *self.row_offsets.last().unwrap() != self.num_edges() {
            return bad("row_offsets must end at num_edges");
        }
        let n = self.num_nodes();
        if self.col_indices.iter().any(|&c| c >= n) {
            return bad("column index out of range");
        }
        Ok(())
    }

    /// Every edge has its reverse (adjacency lists must be sorted).
    pub fn is_undirected(&self) -> bool {
        (0..self.num_nodes())
            .all(|u| self.neighbors(u).iter().all(|&v| self.neighbors(v).binary_search(&u).is_ok()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * (self.row_offsets.len() + self.col_indices.len()));
        out.extend_from_slice(&self.num_nodes().to_le_bytes());
        out.extend_from_slice(&self.num_edges().to_le_bytes());
        for v in self.row_offsets.iter().chain(&self.col_indices) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let word = |i: usize| -> Result<u64> {
            bytes
                .get(i * 8..i * 8 + 8)
                .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| Error::config("truncated CSR file"))
        };
        let n = word(0)? as usize;
        let m = word(1)? as usize;
        if bytes.len() != 8 * (2 + n + 1 + m) {
            return Err(Error::config(format!(
                "CSR file is {} bytes, header implies {}",
                bytes.len(),
                8 * (2 + n + 1 + m)
            )));
        }
        let g = CsrGraph {
            row_offsets: (0..=n).map(|i| word(2 + i)).collect::<Result<_>>()?,
            col_indices: (0..m).map(|i| word(3 + n + i)).collect::<Result<_>>()?,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn store(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Undirected graph with `nodes · avg_degree` directed edges (each
/// undirected edge stored both ways), deterministic in `seed`.
pub fn generate(kind: GraphKind, nodes: u64, avg_degree: u64, seed: u64) -> Result<CsrGraph> {
    if nodes < 2 {
        return Err(Error::config("a graph needs at least two nodes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let undirected = nodes * avg_degree / 2;
    let scale = 64 - (nodes - 1).leading_zeros();
    let mut edges = Vec::with_capacity(2 * undirected as usize);
    while (edges.len() as u64) < 2 * undirected {
        let (u, v) = match kind {
            GraphKind::Uniform => (rng.gen_range(0..nodes), rng.gen_range(0..nodes)),
            GraphKind::Kron => rmat_edge(&mut rng, scale),
        };
        if u == v || u >= nodes || v >= nodes {
            continue;
        }
        edges.push((u, v));
        edges.push((v, u));
    }
    CsrGraph::from_edges(nodes, &edges)
}

/// R-MAT edge with the Graph500 initiator (0.57, 0.19, 0.19, 0.05).
fn rmat_edge(rng: &mut ChaCha8Rng, scale: u32) -> (u64, u64) {
    let (mut u, mut v) = (0u64, 0u64);
    for _ in 0..scale {
        let p: f64 = rng.gen();
        let (bu, bv) = if p < 0.57 {
            (0, 0)
        } else if p < 0.76 {
            (0, 1)
        } else if p < 0.95 {
            (1, 0)
        } else {
            (1, 1)
        };
        u = (u << 1) | bu;
        v = (v << 1) | bv;
    }
    (u, v)
}

/// Level-synchronous BFS on an in-memory graph.
pub fn reference_bfs(g: &CsrGraph, source: u64) -> Vec<u64> {
    let mut dist = vec![UNREACHABLE; g.num_nodes() as usize];
    let mut queue = VecDeque::from([source]);
    dist[source as usize] = 0;
    while let Some(u) = queue.pop_front() {
        for &v in g.neighbors(u) {
            if dist[v as usize] == UNREACHABLE {
                dist[v as usize] = dist[u as usize] + 1;
                queue.push_back(v);
            }
        }
    }
    dist
}

/// Component labels via union-find; each node is labelled with the
/// smallest node id in its component.
pub fn reference_cc(g: &CsrGraph) -> Vec<u64> {
    fn find(p: &mut [u64], mut x: u64) -> u64 {
        while p[x as usize] != x {
            p[x as usize] = p[p[x as usize] as usize];
            x = p[x as usize];
        }
        x
    }
    let n = g.num_nodes();
    let mut parent: Vec<u64> = (0..n).collect();
    for u in 0..n {
        for &v in g.neighbors(u) {
            let (a, b) = (find(&mut parent, u), find(&mut parent, v));
            if a != b {
                let (lo, hi) = (a.min(b), a.max(b));
                parent[hi as usize] = lo;
            }
        }
    }
    (0..n).map(|u| find(&mut parent, u)).collect()
}

/// A graph laid out on the simulated devices.
pub struct StoredGraph {
    pub offsets: ArrayHandle<u64>,
    pub cols: ArrayHandle<u64>,
    pub undirected: bool,
}

impl StoredGraph {
    pub fn load(sys: &System, g: &CsrGraph) -> Result<Self> {
        g.validate()?;
        let offsets = sys.array::<u64>(g.row_offsets.len() as u64)?;
        offsets.store_direct(0, &g.row_offsets)?;
        let cols = sys.array::<u64>(g.num_edges().max(1))?;
        cols.store_direct(0, &g.col_indices)?;
        Ok(StoredGraph {
            offsets,
            cols,
            undirected: g.is_undirected(),
        })
    }

    pub fn num_nodes(&self) -> u64 {
        self.offsets.len() - 1
    }

    /// Call `f` with each neighbor batch of `u`, read one warp at a time.
    fn scan(&self, u: u64, buf: &mut Vec<u64>, mut f: impl FnMut(&[u64])) -> Result<()> {
        let bounds = self.offsets.read_group(&[u, u + 1])?;
        let (start, end) = (bounds[0], bounds[1]);
        let mut idx = [0u64; WARP];
        let mut at = start;
        while at < end {
            let n = ((end - at) as usize).min(WARP);
            for (k, slot) in idx[..n].iter_mut().enumerate() {
                *slot = at + k as u64;
            }
            buf.resize(n, 0);
            self.cols.read_group_into(&idx[..n], buf)?;
            f(buf);
            at += n as u64;
        }
        Ok(())
    }

    fn bytes_used(&self) -> u64 {
        (self.offsets.len() + self.cols.len()) * 8
    }
}

#[derive(Clone, Debug)]
pub struct GraphRun {
    pub values: Vec<u64>,
    pub metrics: RunMetrics,
}

/// Frontier BFS: one warp-group per frontier node, each level a phase.
pub fn run_bfs(
    sys: &System,
    g: &StoredGraph,
    source: u64,
    mode: Mode,
    threads: u64,
    seed: u64,
) -> Result<GraphRun> {
    let n = g.num_nodes();
    if source >= n {
        return Err(Error::OutOfRange {
            what: "BFS source",
            index: source,
            limit: n,
        });
    }
    let workers = worker_threads(mode, threads);
    let mut meter = Meter::start(sys, mode);
    let dist: Vec<AtomicU64> = (0..n).map(|_| AtomicU64::new(UNREACHABLE)).collect();
    dist[source as usize].store(0, Ordering::Relaxed);
    let mut frontier = vec![source];
    let mut level = 0;
    while !frontier.is_empty() {
        let next = Mutex::new(Vec::new());
        parallel_for(workers, frontier.len() as u64, 16, |range| {
            let mut found = Vec::new();
            let mut buf = Vec::with_capacity(WARP);
            for i in range {
                g.scan(frontier[i as usize], &mut buf, |nbrs| {
                    for &v in nbrs {
                        if dist[v as usize]
                            .compare_exchange(UNREACHABLE, level + 1, Ordering::AcqRel, Ordering::Relaxed)
                            .is_ok()
                        {
                            found.push(v);
                        }
                    }
                })?;
            }
            next.lock().extend(found);
            Ok(())
        })?;
        meter.phase();
        frontier = next.into_inner();
        frontier.sort_unstable();
        level += 1;
    }
    let mut metrics = meter.finish("bfs", threads, g.bytes_used(), None);
    metrics.seed = seed;
    Ok(GraphRun {
        values: dist.into_iter().map(AtomicU64::into_inner).collect(),
        metrics,
    })
}

/// Min-label propagation until a full sweep changes nothing.
pub fn run_cc(sys: &System, g: &StoredGraph, mode: Mode, threads: u64, seed: u64) -> Result<GraphRun> {
    if !g.undirected {
        return Err(Error::config("connected components needs an undirected graph"));
    }
    let n = g.num_nodes();
    let workers = worker_threads(mode, threads);
    let mut meter = Meter::start(sys, mode);
    let labels: Vec<AtomicU64> = (0..n).map(AtomicU64::new).collect();
    let mut sweeps = 0u64;
    loop {
        let changed = AtomicBool::new(false);
        parallel_for(workers, n, 64, |range| {
            let mut buf = Vec::with_capacity(WARP);
            for u in range {
                g.scan(u, &mut buf, |nbrs| {
                    let mut low = labels[u as usize].load(Ordering::Relaxed);
                    for &v in nbrs {
                        low = low.min(labels[v as usize].load(Ordering::Relaxed));
                    }
                    if labels[u as usize].fetch_min(low, Ordering::AcqRel) > low {
                        changed.store(true, Ordering::Relaxed);
                    }
                    for &v in nbrs {
                        if labels[v as usize].fetch_min(low, Ordering::AcqRel) > low {
                            changed.store(true, Ordering::Relaxed);
                        }
                    }
                })?;
            }
            Ok(())
        })?;
        meter.phase();
        sweeps += 1;
        if !changed.into_inner() {
            break;
        }
    }
    let mut metrics = meter.finish("cc", threads, g.bytes_used() * sweeps, None);
    metrics.seed = seed;
    Ok(GraphRun {
        values: labels.into_iter().map(AtomicU64::into_inner).collect(),
        metrics,
    })
}
