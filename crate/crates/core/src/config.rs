//! JSON run configuration and the runner that turns one into metrics rows.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::array::{ArrayHandle, ArraySpec, Extent};
use crate::device::{DeviceProfile, Visibility};
use crate::error::{Error, Result};
use crate::fence::FenceMode;
use crate::metrics::RunMetrics;
use crate::system::{System, DEFAULT_SCRATCH_BYTES};
use crate::workloads::analytics::{self, ColumnarDataset, DatasetConfig, ScanMode, StoredDataset};
use crate::workloads::graph::{self, CsrGraph, GraphKind, StoredGraph};
use crate::workloads::randbench::{self, RandBenchConfig};
use crate::workloads::{vecadd, Mode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileRef {
    Named(String),
    Inline(DeviceProfile),
}

impl ProfileRef {
    pub fn resolve(&self) -> Result<DeviceProfile> {
        match self {
            ProfileRef::Named(name) => DeviceProfile::builtin(name).ok_or_else(|| {
                Error::config(format!(
                    "unknown device profile {name:?}; built-in profiles: {}",
                    DeviceProfile::builtin_names().join(", ")
                ))
            }),
            ProfileRef::Inline(p) => {
                p.validate()?;
                Ok(p.clone())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceGroup {
    pub profile: ProfileRef,
    #[serde(default = "one")]
    pub count: u32,
}

fn one() -> u32 {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QueueConfig {
    /// Queue pairs per device.
    pub num_queues: u32,
    pub queue_depth: u32,
}

impl Default for QueueConfig {
    fn default() -> Self {
        QueueConfig {
            num_queues: 128,
            queue_depth: 1024,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CacheSection {
    pub line_size: u64,
    pub capacity_bytes: u64,
}

impl Default for CacheSection {
    fn default() -> Self {
        CacheSection {
            line_size: 4096,
            capacity_bytes: 64 << 20,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisibilityConfig {
    #[default]
    Strict,
    #[serde(untagged)]
    Relaxed { relaxed_us: f64 },
}

impl VisibilityConfig {
    pub fn to_visibility(self) -> Result<Visibility> {
        match self {
            VisibilityConfig::Strict => Ok(Visibility::Strict),
            VisibilityConfig::Relaxed { relaxed_us } if relaxed_us.is_finite() && relaxed_us >= 0.0 => {
                Ok(Visibility::Relaxed {
                    delay: Duration::from_secs_f64(relaxed_us * 1e-6),
                })
            }
            VisibilityConfig::Relaxed { relaxed_us } => {
                Err(Error::config(format!("relaxed_us must be >= 0, got {relaxed_us}")))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateGraph {
    #[serde(default)]
    pub kind: GraphKind,
    pub nodes: u64,
    pub avg_degree: u64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase")]
pub enum GraphSource {
    Path(PathBuf),
    Generate(GenerateGraph),
}

impl GraphSource {
    pub fn materialize(&self) -> Result<CsrGraph> {
        match self {
            GraphSource::Path(p) => CsrGraph::load(p),
            GraphSource::Generate(g) => graph::generate(g.kind, g.nodes, g.avg_degree, g.seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase")]
pub enum DatasetSource {
    Path(PathBuf),
    Generate(DatasetConfig),
}

impl DatasetSource {
    pub fn materialize(&self, seed: u64) -> Result<ColumnarDataset> {
        match self {
            DatasetSource::Path(p) => ColumnarDataset::load(p),
            DatasetSource::Generate(cfg) => ColumnarDataset::generate(cfg, seed),
        }
    }
}

fn default_threads() -> u64 {
    65536
}

fn default_sources() -> Vec<u64> {
    vec![0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum WorkloadConfig {
    Randbench(RandBenchConfig),
    Bfs {
        graph: GraphSource,
        #[serde(default = "default_sources")]
        sources: Vec<u64>,
        #[serde(default = "default_threads")]
        threads: u64,
    },
    Cc {
        graph: GraphSource,
        #[serde(default = "default_threads")]
        threads: u64,
    },
    Analytics {
        dataset: DatasetSource,
        #[serde(default)]
        level: usize,
        #[serde(default)]
        scan: ScanMode,
        #[serde(default = "default_threads")]
        threads: u64,
    },
    Vecadd {
        n: u64,
        #[serde(default)]
        scan: ScanMode,
        #[serde(default = "default_threads")]
        threads: u64,
    },
}

impl WorkloadConfig {
    pub fn name(&self) -> &'static str {
        match self {
            WorkloadConfig::Randbench(_) => "randbench",
            WorkloadConfig::Bfs { .. } => "bfs",
            WorkloadConfig::Cc { .. } => "cc",
            WorkloadConfig::Analytics { .. } => "analytics",
            WorkloadConfig::Vecadd { .. } => "vecadd",
        }
    }

    pub fn threads_mut(&mut self) -> &mut u64 {
        match self {
            WorkloadConfig::Randbench(c) => &mut c.threads,
            WorkloadConfig::Bfs { threads, .. }
            | WorkloadConfig::Cc { threads, .. }
            | WorkloadConfig::Analytics { threads, .. }
            | WorkloadConfig::Vecadd { threads, .. } => threads,
        }
    }
}

/// How a manifest array's contents are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Zeros,
    Iota,
    Random(u64),
}

impl std::str::FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "zeros" => Ok(Pattern::Zeros),
            None if s == "iota" => Ok(Pattern::Iota),
            Some(("random", seed)) => seed
                .parse()
                .map(Pattern::Random)
                .map_err(|_| Error::config(format!("bad seed in pattern {s:?}"))),
            _ => Err(Error::config(format!(
                "unknown pattern {s:?}; expected zeros, iota or random:<seed>"
            ))),
        }
    }
}

/// An array declared in the run config. `extents` places it explicitly;
/// otherwise it is laid out over all devices and filled from `generate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayManifest {
    pub name: String,
    pub element_size: u64,
    pub length: u64,
    #[serde(default)]
    pub extents: Option<Vec<Extent>>,
    #[serde(default)]
    pub generate: Option<String>,
}

impl ArrayManifest {
    /// Place the array and, when a pattern is given, fill it. Elements are
    /// written as `element_size`-byte little-endian integers.
    pub fn materialize(&self, sys: &System) -> Result<ArraySpec> {
        let spec = match (&self.extents, &self.generate) {
            (Some(_), Some(_)) => {
                return Err(Error::config(format!(
                    "array {}: give either extents or generate, not both",
                    self.name
                )))
            }
            (Some(ext), None) => ArraySpec::new(self.element_size, self.length, ext.clone())?,
            (None, _) => match self.element_size {
                1 => sys.layout::<u8>(self.length, &all_devices(sys))?,
                2 => sys.layout::<u16>(self.length, &all_devices(sys))?,
                4 => sys.layout::<u32>(self.length, &all_devices(sys))?,
                8 => sys.layout::<u64>(self.length, &all_devices(sys))?,
                other => {
                    return Err(Error::config(format!(
                        "array {}: element_size {other} is not 1, 2, 4 or 8",
                        self.name
                    )))
                }
            },
        };
        if let Some(p) = &self.generate {
            let pattern: Pattern = p.parse()?;
            match self.element_size {
                1 => fill::<u8>(sys, &spec, pattern)?,
                2 => fill::<u16>(sys, &spec, pattern)?,
                4 => fill::<u32>(sys, &spec, pattern)?,
                _ => fill::<u64>(sys, &spec, pattern)?,
            }
        }
        Ok(spec)
    }
}

fn all_devices(sys: &System) -> Vec<u32> {
    (0..sys.num_devices() as u32).collect()
}

fn fill<T: crate::scalar::Element>(sys: &System, spec: &ArraySpec, pattern: Pattern) -> Result<()> {
    use rand::{Rng, SeedableRng};
    let a = ArrayHandle::<T>::new(spec.clone(), sys.cache().clone())?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(match pattern {
        Pattern::Random(s) => s,
        _ => 0,
    });
    let values: Vec<T> = (0..spec.length)
        .map(|i| {
            let raw = match pattern {
                Pattern::Zeros => 0,
                Pattern::Iota => i,
                Pattern::Random(_) => rng.gen(),
            };
            // Truncate to the element width.
            let bits = 8 * T::SIZE as u32;
            let raw = if bits >= 64 { raw } else { raw & ((1u64 << bits) - 1) };
            num_traits::cast(raw).unwrap_or_else(T::zero)
        })
        .collect();
    a.store_direct(0, &values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub devices: Vec<DeviceGroup>,
    #[serde(default)]
    pub queue: QueueConfig,
    #[serde(default)]
    pub cache: CacheSection,
    #[serde(default)]
    pub fence: FenceMode,
    #[serde(default)]
    pub visibility: VisibilityConfig,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_scratch")]
    pub scratch_bytes: u64,
    #[serde(default)]
    pub arrays: Vec<ArrayManifest>,
    pub workload: WorkloadConfig,
}

fn default_scratch() -> u64 {
    DEFAULT_SCRATCH_BYTES
}

impl RunConfig {
    pub fn new(workload: WorkloadConfig) -> Self {
        RunConfig {
            devices: vec![DeviceGroup {
                profile: ProfileRef::Named("optane-p5800x".into()),
                count: 1,
            }],
            queue: QueueConfig::default(),
            cache: CacheSection::default(),
            fence: FenceMode::Off,
            visibility: VisibilityConfig::Strict,
            mode: Mode::Stress,
            seed: 0,
            scratch_bytes: DEFAULT_SCRATCH_BYTES,
            arrays: Vec::new(),
            workload,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.devices.iter().map(|g| g.count).sum::<u32>() == 0 {
            return Err(Error::config("at least one device is required"));
        }
        for g in &self.devices {
            g.profile.resolve()?;
        }
        crate::queue::check_depth(self.queue.queue_depth)?;
        if self.queue.num_queues == 0 {
            return Err(Error::config("num_queues must be >= 1"));
        }
        crate::cache::CacheConfig::new(self.cache.line_size, self.cache.capacity_bytes)?;
        self.visibility.to_visibility()?;
        if let WorkloadConfig::Randbench(r) = &self.workload {
            r.validate()?;
        }
        Ok(())
    }

    pub fn profiles(&self) -> Result<Vec<DeviceProfile>> {
        let mut out = Vec::new();
        for g in &self.devices {
            let p = g.profile.resolve()?;
            out.extend(std::iter::repeat_n(p, g.count as usize));
        }
        Ok(out)
    }

    pub fn build_system(&self) -> Result<System> {
        self.validate()?;
        System::builder()
            .devices(self.profiles()?)
            .queues(self.queue.num_queues, self.queue.queue_depth)
            .cache(self.cache.line_size, self.cache.capacity_bytes)
            .fence(self.fence)
            .visibility(self.visibility.to_visibility()?)
            .scratch_bytes(self.scratch_bytes)
            .build()
    }

    /// Build the system, run the workload and return its rows.
    pub fn run(&self) -> Result<Vec<RunMetrics>> {
        let sys = self.build_system()?;
        for a in &self.arrays {
            a.materialize(&sys)?;
        }
        let mut rows = match &self.workload {
            WorkloadConfig::Randbench(r) => vec![randbench::run(&sys, r, self.mode, self.seed)?],
            WorkloadConfig::Bfs {
                graph,
                sources,
                threads,
            } => {
                let g = graph.materialize()?;
                let stored = StoredGraph::load(&sys, &g)?;
                sources
                    .iter()
                    .map(|&s| graph::run_bfs(&sys, &stored, s, self.mode, *threads, self.seed).map(|r| r.metrics))
                    .collect::<Result<Vec<_>>>()?
            }
            WorkloadConfig::Cc { graph, threads } => {
                let g = graph.materialize()?;
                let stored = StoredGraph::load(&sys, &g)?;
                vec![graph::run_cc(&sys, &stored, self.mode, *threads, self.seed)?.metrics]
            }
            WorkloadConfig::Analytics {
                dataset,
                level,
                scan,
                threads,
            } => {
                let ds = dataset.materialize(self.seed)?;
                let stored = StoredDataset::load(&sys, &ds)?;
                let r = analytics::run(&sys, &stored, *level, *scan, self.mode, *threads, self.seed)?;
                if r.answer != ds.reference(*level) {
                    return Err(Error::config("analytics answer differs from the in-memory reference"));
                }
                vec![r.metrics]
            }
            WorkloadConfig::Vecadd { n, scan, threads } => {
                let (a, b) = vecadd::inputs(*n, self.seed);
                let arrays = vecadd::VecAddArrays::load(&sys, &a, &b)?;
                let m = vecadd::run(&sys, &arrays, *scan, self.mode, *threads, self.seed)?;
                let out = arrays.out.load_direct(0, *n)?;
                if out.iter().zip(a.iter().zip(&b)).any(|(o, (x, y))| *o != x + y) {
                    return Err(Error::config("vecadd output differs from the in-memory reference"));
                }
                vec![m]
            }
        };
        for r in &mut rows {
            r.seed = self.seed;
        }
        Ok(rows)
    }
}

/// Which configuration field a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKnob {
    NumQueues,
    CacheBytes,
}

impl std::str::FromStr for SweepKnob {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "num_queues" => Ok(SweepKnob::NumQueues),
            "cache_bytes" => Ok(SweepKnob::CacheBytes),
            other => Err(Error::config(format!(
                "unknown sweep knob {other:?}; expected num_queues or cache_bytes"
            ))),
        }
    }
}

/// Run `base` once per value. Each row is paired with its performance
/// relative to the first value (modeled time in model mode, wall time
/// otherwise; higher is better).
pub fn sweep(base: &RunConfig, knob: SweepKnob, values: &[u64]) -> Result<Vec<(RunMetrics, f64)>> {
    let mut out: Vec<(RunMetrics, f64)> = Vec::with_capacity(values.len());
    for &v in values {
        let mut cfg = base.clone();
        match knob {
            SweepKnob::NumQueues => {
                cfg.queue.num_queues = u32::try_from(v).map_err(|_| Error::config("num_queues too large"))?
            }
            SweepKnob::CacheBytes => cfg.cache.capacity_bytes = v,
        }
        let rows = cfg.run()?;
        let mut merged = rows[0].clone();
        for r in &rows[1..] {
            merged.modeled_seconds += r.modeled_seconds;
            merged.wall_seconds += r.wall_seconds;
        }
        let time = |m: &RunMetrics| if base.mode == Mode::Model { m.modeled_seconds } else { m.wall_seconds };
        let rel = match out.first() {
            Some((first, _)) => time(first) / time(&merged),
            None => 1.0,
        };
        out.push((merged, rel));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_full_config() {
        let text = r#"{
            "devices": [{"profile": "samsung-pm1735", "count": 2},
                        {"profile": {"name": "custom", "read_latency_us": 5, "write_latency_us": 5,
                                     "read_iops_cap_512": 1e6, "read_iops_cap_4k": 5e5,
                                     "write_iops_cap_512": 1e5, "write_iops_cap_4k": 1e5,
                                     "link_bandwidth_Bps": 7e9}}],
            "queue": {"num_queues": 4, "queue_depth": 256},
            "cache": {"line_size": 512, "capacity_bytes": 65536},
            "fence": "coalesced",
            "visibility": {"relaxed_us": 50},
            "mode": "model",
            "seed": 7,
            "arrays": [{"name": "x", "element_size": 8, "length": 100, "generate": "iota"}],
            "workload": {"kind": "bfs", "graph": {"generate": {"kind": "kron", "nodes": 64, "avg_degree": 4}}}
        }"#;
        let cfg = RunConfig::from_json(text).unwrap();
        assert_eq!(cfg.profiles().unwrap().len(), 3);
        assert_eq!(cfg.fence, FenceMode::Coalesced);
        assert_eq!(cfg.visibility, VisibilityConfig::Relaxed { relaxed_us: 50.0 });
        let rows = cfg.run().unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].workload, "bfs");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"{"devices": [{"profile": "optane-p5800x"}], "colour": 1,
                       "workload": {"kind": "vecadd", "n": 10}}"#;
        assert!(RunConfig::from_json(text).is_err());
        let text = r#"{"devices": [{"profile": "optane-p5800x"}],
                       "workload": {"kind": "vecadd", "n": 10, "tiles": 3}}"#;
        assert!(RunConfig::from_json(text).is_err());
        let text = r#"{"devices": [{"profile": "nope"}], "workload": {"kind": "vecadd", "n": 10}}"#;
        assert!(matches!(RunConfig::from_json(text), Err(Error::Config(_))));
    }

    #[test]
    fn strict_visibility_spelling() {
        let v: VisibilityConfig = serde_json::from_str("\"strict\"").unwrap();
        assert_eq!(v, VisibilityConfig::Strict);
    }

    #[test]
    fn patterns() {
        assert_eq!("random:5".parse::<Pattern>().unwrap(), Pattern::Random(5));
        assert!("ones".parse::<Pattern>().is_err());
    }

    #[test]
    fn manifest_arrays_are_filled() {
        let cfg = RunConfig::new(WorkloadConfig::Vecadd {
            n: 8,
            scan: ScanMode::Ondemand,
            threads: 1,
        });
        let mut cfg = cfg;
        cfg.cache.capacity_bytes = 1 << 20;
        cfg.queue.num_queues = 1;
        let sys = cfg.build_system().unwrap();
        let m = ArrayManifest {
            name: "x".into(),
            element_size: 4,
            length: 300,
            extents: None,
            generate: Some("iota".into()),
        };
        let spec = m.materialize(&sys).unwrap();
        let a = ArrayHandle::<u32>::new(spec, sys.cache().clone()).unwrap();
        assert_eq!(a.get(299).unwrap(), 299);
    }
}
