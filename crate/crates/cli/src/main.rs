use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use bamsim::config::{
    sweep, DatasetSource, DeviceGroup, GenerateGraph, GraphSource, ProfileRef, RunConfig, SweepKnob,
    VisibilityConfig, WorkloadConfig,
};
use bamsim::device::model::littles_law_qd;
use bamsim::fence::FenceMode;
use bamsim::metrics::{write_csv, RunMetrics};
use bamsim::queue::Opcode;
use bamsim::workloads::analytics::{ColumnarDataset, DatasetConfig, Placement, ScanMode};
use bamsim::workloads::graph::{self, GraphKind};
use bamsim::workloads::randbench::RandBenchConfig;
use bamsim::workloads::Mode;
use bamsim::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bamsim", version, about = "Simulated accelerator-initiated storage stack")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Random block I/O microbenchmark.
    Randbench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        op: Option<Op>,
        #[arg(long = "reqs_per_thread")]
        reqs_per_thread: Option<u64>,
        #[arg(long = "access_size")]
        access_size: Option<u64>,
        /// Mix reads and writes; fraction of writes in [0, 1].
        #[arg(long = "write_fraction")]
        write_fraction: Option<f64>,
    },
    /// Breadth-first search over a CSR graph.
    Bfs {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        graph: GraphArgs,
        /// Comma-separated source nodes.
        #[arg(long, value_delimiter = ',')]
        sources: Option<Vec<u64>>,
    },
    /// Connected components over an undirected CSR graph.
    Cc {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        graph: GraphArgs,
    },
    /// Columnar query Q0..Q5 over a trip-record dataset.
    Analytics {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        dataset: DatasetArgs,
        #[arg(long)]
        level: Option<usize>,
        #[arg(long, value_enum)]
        scan: Option<Scan>,
    },
    /// Element-wise vector addition.
    Vecadd {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<u64>,
        #[arg(long, value_enum)]
        scan: Option<Scan>,
    },
    /// Write a synthetic CSR graph file.
    GenGraph {
        #[arg(long, value_enum, default_value = "uniform")]
        kind: Kind,
        #[arg(long)]
        nodes: u64,
        #[arg(long = "avg_degree", default_value_t = 16)]
        avg_degree: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic columnar dataset file.
    GenDataset {
        #[arg(long)]
        rows: u64,
        #[arg(long, default_value_t = 0.0003)]
        selectivity: f64,
        #[arg(long, value_enum, default_value = "uniform")]
        placement: PlacementArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Queue depth needed to sustain a throughput at a latency.
    QdCalc {
        /// Target throughput, requests per second.
        #[arg(long)]
        t: f64,
        /// Latency in seconds.
        #[arg(long)]
        l: f64,
    },
    /// Rerun a workload across values of one knob.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "randbench")]
        workload: SweepWorkload,
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        knob: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<u64>,
    },
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    threads: Option<u64>,
    #[arg(long = "queue_depth")]
    queue_depth: Option<u32>,
    /// Queue pairs per device.
    #[arg(long = "num_queues")]
    num_queues: Option<u32>,
    /// Number of devices.
    #[arg(long = "n_ctrls")]
    n_ctrls: Option<u32>,
    /// Cache line size in bytes; also the randbench access size.
    #[arg(long = "page_size")]
    page_size: Option<u64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    random: Option<bool>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Built-in device profile name.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long = "cache_bytes")]
    cache_bytes: Option<u64>,
    #[arg(long, value_enum)]
    fence: Option<FenceArg>,
    /// Relaxed completion visibility with this delay in microseconds.
    #[arg(long = "relaxed_us")]
    relaxed_us: Option<f64>,
}

#[derive(Args, Clone, Default)]
struct GraphArgs {
    /// CSR graph file.
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long, value_enum)]
    kind: Option<Kind>,
    #[arg(long)]
    nodes: Option<u64>,
    #[arg(long = "avg_degree")]
    avg_degree: Option<u64>,
    #[arg(long = "graph_seed")]
    graph_seed: Option<u64>,
}

#[derive(Args, Clone, Default)]
struct DatasetArgs {
    /// Dataset file written by gen-dataset.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    rows: Option<u64>,
    #[arg(long)]
    selectivity: Option<f64>,
    #[arg(long, value_enum)]
    placement: Option<PlacementArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Op {
    Read,
    Write,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scan {
    Tiling,
    Ondemand,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Uniform,
    Kron,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlacementArg {
    Uniform,
    Clustered,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Stress,
    Model,
}

#[derive(Clone, Copy, ValueEnum)]
enum FenceArg {
    Off,
    Naive,
    Coalesced,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepWorkload {
    Randbench,
    Bfs,
    Cc,
}

impl From<Scan> for ScanMode {
    fn from(s: Scan) -> Self {
        match s {
            Scan::Tiling => ScanMode::Tiling,
            Scan::Ondemand => ScanMode::Ondemand,
        }
    }
}

impl From<Kind> for GraphKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Uniform => GraphKind::Uniform,
            Kind::Kron => GraphKind::Kron,
        }
    }
}

impl From<PlacementArg> for Placement {
    fn from(p: PlacementArg) -> Self {
        match p {
            PlacementArg::Uniform => Placement::Uniform,
            PlacementArg::Clustered => Placement::Clustered,
        }
    }
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(String),
    Runtime(String),
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("bamsim: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("bamsim: {msg}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::QdCalc { t, l } => {
            let qd = littles_law_qd(t, l).map_err(usage)?;
            println!("{qd}");
            Ok(())
        }
        Command::GenGraph {
            kind,
            nodes,
            avg_degree,
            seed,
            out,
        } => {
            let g = graph::generate(kind.into(), nodes, avg_degree, seed).map_err(usage)?;
            g.store(&out).map_err(runtime)?;
            eprintln!(
                "wrote {}: {} nodes, {} edges",
                out.display(),
                g.num_nodes(),
                g.num_edges()
            );
            Ok(())
        }
        Command::GenDataset {
            rows,
            selectivity,
            placement,
            seed,
            out,
        } => {
            let cfg = DatasetConfig {
                rows,
                selectivity,
                placement: placement.into(),
            };
            let ds = ColumnarDataset::generate(&cfg, seed).map_err(usage)?;
            ds.store(&out).map_err(runtime)?;
            eprintln!(
                "wrote {}: {} rows, {} qualifying",
                out.display(),
                ds.rows(),
                ds.qualifying_rows().len()
            );
            Ok(())
        }
        Command::Randbench {
            common,
            op,
            reqs_per_thread,
            access_size,
            write_fraction,
        } => {
            let mut cfg = base_config(&common, "randbench", || {
                Ok(WorkloadConfig::Randbench(RandBenchConfig::default()))
            })?;
            if let WorkloadConfig::Randbench(r) = &mut cfg.workload {
                if let Some(op) = op {
                    r.op = match op {
                        Op::Read => Opcode::Read,
                        Op::Write => Opcode::Write,
                    };
                }
                set(&mut r.reqs_per_thread, reqs_per_thread);
                set(&mut r.access_size, common.page_size);
                set(&mut r.access_size, access_size);
                set(&mut r.random, common.random);
                if write_fraction.is_some() {
                    r.write_fraction = write_fraction;
                }
            }
            run_and_report(&cfg, common.out.as_ref())
        }
        Command::Bfs {
            common,
            graph,
            sources,
        } => {
            let mut cfg = base_config(&common, "bfs", || {
                Ok(WorkloadConfig::Bfs {
                    graph: graph_source(&graph, None)?,
                    sources: vec![0],
                    threads: 65536,
                })
            })?;
            if let WorkloadConfig::Bfs {
                graph: g,
                sources: s,
                ..
            } = &mut cfg.workload
            {
                *g = graph_source(&graph, Some(g.clone()))?;
                set(s, sources);
            }
            run_and_report(&cfg, common.out.as_ref())
        }
        Command::Cc { common, graph } => {
            let mut cfg = base_config(&common, "cc", || {
                Ok(WorkloadConfig::Cc {
                    graph: graph_source(&graph, None)?,
                    threads: 65536,
                })
            })?;
            if let WorkloadConfig::Cc { graph: g, .. } = &mut cfg.workload {
                *g = graph_source(&graph, Some(g.clone()))?;
            }
            run_and_report(&cfg, common.out.as_ref())
        }
        Command::Analytics {
            common,
            dataset,
            level,
            scan,
        } => {
            let mut cfg = base_config(&common, "analytics", || {
                Ok(WorkloadConfig::Analytics {
                    dataset: dataset_source(&dataset, None)?,
                    level: 0,
                    scan: ScanMode::Tiling,
                    threads: 65536,
                })
            })?;
            if let WorkloadConfig::Analytics {
                dataset: d,
                level: lv,
                scan: sc,
                ..
            } = &mut cfg.workload
            {
                *d = dataset_source(&dataset, Some(d.clone()))?;
                set(lv, level);
                set(sc, scan.map(Into::into));
            }
            run_and_report(&cfg, common.out.as_ref())
        }
        Command::Vecadd { common, n, scan } => {
            let mut cfg = base_config(&common, "vecadd", || {
                Ok(WorkloadConfig::Vecadd {
                    n: 1 << 20,
                    scan: ScanMode::Ondemand,
                    threads: 65536,
                })
            })?;
            if let WorkloadConfig::Vecadd { n: nn, scan: sc, .. } = &mut cfg.workload {
                set(nn, n);
                set(sc, scan.map(Into::into));
            }
            run_and_report(&cfg, common.out.as_ref())
        }
        Command::Sweep {
            common,
            workload,
            graph,
            knob,
            values,
        } => {
            let knob: SweepKnob = knob.parse().map_err(usage)?;
            let name = match workload {
                SweepWorkload::Randbench => "randbench",
                SweepWorkload::Bfs => "bfs",
                SweepWorkload::Cc => "cc",
            };
            let mut cfg = base_config(&common, name, || {
                Ok(match workload {
                    SweepWorkload::Randbench => WorkloadConfig::Randbench(RandBenchConfig {
                        access_size: 4096,
                        ..RandBenchConfig::default()
                    }),
                    SweepWorkload::Bfs => WorkloadConfig::Bfs {
                        graph: graph_source(&graph, None)?,
                        sources: vec![0],
                        threads: 65536,
                    },
                    SweepWorkload::Cc => WorkloadConfig::Cc {
                        graph: graph_source(&graph, None)?,
                        threads: 65536,
                    },
                })
            })?;
            if let WorkloadConfig::Randbench(r) = &mut cfg.workload {
                set(&mut r.access_size, common.page_size);
                set(&mut r.random, common.random);
            }
            let rows = sweep(&cfg, knob, &values).map_err(runtime)?;
            for ((m, rel), v) in rows.iter().zip(&values) {
                eprintln!("{knob_name}={v} relative={rel:.3} ({})", m.summary(), knob_name = knob_label(knob));
            }
            let metrics: Vec<RunMetrics> = rows.into_iter().map(|(m, _)| m).collect();
            emit(&metrics, common.out.as_ref())
        }
    }
}

fn knob_label(k: SweepKnob) -> &'static str {
    match k {
        SweepKnob::NumQueues => "num_queues",
        SweepKnob::CacheBytes => "cache_bytes",
    }
}

fn set<T>(field: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *field = v;
    }
}

/// Config from `--config` (whose workload must match the subcommand) or
/// defaults, with the common flags applied.
fn base_config(
    common: &Common,
    workload: &str,
    default_workload: impl FnOnce() -> Result<WorkloadConfig, Failure>,
) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let cfg = RunConfig::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            if cfg.workload.name() != workload {
                return Err(usage(format!(
                    "{} describes a {} run, not {workload}",
                    path.display(),
                    cfg.workload.name()
                )));
            }
            cfg
        }
        None => RunConfig::new(default_workload()?),
    };
    if let Some(name) = &common.profile {
        let count = cfg.devices.iter().map(|g| g.count).sum();
        cfg.devices = vec![DeviceGroup {
            profile: ProfileRef::Named(name.clone()),
            count,
        }];
    }
    if let Some(n) = common.n_ctrls {
        let profile = cfg.devices[0].profile.clone();
        cfg.devices = vec![DeviceGroup { profile, count: n }];
    }
    set(&mut cfg.queue.num_queues, common.num_queues);
    set(&mut cfg.queue.queue_depth, common.queue_depth);
    set(&mut cfg.cache.line_size, common.page_size);
    set(&mut cfg.cache.capacity_bytes, common.cache_bytes);
    set(&mut cfg.seed, common.seed);
    if let Some(m) = common.mode {
        cfg.mode = match m {
            ModeArg::Stress => Mode::Stress,
            ModeArg::Model => Mode::Model,
        };
    }
    if let Some(f) = common.fence {
        cfg.fence = match f {
            FenceArg::Off => FenceMode::Off,
            FenceArg::Naive => FenceMode::Naive,
            FenceArg::Coalesced => FenceMode::Coalesced,
        };
    }
    if let Some(us) = common.relaxed_us {
        cfg.visibility = VisibilityConfig::Relaxed { relaxed_us: us };
    }
    set(cfg.workload.threads_mut(), common.threads);
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn graph_source(args: &GraphArgs, current: Option<GraphSource>) -> Result<GraphSource, Failure> {
    if let Some(p) = &args.graph {
        return Ok(GraphSource::Path(p.clone()));
    }
    let mut gen = match current {
        Some(GraphSource::Path(p)) if args.nodes.is_none() => return Ok(GraphSource::Path(p)),
        Some(GraphSource::Generate(g)) => g,
        _ => GenerateGraph {
            kind: GraphKind::Uniform,
            nodes: 0,
            avg_degree: 16,
            seed: 0,
        },
    };
    set(&mut gen.kind, args.kind.map(Into::into));
    set(&mut gen.nodes, args.nodes);
    set(&mut gen.avg_degree, args.avg_degree);
    set(&mut gen.seed, args.graph_seed);
    if gen.nodes == 0 {
        return Err(usage("give --graph FILE or --nodes N"));
    }
    Ok(GraphSource::Generate(gen))
}

fn dataset_source(args: &DatasetArgs, current: Option<DatasetSource>) -> Result<DatasetSource, Failure> {
    if let Some(p) = &args.dataset {
        return Ok(DatasetSource::Path(p.clone()));
    }
    let mut gen = match current {
        Some(DatasetSource::Path(p)) if args.rows.is_none() => return Ok(DatasetSource::Path(p)),
        Some(DatasetSource::Generate(g)) => g,
        _ => DatasetConfig::default(),
    };
    set(&mut gen.rows, args.rows);
    set(&mut gen.selectivity, args.selectivity);
    set(&mut gen.placement, args.placement.map(Into::into));
    Ok(DatasetSource::Generate(gen))
}

fn run_and_report(cfg: &RunConfig, out: Option<&PathBuf>) -> Result<(), Failure> {
    let rows = cfg.run().map_err(|e| match e {
        Error::Config(_) => usage(e),
        other => runtime(other),
    })?;
    for r in &rows {
        eprintln!("{}", r.summary());
    }
    emit(&rows, out)
}

fn emit(rows: &[RunMetrics], out: Option<&PathBuf>) -> Result<(), Failure> {
    match out {
        Some(path) => {
            let f = File::create(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
            write_csv(f, rows).map_err(runtime)
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            write_csv(&mut lock, rows).map_err(runtime)?;
            lock.flush().map_err(runtime)
        }
    }
}
