//! Columnar trip-record queries. Q0 scans `distance` and counts rows with
//! distance >= 30; Qk additionally sums the first k dependent columns over
//! those rows. Tiling streams whole row groups of every needed column into
//! scratch memory; ondemand streams only `distance` and probes dependent
//! columns through the cache for the qualifying rows.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{read_chunked, Meter, Mode};
use crate::array::{ArrayHandle, WARP};
use crate::error::{Error, Result};
use crate::memory::BLOCK_SIZE;
use crate::metrics::RunMetrics;
use crate::system::System;

pub const COLUMNS: [&str; 6] = ["distance", "total_cost", "surcharge", "hail_fee", "tolls", "taxes"];

/// Rows at or above this distance qualify.
pub const THRESHOLD: f64 = 30.0;

pub const MAX_LEVEL: usize = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanMode {
    #[default]
    Tiling,
    Ondemand,
}

impl std::str::FromStr for ScanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiling" => Ok(ScanMode::Tiling),
            "ondemand" => Ok(ScanMode::Ondemand),
            other => Err(Error::config(format!("unknown scan mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    #[default]
    Uniform,
    /// Qualifying rows form one contiguous run at a random position.
    Clustered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub rows: u64,
    pub selectivity: f64,
    pub placement: Placement,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            rows: 1_000_000,
            selectivity: 0.0003,
            placement: Placement::Uniform,
        }
    }
}

impl DatasetConfig {
    /// Number of qualifying rows.
    pub fn qualifying(&self) -> u64 {
        (self.selectivity * self.rows as f64).round() as u64
    }
}

/// Six equal-length f64 columns. Every value is a multiple of 0.25 well
/// below 2^40, so sums are exact in any order.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnarDataset {
    pub columns: Vec<Vec<f64>>,
}

impl ColumnarDataset {
    pub fn generate(cfg: &DatasetConfig, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&cfg.selectivity) || cfg.rows == 0 {
            return Err(Error::config("need rows >= 1 and selectivity within [0, 1]"));
        }
        let n = cfg.rows as usize;
        let q = cfg.qualifying() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut qualifying = vec![false; n];
        match cfg.placement {
            Placement::Uniform => {
                for i in sample(&mut rng, n, q) {
                    qualifying[i] = true;
                }
            }
            Placement::Clustered => {
                let start = rng.gen_range(0..=n - q);
                qualifying[start..start + q].fill(true);
            }
        }
        let quarter = |rng: &mut ChaCha8Rng, lo: u32, hi: u32| f64::from(rng.gen_range(lo..hi)) * 0.25;
        let mut columns = vec![Vec::with_capacity(n); COLUMNS.len()];
        for &hit in &qualifying {
            columns[0].push(if hit {
                quarter(&mut rng, 120, 800)
            } else {
                quarter(&mut rng, 0, 120)
            });
            for c in &mut columns[1..] {
                c.push(quarter(&mut rng, 0, 400));
            }
        }
        Ok(ColumnarDataset { columns })
    }

    pub fn rows(&self) -> u64 {
        self.columns[0].len() as u64
    }

    pub fn qualifying_rows(&self) -> Vec<u64> {
        (0..self.rows())
            .filter(|&i| self.columns[0][i as usize] >= THRESHOLD)
            .collect()
    }

    /// The query answer computed in memory.
    pub fn reference(&self, level: usize) -> f64 {
        let rows = self.qualifying_rows();
        if level == 0 {
            return rows.len() as f64;
        }
        rows.iter()
            .map(|&i| (1..=level).map(|c| self.columns[c][i as usize]).sum::<f64>())
            .sum()
    }

    /// Little-endian `[u64 rows]` followed by each column in order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * COLUMNS.len() * self.rows() as usize);
        out.extend_from_slice(&self.rows().to_le_bytes());
        for c in &self.columns {
            for v in c {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rows = bytes
            .get(..8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::config("truncated dataset file"))? as usize;
        if bytes.len() != 8 + 8 * COLUMNS.len() * rows {
            return Err(Error::config("dataset file size does not match its row count"));
        }
        let columns = (0..COLUMNS.len())
            .map(|c| {
                let base = 8 + 8 * c * rows;
                (0..rows)
                    .map(|i| f64::from_le_bytes(bytes[base + 8 * i..base + 8 * i + 8].try_into().unwrap()))
                    .collect()
            })
            .collect();
        Ok(ColumnarDataset { columns })
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

/// The dataset's columns laid out on the simulated devices.
pub struct StoredDataset {
    pub columns: Vec<ArrayHandle<f64>>,
}

impl StoredDataset {
    /// Column `c` goes to device `c mod D`.
    pub fn load(sys: &System, ds: &ColumnarDataset) -> Result<Self> {
        let d = sys.num_devices() as u32;
        let columns = ds
            .columns
            .iter()
            .enumerate()
            .map(|(c, values)| {
                let a = sys.array_on::<f64>(values.len() as u64, &[c as u32 % d])?;
                a.store_direct(0, values)?;
                Ok(a)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(StoredDataset { columns })
    }

    pub fn rows(&self) -> u64 {
        self.columns[0].len()
    }
}

#[derive(Clone, Debug)]
pub struct QueryRun {
    pub answer: f64,
    pub qualifying: u64,
    pub metrics: RunMetrics,
}

/// Predicted ondemand amplification: the full distance column plus one
/// line per distinct dependent-column line holding a qualifying row, over
/// the bytes the query consumes.
pub fn ondemand_oracle(rows: u64, qualifying: &[u64], level: usize, line_size: u64) -> f64 {
    let lines: BTreeSet<u64> = qualifying.iter().map(|&i| i * 8 / line_size).collect();
    let moved = rows * 8 + level as u64 * lines.len() as u64 * line_size;
    let used = rows * 8 + level as u64 * qualifying.len() as u64 * 8;
    moved as f64 / used as f64
}

/// Tiling amplification: every needed column is read in full.
pub fn tiling_oracle(rows: u64, qualifying: u64, level: usize) -> f64 {
    ((level as u64 + 1) * rows * 8) as f64 / (rows * 8 + level as u64 * qualifying * 8) as f64
}

pub fn run(
    sys: &System,
    ds: &StoredDataset,
    level: usize,
    scan: ScanMode,
    mode: Mode,
    threads: u64,
    seed: u64,
) -> Result<QueryRun> {
    if level > MAX_LEVEL {
        return Err(Error::config(format!("query level must be 0..={MAX_LEVEL}")));
    }
    let mut meter = Meter::start(sys, mode);
    let (answer, qualifying) = match scan {
        ScanMode::Tiling => tiling(sys, ds, level, &mut meter)?,
        ScanMode::Ondemand => ondemand(ds, level, &mut meter)?,
    };
    let used = ds.rows() * 8 + level as u64 * qualifying * 8;
    let name = format!("analytics-q{level}-{}", match scan {
        ScanMode::Tiling => "tiling",
        ScanMode::Ondemand => "ondemand",
    });
    let mut metrics = meter.finish(&name, threads, used, None);
    metrics.seed = seed;
    Ok(QueryRun {
        answer,
        qualifying,
        metrics,
    })
}

/// Rows per tile: a whole number of lines, sized so all six column tiles
/// fit in scratch.
fn tile_rows(sys: &System) -> Result<u64> {
    let scratch = sys.scratch()?;
    let line = sys.cache().line_size();
    let per_column = (scratch.len / COLUMNS.len() as u64).min(4 << 20) / line * line;
    if per_column == 0 {
        return Err(Error::config("scratch memory too small for a tile"));
    }
    Ok(per_column / 8)
}

fn tiling(sys: &System, ds: &StoredDataset, level: usize, meter: &mut Meter<'_>) -> Result<(f64, u64)> {
    let scratch = sys.scratch()?;
    let tile = tile_rows(sys)?;
    let per_command = sys.cache().line_size() / BLOCK_SIZE as u64;
    let mem = sys.memory();
    let mut sum = 0.0;
    let mut count = 0;
    let mut start = 0;
    let mut buf = Vec::new();
    while start < ds.rows() {
        let rows = tile.min(ds.rows() - start);
        for (c, col) in ds.columns[..=level].iter().enumerate() {
            let base = scratch.at(c as u64 * tile * 8);
            for r in col.block_ranges(start, rows)? {
                read_chunked(sys, r.device, r.lba, r.blocks, base + r.array_offset - start * 8, per_command)?;
            }
        }
        meter.phase();
        let column = |c: usize, buf: &mut Vec<u8>| -> Result<Vec<f64>> {
            buf.resize(rows as usize * 8, 0);
            mem.read(scratch.at(c as u64 * tile * 8), buf)?;
            Ok(buf.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
        };
        let distance = column(0, &mut buf)?;
        let deps = (1..=level).map(|c| column(c, &mut buf)).collect::<Result<Vec<_>>>()?;
        for (i, &d) in distance.iter().enumerate() {
            if d >= THRESHOLD {
                count += 1;
                sum += deps.iter().map(|c| c[i]).sum::<f64>();
            }
        }
        start += rows;
    }
    Ok((if level == 0 { count as f64 } else { sum }, count))
}

fn ondemand(ds: &StoredDataset, level: usize, meter: &mut Meter<'_>) -> Result<(f64, u64)> {
    let mut sum = 0.0;
    let mut count = 0;
    let mut idx = [0u64; WARP];
    let mut vals = [0.0f64; WARP];
    let mut hits = Vec::with_capacity(WARP);
    let mut dep = vec![0.0f64; WARP];
    let mut start = 0;
    while start < ds.rows() {
        let n = ((ds.rows() - start) as usize).min(WARP);
        for (k, slot) in idx[..n].iter_mut().enumerate() {
            *slot = start + k as u64;
        }
        ds.columns[0].read_group_into(&idx[..n], &mut vals[..n])?;
        hits.clear();
        hits.extend((0..n).filter(|&k| vals[k] >= THRESHOLD).map(|k| idx[k]));
        count += hits.len() as u64;
        if !hits.is_empty() {
            for col in &ds.columns[1..=level] {
                dep.resize(hits.len(), 0.0);
                col.read_group_into(&hits, &mut dep)?;
                sum += dep.iter().sum::<f64>();
            }
        }
        start += n as u64;
    }
    meter.phase();
    Ok((if level == 0 { count as f64 } else { sum }, count))
}
