//! Per-run metrics and their CSV form.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Bumped whenever a column is added, removed or reordered.
pub const CSV_SCHEMA_VERSION: u32 = 1;

pub const CSV_COLUMNS: [&str; 20] = [
    "workload",
    "mode",
    "devices",
    "queues",
    "depth",
    "line_size",
    "cache_bytes",
    "threads",
    "io_commands",
    "bytes_transferred",
    "bytes_used",
    "amplification",
    "hits",
    "misses",
    "doorbell_rings",
    "extra_fence_reads",
    "modeled_iops",
    "modeled_seconds",
    "wall_seconds",
    "seed",
];

/// One row of results. Field order is the CSV column order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub workload: String,
    pub mode: String,
    pub devices: u64,
    /// Queue pairs per device.
    pub queues: u64,
    pub depth: u64,
    pub line_size: u64,
    pub cache_bytes: u64,
    pub threads: u64,
    pub io_commands: u64,
    pub bytes_transferred: u64,
    pub bytes_used: u64,
    pub amplification: f64,
    pub hits: u64,
    pub misses: u64,
    pub doorbell_rings: u64,
    pub extra_fence_reads: u64,
    pub modeled_iops: f64,
    pub modeled_seconds: f64,
    pub wall_seconds: f64,
    pub seed: u64,
}

impl RunMetrics {
    pub fn set_amplification(&mut self) {
        self.amplification = if self.bytes_used > 0 {
            self.bytes_transferred as f64 / self.bytes_used as f64
        } else {
            0.0
        };
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "{} ({} mode): {} commands, {} bytes moved, {} bytes used, amplification {:.3}",
            self.workload,
            self.mode,
            self.io_commands,
            self.bytes_transferred,
            self.bytes_used,
            self.amplification
        );
        if self.hits + self.misses > 0 {
            s += &format!(", cache {} hits / {} misses", self.hits, self.misses);
        }
        if self.modeled_seconds > 0.0 {
            s += &format!(
                ", modeled {:.6} s ({:.0} IOPS)",
                self.modeled_seconds, self.modeled_iops
            );
        }
        if self.wall_seconds > 0.0 {
            s += &format!(", wall {:.3} s", self.wall_seconds);
        }
        s
    }
}

/// Write a header and one row per entry.
pub fn write_csv<W: Write>(out: W, rows: &[RunMetrics]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_csv_string(rows: &[RunMetrics]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(&mut buf, rows)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}
