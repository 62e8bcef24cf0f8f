use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::queue::Opcode;

/// Measured peak of a Gen4 x16 host link, bytes/s.
pub const DEFAULT_INTERCONNECT_BPS: f64 = 26e9;

/// Per-device Gen4 x4 link, bytes/s.
const GEN4_X4_BPS: f64 = 7.0e9;

/// Latency and throughput envelope of one SSD model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    pub name: String,
    pub read_latency_us: f64,
    pub write_latency_us: f64,
    pub read_iops_cap_512: f64,
    pub read_iops_cap_4k: f64,
    pub write_iops_cap_512: f64,
    pub write_iops_cap_4k: f64,
    #[serde(rename = "link_bandwidth_Bps")]
    pub link_bandwidth_bps: f64,
    #[serde(default)]
    pub visibility_delay_us: f64,
}

impl DeviceProfile {
    pub fn optane_p5800x() -> Self {
        DeviceProfile {
            name: "optane-p5800x".into(),
            read_latency_us: 11.0,
            write_latency_us: 11.0,
            read_iops_cap_512: 5.1e6,
            read_iops_cap_4k: 1.5e6,
            write_iops_cap_512: 1.0e6,
            write_iops_cap_4k: 1.5e6,
            link_bandwidth_bps: GEN4_X4_BPS,
            visibility_delay_us: 0.0,
        }
    }

    pub fn samsung_pm1735() -> Self {
        DeviceProfile {
            name: "samsung-pm1735".into(),
            read_latency_us: 25.0,
            write_latency_us: 25.0,
            read_iops_cap_512: 1.1e6,
            read_iops_cap_4k: 1.6e6,
            write_iops_cap_512: 351e3,
            write_iops_cap_4k: 351e3,
            link_bandwidth_bps: GEN4_X4_BPS,
            visibility_delay_us: 0.0,
        }
    }

    pub fn samsung_980pro() -> Self {
        DeviceProfile {
            name: "samsung-980pro".into(),
            read_latency_us: 324.0,
            write_latency_us: 324.0,
            read_iops_cap_512: 750e3,
            read_iops_cap_4k: 750e3,
            write_iops_cap_512: 172e3,
            write_iops_cap_4k: 172e3,
            link_bandwidth_bps: GEN4_X4_BPS,
            visibility_delay_us: 0.0,
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "optane-p5800x" => Some(Self::optane_p5800x()),
            "samsung-pm1735" => Some(Self::samsung_pm1735()),
            "samsung-980pro" => Some(Self::samsung_980pro()),
            _ => None,
        }
    }

    pub fn builtin_names() -> [&'static str; 3] {
        ["optane-p5800x", "samsung-pm1735", "samsung-980pro"]
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: DeviceProfile = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("read_latency_us", self.read_latency_us),
            ("write_latency_us", self.write_latency_us),
            ("read_iops_cap_512", self.read_iops_cap_512),
            ("read_iops_cap_4k", self.read_iops_cap_4k),
            ("write_iops_cap_512", self.write_iops_cap_512),
            ("write_iops_cap_4k", self.write_iops_cap_4k),
            ("link_bandwidth_Bps", self.link_bandwidth_bps),
        ];
        for (field, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!(
                    "profile {}: {field} must be positive, got {v}",
                    self.name
                )));
            }
        }
        if !(self.visibility_delay_us.is_finite() && self.visibility_delay_us >= 0.0) {
            return Err(Error::config("visibility_delay_us must be >= 0"));
        }
        Ok(())
    }

    pub fn latency_us(&self, op: Opcode) -> f64 {
        match op {
            Opcode::Read => self.read_latency_us,
            Opcode::Write => self.write_latency_us,
        }
    }

    /// Operations per second the device sustains for requests of `bytes`.
    ///
    /// Exact at the two tabulated sizes; linear in between, bandwidth-bound
    /// above 4 KiB, and never above what the device link can carry.
    pub fn iops_cap(&self, op: Opcode, bytes: u64) -> f64 {
        let (small, large) = match op {
            Opcode::Read => (self.read_iops_cap_512, self.read_iops_cap_4k),
            Opcode::Write => (self.write_iops_cap_512, self.write_iops_cap_4k),
        };
        let b = bytes.max(1) as f64;
        let ops = if b <= 512.0 {
            small
        } else if b >= 4096.0 {
            large * 4096.0 / b
        } else {
            small + (large - small) * (b - 512.0) / (4096.0 - 512.0)
        };
        ops.min(self.link_bandwidth_bps / b)
    }
}
