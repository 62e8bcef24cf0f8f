//! Simulated storage stack for accelerator threads issuing their own block
//! I/O: lock-free submission/completion queues, simulated NVMe devices, a
//! shared software cache and array abstractions, plus the workloads and
//! throughput model used to evaluate them.

pub mod array;
pub mod cache;
pub mod config;
pub mod device;
pub mod error;
pub mod fence;
pub mod io;
pub mod memory;
pub mod metrics;
pub mod poll;
pub mod queue;
pub mod scalar;
pub mod system;
pub mod workloads;

pub use array::{ArrayHandle, ArraySpec, Extent};
pub use cache::{Cache, CacheConfig, LineId};
pub use error::{Error, Result};
pub use scalar::Element;
pub use system::{System, SystemBuilder};

pub type F64Array = ArrayHandle<f64>;
pub type F32Array = ArrayHandle<f32>;
pub type U64Array = ArrayHandle<u64>;
pub type U32Array = ArrayHandle<u32>;
