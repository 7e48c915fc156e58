//! Benchmark harness for the `besteffort` channels: graph coloring and a
//! synthetic compute workload run under five synchronization modes, with
//! optional QoS snapshots.

pub mod config;
pub mod harness;
pub mod results;

pub use config::{ConfigError, ConfigLayer, RunConfig};
pub use harness::{run_benchmark, BenchError, ReplicateRecord};
pub use results::emit_results;
