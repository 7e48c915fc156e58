//! Best-effort message passing with built-in quality-of-service
//! instrumentation.
//!
//! Channels are split into an [`Inlet`](channel::Inlet) and an
//! [`Outlet`](channel::Outlet) over a duct that may be intra-thread,
//! inter-thread, or inter-process. Sends never block and drop when the
//! buffer is full; reads never block and return the latest value received.
//! Counters on every endpoint feed the metrics in [`qos`].

pub mod channel;
pub mod consolidation;
pub mod duct;
pub mod qos;
pub mod sync;
pub mod topology;
pub mod wire;
pub mod workload;

pub use channel::{ChannelError, ChannelMessage, Inlet, Outlet, PutOutcome, StepOutcome};
