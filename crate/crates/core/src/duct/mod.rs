//! Transport implementations behind the duct contract.
//!
//! * [`intra_thread_duct`]: a plain ring buffer for two endpoints on one
//!   worker thread.
//! * [`inter_thread_duct`]: a lock-free single-producer single-consumer ring
//!   for endpoints on different threads of one process.
//! * [`PeerLink`]: datagrams between processes, lossy and checksummed.
//!
//! The [`AnyTx`] and [`AnyRx`] enums let a worker hold endpoints of mixed
//! transports in one collection.

mod inter;
mod intra;
mod process;

pub use inter::{inter_thread_duct, InterRx, InterTx};
pub use intra::{intra_thread_duct, IntraRx, IntraTx};
pub use process::{loopback_pair, LinkConfig, LinkStats, PeerLink, ProcessRx, ProcessTx};

use crate::channel::{ChannelError, ChannelMessage, DuctRx, DuctTx, Enqueue, Newest};
use crate::consolidation::{AggregatedTx, PooledTx};
use crate::wire::WirePayload;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DuctKind {
    IntraThread,
    InterThread,
    InterProcess,
}

pub enum AnyTx<T> {
    Intra(IntraTx<T>),
    Inter(InterTx<T>),
    Process(ProcessTx<T>),
    Pooled(PooledTx<T>),
    Aggregated(AggregatedTx<T>),
}

pub enum AnyRx<T> {
    Intra(IntraRx<T>),
    Inter(InterRx<T>),
    Process(ProcessRx<T>),
}

impl<T> AnyTx<T> {
    pub fn kind(&self) -> DuctKind {
        match self {
            AnyTx::Intra(_) => DuctKind::IntraThread,
            AnyTx::Inter(_) => DuctKind::InterThread,
            AnyTx::Process(_) | AnyTx::Pooled(_) | AnyTx::Aggregated(_) => DuctKind::InterProcess,
        }
    }
}

impl<T> AnyRx<T> {
    pub fn kind(&self) -> DuctKind {
        match self {
            AnyRx::Intra(_) => DuctKind::IntraThread,
            AnyRx::Inter(_) => DuctKind::InterThread,
            AnyRx::Process(_) => DuctKind::InterProcess,
        }
    }
}

impl<T: WirePayload> DuctTx<T> for AnyTx<T> {
    fn enqueue(&mut self, msg: ChannelMessage<T>) -> Result<Enqueue<T>, ChannelError> {
        match self {
            AnyTx::Intra(d) => d.enqueue(msg),
            AnyTx::Inter(d) => d.enqueue(msg),
            AnyTx::Process(d) => d.enqueue(msg),
            AnyTx::Pooled(d) => d.enqueue(msg),
            AnyTx::Aggregated(d) => d.enqueue(msg),
        }
    }

    fn is_closed(&self) -> bool {
        match self {
            AnyTx::Intra(d) => d.is_closed(),
            AnyTx::Inter(d) => d.is_closed(),
            AnyTx::Process(d) => d.is_closed(),
            AnyTx::Pooled(d) => d.is_closed(),
            AnyTx::Aggregated(d) => d.is_closed(),
        }
    }
}

impl<T: WirePayload> DuctRx<T> for AnyRx<T> {
    fn drain(
        &mut self,
        max: Option<usize>,
        out: &mut Vec<ChannelMessage<T>>,
    ) -> Result<usize, ChannelError> {
        match self {
            AnyRx::Intra(d) => d.drain(max, out),
            AnyRx::Inter(d) => d.drain(max, out),
            AnyRx::Process(d) => d.drain(max, out),
        }
    }

    fn drain_newest(&mut self, max: Option<usize>, scratch: &mut Vec<ChannelMessage<T>>) -> Newest<T> {
        match self {
            AnyRx::Intra(d) => d.drain_newest(max, scratch),
            AnyRx::Inter(d) => d.drain_newest(max, scratch),
            AnyRx::Process(d) => d.drain_newest(max, scratch),
        }
    }

    fn is_closed(&self) -> bool {
        match self {
            AnyRx::Intra(d) => d.is_closed(),
            AnyRx::Inter(d) => d.is_closed(),
            AnyRx::Process(d) => d.is_closed(),
        }
    }
}
