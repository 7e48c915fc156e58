use std::cell::RefCell;
use std::collections::VecDeque;
use std::rc::Rc;

use crate::channel::{ChannelError, ChannelMessage, DuctRx, DuctTx, Enqueue, Newest};

struct Ring<T> {
    buf: VecDeque<ChannelMessage<T>>,
    capacity: usize,
}

/// Sending half of a same-thread duct. Not `Send`: both halves live on the
/// worker that created them.
pub struct IntraTx<T>(Rc<RefCell<Ring<T>>>);

pub struct IntraRx<T>(Rc<RefCell<Ring<T>>>);

/// Bounded FIFO shared by two endpoints on one thread.
pub fn intra_thread_duct<T>(capacity: usize) -> (IntraTx<T>, IntraRx<T>) {
    assert!(capacity > 0, "duct capacity must be positive");
    let ring = Rc::new(RefCell::new(Ring {
        buf: VecDeque::with_capacity(capacity),
        capacity,
    }));
    (IntraTx(ring.clone()), IntraRx(ring))
}

impl<T> IntraTx<T> {
    pub fn occupancy(&self) -> usize {
        self.0.borrow().buf.len()
    }
}

impl<T> DuctTx<T> for IntraTx<T> {
    fn enqueue(&mut self, msg: ChannelMessage<T>) -> Result<Enqueue<T>, ChannelError> {
        let mut ring = self.0.borrow_mut();
        if ring.buf.len() >= ring.capacity {
            return Ok(Enqueue::Full(msg));
        }
        ring.buf.push_back(msg);
        Ok(Enqueue::Accepted)
    }

    fn is_closed(&self) -> bool {
        Rc::strong_count(&self.0) == 1
    }
}

impl<T> DuctRx<T> for IntraRx<T> {
    fn drain(
        &mut self,
        max: Option<usize>,
        out: &mut Vec<ChannelMessage<T>>,
    ) -> Result<usize, ChannelError> {
        let mut ring = self.0.borrow_mut();
        let n = max.map_or(ring.buf.len(), |m| m.min(ring.buf.len()));
        out.extend(ring.buf.drain(..n));
        Ok(n)
    }

    fn drain_newest(&mut self, max: Option<usize>, _scratch: &mut Vec<ChannelMessage<T>>) -> Newest<T> {
        let mut ring = self.0.borrow_mut();
        let count = max.map_or(ring.buf.len(), |m| m.min(ring.buf.len()));
        Newest {
            count,
            newest: ring.buf.drain(..count).last(),
            error: None,
        }
    }

    fn is_closed(&self) -> bool {
        Rc::strong_count(&self.0) == 1 && self.0.borrow().buf.is_empty()
    }
}
