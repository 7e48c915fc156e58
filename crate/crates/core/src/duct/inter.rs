use rtrb::{Consumer, Producer, RingBuffer};

use crate::channel::{ChannelError, ChannelMessage, DuctRx, DuctTx, Enqueue, Newest};

/// Sending half of a lock-free single-producer single-consumer duct.
pub struct InterTx<T>(Producer<ChannelMessage<T>>);

pub struct InterRx<T>(Consumer<ChannelMessage<T>>);

pub fn inter_thread_duct<T>(capacity: usize) -> (InterTx<T>, InterRx<T>) {
    assert!(capacity > 0, "duct capacity must be positive");
    let (tx, rx) = RingBuffer::new(capacity);
    (InterTx(tx), InterRx(rx))
}

impl<T> DuctTx<T> for InterTx<T> {
    fn enqueue(&mut self, msg: ChannelMessage<T>) -> Result<Enqueue<T>, ChannelError> {
        match self.0.push(msg) {
            Ok(()) => Ok(Enqueue::Accepted),
            Err(rtrb::PushError::Full(msg)) => Ok(Enqueue::Full(msg)),
        }
    }

    fn is_closed(&self) -> bool {
        self.0.is_abandoned()
    }
}

impl<T> DuctRx<T> for InterRx<T> {
    fn drain(
        &mut self,
        max: Option<usize>,
        out: &mut Vec<ChannelMessage<T>>,
    ) -> Result<usize, ChannelError> {
        let available = self.0.slots();
        let n = max.map_or(available, |m| m.min(available));
        if n > 0 {
            let chunk = self
                .0
                .read_chunk(n)
                .expect("slots() reported these as readable");
            out.extend(chunk);
        }
        Ok(n)
    }

    fn drain_newest(&mut self, max: Option<usize>, _scratch: &mut Vec<ChannelMessage<T>>) -> Newest<T> {
        let available = self.0.slots();
        let count = max.map_or(available, |m| m.min(available));
        let newest = match count {
            0 => None,
            n => self
                .0
                .read_chunk(n)
                .expect("slots() reported these as readable")
                .into_iter()
                .last(),
        };
        Newest {
            count,
            newest,
            error: None,
        }
    }

    fn is_closed(&self) -> bool {
        self.0.is_abandoned() && self.0.is_empty()
    }
}
