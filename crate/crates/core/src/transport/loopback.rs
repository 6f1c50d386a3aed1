use std::collections::{BTreeMap, VecDeque};

use super::Frame;
use crate::time::Micros;

pub type EndpointId = u32;

/// In-process network on a simulated clock. A frame sent at `t` becomes
/// receivable at exactly `t + latency`; each directed endpoint pair is FIFO.
#[derive(Debug, Default)]
pub struct LoopbackNet {
    latency: Micros,
    queues: BTreeMap<(EndpointId, EndpointId), VecDeque<(Micros, Frame)>>,
}

impl LoopbackNet {
    pub fn new(latency: Micros) -> Self {
        Self {
            latency,
            queues: BTreeMap::new(),
        }
    }

    pub fn latency(&self) -> Micros {
        self.latency
    }

    /// Queues `frame` and returns its delivery instant.
    pub fn deliver(&mut self, from: EndpointId, to: EndpointId, frame: Frame, now: Micros) -> Micros {
        let at = now + self.latency;
        self.queues.entry((from, to)).or_default().push_back((at, frame));
        at
    }

    /// Next frame from `from` to `to` that has arrived by `now`.
    pub fn receive(&mut self, from: EndpointId, to: EndpointId, now: Micros) -> Option<Frame> {
        let q = self.queues.get_mut(&(from, to))?;
        match q.front() {
            Some((at, _)) if *at <= now => q.pop_front().map(|(_, f)| f),
            _ => None,
        }
    }

    /// Earliest pending delivery instant on any pair.
    pub fn next_delivery(&self) -> Option<Micros> {
        self.queues.values().filter_map(|q| q.front().map(|(at, _)| *at)).min()
    }

    pub fn in_flight(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::MsgType;

    #[test]
    fn delivers_at_send_time_plus_latency_in_order() {
        let mut net = LoopbackNet::new(Micros(250));
        for i in 0..5u64 {
            let at = net.deliver(1, 2, Frame::new(MsgType::Upload, i, vec![]), Micros(100 + i));
            assert_eq!(at, Micros(350 + i));
        }
        net.deliver(2, 1, Frame::new(MsgType::SlotGrant, 9, vec![]), Micros(0));
        assert_eq!(net.next_delivery(), Some(Micros(250)));
        assert!(net.receive(1, 2, Micros(349)).is_none());
        assert_eq!(net.receive(1, 2, Micros(350)).unwrap().round_id, 0);
        assert!(net.receive(1, 2, Micros(350)).is_none());
        for i in 1..5 {
            assert_eq!(net.receive(1, 2, Micros(1000)).unwrap().round_id, i);
        }
        assert_eq!(net.receive(2, 1, Micros(250)).unwrap().round_id, 9);
        assert_eq!(net.in_flight(), 0);
        assert_eq!(net.next_delivery(), None);
    }
}
