//! Simulated multi-queue NIC: finite descriptor rings with tail-drop,
//! flow-group hashing for receive-side scaling, and the batch-receive cost
//! model (100 ns for an empty poll, 1 µs per full 32-packet batch, pro-rated
//! linearly for partial batches).

use crate::time::Nanos;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

pub type FlowId = u64;
pub type RequestId = u64;
pub type QueueId = usize;

/// Scheduling label carried in packet metadata. `Unset` until an extraction
/// point classifies the packet; unlabeled traffic is treated as low priority.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Unset,
    High,
    Low,
}

/// Two-class scheduling priority used by every queueing stage past the
/// extraction point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    High,
    Low,
}

impl From<Label> for Class {
    fn from(l: Label) -> Self {
        match l {
            Label::High => Class::High,
            _ => Class::Low,
        }
    }
}

impl Class {
    /// Strict-priority rank; smaller drains first.
    pub fn rank(self) -> u8 {
        match self {
            Class::High => 0,
            Class::Low => 1,
        }
    }
}

/// Fixed 16-byte request header at the start of every simulated message:
/// magic, total message length (header included), service time, class flag.
pub const MSG_HEADER_LEN: u32 = 16;
pub const MSG_MAGIC: u32 = 0x534D_4731; // "SMG1"

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MsgHeader {
    pub total_len: u32,
    pub service_ns: u32,
    pub high: bool,
}

impl MsgHeader {
    /// Byte `off` of the 16-byte on-wire header encoding.
    fn byte(&self, off: u32) -> u8 {
        let word = |v: u32, i: u32| (v >> (8 * i)) as u8;
        match off {
            0..=3 => word(MSG_MAGIC, off),
            4..=7 => word(self.total_len, off - 4),
            8..=11 => word(self.service_ns, off - 8),
            12 => self.high as u8,
            _ => 0,
        }
    }
}

/// Read-only view of a packet's simulated payload bytes. Message bodies are
/// all-zero; only the leading header region carries structure, which is what
/// the extraction callbacks parse.
#[derive(Debug, Clone, Copy)]
pub struct PayloadView {
    header: MsgHeader,
    offset_in_msg: u32,
    len: u32,
}

impl PayloadView {
    pub fn len(&self) -> u32 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn byte(&self, off: u32) -> u8 {
        if off >= self.len {
            return 0;
        }
        self.header.byte(self.offset_in_msg + off)
    }

    pub fn read_u32_le(&self, off: u32) -> u32 {
        u32::from_le_bytes([
            self.byte(off),
            self.byte(off + 1),
            self.byte(off + 2),
            self.byte(off + 3),
        ])
    }

    /// Decode the request header if this packet starts with one.
    /// Continuation packets (mid-message) fail the magic check.
    pub fn parse_header(&self) -> Option<MsgHeader> {
        if self.offset_in_msg != 0 || self.len < MSG_HEADER_LEN {
            return None;
        }
        if self.read_u32_le(0) != MSG_MAGIC {
            return None;
        }
        Some(MsgHeader {
            total_len: self.read_u32_le(4),
            service_ns: self.read_u32_le(8),
            high: self.byte(12) != 0,
        })
    }
}

/// A simulated packet. Payload content is carried as a descriptor
/// (`header` + offsets) rather than real bytes.
#[derive(Debug, Clone)]
pub struct Packet {
    pub flow: FlowId,
    /// First sequence byte of this packet in the flow's receive space.
    pub seq: u64,
    /// Payload bytes.
    pub len: u32,
    /// Sequence of the first byte of the message this packet belongs to.
    pub msg_seq: u64,
    pub msg_len: u32,
    pub header: MsgHeader,
    pub request: RequestId,
    pub label: Label,
    pub t_arrive_nic: Nanos,
    /// Frame bytes on the wire including link overhead, for pacing math.
    pub wire_bytes: u32,
}

impl Packet {
    pub fn offset_in_msg(&self) -> u32 {
        (self.seq - self.msg_seq) as u32
    }

    pub fn view(&self) -> PayloadView {
        PayloadView {
            header: self.header,
            offset_in_msg: self.offset_in_msg(),
            len: self.len,
        }
    }
}

/// Outbound packet queued at the driver send side.
#[derive(Debug, Clone)]
pub struct TxPacket {
    pub flow: FlowId,
    pub len: u32,
    pub label: Label,
    pub request: Option<RequestId>,
    /// True on the final response packet of a request; completing it closes
    /// the request's latency record.
    pub last_of_request: bool,
    pub wire_bytes: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnqueueOutcome {
    Accepted,
    Dropped,
}

/// One NIC descriptor ring. Fixed capacity, tail-drop on overflow.
#[derive(Debug)]
pub struct NicQueue {
    pub id: QueueId,
    pub capacity: usize,
    ring: VecDeque<Packet>,
    pub drops: u64,
    pub enqueued: u64,
    pub dequeued: u64,
    /// When NIC-level priority queues are enabled a ring serves one class.
    pub priority_class: Option<Class>,
}

/// Cost of checking an empty ring.
pub const EMPTY_POLL_COST: Nanos = 100;
/// Cost of receiving one full 32-packet batch.
pub const BATCH32_COST: Nanos = 1_000;
/// Batch size the receive cost model is calibrated to.
pub const RX_BATCH: usize = 32;

impl NicQueue {
    pub fn new(id: QueueId, capacity: usize) -> Self {
        NicQueue {
            id,
            capacity,
            ring: VecDeque::new(),
            drops: 0,
            enqueued: 0,
            dequeued: 0,
            priority_class: None,
        }
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    /// Append a packet, stamping its NIC arrival time, or tail-drop it if
    /// the ring is full.
    pub fn enqueue(&mut self, mut pkt: Packet, now: Nanos) -> EnqueueOutcome {
        if self.ring.len() >= self.capacity {
            self.drops += 1;
            return EnqueueOutcome::Dropped;
        }
        pkt.t_arrive_nic = now;
        self.ring.push_back(pkt);
        self.enqueued += 1;
        EnqueueOutcome::Accepted
    }

    /// Remove up to `max_batch` packets in FIFO order and return them along
    /// with the virtual time charged to the polling core.
    pub fn rx_burst(&mut self, max_batch: usize) -> (Vec<Packet>, Nanos) {
        debug_assert!(max_batch >= 1);
        let n = self.ring.len().min(max_batch);
        if n == 0 {
            return (Vec::new(), EMPTY_POLL_COST);
        }
        let out: Vec<Packet> = self.ring.drain(..n).collect();
        self.dequeued += n as u64;
        (out, rx_cost(n))
    }

    /// Conservation check: everything enqueued is either still in the ring,
    /// dequeued, or dropped (drops never entered the ring).
    pub fn conserved(&self) -> bool {
        self.enqueued == self.dequeued + self.ring.len() as u64
    }
}

/// Receive cost for an `n`-packet burst, pro-rated from the 32-packet batch.
pub fn rx_cost(n: usize) -> Nanos {
    if n == 0 {
        EMPTY_POLL_COST
    } else {
        (n as Nanos * BATCH32_COST) / RX_BATCH as Nanos
    }
}

/// Multiplicative (Fibonacci) hash of the flow id onto `num_groups` buckets.
pub fn rss_hash(flow: FlowId, num_groups: u32) -> u32 {
    debug_assert!(num_groups >= 1);
    let h = flow.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 32;
    (h % num_groups as u64) as u32
}

/// Static mapping from RSS flow groups to NIC rings.
#[derive(Debug, Clone)]
pub struct RssMap {
    pub num_groups: u32,
    pub group_to_queue: Vec<QueueId>,
}

impl RssMap {
    /// Identity layout: one group per queue.
    pub fn identity(num_groups: u32) -> Self {
        RssMap {
            num_groups,
            group_to_queue: (0..num_groups as usize).collect(),
        }
    }

    pub fn group_of(&self, flow: FlowId) -> u32 {
        rss_hash(flow, self.num_groups)
    }

    pub fn queue_of(&self, flow: FlowId) -> QueueId {
        self.group_to_queue[self.group_of(flow) as usize]
    }
}

/// Inter-frame spacing on the wire: `wire_bytes` includes link overhead
/// (preamble + IFG). At 10 Gb/s a 64 B frame plus 20 B overhead is 67 ns.
pub fn wire_spacing_ns(wire_bytes: u32, gbps: u64) -> Nanos {
    (wire_bytes as Nanos * 8) / gbps
}

/// Link overhead outside the frame: preamble + inter-frame gap.
pub const WIRE_OVERHEAD_BYTES: u32 = 20;

#[cfg(test)]
pub(crate) fn test_packet(flow: FlowId, seq: u64, len: u32) -> Packet {
    let header = MsgHeader {
        total_len: len,
        service_ns: 1_000,
        high: false,
    };
    Packet {
        flow,
        seq,
        len,
        msg_seq: seq,
        msg_len: len,
        header,
        request: 0,
        label: Label::Unset,
        t_arrive_nic: 0,
        wire_bytes: len + 54 + WIRE_OVERHEAD_BYTES,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rss_single_group_is_zero() {
        assert_eq!(rss_hash(7, 1), 0);
    }

    #[test]
    fn rss_is_stable() {
        for f in [0u64, 1, 7, 999_999, u64::MAX] {
            assert_eq!(rss_hash(f, 8), rss_hash(f, 8));
        }
    }

    // Oracle run over 10k sequential flow ids and 8 groups; the bounds were
    // fixed from that run and the distribution is deterministic.
    #[test]
    fn rss_spreads_sequential_flows() {
        let mut hist = [0u32; 8];
        for f in 0..10_000u64 {
            hist[rss_hash(f, 8) as usize] += 1;
        }
        assert_eq!(hist.iter().sum::<u32>(), 10_000);
        for (g, n) in hist.iter().enumerate() {
            assert!(
                (800..=1700).contains(n),
                "group {} got {} flows, outside [800, 1700]",
                g,
                n
            );
        }
    }

    #[test]
    fn enqueue_accepts_until_capacity() {
        let mut q = NicQueue::new(0, 4096);
        assert_eq!(q.enqueue(test_packet(1, 0, 64), 5), EnqueueOutcome::Accepted);
        assert_eq!(q.ring[0].t_arrive_nic, 5);
    }

    #[test]
    fn enqueue_full_ring_drops() {
        let mut q = NicQueue::new(0, 4096);
        for i in 0..4096 {
            assert_eq!(q.enqueue(test_packet(1, i * 64, 64), 0), EnqueueOutcome::Accepted);
        }
        assert_eq!(q.enqueue(test_packet(1, 4096 * 64, 64), 0), EnqueueOutcome::Dropped);
        assert_eq!(q.drops, 1);
    }

    #[test]
    fn back_to_back_overflow_drops_exactly_one() {
        let mut q = NicQueue::new(0, 4096);
        let mut drops = 0;
        for i in 0..4097u64 {
            if q.enqueue(test_packet(1, i * 64, 64), 0) == EnqueueOutcome::Dropped {
                drops += 1;
            }
        }
        assert_eq!(drops, 1);
        assert!(q.conserved());
    }

    #[test]
    fn rx_burst_cost_model() {
        let mut q = NicQueue::new(0, 4096);
        let (pkts, cost) = q.rx_burst(32);
        assert!(pkts.is_empty());
        assert_eq!(cost, 100);

        for i in 0..32u64 {
            q.enqueue(test_packet(1, i * 64, 64), 0);
        }
        let (pkts, cost) = q.rx_burst(32);
        assert_eq!(pkts.len(), 32);
        assert_eq!(cost, 1_000);

        for i in 0..16u64 {
            q.enqueue(test_packet(1, i * 64, 64), 0);
        }
        let (pkts, cost) = q.rx_burst(32);
        assert_eq!(pkts.len(), 16);
        assert_eq!(cost, 500);
    }

    // With 64 B frames at 10 Gb/s line rate and no drain, the first drop
    // lands once 4096 descriptors are used: 4096 * 67 ns = 274.432 µs.
    #[test]
    fn fill_time_of_undrained_queue() {
        let spacing = wire_spacing_ns(64 + WIRE_OVERHEAD_BYTES, 10);
        assert_eq!(spacing, 67);
        let mut q = NicQueue::new(0, 4096);
        let mut t = 0;
        let mut first_drop = None;
        for i in 0..5000u64 {
            t = i * spacing;
            if q.enqueue(test_packet(1, i * 64, 64), t) == EnqueueOutcome::Dropped {
                first_drop = Some(t);
                break;
            }
        }
        let first_drop = first_drop.expect("queue never overflowed");
        assert!(first_drop >= 200_000, "first drop too early: {first_drop}");
        assert!(first_drop <= 280_000, "first drop too late: {first_drop}");
        let _ = t;
    }

    #[test]
    fn header_roundtrip_through_view() {
        let p = {
            let mut p = test_packet(9, 0, 1024);
            p.header = MsgHeader {
                total_len: 1024,
                service_ns: 100_000,
                high: true,
            };
            p
        };
        let parsed = p.view().parse_header().unwrap();
        assert_eq!(parsed, p.header);
    }

    #[test]
    fn continuation_packet_has_no_header() {
        let mut p = test_packet(9, 1460, 1460);
        p.msg_seq = 0;
        p.msg_len = 4096;
        assert!(p.view().parse_header().is_none());
    }

    proptest! {
        // FIFO per queue and conservation under arbitrary enqueue/drain
        // interleavings.
        #[test]
        fn fifo_and_conservation(ops in proptest::collection::vec(0u8..3, 1..200)) {
            let mut q = NicQueue::new(0, 8);
            let mut next_seq = 0u64;
            let mut expect: VecDeque<u64> = VecDeque::new();
            for op in ops {
                match op {
                    0 | 1 => {
                        let pkt = test_packet(1, next_seq, 64);
                        if q.enqueue(pkt, 0) == EnqueueOutcome::Accepted {
                            expect.push_back(next_seq);
                        }
                        next_seq += 64;
                    }
                    _ => {
                        let (got, _) = q.rx_burst(3);
                        for p in got {
                            prop_assert_eq!(p.seq, expect.pop_front().unwrap());
                        }
                    }
                }
                prop_assert!(q.conserved());
            }
        }
    }
}
