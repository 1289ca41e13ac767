//! Priority-aware event delivery between stack coroutines and app
//! coroutines. Each consumer owns one channel fed by multiple producers;
//! the contract is per-producer FIFO within a class and strict high-first
//! across classes. Dequeue order is exactly a stable sort of the emission
//! sequence by (class, per-producer index).

use crate::nic::{Class, FlowId, RequestId};
use crate::time::Nanos;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

pub type ConsumerId = usize;
pub type ProducerId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Readable,
    Writable,
    Accepted,
    Closed,
}

/// Readiness notification. Priority is copied from the triggering packet's
/// label (or chosen by the sender for non-readable events).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub flow: FlowId,
    pub kind: EventKind,
    pub class: Class,
    pub t_emit: Nanos,
    pub request: RequestId,
    pub producer: ProducerId,
}

/// Class filter used when binding a flow to a consumer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassFilter {
    High,
    Low,
    Any,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WouldBlock;

#[derive(PartialEq, Eq)]
struct Slot {
    class_rank: u8,
    /// Emission index within (producer, class); realizes per-producer FIFO.
    producer_idx: u64,
    /// Global emission sequence; breaks ties deterministically.
    seq: u64,
}

impl Ord for Slot {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.class_rank, self.producer_idx, self.seq).cmp(&(
            other.class_rank,
            other.producer_idx,
            other.seq,
        ))
    }
}

impl PartialOrd for Slot {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// One consumer's inbound event channel.
#[derive(Default)]
pub struct EventChannel {
    heap: BinaryHeap<Reverse<(Slot, usize)>>,
    slots: Vec<Option<Event>>,
    high_len: usize,
    low_len: usize,
    /// Per-(producer, class) emission counters.
    producer_idx: BTreeMap<(ProducerId, u8), u64>,
    oldest_high_seq: Option<u64>,
}

impl EventChannel {
    pub fn len(&self) -> usize {
        self.high_len + self.low_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn high_len(&self) -> usize {
        self.high_len
    }

    pub fn low_len(&self) -> usize {
        self.low_len
    }

    /// Global emission sequence of the oldest pending high event, if any.
    pub fn oldest_high_seq(&self) -> Option<u64> {
        self.oldest_high_seq
    }

    fn push(&mut self, ev: Event, seq: u64) {
        let rank = ev.class.rank();
        let idx = self
            .producer_idx
            .entry((ev.producer, rank))
            .or_insert(0);
        let slot = Slot {
            class_rank: rank,
            producer_idx: *idx,
            seq,
        };
        *idx += 1;
        match ev.class {
            Class::High => {
                self.high_len += 1;
                if self.oldest_high_seq.map_or(true, |s| seq < s) {
                    self.oldest_high_seq = Some(seq);
                }
            }
            Class::Low => self.low_len += 1,
        }
        let id = self.slots.len();
        self.slots.push(Some(ev));
        self.heap.push(Reverse((slot, id)));
    }

    fn pop(&mut self) -> Option<Event> {
        let Reverse((slot, id)) = self.heap.pop()?;
        let ev = self.slots[id].take().expect("slot already drained");
        match ev.class {
            Class::High => {
                self.high_len -= 1;
                self.oldest_high_seq = self
                    .heap
                    .peek()
                    .filter(|Reverse((s, _))| s.class_rank == Class::High.rank())
                    .map(|Reverse((s, _))| s.seq);
            }
            Class::Low => self.low_len -= 1,
        }
        let _ = slot;
        Some(ev)
    }
}

impl std::fmt::Debug for EventChannel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventChannel")
            .field("high", &self.high_len)
            .field("low", &self.low_len)
            .finish()
    }
}

/// Routes events to consumer channels according to per-flow bindings.
/// A flow's high and low events may go to different consumers when class
/// bindings exist for both (priority diffluence).
pub struct EventRouter {
    channels: Vec<EventChannel>,
    /// Per-flow class-filtered bindings.
    class_bindings: BTreeMap<(FlowId, Class), ConsumerId>,
    any_bindings: BTreeMap<FlowId, ConsumerId>,
    /// Scenario-wide per-class defaults, consulted before the hash default.
    pub class_defaults: [Option<ConsumerId>; 2],
    /// Consumers eligible for default routing; updated on plan changes.
    active: Vec<ConsumerId>,
    /// When all events are forced into one class (priority disabled).
    pub force_low: bool,
    pub emitted: u64,
    pub delivered: u64,
    pub orphaned: u64,
    pub rebind_warnings: u64,
    seq: u64,
}

impl EventRouter {
    pub fn new(num_consumers: usize) -> Self {
        let mut channels = Vec::with_capacity(num_consumers);
        channels.resize_with(num_consumers, EventChannel::default);
        EventRouter {
            channels,
            class_bindings: BTreeMap::new(),
            any_bindings: BTreeMap::new(),
            class_defaults: [None, None],
            active: (0..num_consumers).collect(),
            force_low: false,
            emitted: 0,
            delivered: 0,
            orphaned: 0,
            rebind_warnings: 0,
            seq: 0,
        }
    }

    pub fn channel(&self, c: ConsumerId) -> &EventChannel {
        &self.channels[c]
    }

    pub fn num_consumers(&self) -> usize {
        self.channels.len()
    }

    pub fn set_active(&mut self, active: Vec<ConsumerId>) {
        self.active = active;
    }

    pub fn active(&self) -> &[ConsumerId] {
        &self.active
    }

    /// Bind a flow's events of the given class to a consumer. Duplicate
    /// bindings are last-write-wins, counted as a warning.
    pub fn bind(&mut self, flow: FlowId, consumer: ConsumerId, filter: ClassFilter) {
        match filter {
            ClassFilter::Any => {
                if self.any_bindings.insert(flow, consumer).is_some() {
                    self.rebind_warnings += 1;
                }
            }
            ClassFilter::High => {
                if self
                    .class_bindings
                    .insert((flow, Class::High), consumer)
                    .is_some()
                {
                    self.rebind_warnings += 1;
                }
            }
            ClassFilter::Low => {
                if self
                    .class_bindings
                    .insert((flow, Class::Low), consumer)
                    .is_some()
                {
                    self.rebind_warnings += 1;
                }
            }
        }
    }

    /// Route resolution: exact (flow, class) binding, then flow-any binding,
    /// then the scenario class default, then hashing over active consumers.
    pub fn route(&self, flow: FlowId, class: Class) -> Option<ConsumerId> {
        if let Some(&c) = self.class_bindings.get(&(flow, class)) {
            return Some(c);
        }
        if let Some(&c) = self.any_bindings.get(&flow) {
            return Some(c);
        }
        if let Some(c) = self.class_defaults[class.rank() as usize] {
            return Some(c);
        }
        if self.active.is_empty() {
            return None;
        }
        Some(self.active[(flow % self.active.len() as u64) as usize])
    }

    /// Deliver an event to its consumer's channel. Events with no route are
    /// counted as orphaned rather than silently dropped.
    pub fn emit(&mut self, mut ev: Event) -> Option<ConsumerId> {
        if self.force_low {
            ev.class = Class::Low;
        }
        self.emitted += 1;
        match self.route(ev.flow, ev.class) {
            Some(c) => {
                let seq = self.seq;
                self.seq += 1;
                self.channels[c].push(ev, seq);
                Some(c)
            }
            None => {
                self.orphaned += 1;
                None
            }
        }
    }

    /// Receive a single event, highest class first.
    pub fn poll_one(&mut self, consumer: ConsumerId) -> Result<Event, WouldBlock> {
        match self.channels[consumer].pop() {
            Some(ev) => {
                self.delivered += 1;
                Ok(ev)
            }
            None => Err(WouldBlock),
        }
    }

    /// Receive up to `max_events` events, all high before any low.
    pub fn poll_many(
        &mut self,
        consumer: ConsumerId,
        max_events: usize,
    ) -> Result<Vec<Event>, WouldBlock> {
        debug_assert!(max_events >= 1);
        let mut out = Vec::new();
        while out.len() < max_events {
            match self.channels[consumer].pop() {
                Some(ev) => out.push(ev),
                None => break,
            }
        }
        if out.is_empty() {
            return Err(WouldBlock);
        }
        self.delivered += out.len() as u64;
        Ok(out)
    }

    pub fn pending(&self) -> u64 {
        self.channels.iter().map(|c| c.len() as u64).sum()
    }

    /// emitted == delivered + pending + orphaned at all times.
    pub fn conserved(&self) -> bool {
        self.emitted == self.delivered + self.pending() + self.orphaned
    }
}

impl std::fmt::Debug for EventRouter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventRouter")
            .field("consumers", &self.channels.len())
            .field("emitted", &self.emitted)
            .field("delivered", &self.delivered)
            .field("orphaned", &self.orphaned)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(flow: FlowId, class: Class, producer: ProducerId) -> Event {
        Event {
            flow,
            kind: EventKind::Readable,
            class,
            t_emit: 0,
            request: 0,
            producer,
        }
    }

    #[test]
    fn high_binding_routes_high_only() {
        let mut r = EventRouter::new(2);
        r.bind(7, 0, ClassFilter::High);
        r.bind(7, 1, ClassFilter::Low);
        assert_eq!(r.emit(ev(7, Class::High, 0)), Some(0));
        assert_eq!(r.emit(ev(7, Class::Low, 0)), Some(1));
        assert_eq!(r.channel(0).high_len(), 1);
        assert_eq!(r.channel(1).low_len(), 1);
    }

    #[test]
    fn any_binding_takes_both_classes() {
        let mut r = EventRouter::new(2);
        r.bind(7, 1, ClassFilter::Any);
        assert_eq!(r.emit(ev(7, Class::High, 0)), Some(1));
        assert_eq!(r.emit(ev(7, Class::Low, 0)), Some(1));
    }

    #[test]
    fn duplicate_binding_is_last_write_wins_with_warning() {
        let mut r = EventRouter::new(2);
        r.bind(7, 0, ClassFilter::Any);
        r.bind(7, 1, ClassFilter::Any);
        assert_eq!(r.rebind_warnings, 1);
        assert_eq!(r.emit(ev(7, Class::Low, 0)), Some(1));
    }

    #[test]
    fn class_precedence_on_poll() {
        let mut r = EventRouter::new(1);
        r.emit(ev(1, Class::Low, 0));
        r.emit(ev(1, Class::High, 0));
        assert_eq!(r.poll_one(0).unwrap().class, Class::High);
        assert_eq!(r.poll_one(0).unwrap().class, Class::Low);
        assert_eq!(r.poll_one(0), Err(WouldBlock));
    }

    #[test]
    fn per_producer_order_preserved() {
        let mut r = EventRouter::new(1);
        r.emit(ev(10, Class::Low, 0));
        r.emit(ev(20, Class::Low, 1));
        r.emit(ev(11, Class::Low, 0));
        r.emit(ev(21, Class::Low, 1));
        let mut seen0 = Vec::new();
        let mut seen1 = Vec::new();
        while let Ok(e) = r.poll_one(0) {
            if e.producer == 0 {
                seen0.push(e.flow);
            } else {
                seen1.push(e.flow);
            }
        }
        assert_eq!(seen0, vec![10, 11]);
        assert_eq!(seen1, vec![20, 21]);
    }

    #[test]
    fn orphans_are_counted() {
        let mut r = EventRouter::new(1);
        r.set_active(Vec::new());
        assert_eq!(r.emit(ev(1, Class::Low, 0)), None);
        assert_eq!(r.orphaned, 1);
        assert!(r.conserved());
    }

    fn lcg(state: &mut u64) -> u64 {
        *state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        *state
    }

    // Drain order must equal a stable sort of the emission sequence by
    // (class, per-producer index) — brute-force oracle.
    #[test]
    fn drain_order_matches_stable_sort_oracle() {
        let mut r = EventRouter::new(1);
        let mut state = 7u64;
        let mut emissions = Vec::new();
        let mut per_producer: BTreeMap<(ProducerId, u8), u64> = BTreeMap::new();
        for i in 0..10_000u64 {
            let producer = (lcg(&mut state) % 3) as ProducerId;
            let class = if lcg(&mut state) % 2 == 0 { Class::High } else { Class::Low };
            let idx = per_producer.entry((producer, class.rank())).or_insert(0);
            emissions.push((class.rank(), *idx, i));
            *idx += 1;
            r.emit(ev(i, class, producer));
        }
        let mut oracle = emissions.clone();
        oracle.sort_by_key(|&(rank, idx, _)| (rank, idx));
        let mut got = Vec::new();
        while let Ok(e) = r.poll_one(0) {
            got.push(e.flow);
        }
        let want: Vec<u64> = oracle.iter().map(|&(_, _, i)| i).collect();
        assert_eq!(got, want);
        assert!(r.conserved());
    }

    // The position at which a high event drains is unaffected by how much
    // low backlog sits behind it.
    #[test]
    fn high_wait_independent_of_low_backlog() {
        let drain_positions = |extra_low: usize| -> Vec<usize> {
            let mut r = EventRouter::new(1);
            for i in 0..5u64 {
                r.emit(ev(100 + i, Class::High, 0));
                r.emit(ev(200 + i, Class::Low, 0));
            }
            for i in 0..extra_low as u64 {
                r.emit(ev(300 + i, Class::Low, 0));
            }
            let mut pos = Vec::new();
            let mut i = 0;
            while let Ok(e) = r.poll_one(0) {
                if e.class == Class::High {
                    pos.push(i);
                }
                i += 1;
            }
            pos
        };
        assert_eq!(drain_positions(0), drain_positions(50));
    }

    #[test]
    fn poll_many_caps_and_orders() {
        let mut r = EventRouter::new(1);
        for i in 0..3 {
            r.emit(ev(i, Class::Low, 0));
        }
        for i in 3..5 {
            r.emit(ev(i, Class::High, 0));
        }
        let got = r.poll_many(0, 3).unwrap();
        assert_eq!(got.len(), 3);
        assert_eq!(got[0].class, Class::High);
        assert_eq!(got[1].class, Class::High);
        assert_eq!(got[2].class, Class::Low);
        assert_eq!(r.poll_many(0, 8).unwrap().len(), 2);
        assert_eq!(r.poll_many(0, 8), Err(WouldBlock));
    }

    // Repeated single-event polls drain in the same order as one big wait.
    #[test]
    fn poll_one_equals_poll_many() {
        let build = || {
            let mut r = EventRouter::new(1);
            let mut state = 99u64;
            for i in 0..200u64 {
                let producer = (lcg(&mut state) % 3) as ProducerId;
                let class = if lcg(&mut state) % 3 == 0 { Class::High } else { Class::Low };
                r.emit(ev(i, class, producer));
            }
            r
        };
        let mut a = build();
        let mut b = build();
        let mut one = Vec::new();
        while let Ok(e) = a.poll_one(0) {
            one.push(e.flow);
        }
        let many: Vec<u64> = b.poll_many(0, 200).unwrap().iter().map(|e| e.flow).collect();
        assert_eq!(one, many);
    }

    #[test]
    fn force_low_flattens_classes() {
        let mut r = EventRouter::new(1);
        r.force_low = true;
        r.emit(ev(1, Class::High, 0));
        assert_eq!(r.poll_one(0).unwrap().class, Class::Low);
    }
}
