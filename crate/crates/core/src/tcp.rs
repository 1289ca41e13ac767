//! Connection layer reduced to what the scheduling experiments exercise:
//! established flows, sequence reassembly, in-order delivery, per-flow
//! extraction callbacks with a 64-byte private field, and a separate
//! high-priority receive path that bypasses sequencing so labeled messages
//! can be taken out of order.
//!
//! Handshake, retransmission and congestion control are out of scope; NIC
//! drops are measured as drops, not recovered.

use crate::event::{Event, EventKind, EventRouter, ProducerId, WouldBlock};
use crate::fastpath::TcpClassifier;
use crate::nic::{Class, FlowId, Label, MsgHeader, Packet, RequestId, TxPacket, WIRE_OVERHEAD_BYTES};
use crate::time::Nanos;
use std::collections::{BTreeMap, VecDeque};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TcpError {
    #[error("unknown flow {0}")]
    UnknownFlow(FlowId),
    #[error("private field access out of bounds: offset {offset} len {len}")]
    OutOfBounds { offset: usize, len: usize },
}

pub const PRIVATE_FIELD_LEN: usize = 64;

/// Bookkeeping for one message being reassembled on a flow.
#[derive(Debug, Clone)]
struct MsgRec {
    len: u32,
    header: MsgHeader,
    request: RequestId,
    arrived: u32,
    high_bytes: u32,
    in_prio: bool,
}

/// A message handed to the application by one of the receive paths.
#[derive(Debug, Clone, Copy)]
pub struct RecvMsg {
    pub request: RequestId,
    pub len: u32,
    pub header: MsgHeader,
    /// Every byte of this message arrived with a high label.
    pub all_high: bool,
}

/// What the protocol layer did with one processed packet; the engine uses
/// this for cost accounting and label statistics.
#[derive(Debug, Clone, Copy)]
pub struct ProcessedPacket {
    pub flow: FlowId,
    pub request: RequestId,
    pub first_of_msg: bool,
    pub label: Label,
    pub ground_high: bool,
    /// This packet completed its message's reassembly.
    pub completed_msg: bool,
    pub extraction_ran: bool,
}

#[derive(Debug)]
pub struct FlowState {
    pub flow: FlowId,
    pub established: bool,
    /// End of the contiguously received prefix.
    next_expected: u64,
    /// Received segments beyond the contiguous prefix.
    ooo: BTreeMap<u64, u32>,
    /// Known messages by their first sequence byte.
    msgs: BTreeMap<u64, MsgRec>,
    /// Ordered-consumption cursor.
    read_cursor: u64,
    /// Byte ranges consumed out of order via the priority path.
    skip: BTreeMap<u64, u64>,
    /// Complete messages whose every byte was labeled high, awaiting
    /// out-of-order receive. FIFO among themselves.
    prio_ready: VecDeque<u64>,
    pub extraction: Option<TcpClassifier>,
    pub private_field: [u8; PRIVATE_FIELD_LEN],
    tx_seq: u64,
    pub out_of_window: u64,
}

impl FlowState {
    fn new(flow: FlowId) -> Self {
        FlowState {
            flow,
            established: true,
            next_expected: 0,
            ooo: BTreeMap::new(),
            msgs: BTreeMap::new(),
            read_cursor: 0,
            skip: BTreeMap::new(),
            prio_ready: VecDeque::new(),
            extraction: None,
            private_field: [0; PRIVATE_FIELD_LEN],
            tx_seq: 0,
            out_of_window: 0,
        }
    }

    /// Bytes contiguously received and not yet consumed in order.
    pub fn ordered_available(&self) -> u64 {
        self.next_expected.saturating_sub(self.effective_cursor())
    }

    pub fn prio_ready_len(&self) -> usize {
        self.prio_ready.len()
    }

    fn effective_cursor(&self) -> u64 {
        let mut cursor = self.read_cursor;
        loop {
            match self.skip.range(..=cursor).next_back() {
                Some((&s, &e)) if s <= cursor && cursor < e => cursor = e,
                _ => break,
            }
        }
        cursor
    }

    fn chase_cursor(&mut self) {
        let c = self.effective_cursor();
        self.read_cursor = c;
        // Drop skip ranges that are fully behind the cursor.
        let dead: Vec<u64> = self
            .skip
            .range(..=c)
            .filter(|(_, &e)| e <= c)
            .map(|(&s, _)| s)
            .collect();
        for s in dead {
            self.skip.remove(&s);
        }
    }
}

/// All flows, indexed densely by flow id.
#[derive(Debug, Default)]
pub struct FlowTable {
    flows: Vec<FlowState>,
}

impl FlowTable {
    pub fn new(num_flows: u64) -> Self {
        FlowTable {
            flows: (0..num_flows).map(FlowState::new).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.flows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flows.is_empty()
    }

    pub fn flow(&self, id: FlowId) -> Result<&FlowState, TcpError> {
        self.flows
            .get(id as usize)
            .filter(|f| f.established)
            .ok_or(TcpError::UnknownFlow(id))
    }

    pub fn flow_mut(&mut self, id: FlowId) -> Result<&mut FlowState, TcpError> {
        self.flows
            .get_mut(id as usize)
            .filter(|f| f.established)
            .ok_or(TcpError::UnknownFlow(id))
    }

    /// Install or replace the flow's extraction callback. Replaceable at any
    /// time; subsequent packets use the new callback.
    pub fn register_extraction(&mut self, id: FlowId, cb: TcpClassifier) -> Result<(), TcpError> {
        self.flow_mut(id)?.extraction = Some(cb);
        Ok(())
    }

    /// Run extraction and reassembly for one inbound payload packet and emit
    /// its readiness event.
    pub fn process_packet(
        &mut self,
        mut pkt: Packet,
        router: &mut EventRouter,
        producer: ProducerId,
        now: Nanos,
        ooo_prio: bool,
    ) -> Option<ProcessedPacket> {
        let flow = match self.flow_mut(pkt.flow) {
            Ok(f) => f,
            Err(_) => return None,
        };
        if pkt.seq < flow.next_expected || flow.ooo.contains_key(&pkt.seq) {
            flow.out_of_window += 1;
            return None;
        }

        // Extraction: read private field, read packet data, update private
        // field, write the label into the packet metadata.
        let mut extraction_ran = false;
        if let Some(cb) = flow.extraction {
            let class = cb.classify(&pkt.view(), &mut flow.private_field);
            pkt.label = match class {
                Class::High => Label::High,
                Class::Low => Label::Low,
            };
            extraction_ran = true;
        } else if pkt.label == Label::Unset {
            pkt.label = Label::Low;
        }

        let rec = flow.msgs.entry(pkt.msg_seq).or_insert(MsgRec {
            len: pkt.msg_len,
            header: pkt.header,
            request: pkt.request,
            arrived: 0,
            high_bytes: 0,
            in_prio: false,
        });
        rec.arrived += pkt.len;
        if pkt.label == Label::High {
            rec.high_bytes += pkt.len;
        }
        let completed = rec.arrived == rec.len;
        let all_high = rec.high_bytes == rec.len;
        let request = rec.request;
        let msg_seq = pkt.msg_seq;
        if ooo_prio && completed && all_high && !rec.in_prio {
            rec.in_prio = true;
            flow.prio_ready.push_back(msg_seq);
        }

        // Reassembly.
        if pkt.seq == flow.next_expected {
            flow.next_expected += pkt.len as u64;
            while let Some((&s, &l)) = flow.ooo.iter().next() {
                if s == flow.next_expected {
                    flow.next_expected += l as u64;
                    flow.ooo.remove(&s);
                } else {
                    break;
                }
            }
        } else {
            flow.ooo.insert(pkt.seq, pkt.len);
        }

        let outcome = ProcessedPacket {
            flow: pkt.flow,
            request,
            first_of_msg: pkt.seq == msg_seq,
            label: pkt.label,
            ground_high: pkt.header.high,
            completed_msg: completed,
            extraction_ran,
        };

        router.emit(Event {
            flow: pkt.flow,
            kind: EventKind::Readable,
            class: Class::from(pkt.label),
            t_emit: now,
            request,
            producer,
        });
        Some(outcome)
    }

    /// Process a batch of inbound packets in order.
    pub fn process_batch(
        &mut self,
        pkts: Vec<Packet>,
        router: &mut EventRouter,
        producer: ProducerId,
        now: Nanos,
        ooo_prio: bool,
    ) -> Vec<ProcessedPacket> {
        pkts.into_iter()
            .filter_map(|p| self.process_packet(p, router, producer, now, ooo_prio))
            .collect()
    }

    /// Deliver up to `max_bytes` of contiguous in-order data.
    pub fn recv(&mut self, id: FlowId, max_bytes: u64) -> Result<Result<u64, WouldBlock>, TcpError> {
        let flow = self.flow_mut(id)?;
        flow.chase_cursor();
        let cursor = flow.read_cursor;
        let next_skip = flow
            .skip
            .range(cursor..)
            .next()
            .map(|(&s, _)| s)
            .unwrap_or(u64::MAX);
        let deliverable = flow.next_expected.min(next_skip).saturating_sub(cursor);
        let n = deliverable.min(max_bytes);
        if n == 0 {
            return Ok(Err(WouldBlock));
        }
        flow.read_cursor += n;
        Ok(Ok(n))
    }

    /// Take the next in-order message if it is completely received and not
    /// yet consumed.
    pub fn recv_message(&mut self, id: FlowId) -> Result<Result<RecvMsg, WouldBlock>, TcpError> {
        let flow = self.flow_mut(id)?;
        flow.chase_cursor();
        let cursor = flow.read_cursor;
        let ready = match flow.msgs.get(&cursor) {
            Some(rec) if rec.arrived == rec.len && cursor + rec.len as u64 <= flow.next_expected => {
                Some((rec.request, rec.len, rec.header, rec.high_bytes == rec.len))
            }
            _ => None,
        };
        match ready {
            Some((request, len, header, all_high)) => {
                flow.msgs.remove(&cursor);
                flow.read_cursor = cursor + len as u64;
                flow.chase_cursor();
                Ok(Ok(RecvMsg {
                    request,
                    len,
                    header,
                    all_high,
                }))
            }
            None => Ok(Err(WouldBlock)),
        }
    }

    /// Take the oldest complete high-priority message even if earlier
    /// low-priority data has not been delivered; its bytes are marked
    /// consumed for reassembly accounting.
    pub fn recv_priority(&mut self, id: FlowId) -> Result<Result<RecvMsg, WouldBlock>, TcpError> {
        let flow = self.flow_mut(id)?;
        while let Some(msg_seq) = flow.prio_ready.pop_front() {
            let Some(rec) = flow.msgs.remove(&msg_seq) else {
                continue; // already consumed in order
            };
            let end = msg_seq + rec.len as u64;
            if msg_seq == flow.read_cursor {
                flow.read_cursor = end;
            } else {
                flow.skip.insert(msg_seq, end);
            }
            flow.chase_cursor();
            return Ok(Ok(RecvMsg {
                request: rec.request,
                len: rec.len,
                header: rec.header,
                all_high: true,
            }));
        }
        Ok(Err(WouldBlock))
    }

    /// Segment `bytes` into MSS-sized packets bound for the driver send
    /// side. The final packet carries the request-completion marker.
    pub fn send(
        &mut self,
        id: FlowId,
        bytes: u64,
        label: Label,
        request: Option<RequestId>,
        mss: u32,
    ) -> Result<Vec<TxPacket>, TcpError> {
        let flow = self.flow_mut(id)?;
        if bytes == 0 {
            return Ok(Vec::new());
        }
        let n = bytes.div_ceil(mss as u64);
        let mut out = Vec::with_capacity(n as usize);
        let mut left = bytes;
        for i in 0..n {
            let len = left.min(mss as u64) as u32;
            left -= len as u64;
            out.push(TxPacket {
                flow: id,
                len,
                label,
                request,
                last_of_request: request.is_some() && i == n - 1,
                wire_bytes: len + 54 + WIRE_OVERHEAD_BYTES,
            });
        }
        flow.tx_seq += bytes;
        Ok(out)
    }

    pub fn private_field_read(
        &self,
        id: FlowId,
        offset: usize,
        len: usize,
    ) -> Result<Vec<u8>, TcpError> {
        let flow = self.flow(id)?;
        if offset + len > PRIVATE_FIELD_LEN {
            return Err(TcpError::OutOfBounds { offset, len });
        }
        Ok(flow.private_field[offset..offset + len].to_vec())
    }

    pub fn private_field_write(
        &mut self,
        id: FlowId,
        offset: usize,
        data: &[u8],
    ) -> Result<(), TcpError> {
        let flow = self.flow_mut(id)?;
        if offset + data.len() > PRIVATE_FIELD_LEN {
            return Err(TcpError::OutOfBounds {
                offset,
                len: data.len(),
            });
        }
        flow.private_field[offset..offset + data.len()].copy_from_slice(data);
        Ok(())
    }
}
