//! Open-loop workload generation: a fixed population of established
//! connections, request classes with per-class service times and sizes, and
//! optional burst or compression shaping. The schedule is fully determined
//! by the spec and the seed before the run starts; nothing the server does
//! feeds back into arrivals.

use crate::nic::{
    wire_spacing_ns, Class, FlowId, Label, MsgHeader, Packet, RequestId, MSG_HEADER_LEN,
    WIRE_OVERHEAD_BYTES,
};
use crate::time::{Nanos, NANOS_PER_SEC};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Frame header bytes (ethernet + ip + tcp) added to payload on the wire.
pub const FRAME_OVERHEAD_BYTES: u32 = 54;
/// Simulated link speed for arrival pacing.
pub const LINK_GBPS: u64 = 10;

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("class fractions must sum to 1, got {0}")]
    BadFractions(f64),
    #[error("workload has no classes")]
    NoClasses,
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkloadClass {
    pub fraction: f64,
    pub service_ns: u64,
    pub priority: Class,
    pub request_bytes: u32,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BurstSpec {
    pub bursts_per_s: u32,
    pub burst_size: u32,
}

/// A constant-rate phase; phases let a scenario model load steps.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Phase {
    pub rate_rps: u64,
    pub duration_ns: Nanos,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub connections: u32,
    pub classes: Vec<WorkloadClass>,
    #[serde(default)]
    pub rate_rps: u64,
    #[serde(default)]
    pub burst: Option<BurstSpec>,
    /// Squeeze each second of traffic into 1/factor of it.
    #[serde(default)]
    pub compress_factor: Option<u32>,
    pub duration_ns: Nanos,
    #[serde(default)]
    pub phases: Option<Vec<Phase>>,
    #[serde(default = "default_response_bytes")]
    pub response_bytes: u32,
}

fn default_response_bytes() -> u32 {
    128
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.classes.is_empty() {
            return Err(WorkloadError::NoClasses);
        }
        let sum: f64 = self.classes.iter().map(|c| c.fraction).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(WorkloadError::BadFractions(sum));
        }
        for c in &self.classes {
            if c.service_ns == 0 {
                return Err(WorkloadError::Invalid("service time must be positive".into()));
            }
            if c.request_bytes < MSG_HEADER_LEN {
                return Err(WorkloadError::Invalid(format!(
                    "request bytes must be at least the {MSG_HEADER_LEN}-byte header"
                )));
            }
        }
        if self.connections == 0 {
            return Err(WorkloadError::Invalid("need at least one connection".into()));
        }
        if self.rate_rps == 0 && self.burst.is_none() && self.phases.is_none() {
            return Err(WorkloadError::Invalid("no arrival process configured".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RequestMeta {
    pub id: RequestId,
    pub class_idx: u16,
    pub priority: Class,
    pub service_ns: u64,
    pub bytes: u32,
    pub flow: FlowId,
}

/// Precomputed arrival schedule: packets sorted by arrival time, plus the
/// request table they reference.
#[derive(Debug, Default)]
pub struct ArrivalSchedule {
    pub packets: Vec<(Nanos, Packet)>,
    pub requests: Vec<RequestMeta>,
}

/// Deterministic request start instants for the configured arrival process.
fn request_instants(spec: &WorkloadSpec) -> Vec<Nanos> {
    let mut out = Vec::new();
    if let Some(phases) = &spec.phases {
        let mut t0 = 0;
        for ph in phases {
            let n = ph.rate_rps * ph.duration_ns / NANOS_PER_SEC;
            for i in 0..n {
                out.push(t0 + i * ph.duration_ns / n.max(1));
            }
            t0 += ph.duration_ns;
        }
        return out;
    }
    if let Some(burst) = &spec.burst {
        let gap = NANOS_PER_SEC / burst.bursts_per_s as u64;
        let mut t = 0;
        while t < spec.duration_ns {
            for i in 0..burst.burst_size as u64 {
                // Within a burst, requests arrive back to back at line rate;
                // exact packet pacing is refined during packetization.
                out.push(t + i);
            }
            t += gap;
        }
        return out;
    }
    let n = spec.rate_rps * spec.duration_ns / NANOS_PER_SEC;
    for i in 0..n {
        out.push(i * spec.duration_ns / n.max(1));
    }
    out
}

fn apply_compression(instants: &mut [Nanos], factor: u32) {
    for t in instants.iter_mut() {
        let sec = *t / NANOS_PER_SEC;
        let off = *t % NANOS_PER_SEC;
        *t = sec * NANOS_PER_SEC + off / factor as u64;
    }
}

/// Exact-quota class assignment: class counts hit the configured fractions
/// exactly (largest remainder), then the sequence is shuffled with the seed.
fn class_sequence(spec: &WorkloadSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<u16> {
    let mut counts: Vec<usize> = spec
        .classes
        .iter()
        .map(|c| (c.fraction * n as f64).floor() as usize)
        .collect();
    let mut assigned: usize = counts.iter().sum();
    let mut remainders: Vec<(f64, usize)> = spec
        .classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.fraction * n as f64 - counts[i] as f64, i))
        .collect();
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut r = 0;
    while assigned < n {
        counts[remainders[r % remainders.len()].1] += 1;
        assigned += 1;
        r += 1;
    }
    let mut seq = Vec::with_capacity(n);
    for (i, &c) in counts.iter().enumerate() {
        seq.extend(std::iter::repeat(i as u16).take(c));
    }
    seq.shuffle(rng);
    seq
}

/// Build the full arrival schedule for a spec. Same spec and seed always
/// produce the same schedule.
pub fn generate(spec: &WorkloadSpec, seed: u64, mss: u32) -> Result<ArrivalSchedule, WorkloadError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instants = request_instants(spec);
    if let Some(f) = spec.compress_factor {
        apply_compression(&mut instants, f);
    }
    let n = instants.len();
    let classes = class_sequence(spec, n, &mut rng);

    let mut requests = Vec::with_capacity(n);
    let mut packets = Vec::new();
    let mut flow_seq = vec![0u64; spec.connections as usize];
    // Wire cursor keeps packets of back-to-back requests from overlapping.
    let mut wire_free: Nanos = 0;
    for (i, (&t, &class_idx)) in instants.iter().zip(classes.iter()).enumerate() {
        let class = &spec.classes[class_idx as usize];
        let flow = (i as u64) % spec.connections as u64;
        let meta = RequestMeta {
            id: i as RequestId,
            class_idx,
            priority: class.priority,
            service_ns: class.service_ns,
            bytes: class.request_bytes,
            flow,
        };
        let header = MsgHeader {
            total_len: class.request_bytes,
            service_ns: class.service_ns.min(u32::MAX as u64) as u32,
            high: class.priority == Class::High,
        };
        let msg_seq = flow_seq[flow as usize];
        let mut off = 0u32;
        let mut at = t.max(wire_free);
        while off < class.request_bytes {
            let len = mss.min(class.request_bytes - off);
            let wire_bytes = len + FRAME_OVERHEAD_BYTES + WIRE_OVERHEAD_BYTES;
            packets.push((
                at,
                Packet {
                    flow,
                    seq: msg_seq + off as u64,
                    len,
                    msg_seq,
                    msg_len: class.request_bytes,
                    header,
                    request: meta.id,
                    label: Label::Unset,
                    t_arrive_nic: 0,
                    wire_bytes,
                },
            ));
            at += wire_spacing_ns(wire_bytes, LINK_GBPS);
            off += len;
        }
        wire_free = at;
        flow_seq[flow as usize] += class.request_bytes as u64;
        requests.push(meta);
    }
    packets.sort_by_key(|(t, p)| (*t, p.request));
    Ok(ArrivalSchedule { packets, requests })
}

/// Fixed-spacing line-rate arrivals of uniform frames, for fill-rate
/// experiments: frame bytes plus link overhead at the simulated link speed.
pub fn line_rate_arrivals(n: usize, frame_bytes: u32, gbps: u64) -> Vec<(Nanos, Packet)> {
    let spacing = wire_spacing_ns(frame_bytes + WIRE_OVERHEAD_BYTES, gbps);
    let header = MsgHeader {
        total_len: frame_bytes,
        service_ns: 1_000,
        high: false,
    };
    (0..n)
        .map(|i| {
            (
                i as Nanos * spacing,
                Packet {
                    flow: 0,
                    seq: i as u64 * frame_bytes as u64,
                    len: frame_bytes,
                    msg_seq: i as u64 * frame_bytes as u64,
                    msg_len: frame_bytes,
                    header,
                    request: i as RequestId,
                    label: Label::Unset,
                    t_arrive_nic: 0,
                    wire_bytes: frame_bytes + WIRE_OVERHEAD_BYTES,
                },
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::NANOS_PER_MILLI;

    fn simple_spec() -> WorkloadSpec {
        WorkloadSpec {
            connections: 8,
            classes: vec![WorkloadClass {
                fraction: 1.0,
                service_ns: 1_000,
                priority: Class::Low,
                request_bytes: 64,
            }],
            rate_rps: 1000,
            burst: None,
            compress_factor: None,
            duration_ns: NANOS_PER_SEC,
            phases: None,
            response_bytes: 128,
        }
    }

    #[test]
    fn rate_mode_counts_requests() {
        let sched = generate(&simple_spec(), 1, 1460).unwrap();
        assert_eq!(sched.requests.len(), 1000);
        assert_eq!(sched.packets.len(), 1000);
    }

    #[test]
    fn quota_assignment_is_exact() {
        let mut spec = simple_spec();
        spec.classes = vec![
            WorkloadClass {
                fraction: 0.995,
                service_ns: 1_000,
                priority: Class::Low,
                request_bytes: 64,
            },
            WorkloadClass {
                fraction: 0.005,
                service_ns: NANOS_PER_MILLI,
                priority: Class::Low,
                request_bytes: 64,
            },
        ];
        spec.rate_rps = 10_000;
        let sched = generate(&spec, 7, 1460).unwrap();
        assert_eq!(sched.requests.len(), 10_000);
        let long = sched.requests.iter().filter(|r| r.class_idx == 1).count();
        assert_eq!(long, 50);
    }

    #[test]
    fn compression_squeezes_each_second() {
        let mut spec = simple_spec();
        spec.compress_factor = Some(10);
        spec.duration_ns = 2 * NANOS_PER_SEC;
        let sched = generate(&spec, 1, 1460).unwrap();
        for (t, _) in &sched.packets {
            let off = t % NANOS_PER_SEC;
            assert!(off < NANOS_PER_SEC / 10 + 1_000);
        }
        assert_eq!(sched.requests.len(), 2000);
    }

    #[test]
    fn burst_mode_clusters_arrivals() {
        let mut spec = simple_spec();
        spec.rate_rps = 0;
        spec.burst = Some(BurstSpec {
            bursts_per_s: 4,
            burst_size: 100,
        });
        let sched = generate(&spec, 1, 1460).unwrap();
        assert_eq!(sched.requests.len(), 400);
        // Bursts are packed at line rate: 100 requests of 64+74 wire bytes
        // span about 11 µs.
        let first_burst: Vec<Nanos> = sched.packets.iter().take(100).map(|(t, _)| *t).collect();
        assert!(first_burst[99] - first_burst[0] < 20_000);
        // Next burst starts at 250 ms.
        assert!(sched.packets[100].0 >= 250 * NANOS_PER_MILLI);
    }

    #[test]
    fn same_seed_same_schedule() {
        let spec = {
            let mut s = simple_spec();
            s.classes = vec![
                WorkloadClass {
                    fraction: 0.5,
                    service_ns: 1_000,
                    priority: Class::High,
                    request_bytes: 64,
                },
                WorkloadClass {
                    fraction: 0.5,
                    service_ns: 2_000,
                    priority: Class::Low,
                    request_bytes: 64,
                },
            ];
            s
        };
        let a = generate(&spec, 42, 1460).unwrap();
        let b = generate(&spec, 42, 1460).unwrap();
        let pri_a: Vec<Class> = a.requests.iter().map(|r| r.priority).collect();
        let pri_b: Vec<Class> = b.requests.iter().map(|r| r.priority).collect();
        assert_eq!(pri_a, pri_b);
        let c = generate(&spec, 43, 1460).unwrap();
        let pri_c: Vec<Class> = c.requests.iter().map(|r| r.priority).collect();
        assert_ne!(pri_a, pri_c);
    }

    #[test]
    fn multi_packet_requests_are_segmented() {
        let mut spec = simple_spec();
        spec.classes[0].request_bytes = 4096;
        spec.rate_rps = 10;
        let sched = generate(&spec, 1, 1460).unwrap();
        assert_eq!(sched.requests.len(), 10);
        assert_eq!(sched.packets.len(), 30);
        let lens: Vec<u32> = sched.packets.iter().take(3).map(|(_, p)| p.len).collect();
        assert_eq!(lens, vec![1460, 1460, 1176]);
    }

    #[test]
    fn line_rate_spacing_is_67ns_for_64b() {
        let arrivals = line_rate_arrivals(3, 64, 10);
        assert_eq!(arrivals[1].0 - arrivals[0].0, 67);
    }

    #[test]
    fn validation_rejects_bad_fractions() {
        let mut spec = simple_spec();
        spec.classes[0].fraction = 0.9;
        assert!(matches!(spec.validate(), Err(WorkloadError::BadFractions(_))));
    }
}
