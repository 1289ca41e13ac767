//! Deterministic discrete-virtual-time simulation of an elastic user-space
//! network stack with application-definable, full-datapath request priority.
//!
//! The pipeline models a multi-queue NIC with finite rings, a driver layer
//! with priority-split buffers and a stateless classifier hook, a reduced
//! connection layer with per-flow stateful extraction over a 64-byte private
//! field, a strict-priority event framework feeding app coroutines over
//! per-producer-FIFO channels, embedded checkpoints that stand in for
//! interrupts on shared cores, and a resource manager that rebalances cores
//! and coroutines from per-period load measurements.
//!
//! Everything runs on one thread over an event calendar in integer
//! nanoseconds: the same scenario and seed always produce byte-identical
//! reports.

pub mod driver;
pub mod engine;
pub mod event;
mod exec;
pub mod fastpath;
pub mod metrics;
pub mod nic;
pub mod resource;
pub mod scenario;
pub mod sim;
pub mod tcp;
pub mod time;
pub mod workload;

pub use engine::{Binding, Core, CoreId, CoreRole, Task, TaskId, TaskKind, TaskState, WorkSegment};
pub use event::{ClassFilter, Event, EventKind, EventRouter, WouldBlock};
pub use fastpath::{cost_compare, CheckAction, CheckState, Thresholds};
pub use metrics::{CpuAccount, LatencyHistogram, MetricsError};
pub use nic::{Class, FlowId, Label, NicQueue, Packet, RequestId, RssMap};
pub use scenario::{Scenario, ScenarioError};
pub use sim::{timeline_csv, Occurrence, RunOutput, RunReport, Sim, TimelineRow};
pub use tcp::{FlowTable, TcpError};
pub use time::Nanos;
pub use workload::{WorkloadSpec, WorkloadError};
