//! Embedded checkpoint mechanism. Checkpoints are woven into API calls and
//! long-running service loops; each one reads the clock and compares elapsed
//! intervals against thresholds to decide whether to drain the NIC, run a
//! protocol batch, yield the coroutine budget, or yield to a pending
//! high-priority event. A non-triggering check costs 22 ns.
//!
//! Also hosts the classifier registry that binds application-defined
//! extraction callbacks to the driver and TCP layers, and the closed-form
//! cost comparison against a yield-per-request coroutine design.

use crate::driver::DriverClassifier;
use crate::nic::{Class, PayloadView};
use crate::time::Nanos;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Trigger thresholds and the cost of a non-triggering check.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Thresholds {
    /// Receive the NIC rings if this much time passed since the last drain.
    pub nic_check_interval_ns: Nanos,
    /// Run a protocol batch (receive processing, connection work, sends) if
    /// this much time passed since the last batch.
    pub tcp_process_interval_ns: Nanos,
    /// Yield the core once a coroutine has run continuously this long.
    pub coroutine_budget_ns: Nanos,
    /// Cost of a checkpoint that triggers nothing.
    pub check_cost_ns: Nanos,
    /// Yield immediately when a high-priority event is pending for another
    /// task on this core while the running task serves low work.
    pub priority_check: bool,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            nic_check_interval_ns: 200_000,
            tcp_process_interval_ns: 50_000,
            coroutine_budget_ns: 10_000_000,
            check_cost_ns: 22,
            priority_check: false,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<(), String> {
        if self.nic_check_interval_ns == 0
            || self.tcp_process_interval_ns == 0
            || self.coroutine_budget_ns == 0
        {
            return Err("checkpoint intervals must be positive".into());
        }
        Ok(())
    }
}

/// Per-core checkpoint state: when each triggered action last fired.
#[derive(Debug, Clone, Copy, Default)]
pub struct CheckState {
    pub last_nic_check: Nanos,
    pub last_tcp_process: Nanos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckAction {
    DrainNic,
    TcpBatch,
    Reschedule,
    PriorityYield,
}

/// World snapshot a checkpoint decides against.
#[derive(Debug, Clone, Copy)]
pub struct CheckInput {
    pub now: Nanos,
    /// Dispatch time of the running task.
    pub run_start: Nanos,
    /// The running task is currently serving low-priority work.
    pub serving_low: bool,
    /// A high-priority event is pending for another task on this core.
    pub high_pending: bool,
    /// The core hosts a stack coroutine with mapped NIC rings; without one
    /// there is nothing to drain or batch here.
    pub has_stack: bool,
}

/// Evaluate one checkpoint. Returns the actions to run, in application
/// order. The caller charges `check_cost_ns` for the check itself and
/// updates `CheckState` when an action actually runs.
pub fn check(th: &Thresholds, st: &CheckState, input: &CheckInput) -> Vec<CheckAction> {
    let mut actions = Vec::new();
    if input.has_stack && input.now.saturating_sub(st.last_nic_check) >= th.nic_check_interval_ns {
        actions.push(CheckAction::DrainNic);
    }
    if input.has_stack
        && input.now.saturating_sub(st.last_tcp_process) >= th.tcp_process_interval_ns
    {
        actions.push(CheckAction::TcpBatch);
    }
    if input.now.saturating_sub(input.run_start) >= th.coroutine_budget_ns {
        actions.push(CheckAction::Reschedule);
    }
    if th.priority_check && input.serving_low && input.high_pending {
        actions.push(CheckAction::PriorityYield);
    }
    actions
}

/// Closed-form comparison of checkpoint-mode versus yield-per-request
/// coroutine-mode NIC checking over a window of `n` requests: three 22 ns
/// timestamp checks per request plus one real poll, against a 6 ns yield
/// plus a poll per request. Returns (checkpoint_total, coroutine_total).
pub fn cost_compare(n_requests: u64, empty_check_cost: Nanos) -> (Nanos, Nanos) {
    debug_assert!(n_requests >= 1);
    let fcd = 22 * 3 * n_requests + empty_check_cost;
    let coroutine = (6 + empty_check_cost) * n_requests;
    (fcd, coroutine)
}

/// Stateful TCP-layer classifier. It may read and write only its own flow's
/// 64-byte private field, which is how labels survive across the packets of
/// one message.
#[derive(Clone, Copy)]
pub enum TcpClassifier {
    /// Parse the request header on message-start packets and remember
    /// (remaining bytes, class) in the private field for the rest.
    StatefulHeaderClass,
    Custom(fn(&PayloadView, &mut [u8; 64]) -> Class),
}

impl std::fmt::Debug for TcpClassifier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TcpClassifier::StatefulHeaderClass => f.write_str("StatefulHeaderClass"),
            TcpClassifier::Custom(_) => f.write_str("Custom"),
        }
    }
}

impl TcpClassifier {
    pub fn classify(&self, view: &PayloadView, private_field: &mut [u8; 64]) -> Class {
        match self {
            TcpClassifier::StatefulHeaderClass => {
                let mut boundary = MessageBoundary::load(private_field);
                let class = boundary.consume_packet(view);
                boundary.store(private_field);
                class
            }
            TcpClassifier::Custom(f) => f(view, private_field),
        }
    }
}

/// Message-boundary tracker encoded in the leading bytes of the private
/// field: unread bytes of the current message and its scheduling class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MessageBoundary {
    pub remaining_bytes: u64,
    pub current_class: Class,
}

impl MessageBoundary {
    pub fn load(field: &[u8; 64]) -> Self {
        let remaining = u64::from_le_bytes(field[0..8].try_into().unwrap());
        let current_class = if field[8] == 1 { Class::High } else { Class::Low };
        MessageBoundary {
            remaining_bytes: remaining,
            current_class,
        }
    }

    pub fn store(&self, field: &mut [u8; 64]) {
        field[0..8].copy_from_slice(&self.remaining_bytes.to_le_bytes());
        field[8] = (self.current_class == Class::High) as u8;
    }

    /// Advance the boundary over one packet and return its class. A packet
    /// seen while `remaining_bytes == 0` must start a new message.
    pub fn consume_packet(&mut self, view: &PayloadView) -> Class {
        if self.remaining_bytes == 0 {
            match view.parse_header() {
                Some(h) => {
                    self.current_class = if h.high { Class::High } else { Class::Low };
                    self.remaining_bytes = (h.total_len as u64).saturating_sub(view.len() as u64);
                }
                None => {
                    // Desynchronized stream; fall back to the default class.
                    self.current_class = Class::Low;
                    self.remaining_bytes = 0;
                    return Class::Low;
                }
            }
        } else {
            self.remaining_bytes = self.remaining_bytes.saturating_sub(view.len() as u64);
        }
        self.current_class
    }
}

/// Layers an extraction callback can attach to. Only the driver and TCP
/// layers are supported here; NIC-level classification is a separate
/// scenario option and the event framework carries labels onward rather
/// than producing them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Nic,
    Driver,
    Tcp,
    EventFramework,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CallupError {
    #[error("layer {0:?} does not support extraction callbacks")]
    UnsupportedLayer(Layer),
}

/// Registered extraction callbacks per layer. Driver callbacks are global
/// and stateless; TCP callbacks are instantiated per flow (each flow hands
/// the callback its own private field).
#[derive(Debug, Default)]
pub struct CallupRegistry {
    pub driver: Option<DriverClassifier>,
    pub tcp: Option<TcpClassifier>,
}

impl CallupRegistry {
    pub fn register_driver(&mut self, cb: DriverClassifier) {
        self.driver = Some(cb);
    }

    pub fn register_tcp(&mut self, cb: TcpClassifier) {
        self.tcp = Some(cb);
    }

    pub fn register(&mut self, layer: Layer, driver_cb: Option<DriverClassifier>, tcp_cb: Option<TcpClassifier>) -> Result<(), CallupError> {
        match layer {
            Layer::Driver => {
                self.driver = driver_cb;
                Ok(())
            }
            Layer::Tcp => {
                self.tcp = tcp_cb;
                Ok(())
            }
            other => Err(CallupError::UnsupportedLayer(other)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nic::{test_packet, MsgHeader};

    fn input(now: Nanos) -> CheckInput {
        CheckInput {
            now,
            run_start: 0,
            serving_low: false,
            high_pending: false,
            has_stack: true,
        }
    }

    #[test]
    fn drain_fires_past_threshold() {
        let th = Thresholds::default();
        let st = CheckState {
            last_nic_check: 0,
            last_tcp_process: 250_000,
        };
        let actions = check(&th, &st, &CheckInput { now: 250_000, run_start: 250_000, ..input(250_000) });
        assert_eq!(actions, vec![CheckAction::DrainNic]);
    }

    #[test]
    fn fresh_intervals_trigger_nothing() {
        let th = Thresholds::default();
        let st = CheckState {
            last_nic_check: 100,
            last_tcp_process: 100,
        };
        let actions = check(&th, &st, &CheckInput { now: 150, run_start: 100, ..input(150) });
        assert!(actions.is_empty());
        assert_eq!(th.check_cost_ns, 22);
    }

    #[test]
    fn priority_yield_when_high_pending_over_low() {
        let th = Thresholds {
            priority_check: true,
            ..Thresholds::default()
        };
        let st = CheckState {
            last_nic_check: 90,
            last_tcp_process: 90,
        };
        let actions = check(
            &th,
            &st,
            &CheckInput {
                now: 100,
                run_start: 90,
                serving_low: true,
                high_pending: true,
                has_stack: true,
            },
        );
        assert_eq!(actions, vec![CheckAction::PriorityYield]);
    }

    #[test]
    fn budget_exceeded_requests_reschedule() {
        let th = Thresholds::default();
        let st = CheckState {
            last_nic_check: 10_000_000,
            last_tcp_process: 10_000_000,
        };
        let actions = check(
            &th,
            &st,
            &CheckInput { now: 10_000_000, run_start: 0, ..input(10_000_000) },
        );
        assert_eq!(actions, vec![CheckAction::Reschedule]);
    }

    #[test]
    fn no_stack_means_no_drain() {
        let th = Thresholds::default();
        let st = CheckState::default();
        let actions = check(
            &th,
            &st,
            &CheckInput { now: 10_000_000, run_start: 10_000_000, has_stack: false, ..input(10_000_000) },
        );
        assert!(actions.is_empty());
    }

    #[test]
    fn cost_compare_matches_closed_form() {
        assert_eq!(cost_compare(1, 100), (166, 106));
        assert_eq!(cost_compare(2, 100), (232, 212));
        assert_eq!(cost_compare(3, 100), (298, 318));
    }

    // Crossover at n > 2.5: coroutine mode wins at 2, checkpoints win at 3.
    #[test]
    fn cost_crossover() {
        let (fcd2, co2) = cost_compare(2, 100);
        assert!(co2 <= fcd2);
        let (fcd3, co3) = cost_compare(3, 100);
        assert!(fcd3 < co3);
        for n in 3..100 {
            let (fcd, co) = cost_compare(n, 100);
            assert!(fcd < co, "checkpoint mode must stay cheaper at n={n}");
        }
    }

    #[test]
    fn registry_rejects_unsupported_layers() {
        let mut reg = CallupRegistry::default();
        assert_eq!(
            reg.register(Layer::Nic, None, None),
            Err(CallupError::UnsupportedLayer(Layer::Nic))
        );
        assert_eq!(
            reg.register(Layer::EventFramework, None, None),
            Err(CallupError::UnsupportedLayer(Layer::EventFramework))
        );
        assert!(reg
            .register(Layer::Driver, Some(DriverClassifier::HeaderClass), None)
            .is_ok());
        assert!(reg
            .register(Layer::Tcp, None, Some(TcpClassifier::StatefulHeaderClass))
            .is_ok());
    }

    #[test]
    fn boundary_tracks_multi_packet_message() {
        let header = MsgHeader {
            total_len: 4096,
            service_ns: 100_000,
            high: true,
        };
        let mut field = [0u8; 64];
        let mk = |seq: u64, len: u32| {
            let mut p = test_packet(1, seq, len);
            p.msg_seq = 0;
            p.msg_len = 4096;
            p.header = header;
            p
        };
        let cls = TcpClassifier::StatefulHeaderClass;
        let p1 = mk(0, 1024);
        assert_eq!(cls.classify(&p1.view(), &mut field), Class::High);
        assert_eq!(MessageBoundary::load(&field).remaining_bytes, 3072);
        let p2 = mk(1024, 1536);
        assert_eq!(cls.classify(&p2.view(), &mut field), Class::High);
        let p3 = mk(2560, 1536);
        assert_eq!(cls.classify(&p3.view(), &mut field), Class::High);
        assert_eq!(MessageBoundary::load(&field).remaining_bytes, 0);
    }
}
